//! The proposal gate: a reduce/expand pair of 1×1 convolutions with a
//! sigmoid that assigns every proposal a weight in `(0, 1)`, threshold
//! truncation of low-weight proposals, the variance-constraint loss, and
//! the extra-parameter / extra-MAC accounting for bolting the gate onto a
//! detector.

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::{
    conv1x1_backward, conv1x1_forward, hadamard, hadamard_backward, mean_and_variance, relu,
    relu_backward, sigmoid, sigmoid_backward, variance_backward, Conv1x1Params, FeatureMap,
};

/// Parameters of the gate.
///
/// `reduce` maps the `C` backbone channels down to `C / r`, `expand` maps
/// those up to one weight per proposal channel `C'`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub reduce: Conv1x1Params,
    pub expand: Conv1x1Params,
    reduction: usize,
    threshold: f64,
}

impl GateParams {
    pub fn new(
        reduce: Conv1x1Params,
        expand: Conv1x1Params,
        reduction: usize,
        threshold: f64,
    ) -> Result<Self> {
        let c = reduce.in_channels();
        reduced_channels(c, reduction)?;
        validate_threshold(threshold)?;
        if reduce.out_channels() != c / reduction {
            return Err(Error::dim(
                "GateParams::new(reduce)",
                c / reduction,
                reduce.out_channels(),
            ));
        }
        if expand.in_channels() != reduce.out_channels() {
            return Err(Error::dim(
                "GateParams::new(expand)",
                reduce.out_channels(),
                expand.in_channels(),
            ));
        }
        Ok(Self {
            reduce,
            expand,
            reduction,
            threshold,
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(
        channels: usize,
        proposal_channels: usize,
        reduction: usize,
        threshold: f64,
        rng: &mut XorShift64Star,
    ) -> Result<Self> {
        let hidden = reduced_channels(channels, reduction)?;
        if proposal_channels == 0 {
            return Err(Error::Domain(
                "proposal channel count must be positive".into(),
            ));
        }
        let reduce = uniform_conv(hidden, channels, rng);
        let expand = uniform_conv(proposal_channels, hidden, rng);
        Self::new(reduce, expand, reduction, threshold)
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn proposal_channels(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        validate_threshold(threshold)?;
        self.threshold = threshold;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }

    /// Flattened as reduce weight, reduce bias, expand weight, expand bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for conv in [&self.reduce, &self.expand] {
            out.extend_from_slice(&conv.weight);
            out.extend_from_slice(&conv.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat); shapes are taken from `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "GateParams::with_flat",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for conv in [&mut out.reduce, &mut out.expand] {
            let (w, tail) = rest.split_at(conv.weight.len());
            let (b, tail) = tail.split_at(conv.bias.len());
            conv.weight.copy_from_slice(w);
            conv.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(out)
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            reduce: Conv1x1Params::zeros(self.reduce.out_channels(), self.reduce.in_channels()),
            expand: Conv1x1Params::zeros(self.expand.out_channels(), self.expand.in_channels()),
            ..*self
        }
    }
}

fn uniform_conv(out: usize, inp: usize, rng: &mut XorShift64Star) -> Conv1x1Params {
    let bound = 1.0 / (inp as f64).sqrt();
    let weight = (0..out * inp).map(|_| rng.uniform(-bound, bound)).collect();
    Conv1x1Params::new(out, inp, weight, vec![0.0; out]).expect("consistent shapes")
}

fn validate_threshold(th: f64) -> Result<()> {
    if !(0.0..1.0).contains(&th) {
        return Err(Error::Domain(format!(
            "threshold must lie in [0, 1), got {th}"
        )));
    }
    Ok(())
}

/// `C / r`, requiring it to be a positive integer.
pub fn reduced_channels(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Domain(format!(
            "channel count {channels} must be a positive multiple of the reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Truncate proposals whose weight is not above the threshold.
    Train,
    /// Keep everything (threshold treated as zero).
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// `ReLU(reduce(x))`.
    pub t1: FeatureMap,
    /// Per-proposal weights, strictly inside `(0, 1)`.
    pub t2: FeatureMap,
    /// `a ⊙ t2`.
    pub a_prime: FeatureMap,
    /// `a_prime` with truncated entries zeroed.
    pub b: FeatureMap,
    /// Storage-order mask over `b`; `true` means kept.
    pub keep_mask: Vec<bool>,
}

impl GateOutput {
    pub fn kept_fraction(&self) -> f64 {
        self.keep_mask.iter().filter(|&&k| k).count() as f64 / self.keep_mask.len() as f64
    }
}

pub fn gate_forward(
    x: &FeatureMap,
    a: &FeatureMap,
    params: &GateParams,
    mode: GateMode,
) -> Result<GateOutput> {
    let expected = (x.height(), x.width(), params.proposal_channels());
    if a.shape() != expected {
        return Err(Error::dim(
            "gate_forward(a)",
            format!("{expected:?}"),
            format!("{:?}", a.shape()),
        ));
    }
    let t1 = relu(&conv1x1_forward(x, &params.reduce)?);
    let t2 = sigmoid(&conv1x1_forward(&t1, &params.expand)?);
    let a_prime = hadamard(a, &t2)?;
    let th = match mode {
        GateMode::Train => params.threshold,
        GateMode::Test => 0.0,
    };
    let keep_mask: Vec<bool> = t2.as_slice().iter().map(|&w| w > th).collect();
    let mut b = a_prime.clone();
    for (v, &keep) in b.as_mut_slice().iter_mut().zip(&keep_mask) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(GateOutput {
        t1,
        t2,
        a_prime,
        b,
        keep_mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateGrads {
    pub x: FeatureMap,
    pub a: FeatureMap,
    /// Same layout as the gate parameters.
    pub params: GateParams,
}

/// Reverse pass through the gate for a cotangent on `b`.
pub fn gate_backward(
    out: &GateOutput,
    x: &FeatureMap,
    a: &FeatureMap,
    params: &GateParams,
    grad_b: &FeatureMap,
) -> Result<GateGrads> {
    gate_backward_with_weight_grad(out, x, a, params, grad_b, None)
}

/// Like [`gate_backward`], with an additional cotangent arriving directly
/// on `t2` (the variance-constraint term).
pub fn gate_backward_with_weight_grad(
    out: &GateOutput,
    x: &FeatureMap,
    a: &FeatureMap,
    params: &GateParams,
    grad_b: &FeatureMap,
    grad_t2: Option<&FeatureMap>,
) -> Result<GateGrads> {
    if grad_b.shape() != out.b.shape() {
        return Err(Error::dim(
            "gate_backward(grad_b)",
            format!("{:?}", out.b.shape()),
            format!("{:?}", grad_b.shape()),
        ));
    }
    // Truncation is a hard mask.
    let mut grad_a_prime = grad_b.clone();
    for (g, &keep) in grad_a_prime.as_mut_slice().iter_mut().zip(&out.keep_mask) {
        if !keep {
            *g = 0.0;
        }
    }
    let (grad_a, mut g_t2) = hadamard_backward(a, &out.t2, &grad_a_prime)?;
    if let Some(extra) = grad_t2 {
        if extra.shape() != g_t2.shape() {
            return Err(Error::dim(
                "gate_backward(grad_t2)",
                format!("{:?}", g_t2.shape()),
                format!("{:?}", extra.shape()),
            ));
        }
        for (g, e) in g_t2.as_mut_slice().iter_mut().zip(extra.as_slice()) {
            *g += e;
        }
    }
    let g_z2 = sigmoid_backward(&out.t2, &g_t2)?;
    let expand = conv1x1_backward(&out.t1, &params.expand, &g_z2)?;
    // t1 > 0 exactly where the pre-activation is positive.
    let g_z1 = relu_backward(&out.t1, &expand.x)?;
    let reduce = conv1x1_backward(x, &params.reduce, &g_z1)?;

    let mut grads = params.zeros_like();
    grads.reduce.weight = reduce.weight;
    grads.reduce.bias = reduce.bias;
    grads.expand.weight = expand.weight;
    grads.expand.bias = expand.bias;
    Ok(GateGrads {
        x: reduce.x,
        a: grad_a,
        params: grads,
    })
}

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Variance of the gate weights clamped below at `epsilon`, and its
/// gradient (zero while the clamp is active).
pub fn variance_constraint(t2: &FeatureMap, epsilon: f64) -> (f64, FeatureMap) {
    debug_assert!(epsilon > 0.0);
    let (_, var) = mean_and_variance(t2);
    if var <= epsilon {
        (
            epsilon,
            FeatureMap::zeros(t2.height(), t2.width(), t2.channels()),
        )
    } else {
        (var, variance_backward(t2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub variance: f64,
    pub beta: f64,
    pub probanet_loss: f64,
    pub cls_loss: f64,
}

impl LossTerms {
    /// `d L_ProbaNet / d V` with `beta` held fixed.
    pub fn grad_wrt_variance(&self) -> f64 {
        -self.probanet_loss / (self.variance * self.variance)
    }
}

/// `L = β·exp(1/V)` with `β = α·L_cls·exp(−1/V)` recomputed at every
/// evaluation and treated as a constant by the backward pass.
///
/// The two exponentials cancel, so the value is `α·L_cls` and is formed
/// that way; `exp(1/V)` alone overflows f64 once `V < 1/709`.
pub fn probanet_loss(variance: f64, cls_loss: f64, alpha: f64) -> Result<LossTerms> {
    if !(cls_loss.is_finite() && cls_loss >= 0.0) {
        return Err(Error::Domain(format!(
            "classification loss must be finite and >= 0, got {cls_loss}"
        )));
    }
    if !(variance.is_finite() && variance > 0.0) {
        return Err(Error::Domain(format!(
            "variance must be positive, got {variance}"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    let scale = alpha * cls_loss;
    Ok(LossTerms {
        variance,
        beta: scale * (-1.0 / variance).exp(),
        probanet_loss: scale,
        cls_loss,
    })
}

/// Extra parameters of the gate: `C·(C/r + 1) + (C/r)·(C' + 1)`.
pub fn param_count(channels: usize, proposal_channels: usize, reduction: usize) -> Result<u64> {
    let hidden = reduced_channels(channels, reduction)? as u64;
    let (c, cp) = (channels as u64, proposal_channels as u64);
    Ok(c * (hidden + 1) + hidden * (cp + 1))
}

/// Scalars actually held by [`GateParams`]: `(C/r)·(C + 1) + C'·(C/r + 1)`.
///
/// Differs from [`param_count`] by `C − C'` because the latter counts one
/// bias per conv input channel.
pub fn allocated_param_count(
    channels: usize,
    proposal_channels: usize,
    reduction: usize,
) -> Result<u64> {
    let hidden = reduced_channels(channels, reduction)? as u64;
    let (c, cp) = (channels as u64, proposal_channels as u64);
    Ok(hidden * (c + 1) + cp * (hidden + 1))
}

/// Multiply-accumulates of the two gate convolutions over an `H×W` map.
pub fn mac_count(
    height: usize,
    width: usize,
    channels: usize,
    proposal_channels: usize,
    reduction: usize,
) -> Result<u64> {
    let hidden = reduced_channels(channels, reduction)? as u64;
    let (h, w, c, cp) = (
        height as u64,
        width as u64,
        channels as u64,
        proposal_channels as u64,
    );
    Ok(h * w * (c * hidden + hidden * cp))
}

/// Table of the gate's extra cost: parameters at 4 bytes each in MB
/// (2^20 bytes) and MACs in G (10^9), both to two decimals, followed by a
/// one-line summary.
pub fn complexity_report(
    channels: usize,
    proposal_channels: usize,
    reduction: usize,
    height: usize,
    width: usize,
) -> Result<String> {
    let params = param_count(channels, proposal_channels, reduction)?;
    let macs = mac_count(height, width, channels, proposal_channels, reduction)?;
    let mb = format!("{:.2} MB", params as f64 * 4.0 / (1u64 << 20) as f64);
    let g = format!("{:.2} G", macs as f64 / 1e9);
    Ok(format!(
        "{:<14}{:>12}{:>12}{:>14}{:>10}\n{:<14}{:>12}{:>12}{:>14}{:>10}\nparams {params} ({mb}), macs {macs} ({g})\n",
        "component", "params", "size", "MACs", "FLOPs", "gate (extra)", params, mb, macs, g,
    ))
}
