//! Finite-difference verification of every differentiable op and of the
//! full training loss.
//!
//! Each check draws a random instance, contracts the op's output with a
//! random cotangent so it becomes a scalar, and compares the analytic
//! gradient against central differences. Instances with a ReLU input or a
//! gate weight within [`KINK_MARGIN`] of a non-differentiable point are
//! redrawn, so a small step never straddles a kink.

use crate::error::{Error, Result};
use crate::gate::{
    gate_backward_with_weight_grad, gate_forward, probanet_loss, variance_constraint, GateMode,
    GateParams,
};
use crate::rng::{derive_seed, XorShift64Star};
use crate::sim::{AnchorClass, AnchorLabel, Difficulty, MiniBatch, SimConfig};
use crate::tensor::{
    conv1x1_backward, conv1x1_forward, finite_diff_gradient, finite_diff_slice, hadamard,
    hadamard_backward, max_relative_error, mean_and_variance, relu, relu_backward, sigmoid,
    sigmoid_backward, variance_backward, Conv1x1Params, FeatureMap, DEFAULT_FD_STEP,
};
use crate::train::{backward, forward, head_backward, head_forward, step_scenes, Head};
use crate::train::{TrainConfig, TrainState};

/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: u64 = 64;

/// Checkable ops, in report order.
pub const OPS: &[&str] = &[
    "conv1x1",
    "relu",
    "sigmoid",
    "hadamard",
    "variance",
    "gate",
    "variance_constraint",
    "probanet_loss",
    "head",
    "end_to_end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub seeds: usize,
    pub step: f64,
    /// Feature map shape `(height, width, channels)` for the op checks and
    /// the end-to-end scenes.
    pub shape: (usize, usize, usize),
    /// Restrict to a single op.
    pub op: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 5,
            step: DEFAULT_FD_STEP,
            shape: (6, 6, 8),
            op: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    /// Worst relative error over all seeds.
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let (h, w, c) = opts.shape;
    if h == 0 || w == 0 || c < 2 || c % 2 != 0 {
        return Err(Error::Config(format!(
            "shape must be positive with an even channel count, got {h}x{w}x{c}"
        )));
    }
    if opts.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let ops: Vec<&'static str> = match &opts.op {
        None => OPS.to_vec(),
        Some(name) => vec![OPS.iter().copied().find(|o| o == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown op `{name}`; expected one of {}",
                OPS.join(", ")
            ))
        })?],
    };
    ops.into_iter()
        .map(|op| {
            let mut worst = 0.0f64;
            for s in 0..opts.seeds as u64 {
                worst = worst.max(check_seed(op, derive_seed(opts.seed, s), opts)?);
            }
            Ok(OpReport { op, worst })
        })
        .collect()
}

/// Checks one seed, redrawing instances that sit on a kink.
fn check_seed(op: &str, seed: u64, opts: &GradcheckOptions) -> Result<f64> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = XorShift64Star::new(derive_seed(seed, attempt));
        if let Some(err) = check_once(op, &mut rng, opts)? {
            return Ok(err);
        }
    }
    Err(Error::Numeric(format!(
        "{op}: no kink-free instance after {MAX_REDRAWS} draws"
    )))
}

fn random_map(rng: &mut XorShift64Star, (h, w, c): (usize, usize, usize)) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.uniform(-1.0, 1.0))
}

fn random_conv(rng: &mut XorShift64Star, out: usize, inp: usize) -> Conv1x1Params {
    let weight = (0..out * inp).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let bias = (0..out).map(|_| rng.uniform(-0.5, 0.5)).collect();
    Conv1x1Params::new(out, inp, weight, bias).expect("consistent sizes")
}

fn conv_flat(p: &Conv1x1Params) -> Vec<f64> {
    p.weight.iter().chain(&p.bias).copied().collect()
}

fn conv_from_flat(like: &Conv1x1Params, flat: &[f64]) -> Conv1x1Params {
    let (w, b) = flat.split_at(like.weight.len());
    Conv1x1Params::new(
        like.out_channels(),
        like.in_channels(),
        w.to_vec(),
        b.to_vec(),
    )
    .expect("consistent sizes")
}

fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

fn near_kink(values: &[f64], at: f64) -> bool {
    values.iter().any(|v| (v - at).abs() < KINK_MARGIN)
}

fn check_once(op: &str, rng: &mut XorShift64Star, opts: &GradcheckOptions) -> Result<Option<f64>> {
    let h = opts.step;
    let shape = opts.shape;
    let (height, width, c) = shape;
    let cp = 3;
    let err = match op {
        "conv1x1" => {
            let x = random_map(rng, shape);
            let p = random_conv(rng, cp, c);
            let cot = random_map(rng, (height, width, cp));
            let f = |x: &FeatureMap, p: &Conv1x1Params| dot(&conv1x1_forward(x, p).unwrap(), &cot);
            let g = conv1x1_backward(&x, &p, &cot)?;
            let nx = finite_diff_gradient(|x| f(x, &p), &x, h)?;
            let np = finite_diff_slice(|v| f(&x, &conv_from_flat(&p, v)), &conv_flat(&p), h)?;
            let gp: Vec<f64> = g.weight.iter().chain(&g.bias).copied().collect();
            max_relative_error(g.x.as_slice(), nx.as_slice()).max(max_relative_error(&gp, &np))
        }
        "relu" => {
            let x = random_map(rng, shape);
            if near_kink(x.as_slice(), 0.0) {
                return Ok(None);
            }
            let cot = random_map(rng, shape);
            let g = relu_backward(&x, &cot)?;
            let n = finite_diff_gradient(|x| dot(&relu(x), &cot), &x, h)?;
            max_relative_error(g.as_slice(), n.as_slice())
        }
        "sigmoid" => {
            let x = random_map(rng, shape).map(|v| 4.0 * v);
            let cot = random_map(rng, shape);
            let g = sigmoid_backward(&sigmoid(&x), &cot)?;
            let n = finite_diff_gradient(|x| dot(&sigmoid(x), &cot), &x, h)?;
            max_relative_error(g.as_slice(), n.as_slice())
        }
        "hadamard" => {
            let a = random_map(rng, shape);
            let b = random_map(rng, shape);
            let cot = random_map(rng, shape);
            let (ga, gb) = hadamard_backward(&a, &b, &cot)?;
            let f = |a: &FeatureMap, b: &FeatureMap| dot(&hadamard(a, b).unwrap(), &cot);
            let na = finite_diff_gradient(|a| f(a, &b), &a, h)?;
            let nb = finite_diff_gradient(|b| f(&a, b), &b, h)?;
            max_relative_error(ga.as_slice(), na.as_slice())
                .max(max_relative_error(gb.as_slice(), nb.as_slice()))
        }
        "variance" => {
            let x = random_map(rng, shape);
            let g = variance_backward(&x);
            let n = finite_diff_gradient(|x| mean_and_variance(x).1, &x, h)?;
            max_relative_error(g.as_slice(), n.as_slice())
        }
        "gate" => return check_gate(rng, opts),
        "variance_constraint" => {
            let t = FeatureMap::from_fn(height, width, c, |_, _, _| rng.uniform(0.0, 1.0));
            let epsilon = 1e-6;
            let (_, g) = variance_constraint(&t, epsilon);
            let n = finite_diff_gradient(|t| variance_constraint(t, epsilon).0, &t, h)?;
            max_relative_error(g.as_slice(), n.as_slice())
        }
        "probanet_loss" => {
            let v0 = rng.uniform(0.05, 0.5);
            let cls = rng.uniform(0.1, 2.0);
            let alpha = rng.uniform(0.0, 0.99);
            let terms = probanet_loss(v0, cls, alpha)?;
            // beta · e^(1/V) with beta frozen at v0, written to avoid overflow
            let f = |v: &[f64]| alpha * cls * (1.0 / v[0] - 1.0 / v0).exp();
            let n = finite_diff_slice(f, &[v0], h)?;
            max_relative_error(&[terms.grad_wrt_variance()], &n)
        }
        "head" => check_head(rng, opts)?,
        "end_to_end" => return check_end_to_end(rng, opts),
        other => unreachable!("op list out of sync: {other}"),
    };
    Ok(Some(err))
}

fn check_gate(rng: &mut XorShift64Star, opts: &GradcheckOptions) -> Result<Option<f64>> {
    let h = opts.step;
    let (height, width, c) = opts.shape;
    let cp = 3;
    let r = 2;
    let reduce = random_conv(rng, c / r, c);
    let expand = random_conv(rng, cp, c / r);
    let p = GateParams::new(reduce, expand, r, 0.5)?;
    let x = random_map(rng, opts.shape);
    let a = random_map(rng, (height, width, cp));
    if near_kink(conv1x1_forward(&x, &p.reduce)?.as_slice(), 0.0) {
        return Ok(None);
    }
    let cot_b = random_map(rng, (height, width, cp));
    let cot_t2 = random_map(rng, (height, width, cp));
    let out = gate_forward(&x, &a, &p, GateMode::Train)?;
    // The probe keeps the base-point truncation mask fixed.
    let mask = out.keep_mask.clone();
    let f = |x: &FeatureMap, a: &FeatureMap, p: &GateParams| {
        let o = gate_forward(x, a, p, GateMode::Test).unwrap();
        let b: f64 = o
            .a_prime
            .as_slice()
            .iter()
            .zip(&mask)
            .zip(cot_b.as_slice())
            .map(|((v, &m), c)| if m { v * c } else { 0.0 })
            .sum();
        b + dot(&o.t2, &cot_t2)
    };
    let g = gate_backward_with_weight_grad(&out, &x, &a, &p, &cot_b, Some(&cot_t2))?;
    let nx = finite_diff_gradient(|x| f(x, &a, &p), &x, h)?;
    let na = finite_diff_gradient(|a| f(&x, a, &p), &a, h)?;
    let np = finite_diff_slice(|v| f(&x, &a, &p.with_flat(v).unwrap()), &p.to_flat(), h)?;
    Ok(Some(
        max_relative_error(g.x.as_slice(), nx.as_slice())
            .max(max_relative_error(g.a.as_slice(), na.as_slice()))
            .max(max_relative_error(&g.params.to_flat(), &np)),
    ))
}

fn check_head(rng: &mut XorShift64Star, opts: &GradcheckOptions) -> Result<f64> {
    let h = opts.step;
    let (height, width, _) = opts.shape;
    let cp = 3;
    let maps: Vec<FeatureMap> = (0..2)
        .map(|_| random_map(rng, (height, width, cp)).map(|v| 3.0 * v))
        .collect();
    let mut labels = Vec::new();
    for image in 0..maps.len() {
        for i in 0..height {
            for j in 0..width {
                for k in 0..cp {
                    let class = if rng.next_f64() < 0.3 {
                        AnchorClass::Foreground
                    } else {
                        AnchorClass::Background
                    };
                    labels.push(AnchorLabel {
                        image,
                        position: (i, j, k),
                        iou: 0.0,
                        class,
                        difficulty: Difficulty::Easy,
                    });
                }
            }
        }
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let indices = rng.sample_without_replacement(&all, labels.len().min(16));
    let fg_count = indices
        .iter()
        .filter(|&&n| labels[n].class == AnchorClass::Foreground)
        .count();
    let batch = MiniBatch {
        bg_count: indices.len() - fg_count,
        indices,
        fg_count,
    };
    let head = Head {
        scale: rng.uniform(0.5, 2.0),
        shift: rng.uniform(-1.0, 1.0),
    };
    let (g_head, g_maps) = head_backward(&head, &maps, &labels, &batch)?;
    let loss =
        |head: &Head, maps: &[FeatureMap]| head_forward(head, maps, &labels, &batch).unwrap().1;
    let mut err = max_relative_error(
        &[g_head.scale, g_head.shift],
        &finite_diff_slice(
            |v| {
                loss(
                    &Head {
                        scale: v[0],
                        shift: v[1],
                    },
                    &maps,
                )
            },
            &[head.scale, head.shift],
            h,
        )?,
    );
    for n in 0..maps.len() {
        let num = finite_diff_gradient(
            |m| {
                let mut probe = maps.clone();
                probe[n] = m.clone();
                loss(&head, &probe)
            },
            &maps[n],
            h,
        )?;
        err = err.max(max_relative_error(g_maps[n].as_slice(), num.as_slice()));
    }
    Ok(err)
}

/// Full loss (proposal conv, gate, truncation, head, variance term) against
/// the analytic gradient used for training.
fn check_end_to_end(rng: &mut XorShift64Star, opts: &GradcheckOptions) -> Result<Option<f64>> {
    let (height, width, channels) = opts.shape;
    let sim = SimConfig {
        height,
        width,
        channels,
        objects_min: 1,
        objects_max: 2,
        object_size_min: 1.0,
        object_size_max: 2.0f64.min(height.min(width) as f64),
        anchor_base: 1.0,
        ..SimConfig::default()
    };
    let mut config = TrainConfig {
        r: 2,
        th: 0.5,
        epsilon: 1e-6,
        batch_size: 16,
        max_fg: 4,
        seed: rng.next_u64(),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&sim, &config)?;
    // Unit-scale gate weights spread T2 out; at init V is so small that
    // e^(1/V) is too curved for central differences.
    let hidden = state.model.gate.reduce.out_channels();
    let anchors = state.model.gate.proposal_channels();
    state.model.gate.reduce = random_conv(rng, hidden, channels);
    state.model.gate.expand = random_conv(rng, anchors, hidden);
    let scenes = step_scenes(&sim, &config, 0)?;

    // Put the threshold in the widest gap among mid-range gate weights.
    let mut t2 = Vec::new();
    for scene in &scenes {
        let a = conv1x1_forward(&scene.features, &state.model.proposal)?;
        if near_kink(
            conv1x1_forward(&scene.features, &state.model.gate.reduce)?.as_slice(),
            0.0,
        ) {
            return Ok(None);
        }
        let g = gate_forward(&scene.features, &a, &state.model.gate, GateMode::Test)?;
        t2.extend_from_slice(g.t2.as_slice());
    }
    t2.sort_by(f64::total_cmp);
    let lo = t2.len() / 4;
    let hi = (3 * t2.len() / 4).max(lo + 1);
    let (gap, th) = t2[lo..=hi.min(t2.len() - 1)]
        .windows(2)
        .map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1])))
        .fold(
            (0.0, 0.5),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        );
    if gap < 2.0 * KINK_MARGIN {
        return Ok(None);
    }
    config.th = th;
    state.model.gate.set_threshold(th)?;

    let fwd = match forward(
        &state.model,
        &scenes,
        &sim,
        &config,
        &mut state.sampler,
        None,
    ) {
        Ok(f) => f,
        Err(Error::EmptyPool) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (cls0, v0) = (fwd.loss.cls_loss, fwd.loss.variance);
    let analytic = backward(&state.model, &scenes, &fwd, &config)?;
    let loss = |p: &[f64]| {
        let model = state.model.with_flat(p).unwrap();
        let mut unused = XorShift64Star::new(0);
        let f = forward(
            &model,
            &scenes,
            &sim,
            &config,
            &mut unused,
            Some(&fwd.batch),
        )
        .unwrap();
        f.loss.cls_loss + config.alpha * cls0 * (1.0 / f.loss.variance - 1.0 / v0).exp()
    };
    let numeric = finite_diff_slice(loss, &state.model.to_flat(), opts.step)?;
    Ok(Some(max_relative_error(&analytic, &numeric)))
}
