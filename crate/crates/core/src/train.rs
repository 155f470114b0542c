//! Toy end-to-end training of the gate.
//!
//! Per step: synthesize `scenes_per_batch` scenes, score proposals with a
//! 1×1 proposal conv (`A = conv(X)`), gate and truncate them, draw a
//! fixed-ratio mini-batch from the survivors, and classify each sampled
//! anchor with a scalar affine head on `B`. The loss is mean binary
//! cross-entropy plus the variance-constraint term; everything is updated
//! by SGD with momentum and L2 weight decay.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gate::{
    gate_backward_with_weight_grad, gate_forward, probanet_loss, variance_constraint, GateMode,
    GateOutput, GateParams, LossTerms,
};
use crate::rng::{derive_seed, XorShift64Star};
use crate::sim::{
    generate_scene, hard_ratio, label_anchors, sample_minibatch, AnchorClass, AnchorLabel,
    BatchSpec, MiniBatch, Scene, SimConfig,
};
use crate::tensor::{
    conv1x1_backward, conv1x1_forward, mean_and_variance, Conv1x1Params, FeatureMap,
};

/// Which tensor the variance constraint is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceTarget {
    /// The gate weights `T2`.
    Gate,
    /// The backbone features `X`. Features are data, so this variant
    /// contributes a loss value but no gradient.
    Input,
}

impl VarianceTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            VarianceTarget::Gate => "gate",
            VarianceTarget::Input => "input",
        }
    }
}

impl std::str::FromStr for VarianceTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gate" => Ok(VarianceTarget::Gate),
            "input" => Ok(VarianceTarget::Input),
            other => Err(format!("expected `gate` or `input`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 disables.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub th: f64,
    pub r: usize,
    pub variance_target: VarianceTarget,
    pub probanet_enabled: bool,
    pub seed: u64,
    pub scenes_per_batch: usize,
    pub batch_size: usize,
    pub max_fg: usize,
    /// Held-out scenes used for the final separation measurement.
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.005,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            epochs: 20,
            steps_per_epoch: 100,
            alpha: 0.5,
            epsilon: 1e-3,
            th: 0.5,
            r: 16,
            variance_target: VarianceTarget::Gate,
            probanet_enabled: true,
            seed: 0,
            scenes_per_batch: 2,
            batch_size: 256,
            max_fg: 64,
            eval_scenes: 8,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            size: self.batch_size,
            max_fg: self.max_fg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.th) {
            return bad(format!("th must lie in [0, 1), got {}", self.th));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.lr_decay_factor > 0.0) {
            return bad("weight_decay must be >= 0 and lr_decay_factor > 0".into());
        }
        if self.r == 0
            || self.scenes_per_batch == 0
            || self.batch_size == 0
            || self.eval_scenes == 0
        {
            return bad("r, scenes_per_batch, batch_size and eval_scenes must be positive".into());
        }
        if self.max_fg > self.batch_size {
            return bad(format!(
                "max_fg {} exceeds batch_size {}",
                self.max_fg, self.batch_size
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.lr_decay_every == 0 || self.steps_per_epoch == 0 {
            return self.learning_rate;
        }
        let epoch = step / self.steps_per_epoch;
        self.learning_rate
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-anchor objectness head: `logit = scale · b + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub scale: f64,
    pub shift: f64,
}

impl Default for Head {
    fn default() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
        }
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// `X → A`, `C' × C`.
    pub proposal: Conv1x1Params,
    pub gate: GateParams,
    pub head: Head,
}

impl Model {
    /// Proposal conv then gate, weights uniform in `±1/√fan_in`, biases
    /// zero; head starts as the identity.
    pub fn init(sim: &SimConfig, config: &TrainConfig, rng: &mut XorShift64Star) -> Result<Self> {
        let c = sim.channels;
        let cp = sim.anchor_grid().channels();
        let bound = 1.0 / (c as f64).sqrt();
        let weight = (0..cp * c).map(|_| rng.uniform(-bound, bound)).collect();
        let proposal = Conv1x1Params::new(cp, c, weight, vec![0.0; cp])?;
        let gate = GateParams::init(c, cp, config.r, config.th, rng)?;
        Ok(Self {
            proposal,
            gate,
            head: Head::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.proposal.num_params() + self.gate.num_params() + 2
    }

    /// Proposal weight, proposal bias, gate (see [`GateParams::to_flat`]),
    /// head scale, head shift.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.proposal.weight);
        out.extend_from_slice(&self.proposal.bias);
        out.extend(self.gate.to_flat());
        out.push(self.head.scale);
        out.push(self.head.shift);
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "Model::with_flat",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut out = self.clone();
        let (w, rest) = flat.split_at(self.proposal.weight.len());
        let (b, rest) = rest.split_at(self.proposal.bias.len());
        let (g, rest) = rest.split_at(self.gate.num_params());
        out.proposal.weight.copy_from_slice(w);
        out.proposal.bias.copy_from_slice(b);
        out.gate = self.gate.with_flat(g)?;
        out.head = Head {
            scale: rest[0],
            shift: rest[1],
        };
        Ok(out)
    }
}

/// Mean binary cross-entropy and its gradient with respect to each logit.
fn bce(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((crate::tensor::sigmoid_scalar(z) - y) / n);
    }
    (loss / n, grad)
}

fn target(label: &AnchorLabel) -> f64 {
    match label.class {
        AnchorClass::Foreground => 1.0,
        _ => 0.0,
    }
}

fn flat_index(map: &FeatureMap, label: &AnchorLabel) -> usize {
    let (i, j, k) = label.position;
    map.index(i, j, k)
}

/// Head logits for the sampled anchors and their mean BCE loss.
///
/// `maps[n]` is the truncated proposal map `B` of image `n`.
pub fn head_forward(
    head: &Head,
    maps: &[FeatureMap],
    labels: &[AnchorLabel],
    batch: &MiniBatch,
) -> Result<(Vec<f64>, f64)> {
    let (logits, targets) = head_logits(head, maps, labels, batch)?;
    let (loss, _) = bce(&logits, &targets);
    Ok((logits, loss))
}

fn head_logits(
    head: &Head,
    maps: &[FeatureMap],
    labels: &[AnchorLabel],
    batch: &MiniBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty mini-batch".into()));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for &n in &batch.indices {
        let label = labels
            .get(n)
            .ok_or_else(|| Error::Domain(format!("batch index {n} out of range")))?;
        let map = maps
            .get(label.image)
            .ok_or_else(|| Error::Domain(format!("image {} out of range", label.image)))?;
        let (i, j, k) = label.position;
        if i >= map.height() || j >= map.width() || k >= map.channels() {
            return Err(Error::Domain(format!(
                "anchor {:?} outside the map",
                label.position
            )));
        }
        logits.push(head.scale * map.get(i, j, k) + head.shift);
        targets.push(target(label));
    }
    Ok((logits, targets))
}

/// Gradients of the head loss: `(d/d scale, d/d shift, d/d B per image)`.
pub fn head_backward(
    head: &Head,
    maps: &[FeatureMap],
    labels: &[AnchorLabel],
    batch: &MiniBatch,
) -> Result<(Head, Vec<FeatureMap>)> {
    let (logits, targets) = head_logits(head, maps, labels, batch)?;
    let (_, dz) = bce(&logits, &targets);
    let mut g_head = Head {
        scale: 0.0,
        shift: 0.0,
    };
    let mut g_maps: Vec<FeatureMap> = maps
        .iter()
        .map(|m| FeatureMap::zeros(m.height(), m.width(), m.channels()))
        .collect();
    for (&n, g) in batch.indices.iter().zip(dz) {
        let label = &labels[n];
        let map = &maps[label.image];
        let idx = flat_index(map, label);
        g_head.scale += g * map.as_slice()[idx];
        g_head.shift += g;
        g_maps[label.image].as_mut_slice()[idx] += g * head.scale;
    }
    Ok((g_head, g_maps))
}

/// Per-step log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub cls_loss: f64,
    pub probanet_loss: f64,
    pub variance: f64,
    pub beta: f64,
    pub hard_ratio: f64,
    pub fg_gate_mean: f64,
    pub bg_gate_mean: f64,
    pub kept_fraction: f64,
}

pub const METRICS_HEADER: &str =
    "step,cls_loss,probanet_loss,variance,beta,hard_ratio,fg_gate_mean,bg_gate_mean,kept_fraction";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.cls_loss,
                r.probanet_loss,
                r.variance,
                r.beta,
                r.hard_ratio,
                r.fg_gate_mean,
                r.bg_gate_mean,
                r.kept_fraction
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Domain("metrics CSV header mismatch".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Domain(format!(
                    "metrics line {}: expected 9 fields",
                    n + 2
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| Error::Domain(format!("metrics line {}: {e}", n + 2)))
            };
            records.push(StepMetrics {
                step: f[0]
                    .parse()
                    .map_err(|e| Error::Domain(format!("metrics line {}: {e}", n + 2)))?,
                cls_loss: num(f[1])?,
                probanet_loss: num(f[2])?,
                variance: num(f[3])?,
                beta: num(f[4])?,
                hard_ratio: num(f[5])?,
                fg_gate_mean: num(f[6])?,
                bg_gate_mean: num(f[7])?,
                kept_fraction: num(f[8])?,
            });
        }
        Ok(Self { records })
    }

    /// Mean hard ratio over the last quarter of the logged steps (at least
    /// one step). `None` for an empty log.
    pub fn final_hard_ratio(&self) -> Option<f64> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let tail = (n / 4).max(1);
        let sum: f64 = self.records[n - tail..].iter().map(|r| r.hard_ratio).sum();
        Some(sum / tail as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub gap: f64,
}

/// Mean gate weight over foreground and background anchors.
pub fn evaluate_separation(t2: &FeatureMap, labels: &[AnchorLabel]) -> Result<Separation> {
    separation_over(std::slice::from_ref(t2), labels)
}

fn separation_over(maps: &[FeatureMap], labels: &[AnchorLabel]) -> Result<Separation> {
    let (mut fg, mut nfg, mut bg, mut nbg) = (0.0, 0usize, 0.0, 0usize);
    for l in labels {
        let map = maps
            .get(l.image)
            .ok_or_else(|| Error::Domain(format!("image {} out of range", l.image)))?;
        let v = map.as_slice()[flat_index(map, l)];
        match l.class {
            AnchorClass::Foreground => {
                fg += v;
                nfg += 1;
            }
            AnchorClass::Background => {
                bg += v;
                nbg += 1;
            }
            AnchorClass::Ignore => {}
        }
    }
    if nfg == 0 || nbg == 0 {
        return Err(Error::Domain(
            "separation needs at least one foreground and one background anchor".into(),
        ));
    }
    let (fg_mean, bg_mean) = (fg / nfg as f64, bg / nbg as f64);
    Ok(Separation {
        fg_mean,
        bg_mean,
        gap: fg_mean - bg_mean,
    })
}

/// Stacks equally shaped maps along the height axis.
fn stack(maps: &[FeatureMap]) -> FeatureMap {
    let (h, w, c) = maps[0].shape();
    let data: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    FeatureMap::new(h * maps.len(), w, c, data).expect("equal shapes")
}

/// Splits a stacked map back into `parts` maps.
fn unstack(map: &FeatureMap, parts: usize) -> Vec<FeatureMap> {
    let (h, w, c) = map.shape();
    let h1 = h / parts;
    map.as_slice()
        .chunks_exact(h1 * w * c)
        .map(|d| FeatureMap::new(h1, w, c, d.to_vec()).expect("exact split"))
        .collect()
}

/// Everything the forward pass over one mini-batch produces.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub labels: Vec<AnchorLabel>,
    /// Proposal maps `A = conv(X)`, per image.
    pub proposals: Vec<FeatureMap>,
    /// Gate outputs per image. Present even when the gate is disabled, in
    /// which case they are evaluated for logging only.
    pub gate: Vec<GateOutput>,
    /// What the head reads: `B` when the gate is enabled, `A` otherwise.
    pub head_input: Vec<FeatureMap>,
    pub keep_mask: Vec<bool>,
    pub batch: MiniBatch,
    pub logits: Vec<f64>,
    pub loss: LossTerms,
    /// Gradient of `V` with respect to the stacked gate weights; `None`
    /// when `V` has no path to the parameters.
    pub variance_grad: Option<FeatureMap>,
}

impl ForwardPass {
    pub fn total_loss(&self) -> f64 {
        self.loss.cls_loss + self.loss.probanet_loss
    }
}

/// Runs the forward pass. With `fixed_batch` the sampler is bypassed, which
/// is what a finite-difference probe needs.
pub fn forward(
    model: &Model,
    scenes: &[Scene],
    sim: &SimConfig,
    config: &TrainConfig,
    sampler: &mut XorShift64Star,
    fixed_batch: Option<&MiniBatch>,
) -> Result<ForwardPass> {
    if scenes.is_empty() {
        return Err(Error::Domain("no scenes".into()));
    }
    let grid = sim.anchor_grid();
    let rule = sim.label_rule();
    let mode = GateMode::Train;

    let mut labels = Vec::new();
    let mut proposals = Vec::with_capacity(scenes.len());
    let mut gate = Vec::with_capacity(scenes.len());
    for (n, scene) in scenes.iter().enumerate() {
        labels.extend(
            label_anchors(scene, &grid, &rule)?
                .into_iter()
                .map(|mut l| {
                    l.image = n;
                    l
                }),
        );
        let a = conv1x1_forward(&scene.features, &model.proposal)?;
        gate.push(gate_forward(&scene.features, &a, &model.gate, mode)?);
        proposals.push(a);
    }

    let (head_input, keep_mask): (Vec<FeatureMap>, Vec<bool>) = if config.probanet_enabled {
        (
            gate.iter().map(|g| g.b.clone()).collect(),
            gate.iter()
                .flat_map(|g| g.keep_mask.iter().copied())
                .collect(),
        )
    } else {
        (proposals.clone(), vec![true; labels.len()])
    };

    let batch = match fixed_batch {
        Some(b) => b.clone(),
        None => sample_minibatch(&labels, Some(&keep_mask), sampler, config.batch_spec())?,
    };
    let (logits, cls_loss) = head_forward(&model.head, &head_input, &labels, &batch)?;

    let t2_all = stack(&gate.iter().map(|g| g.t2.clone()).collect::<Vec<_>>());
    let (variance, variance_grad) = match config.variance_target {
        VarianceTarget::Gate => {
            let (v, g) = variance_constraint(&t2_all, config.epsilon);
            (v, Some(g))
        }
        VarianceTarget::Input => {
            let x_all = stack(
                &scenes
                    .iter()
                    .map(|s| s.features.clone())
                    .collect::<Vec<_>>(),
            );
            (mean_and_variance(&x_all).1.max(config.epsilon), None)
        }
    };
    let loss = if config.probanet_enabled {
        probanet_loss(variance, cls_loss, config.alpha)?
    } else {
        LossTerms {
            variance,
            beta: 0.0,
            probanet_loss: 0.0,
            cls_loss,
        }
    };
    Ok(ForwardPass {
        labels,
        proposals,
        gate,
        head_input,
        keep_mask,
        batch,
        logits,
        loss,
        variance_grad: if config.probanet_enabled {
            variance_grad
        } else {
            None
        },
    })
}

/// Gradient of the total loss with respect to every model parameter, in
/// [`Model::to_flat`] order. `β` is treated as a constant.
pub fn backward(
    model: &Model,
    scenes: &[Scene],
    fwd: &ForwardPass,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let (g_head, g_maps) = head_backward(&model.head, &fwd.head_input, &fwd.labels, &fwd.batch)?;

    let extra: Option<Vec<FeatureMap>> = fwd.variance_grad.as_ref().map(|g| {
        let scale = fwd.loss.grad_wrt_variance();
        unstack(&g.map(|v| v * scale), scenes.len())
    });

    let mut g_proposal =
        Conv1x1Params::zeros(model.proposal.out_channels(), model.proposal.in_channels());
    let mut g_gate = model.gate.zeros_like();
    for (n, scene) in scenes.iter().enumerate() {
        let g_a = if config.probanet_enabled {
            let gg = gate_backward_with_weight_grad(
                &fwd.gate[n],
                &scene.features,
                &fwd.proposals[n],
                &model.gate,
                &g_maps[n],
                extra.as_ref().map(|e| &e[n]),
            )?;
            for (acc, v) in [&mut g_gate.reduce, &mut g_gate.expand]
                .into_iter()
                .zip([&gg.params.reduce, &gg.params.expand])
            {
                acc.weight
                    .iter_mut()
                    .zip(&v.weight)
                    .for_each(|(a, b)| *a += b);
                acc.bias.iter_mut().zip(&v.bias).for_each(|(a, b)| *a += b);
            }
            gg.a
        } else {
            g_maps[n].clone()
        };
        let gc = conv1x1_backward(&scene.features, &model.proposal, &g_a)?;
        g_proposal
            .weight
            .iter_mut()
            .zip(&gc.weight)
            .for_each(|(a, b)| *a += b);
        g_proposal
            .bias
            .iter_mut()
            .zip(&gc.bias)
            .for_each(|(a, b)| *a += b);
    }

    let mut grad = Vec::with_capacity(model.num_params());
    grad.extend_from_slice(&g_proposal.weight);
    grad.extend_from_slice(&g_proposal.bias);
    grad.extend(g_gate.to_flat());
    grad.push(g_head.scale);
    grad.push(g_head.shift);
    Ok(grad)
}

/// Mutable training state of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<f64>,
    pub step: usize,
    pub sampler: XorShift64Star,
}

const STREAM_INIT: u64 = 1;
const STREAM_SCENES: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_EVAL: u64 = 4;

impl TrainState {
    pub fn new(sim: &SimConfig, config: &TrainConfig) -> Result<Self> {
        sim.validate()?;
        config.validate()?;
        let mut init = XorShift64Star::new(derive_seed(config.seed, STREAM_INIT));
        let model = Model::init(sim, config, &mut init)?;
        Ok(Self {
            velocity: vec![0.0; model.num_params()],
            model,
            step: 0,
            sampler: XorShift64Star::new(derive_seed(config.seed, STREAM_SAMPLER)),
        })
    }
}

/// Seed of the `n`-th training scene of a run.
pub fn scene_seed(run_seed: u64, n: u64) -> u64 {
    derive_seed(derive_seed(run_seed, STREAM_SCENES), n)
}

/// The scenes consumed by training step `step`.
pub fn step_scenes(sim: &SimConfig, config: &TrainConfig, step: usize) -> Result<Vec<Scene>> {
    let spb = config.scenes_per_batch as u64;
    (0..spb)
        .map(|s| generate_scene(sim, scene_seed(config.seed, step as u64 * spb + s)))
        .collect()
}

/// Held-out scenes for separation measurements.
pub fn eval_scenes(sim: &SimConfig, config: &TrainConfig) -> Result<Vec<Scene>> {
    let base = derive_seed(config.seed, STREAM_EVAL);
    (0..config.eval_scenes as u64)
        .map(|n| generate_scene(sim, derive_seed(base, n)))
        .collect()
}

/// Foreground/background mean of `values` over labeled anchors; a missing
/// class reads as 0.
fn class_means(maps: &[FeatureMap], labels: &[AnchorLabel]) -> (f64, f64) {
    match separation_over(maps, labels) {
        Ok(s) => (s.fg_mean, s.bg_mean),
        Err(_) => {
            let mean = |class| {
                let v: Vec<f64> = labels
                    .iter()
                    .filter(|l| l.class == class)
                    .map(|l| maps[l.image].as_slice()[flat_index(&maps[l.image], l)])
                    .collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            (mean(AnchorClass::Foreground), mean(AnchorClass::Background))
        }
    }
}

/// One SGD step on `scenes`.
pub fn train_step(
    state: &mut TrainState,
    scenes: &[Scene],
    sim: &SimConfig,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let step = state.step;
    let fwd = forward(&state.model, scenes, sim, config, &mut state.sampler, None)?;
    if !fwd.total_loss().is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    let grad = backward(&state.model, scenes, &fwd, config)?;

    let lr = config.learning_rate_at(step);
    let mut params = state.model.to_flat();
    for ((w, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&grad) {
        *v = config.momentum * *v - lr * (g + config.weight_decay * *w);
        *w += *v;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite parameters after step {step}"
        )));
    }
    state.model = state.model.with_flat(&params)?;
    state.step += 1;

    let t2: Vec<FeatureMap> = fwd.gate.iter().map(|g| g.t2.clone()).collect();
    let (fg_gate_mean, bg_gate_mean) = class_means(&t2, &fwd.labels);
    let kept = fwd.keep_mask.iter().filter(|&&k| k).count() as f64 / fwd.keep_mask.len() as f64;
    Ok(StepMetrics {
        step,
        cls_loss: fwd.loss.cls_loss,
        probanet_loss: fwd.loss.probanet_loss,
        variance: fwd.loss.variance,
        beta: fwd.loss.beta,
        hard_ratio: hard_ratio(&fwd.batch, &fwd.labels)?,
        fg_gate_mean,
        bg_gate_mean,
        kept_fraction: kept,
    })
}

/// Separation of a trained model on held-out scenes (gate in test mode).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub gate: Separation,
    /// Same measurement on the head logits.
    pub logit: Separation,
}

pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    sim: &SimConfig,
    config: &TrainConfig,
) -> Result<Evaluation> {
    let grid = sim.anchor_grid();
    let rule = sim.label_rule();
    let mut labels = Vec::new();
    let mut t2 = Vec::new();
    let mut logits = Vec::new();
    for (n, scene) in scenes.iter().enumerate() {
        labels.extend(
            label_anchors(scene, &grid, &rule)?
                .into_iter()
                .map(|mut l| {
                    l.image = n;
                    l
                }),
        );
        let a = conv1x1_forward(&scene.features, &model.proposal)?;
        let g = gate_forward(&scene.features, &a, &model.gate, GateMode::Test)?;
        let input = if config.probanet_enabled { &g.b } else { &a };
        logits.push(input.map(|v| model.head.scale * v + model.head.shift));
        t2.push(g.t2);
    }
    Ok(Evaluation {
        gate: separation_over(&t2, &labels)?,
        logit: separation_over(&logits, &labels)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub config: TrainConfig,
    pub log: MetricsLog,
    pub initial: Evaluation,
    pub last: Evaluation,
    pub state: TrainState,
}

impl RunResult {
    pub fn final_hard_ratio(&self) -> Option<f64> {
        self.log.final_hard_ratio()
    }
}

/// Trains from scratch for `config.total_steps()` steps.
pub fn run(sim: &SimConfig, config: &TrainConfig) -> Result<RunResult> {
    run_steps(sim, config, config.total_steps())
}

/// Trains for exactly `steps` steps.
pub fn run_steps(sim: &SimConfig, config: &TrainConfig, steps: usize) -> Result<RunResult> {
    let mut state = TrainState::new(sim, config)?;
    let held_out = eval_scenes(sim, config)?;
    let initial = evaluate(&state.model, &held_out, sim, config)?;
    let mut log = MetricsLog::default();
    for step in 0..steps {
        let scenes = step_scenes(sim, config, step)?;
        log.records
            .push(train_step(&mut state, &scenes, sim, config)?);
    }
    let last = evaluate(&state.model, &held_out, sim, config)?;
    Ok(RunResult {
        seed: config.seed,
        config: config.clone(),
        log,
        initial,
        last,
        state,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub baseline: RunResult,
    pub probanet: RunResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<PairedRun>,
}

pub const SUMMARY_HEADER: &str = "seed,baseline_hard_ratio,probanet_hard_ratio,hard_ratio_uplift,\
baseline_gate_gap,probanet_gate_gap,baseline_logit_gap,probanet_logit_gap";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One `summary.csv` row; columns of a variant that was not run are empty.
pub fn summary_row(
    seed: u64,
    baseline: Option<&RunResult>,
    probanet: Option<&RunResult>,
) -> String {
    let hr = |r: Option<&RunResult>| r.and_then(RunResult::final_hard_ratio);
    let (b, p) = (hr(baseline), hr(probanet));
    let gate = |r: Option<&RunResult>| r.map(|r| r.last.gate.gap);
    let logit = |r: Option<&RunResult>| r.map(|r| r.last.logit.gap);
    format!(
        "{seed},{},{},{},{},{},{},{}",
        fmt_opt(b),
        fmt_opt(p),
        fmt_opt(b.zip(p).map(|(b, p)| p - b)),
        fmt_opt(gate(baseline)),
        fmt_opt(gate(probanet)),
        fmt_opt(logit(baseline)),
        fmt_opt(logit(probanet)),
    )
}

impl ExperimentReport {
    /// Per-seed `(baseline, probanet)` final hard ratios.
    pub fn hard_ratios(&self) -> Vec<(Option<f64>, Option<f64>)> {
        self.runs
            .iter()
            .map(|r| (r.baseline.final_hard_ratio(), r.probanet.final_hard_ratio()))
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&summary_row(r.seed, Some(&r.baseline), Some(&r.probanet)));
            out.push('\n');
        }
        out
    }
}

/// Seeds used by an `n_seeds` experiment starting at `base`.
pub fn experiment_seeds(base: u64, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64).map(|n| base.wrapping_add(n)).collect()
}

fn variant_name(config: &TrainConfig) -> &'static str {
    if config.probanet_enabled {
        "probanet"
    } else {
        "baseline"
    }
}

/// Trains every config independently, in parallel; results come back in
/// input order and do not depend on scheduling.
pub fn run_many(sim: &SimConfig, configs: &[TrainConfig]) -> Result<Vec<RunResult>> {
    configs
        .par_iter()
        .map(|cfg| {
            run(sim, cfg).map_err(|e| Error::Run {
                seed: cfg.seed,
                variant: variant_name(cfg),
                source: Box::new(e),
            })
        })
        .collect()
}

/// Trains both variants on seeds `baseline.seed, baseline.seed + 1, …`.
/// Each pair shares scenes, sampler stream and initial weights.
pub fn run_experiment(
    sim: &SimConfig,
    baseline: &TrainConfig,
    probanet: &TrainConfig,
    n_seeds: usize,
) -> Result<ExperimentReport> {
    let seeds = experiment_seeds(baseline.seed, n_seeds);
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&seed| {
            [baseline, probanet].map(|base| TrainConfig {
                seed,
                ..base.clone()
            })
        })
        .collect();
    let mut it = run_many(sim, &configs)?.into_iter();
    let runs = seeds
        .iter()
        .map(|&seed| PairedRun {
            seed,
            baseline: it.next().expect("paired"),
            probanet: it.next().expect("paired"),
        })
        .collect();
    Ok(ExperimentReport { runs })
}
