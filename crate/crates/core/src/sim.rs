//! Synthetic proposal populations.
//!
//! A scene plants a few rectangular objects on an `H×W` grid and renders a
//! `C`-channel feature map in which every object is a Gaussian bump (with
//! its own channel signature) over a uniform noise floor. Anchors of `C'`
//! fixed shapes sit at every cell center and are labeled by IoU, which
//! reproduces the usual picture: a flood of easy background, a thin band of
//! ambiguous (hard) proposals around each object, and very few positives.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::FeatureMap;

/// Axis-aligned box in feature-grid units; `x` runs along the width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Domain(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// One line per box, `x_min,y_min,x_max,y_max`, no header.
pub fn boxes_csv(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        writeln!(out, "{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_size_min: f64,
    pub object_size_max: f64,
    /// Peak height of an object's bump.
    pub amplitude: f64,
    /// Bump standard deviation as a fraction of the object's side.
    pub spread: f64,
    /// Half-width of the zero-mean uniform noise floor.
    pub noise: f64,
    /// Smallest anchor side; the grid uses 1×, 2× and 3× this at aspect
    /// ratios 1:2, 1:1 and 2:1.
    pub anchor_base: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub hard_bg_iou: f64,
    pub hard_fg_iou: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 64,
            objects_min: 1,
            objects_max: 3,
            object_size_min: 3.0,
            object_size_max: 7.0,
            amplitude: 1.0,
            spread: 0.35,
            noise: 0.5,
            anchor_base: 2.0,
            fg_iou: 0.7,
            bg_iou: 0.3,
            hard_bg_iou: 0.1,
            hard_fg_iou: 0.75,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("grid dimensions and channel count must be positive".into());
        }
        if self.objects_min > self.objects_max {
            return bad(format!(
                "objects_min {} exceeds objects_max {}",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.object_size_min > 0.0 && self.object_size_min <= self.object_size_max) {
            return bad("object sizes must satisfy 0 < object_size_min <= object_size_max".into());
        }
        if self.object_size_max > self.height.min(self.width) as f64 {
            return bad(format!(
                "object_size_max {} does not fit in a {}x{} grid",
                self.object_size_max, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0
            && self.amplitude >= 0.0
            && self.spread > 0.0
            && self.anchor_base > 0.0)
        {
            return bad("noise and amplitude must be >= 0, spread and anchor_base > 0".into());
        }
        let t = [self.hard_bg_iou, self.bg_iou, self.fg_iou, self.hard_fg_iou];
        if !(0.0 <= t[0] && t.windows(2).all(|w| w[0] <= w[1]) && t[3] <= 1.0) {
            return bad("IoU thresholds must satisfy 0 <= hard_bg_iou <= bg_iou <= fg_iou <= hard_fg_iou <= 1".into());
        }
        Ok(())
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        AnchorGrid::standard(self.height, self.width, self.anchor_base)
    }

    pub fn label_rule(&self) -> LabelRule {
        LabelRule {
            fg_iou: self.fg_iou,
            bg_iou: self.bg_iou,
            hard_bg_iou: self.hard_bg_iou,
            hard_fg_iou: self.hard_fg_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<BBox>,
    pub features: FeatureMap,
    pub seed: u64,
}

/// Plants objects and renders their features; fully determined by `seed`.
pub fn generate_scene(config: &SimConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = XorShift64Star::new(seed);
    let (h, w, c) = (config.height, config.width, config.channels);
    let count = rng.range_inclusive(config.objects_min, config.objects_max);

    struct Bump {
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
        signature: Vec<f64>,
    }
    let mut objects = Vec::with_capacity(count);
    let mut bumps = Vec::with_capacity(count);
    for _ in 0..count {
        let bw = rng.uniform(config.object_size_min, config.object_size_max);
        let bh = rng.uniform(config.object_size_min, config.object_size_max);
        let x0 = rng.uniform(0.0, w as f64 - bw);
        let y0 = rng.uniform(0.0, h as f64 - bh);
        let b = BBox::new(x0, y0, x0 + bw, y0 + bh)?;
        let signature = (0..c).map(|_| rng.uniform(0.5, 1.0)).collect();
        bumps.push(Bump {
            cx: x0 + bw / 2.0,
            cy: y0 + bh / 2.0,
            sx: config.spread * bw,
            sy: config.spread * bh,
            signature,
        });
        objects.push(b);
    }

    let mut features = FeatureMap::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let weights: Vec<f64> = bumps
                .iter()
                .map(|b| {
                    let dx = (x - b.cx) / b.sx;
                    let dy = (y - b.cy) / b.sy;
                    config.amplitude * (-0.5 * (dx * dx + dy * dy)).exp()
                })
                .collect();
            for k in 0..c {
                let signal: f64 = bumps
                    .iter()
                    .zip(&weights)
                    .map(|(b, wt)| wt * b.signature[k])
                    .sum();
                features.set(i, j, k, signal + rng.uniform(-config.noise, config.noise));
            }
        }
    }
    Ok(Scene {
        objects,
        features,
        seed,
    })
}

/// `C'` anchor shapes replicated at every cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    /// `(width, height)` per anchor channel.
    pub shapes: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn standard(height: usize, width: usize, base: f64) -> Self {
        let mut shapes = Vec::with_capacity(9);
        for scale in [1.0, 2.0, 3.0] {
            let side = base * scale;
            for ratio in [0.5f64, 1.0, 2.0] {
                // ratio = height / width, area side²
                shapes.push((side / ratio.sqrt(), side * ratio.sqrt()));
            }
        }
        Self {
            height,
            width,
            shapes,
        }
    }

    pub fn channels(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self, i: usize, j: usize, k: usize) -> BBox {
        let (w, h) = self.shapes[k];
        BBox::centered(j as f64 + 0.5, i as f64 + 0.5, w, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRule {
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub hard_bg_iou: f64,
    pub hard_fg_iou: f64,
}

impl Default for LabelRule {
    fn default() -> Self {
        SimConfig::default().label_rule()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorClass {
    Foreground,
    Background,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorLabel {
    /// Which image of a multi-image batch the anchor belongs to.
    pub image: usize,
    pub position: (usize, usize, usize),
    /// Best IoU over the scene's objects (0 with no objects).
    pub iou: f64,
    pub class: AnchorClass,
    pub difficulty: Difficulty,
}

impl AnchorLabel {
    pub fn is_hard(&self) -> bool {
        self.difficulty == Difficulty::Hard
    }
}

/// Labels every anchor, in `(i, j, k)` storage order so that label `n`
/// corresponds to element `n` of an `H×W×C'` map.
///
/// Foreground: IoU ≥ `fg_iou`, or the best anchor(s) for some object.
/// Background: IoU < `bg_iou`. Everything else is ignored. Hard anchors are
/// background with IoU in `[hard_bg_iou, bg_iou)` and foreground with IoU in
/// `[fg_iou, hard_fg_iou)`.
pub fn label_anchors(
    scene: &Scene,
    grid: &AnchorGrid,
    rule: &LabelRule,
) -> Result<Vec<AnchorLabel>> {
    let f = &scene.features;
    if (f.height(), f.width()) != (grid.height, grid.width) {
        return Err(Error::dim(
            "label_anchors",
            format!("{}x{}", f.height(), f.width()),
            format!("{}x{}", grid.height, grid.width),
        ));
    }
    let n_obj = scene.objects.len();
    let mut ious = Vec::with_capacity(grid.len() * n_obj);
    for i in 0..grid.height {
        for j in 0..grid.width {
            for k in 0..grid.channels() {
                let a = grid.anchor(i, j, k);
                ious.extend(scene.objects.iter().map(|o| iou(&a, o)));
            }
        }
    }
    let mut best_per_object = vec![0.0f64; n_obj];
    for row in ious.chunks_exact(n_obj.max(1)).take(grid.len()) {
        for (best, &v) in best_per_object.iter_mut().zip(row) {
            *best = best.max(v);
        }
    }

    let mut labels = Vec::with_capacity(grid.len());
    let mut n = 0;
    for i in 0..grid.height {
        for j in 0..grid.width {
            for k in 0..grid.channels() {
                let row = if n_obj == 0 {
                    &[][..]
                } else {
                    &ious[n * n_obj..(n + 1) * n_obj]
                };
                let best = row.iter().copied().fold(0.0, f64::max);
                let is_argmax = row
                    .iter()
                    .zip(&best_per_object)
                    .any(|(&v, &top)| top > 0.0 && v == top);
                let class = if best >= rule.fg_iou || is_argmax {
                    AnchorClass::Foreground
                } else if best < rule.bg_iou {
                    AnchorClass::Background
                } else {
                    AnchorClass::Ignore
                };
                let hard = match class {
                    AnchorClass::Background => best >= rule.hard_bg_iou,
                    AnchorClass::Foreground => best >= rule.fg_iou && best < rule.hard_fg_iou,
                    AnchorClass::Ignore => false,
                };
                labels.push(AnchorLabel {
                    image: 0,
                    position: (i, j, k),
                    iou: best,
                    class,
                    difficulty: if hard {
                        Difficulty::Hard
                    } else {
                        Difficulty::Easy
                    },
                });
                n += 1;
            }
        }
    }
    Ok(labels)
}

/// Target mini-batch geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub size: usize,
    pub max_fg: usize,
}

impl Default for BatchSpec {
    /// 256 proposals at one foreground to three background.
    fn default() -> Self {
        Self {
            size: 256,
            max_fg: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    /// Indices into the label list, foreground first, each group in draw
    /// order.
    pub indices: Vec<usize>,
    pub fg_count: usize,
    pub bg_count: usize,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fixed-ratio sampling over the anchors that survive `keep_mask`.
///
/// Up to `spec.max_fg` foreground are drawn uniformly without replacement,
/// and the rest of the batch is filled with background, so a foreground
/// shortfall is padded with extra background. Ignored anchors are never
/// drawn.
pub fn sample_minibatch(
    labels: &[AnchorLabel],
    keep_mask: Option<&[bool]>,
    rng: &mut XorShift64Star,
    spec: BatchSpec,
) -> Result<MiniBatch> {
    if let Some(mask) = keep_mask {
        if mask.len() != labels.len() {
            return Err(Error::dim(
                "sample_minibatch(keep_mask)",
                labels.len(),
                mask.len(),
            ));
        }
    }
    let kept = |n: usize| keep_mask.is_none_or(|m| m[n]);
    let pool = |class: AnchorClass| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|&(n, l)| l.class == class && kept(n))
            .map(|(n, _)| n)
            .collect()
    };
    let fg_pool = pool(AnchorClass::Foreground);
    let bg_pool = pool(AnchorClass::Background);
    if fg_pool.is_empty() && bg_pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let fg_target = spec.max_fg.min(spec.size);
    let mut indices = rng.sample_without_replacement(&fg_pool, fg_target);
    let fg_count = indices.len();
    let bg = rng.sample_without_replacement(&bg_pool, spec.size - fg_count);
    let bg_count = bg.len();
    indices.extend(bg);
    Ok(MiniBatch {
        indices,
        fg_count,
        bg_count,
    })
}

/// Fraction of the batch tagged hard.
pub fn hard_ratio(batch: &MiniBatch, labels: &[AnchorLabel]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("hard ratio of an empty batch".into()));
    }
    let hard = batch
        .indices
        .iter()
        .filter(|&&n| labels[n].is_hard())
        .count();
    Ok(hard as f64 / batch.len() as f64)
}
