//! Gate-weight heatmaps as binary NetPBM images.
//!
//! The grayscale map is one `T2` channel, min-max normalized per image to
//! `0..=255` (the range is recorded in the header comment). The overlay
//! renders the scene's mean feature response with ground-truth boxes in
//! green, anchors in the top 5% of that channel's weights in blue and the
//! top 1% in red.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gate::{gate_forward, GateMode};
use crate::sim::{AnchorGrid, BBox, Scene};
use crate::tensor::{conv1x1_forward, FeatureMap};
use crate::train::Model;

/// Output pixels per grid cell in the overlay.
pub const OVERLAY_SCALE: usize = 4;

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];

/// `T2` of `model` on `scene`, gate in test mode.
pub fn gate_weights(model: &Model, scene: &Scene) -> Result<FeatureMap> {
    let a = conv1x1_forward(&scene.features, &model.proposal)?;
    Ok(gate_forward(&scene.features, &a, &model.gate, GateMode::Test)?.t2)
}

/// Size of a top-`p` set over `n` items: `⌈p·n⌉`, without letting float
/// noise in `p·n` bump an exact integer up by one.
pub fn top_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// `(i, j)` cells holding the `⌈p·H·W⌉` largest weights of channel `k`.
/// Ties go to the earlier cell in row-major order.
pub fn top_cells(t2: &FeatureMap, k: usize, p: f64) -> Result<Vec<(usize, usize)>> {
    check_channel(t2, k)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "fraction must lie in [0, 1], got {p}"
        )));
    }
    let mut cells: Vec<(usize, usize)> = (0..t2.height())
        .flat_map(|i| (0..t2.width()).map(move |j| (i, j)))
        .collect();
    // Stable sort keeps the row-major order among equal weights.
    cells.sort_by(|&(a, b), &(c, d)| t2.get(c, d, k).total_cmp(&t2.get(a, b, k)));
    cells.truncate(top_count(p, cells.len()));
    Ok(cells)
}

fn check_channel(t2: &FeatureMap, k: usize) -> Result<()> {
    if k >= t2.channels() {
        return Err(Error::Domain(format!(
            "channel {k} out of range (map has {})",
            t2.channels()
        )));
    }
    Ok(())
}

/// Linear map of `[lo, hi]` onto `0..=255`; a constant image maps to 128.
fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        128
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Binary PGM (P5) of channel `k`, one pixel per cell.
pub fn channel_pgm(t2: &FeatureMap, k: usize) -> Result<Vec<u8>> {
    check_channel(t2, k)?;
    let (h, w) = (t2.height(), t2.width());
    let (lo, hi) = min_max((0..h * w).map(|n| t2.get(n / w, n % w, k)));
    let mut header = String::from("P5\n");
    writeln!(
        header,
        "# channel {k}; per-image min-max normalization, min {lo} max {hi}"
    )
    .unwrap();
    write!(header, "{w} {h}\n255\n").unwrap();
    let mut out = header.into_bytes();
    out.extend((0..h * w).map(|n| to_gray(t2.get(n / w, n % w, k), lo, hi)));
    Ok(out)
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let at = 3 * (y as usize * self.width + x as usize);
            self.rgb[at..at + 3].copy_from_slice(&color);
        }
    }

    /// One-pixel outline of `b` (grid units), clipped to the canvas.
    fn outline(&mut self, b: &BBox, scale: usize, color: [u8; 3]) {
        let s = scale as f64;
        let x0 = (b.x_min * s).round() as i64;
        let y0 = (b.y_min * s).round() as i64;
        let x1 = ((b.x_max * s).round() as i64 - 1).max(x0);
        let y1 = ((b.y_max * s).round() as i64 - 1).max(y0);
        for x in x0..=x1 {
            self.put(x, y0, color);
            self.put(x, y1, color);
        }
        for y in y0..=y1 {
            self.put(x0, y, color);
            self.put(x1, y, color);
        }
    }
}

/// Binary PPM (P6) overlay for channel `k` of `t2`, computed on `scene`.
pub fn overlay_ppm(scene: &Scene, grid: &AnchorGrid, t2: &FeatureMap, k: usize) -> Result<Vec<u8>> {
    check_channel(t2, k)?;
    let (h, w) = (scene.features.height(), scene.features.width());
    if (t2.height(), t2.width()) != (h, w) || (grid.height, grid.width) != (h, w) {
        return Err(Error::dim(
            "overlay_ppm",
            format!("{h}x{w}"),
            format!("{}x{}", t2.height(), t2.width()),
        ));
    }
    let blue = top_cells(t2, k, 0.05)?;
    let red = top_cells(t2, k, 0.01)?;

    let mean: Vec<f64> = (0..h * w)
        .map(|n| {
            let px = scene.features.pixel(n / w, n % w);
            px.iter().sum::<f64>() / px.len() as f64
        })
        .collect();
    let (lo, hi) = min_max(mean.iter().copied());
    let s = OVERLAY_SCALE;
    let mut canvas = Canvas {
        width: w * s,
        height: h * s,
        rgb: vec![0; 3 * w * s * h * s],
    };
    for y in 0..h * s {
        for x in 0..w * s {
            let g = to_gray(mean[(y / s) * w + x / s], lo, hi);
            canvas.put(x as i64, y as i64, [g, g, g]);
        }
    }
    for b in &scene.objects {
        canvas.outline(b, s, GREEN);
    }
    for (cells, color) in [(&blue, BLUE), (&red, RED)] {
        for &(i, j) in cells {
            canvas.outline(&grid.anchor(i, j, k), s, color);
        }
    }

    let mut out = format!(
        "P6\n# channel {k}; blue top 5% ({} anchors), red top 1% ({} anchors), green ground truth\n{} {}\n255\n",
        blue.len(),
        red.len(),
        canvas.width,
        canvas.height
    )
    .into_bytes();
    out.extend_from_slice(&canvas.rgb);
    Ok(out)
}
