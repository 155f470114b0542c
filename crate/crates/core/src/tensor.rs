//! Dense rank-3 tensors and the handful of kernels the gate needs.
//!
//! Every forward op has an explicit backward (vector-Jacobian product)
//! next to it. There is no tape: callers compose the reverse pass by hand,
//! which is fine for a graph this small.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A dense `height × width × channels` map stored row-major in `(h, w, c)`
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Domain(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::dim("FeatureMap::new", expected, data.len()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty feature map");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a map by evaluating `f(i, j, k)` in storage order.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for k in 0..channels {
                    let idx = out.index(i, j, k);
                    out.data[idx] = f(i, j, k);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && k < self.channels);
        (i * self.width + j) * self.channels + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The channel vector at spatial position `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = self.index(i, j, 0);
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Same shape, fresh data.
    fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { data, ..*self }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Debug text format: a `H W C` header, then `H·W` lines of `C`
    /// space-separated values in row-major order.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.channels);
        for px in self.data.chunks(self.channels) {
            for (n, v) in px.iter().enumerate() {
                if n > 0 {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Domain("empty feature map text".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Domain(format!("bad header {header:?}: {e}")))?;
        let [h, w, c] = dims[..] else {
            return Err(Error::Domain(format!("bad header {header:?}")));
        };
        let mut data = Vec::with_capacity(h * w * c);
        for (n, line) in lines.take(h * w).enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Domain(format!("line {}: {e}", n + 2)))?;
            if row.len() != c {
                return Err(Error::dim("FeatureMap::from_text", c, row.len()));
            }
            data.extend(row);
        }
        Self::new(h, w, c, data)
    }
}

/// Weights and biases of a 1×1 convolution, `weight` stored row-major as
/// `[out_channels × in_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1Params {
    out_channels: usize,
    in_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1x1Params {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Domain("conv channels must be positive".into()));
        }
        if weight.len() != out_channels * in_channels {
            return Err(Error::dim(
                "Conv1x1Params::new(weight)",
                out_channels * in_channels,
                weight.len(),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::dim(
                "Conv1x1Params::new(bias)",
                out_channels,
                bias.len(),
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            weight,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self::new(
            out_channels,
            in_channels,
            vec![0.0; out_channels * in_channels],
            vec![0.0; out_channels],
        )
        .expect("positive channel counts")
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weight[out * self.in_channels + inp]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients returned by [`conv1x1_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub x: FeatureMap,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1x1_forward(x: &FeatureMap, p: &Conv1x1Params) -> Result<FeatureMap> {
    if x.channels != p.in_channels {
        return Err(Error::dim("conv1x1_forward", p.in_channels, x.channels));
    }
    let mut out = Vec::with_capacity(x.height * x.width * p.out_channels);
    for px in x.data.chunks_exact(x.channels) {
        for (row, b) in p.weight.chunks_exact(p.in_channels).zip(&p.bias) {
            out.push(b + row.iter().zip(px).map(|(w, v)| w * v).sum::<f64>());
        }
    }
    FeatureMap::new(x.height, x.width, p.out_channels, out)
}

pub fn conv1x1_backward(
    x: &FeatureMap,
    p: &Conv1x1Params,
    grad_out: &FeatureMap,
) -> Result<ConvGrads> {
    if x.channels != p.in_channels {
        return Err(Error::dim("conv1x1_backward", p.in_channels, x.channels));
    }
    let expected = (x.height, x.width, p.out_channels);
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "conv1x1_backward(grad_out)",
            format!("{expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (cin, cout) = (p.in_channels, p.out_channels);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; p.weight.len()];
    let mut gb = vec![0.0; cout];
    for ((px, g), gpx) in x
        .data
        .chunks_exact(cin)
        .zip(grad_out.data.chunks_exact(cout))
        .zip(gx.chunks_exact_mut(cin))
    {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            let wrow = &p.weight[o * cin..(o + 1) * cin];
            let gwrow = &mut gw[o * cin..(o + 1) * cin];
            for c in 0..cin {
                gwrow[c] += go * px[c];
                gpx[c] += go * wrow[c];
            }
        }
    }
    Ok(ConvGrads {
        x: x.with_data(gx),
        weight: gw,
        bias: gb,
    })
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

/// Passes `grad_out` where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &FeatureMap, grad_out: &FeatureMap) -> Result<FeatureMap> {
    x.check_same_shape(grad_out, "relu_backward")?;
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(x.with_data(data))
}

/// Largest f64 below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside `(0, 1)` even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

pub fn sigmoid(x: &FeatureMap) -> FeatureMap {
    x.map(sigmoid_scalar)
}

/// Backward in terms of the forward output `y`.
pub fn sigmoid_backward(y: &FeatureMap, grad_out: &FeatureMap) -> Result<FeatureMap> {
    y.check_same_shape(grad_out, "sigmoid_backward")?;
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&s, &g)| s * (1.0 - s) * g)
        .collect();
    Ok(y.with_data(data))
}

pub fn hadamard(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    a.check_same_shape(b, "hadamard")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(a.with_data(data))
}

/// Returns `(grad_a, grad_b)`.
pub fn hadamard_backward(
    a: &FeatureMap,
    b: &FeatureMap,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap)> {
    a.check_same_shape(b, "hadamard_backward")?;
    a.check_same_shape(grad_out, "hadamard_backward(grad_out)")?;
    let ga = b
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(y, g)| y * g)
        .collect();
    let gb = a
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(x, g)| x * g)
        .collect();
    Ok((a.with_data(ga), a.with_data(gb)))
}

/// Mean and population variance (divisor `N`) over every element.
pub fn mean_and_variance(x: &FeatureMap) -> (f64, f64) {
    let first = x.data[0];
    if x.data.iter().all(|&v| v == first) {
        // The summed mean can be off by an ulp, which would leave a
        // spurious positive variance.
        return (first, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `∂V/∂x_k = 2 (x_k − mean) / N`.
pub fn variance_backward(x: &FeatureMap) -> FeatureMap {
    let (mean, _) = mean_and_variance(x);
    let scale = 2.0 / x.len() as f64;
    x.map(|v| scale * (v - mean))
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one element at a time.
pub fn finite_diff_gradient(
    f: impl Fn(&FeatureMap) -> f64,
    x: &FeatureMap,
    h: f64,
) -> Result<FeatureMap> {
    let grad = finite_diff_slice(|v| f(&x.with_data(v.to_vec())), &x.data, h)?;
    Ok(x.with_data(grad))
}

/// Same as [`finite_diff_gradient`] over a flat parameter vector.
pub fn finite_diff_slice(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        probe[k] = point[k] + h;
        let plus = f(&probe);
        probe[k] = point[k] - h;
        let minus = f(&probe);
        probe[k] = point[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while differentiating element {k}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_k |analytic − numeric| / max(1, |numeric|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
