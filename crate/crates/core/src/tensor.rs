//! Dense `f32` tensors and the handful of forward-only kernels the network
//! is built from.
//!
//! Layouts are channels-first and row-major (last axis fastest):
//!
//! * 2-D maps: `[channels, freq, time]`
//! * 1-D (TDNN) maps: `[channels, time]`
//! * conv2d weights: `[out_channels, in_channels / groups, k_freq, k_time]`
//! * conv1d weights: `[out_channels, in_channels, k]`
//! * affine weights: `[out_features, in_features]`
//!
//! All convolutions are cross-correlations with zero padding. Every output
//! element is accumulated sequentially (bias first, then input channel, then
//! kernel offsets), so results are deterministic for a given input.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: {axis} extent mismatch (expected {expected}, got {actual})")]
    AxisMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: output {axis} extent would be non-positive")]
    EmptyOutput { op: &'static str, axis: &'static str },
    #[error("{op}: groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}")]
    Groups {
        op: &'static str,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                reason: format!("shape holds {n} elements but data has {}", data.len()),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics if any extent is zero.
    pub fn full(shape: &[usize], value: f32) -> Self {
        validate_shape(shape).expect("Tensor::full");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        validate_shape(shape).expect("Tensor::from_fn");
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `index` along axis 0, as a flat slice.
    pub fn row(&self, index: usize) -> &[f32] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                actual: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                actual: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "all extents must be >= 1".into(),
        });
    }
    Ok(())
}

/// Finite-value guard; active only in builds with debug assertions.
#[inline]
pub(crate) fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if cfg!(debug_assertions) && !values.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

fn expect_extent(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(TensorError::AxisMismatch {
            op,
            axis,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `floor((input + 2*padding - dilation*(kernel-1) - 1) / stride) + 1`, or
/// `None` when that is not positive.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k_freq, k_time)`
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn regular(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dSpec {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding,
            groups: channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec::regular(in_channels, out_channels, (1, 1), (1, 1), (0, 0))
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.groups == 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(TensorError::Groups {
                op,
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                groups: self.groups,
            });
        }
        Ok(())
    }

    /// Output `(freq, time)` extents for an input of `(freq, time)`.
    pub fn output_dims(&self, freq: usize, time: usize) -> Option<(usize, usize)> {
        let f = output_extent(freq, self.kernel.0, self.stride.0, self.padding.0, 1)?;
        let t = output_extent(time, self.kernel.1, self.stride.1, self.padding.1, 1)?;
        Some((f, t))
    }
}

/// Grouped 2-D cross-correlation over `[C_in, F, T]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &[f32], spec: &Conv2dSpec) -> Result<Tensor> {
    const OP: &str = "conv2d";
    spec.validate(OP)?;
    let (c_in, f_in, t_in) = x.dims3(OP)?;
    expect_extent(OP, "input channel", spec.in_channels, c_in)?;
    let (wo, wi, wkf, wkt) = w.dims4(OP)?;
    let [eo, ei, ekf, ekt] = spec.weight_shape();
    expect_extent(OP, "weight out-channel", eo, wo)?;
    expect_extent(OP, "weight in-channel", ei, wi)?;
    expect_extent(OP, "weight freq-kernel", ekf, wkf)?;
    expect_extent(OP, "weight time-kernel", ekt, wkt)?;
    expect_extent(OP, "bias", spec.out_channels, b.len())?;
    check_finite(OP, x.data())?;

    let (kf, kt) = spec.kernel;
    let (sf, st) = spec.stride;
    let (pf, pt) = spec.padding;
    let f_out = output_extent(f_in, kf, sf, pf, 1).ok_or(TensorError::EmptyOutput { op: OP, axis: "freq" })?;
    let t_out = output_extent(t_in, kt, st, pt, 1).ok_or(TensorError::EmptyOutput { op: OP, axis: "time" })?;

    let c_out = spec.out_channels;
    let cin_g = c_in / spec.groups;
    let cout_g = c_out / spec.groups;
    let plane = f_out * t_out;
    let mut out = vec![0f32; c_out * plane];
    let xd = x.data();
    let wd = w.data();

    for o in 0..c_out {
        let g = o / cout_g;
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(b[o]);
        for il in 0..cin_g {
            let i = g * cin_g + il;
            let x_plane = &xd[i * f_in * t_in..(i + 1) * f_in * t_in];
            for u in 0..kf {
                for v in 0..kt {
                    let wv = wd[((o * cin_g + il) * kf + u) * kt + v];
                    // time outputs with a valid source column: to*st + v - pt in [0, t_in)
                    let to_lo = if v >= pt { 0 } else { (pt - v).div_ceil(st) };
                    let to_hi = if t_in + pt > v {
                        ((t_in + pt - v - 1) / st + 1).min(t_out)
                    } else {
                        0
                    };
                    if to_lo >= to_hi {
                        continue;
                    }
                    for fo in 0..f_out {
                        let fi = (fo * sf + u) as isize - pf as isize;
                        if fi < 0 || fi as usize >= f_in {
                            continue;
                        }
                        let x_row = &x_plane[fi as usize * t_in..(fi as usize + 1) * t_in];
                        let o_row = &mut out_plane[fo * t_out..(fo + 1) * t_out];
                        if st == 1 {
                            let src0 = to_lo + v - pt;
                            let n = to_hi - to_lo;
                            for (o_v, &x_v) in o_row[to_lo..to_hi].iter_mut().zip(&x_row[src0..src0 + n]) {
                                *o_v += wv * x_v;
                            }
                        } else {
                            for to in to_lo..to_hi {
                                o_row[to] += wv * x_row[to * st + v - pt];
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite(OP, &out)?;
    Tensor::new(vec![c_out, f_out, t_out], out)
}

/// Depthwise convolution (groups == C_in) followed by a 1x1 pointwise
/// convolution mapping C_in to C_out.
///
/// `spec` describes the depthwise stage geometry (kernel, stride, padding)
/// with `in_channels = C_in`, `groups = C_in` and `out_channels = C_out` of
/// the combined operation.
pub fn depthwise_separable(
    x: &Tensor,
    dw_w: &Tensor,
    dw_b: &[f32],
    pw_w: &Tensor,
    pw_b: &[f32],
    spec: &Conv2dSpec,
) -> Result<Tensor> {
    const OP: &str = "depthwise_separable";
    if spec.groups != spec.in_channels {
        return Err(TensorError::Groups {
            op: OP,
            in_channels: spec.in_channels,
            out_channels: spec.in_channels,
            groups: spec.groups,
        });
    }
    let dw_spec = Conv2dSpec::depthwise(spec.in_channels, spec.kernel, spec.stride, spec.padding);
    let pw_spec = Conv2dSpec::pointwise(spec.in_channels, spec.out_channels);
    let mid = conv2d(x, dw_w, dw_b, &dw_spec)?;
    conv2d(&mid, pw_w, pw_b, &pw_spec)
}

/// Dilated 1-D cross-correlation over `[C_in, T]`, stride 1.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &[f32], dilation: usize, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv1d";
    let (c_in, t_in) = x.dims2(OP)?;
    let (c_out, wi, k) = w.dims3(OP)?;
    expect_extent(OP, "input channel", wi, c_in)?;
    expect_extent(OP, "bias", c_out, b.len())?;
    check_finite(OP, x.data())?;
    let t_out = output_extent(t_in, k, 1, padding, dilation).ok_or(TensorError::EmptyOutput { op: OP, axis: "time" })?;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0f32; c_out * t_out];
    for o in 0..c_out {
        let o_row = &mut out[o * t_out..(o + 1) * t_out];
        o_row.fill(b[o]);
        for i in 0..c_in {
            let x_row = &xd[i * t_in..(i + 1) * t_in];
            for j in 0..k {
                let wv = wd[(o * c_in + i) * k + j];
                let off = j * dilation;
                // source index = to + off - padding
                let to_lo = padding.saturating_sub(off);
                let to_hi = (t_in + padding).saturating_sub(off).min(t_out);
                if to_lo >= to_hi {
                    continue;
                }
                let src0 = to_lo + off - padding;
                let n = to_hi - to_lo;
                for (o_v, &x_v) in o_row[to_lo..to_hi].iter_mut().zip(&x_row[src0..src0 + n]) {
                    *o_v += wv * x_v;
                }
            }
        }
    }
    check_finite(OP, &out)?;
    Tensor::new(vec![c_out, t_out], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "batchnorm";
        let c = self.gamma.len();
        expect_extent(OP, "beta", c, self.beta.len())?;
        expect_extent(OP, "running_mean", c, self.running_mean.len())?;
        expect_extent(OP, "running_var", c, self.running_var.len())?;
        if self.running_var.iter().any(|&v| !(v >= 0.0)) || !(self.epsilon >= 0.0) {
            return Err(TensorError::InvalidShape {
                shape: vec![c],
                reason: "running_var and epsilon must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Inference-mode batch normalization over axis 0 of `[C, ...]`.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    const OP: &str = "batchnorm_infer";
    p.validate()?;
    let c = x.shape()[0];
    expect_extent(OP, "channel", p.channels(), c)?;
    check_finite(OP, x.data())?;
    let inner = x.len() / c;
    let mut out = x.data().to_vec();
    for (ch, chunk) in out.chunks_mut(inner).enumerate() {
        let scale = p.gamma[ch] / (p.running_var[ch] + p.epsilon).sqrt();
        let mean = p.running_mean[ch];
        let beta = p.beta[ch];
        for v in chunk {
            *v = scale * (*v - mean) + beta;
        }
    }
    check_finite(OP, &out)?;
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Largest `f32` strictly below one.
const SIGMOID_CEIL: f32 = 1.0 - f32::EPSILON / 2.0;

/// Logistic function, saturating at the representable values nearest to 0
/// and 1 so the result always stays strictly inside `(0, 1)`.
#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, SIGMOID_CEIL)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Affine map over the last axis: `[.., D_in] -> [.., D_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    const OP: &str = "linear";
    let (d_out, d_in) = w.dims2(OP)?;
    let last = *x.shape().last().unwrap();
    expect_extent(OP, "inner", d_in, last)?;
    expect_extent(OP, "bias", d_out, b.len())?;
    check_finite(OP, x.data())?;
    let rows = x.len() / d_in;
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let wr = &wd[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for (wv, xv) in wr.iter().zip(xr) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    check_finite(OP, &out)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Affine map applied independently to every frame of `[C_in, T]`,
/// producing `[C_out, T]`; the 1x1 TDNN / feed-forward layer.
pub fn linear_over_time(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    const OP: &str = "linear_over_time";
    let (c_in, t) = x.dims2(OP)?;
    let (c_out, wi) = w.dims2(OP)?;
    expect_extent(OP, "input channel", wi, c_in)?;
    expect_extent(OP, "bias", c_out, b.len())?;
    check_finite(OP, x.data())?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0f32; c_out * t];
    for (o, o_row) in out.chunks_mut(t).enumerate() {
        o_row.fill(b[o]);
        let wr = &wd[o * c_in..(o + 1) * c_in];
        for (i, &wv) in wr.iter().enumerate() {
            let x_row = &xd[i * t..(i + 1) * t];
            for (o_v, &x_v) in o_row.iter_mut().zip(x_row) {
                *o_v += wv * x_v;
            }
        }
    }
    check_finite(OP, &out)?;
    Tensor::new(vec![c_out, t], out)
}

/// Concatenate tensors along axis 0; trailing extents must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let first = parts.first().ok_or(TensorError::InvalidShape {
        shape: vec![],
        reason: "nothing to concatenate".into(),
    })?;
    let tail = &first.shape()[1..];
    let mut channels = 0;
    for p in parts {
        if p.rank() != first.rank() {
            return Err(TensorError::Rank {
                op: OP,
                expected: first.rank(),
                actual: p.shape().to_vec(),
            });
        }
        for (axis, (&a, &b)) in tail.iter().zip(&p.shape()[1..]).enumerate() {
            if a != b {
                return Err(TensorError::AxisMismatch {
                    op: OP,
                    axis: if axis + 2 == first.rank() { "time" } else { "inner" },
                    expected: a,
                    actual: b,
                });
            }
        }
        channels += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = channels;
    Tensor::new(shape, data)
}

/// Elementwise `a * b` for equal shapes.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Elementwise `a + b` for equal shapes.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(TensorError::Rank {
            op,
            expected: a.rank(),
            actual: b.shape().to_vec(),
        });
    }
    for (&x, &y) in a.shape().iter().zip(b.shape()) {
        expect_extent(op, "elementwise", x, y)?;
    }
    Ok(())
}
