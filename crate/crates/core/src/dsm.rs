//! Depthwise-separable convolution front-end.
//!
//! A regular 3x3 stem lifts the single F-bank plane to `stem_out_channels`,
//! then a stack of residual blocks, each built from two depthwise-separable
//! convolutions, downsamples frequency. The final `[C, F, T]` map is
//! flattened channel-major into `[C * F, T]` for the TDNN backbone.

use crate::audio::FbankFeatures;
use crate::tensor::{self, batchnorm_infer, relu, BatchNormParams, Conv2dSpec, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub spec: Conv2dSpec,
}

impl ConvParams {
    pub fn forward(&self, x: &Tensor) -> tensor::Result<Tensor> {
        tensor::conv2d(x, &self.weight, &self.bias, &self.spec)
    }
}

/// Depthwise stage `[C_in, 1, k, k]` followed by pointwise `[C_out, C_in, 1, 1]`.
/// `spec` carries the depthwise geometry with `groups == in_channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct DsConvParams {
    pub dw_weight: Tensor,
    pub dw_bias: Vec<f32>,
    pub pw_weight: Tensor,
    pub pw_bias: Vec<f32>,
    pub spec: Conv2dSpec,
}

impl DsConvParams {
    pub fn forward(&self, x: &Tensor) -> tensor::Result<Tensor> {
        tensor::depthwise_separable(x, &self.dw_weight, &self.dw_bias, &self.pw_weight, &self.pw_bias, &self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsmResBlockParams {
    pub ds1: DsConvParams,
    pub bn1: BatchNormParams,
    pub ds2: DsConvParams,
    pub bn2: BatchNormParams,
    /// 1x1 projection used when the block changes channels or frequency
    /// resolution; identity otherwise.
    pub shortcut: Option<(ConvParams, BatchNormParams)>,
}

impl DsmResBlockParams {
    pub fn freq_stride(&self) -> usize {
        self.ds1.spec.stride.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsmParams {
    pub stem: ConvParams,
    pub stem_bn: BatchNormParams,
    pub blocks: Vec<DsmResBlockParams>,
}

/// `ReLU(BN(DS2(ReLU(BN(DS1(x))))) + shortcut(x))`.
pub fn dsm_resblock(x: &Tensor, p: &DsmResBlockParams) -> tensor::Result<Tensor> {
    let h = relu(&batchnorm_infer(&p.ds1.forward(x)?, &p.bn1)?);
    let main = batchnorm_infer(&p.ds2.forward(&h)?, &p.bn2)?;
    let sum = match &p.shortcut {
        Some((conv, bn)) => tensor::add(&main, &batchnorm_infer(&conv.forward(x)?, bn)?)?,
        None => tensor::add(&main, x)?,
    };
    Ok(relu(&sum))
}

/// `[T, F]` features as a single-channel `[1, F, T]` map.
pub fn features_to_map(f: &FbankFeatures) -> tensor::Result<Tensor> {
    let (t, bins) = f.frames.dims2("features_to_map")?;
    let src = f.frames.data();
    let mut data = vec![0f32; t * bins];
    for ti in 0..t {
        for b in 0..bins {
            data[b * t + ti] = src[ti * bins + b];
        }
    }
    Tensor::new(vec![1, bins, t], data)
}

/// Full front-end, also returning the frequency extent after the stem and
/// after every block.
pub fn dsm_forward_traced(f: &FbankFeatures, p: &DsmParams) -> tensor::Result<(Tensor, Vec<usize>)> {
    let x = features_to_map(f)?;
    let mut h = relu(&batchnorm_infer(&p.stem.forward(&x)?, &p.stem_bn)?);
    let mut chain = vec![h.shape()[1]];
    for block in &p.blocks {
        h = dsm_resblock(&h, block)?;
        chain.push(h.shape()[1]);
    }
    let (c, freq, t) = h.dims3("dsm_forward")?;
    if t != f.num_frames() {
        return Err(TensorError::AxisMismatch {
            op: "dsm_forward",
            axis: "time",
            expected: f.num_frames(),
            actual: t,
        });
    }
    // [C, F, T] is already channel-major over (C, F)
    Ok((h.reshape(vec![c * freq, t])?, chain))
}

/// `[T, 80]` features to the flattened `[C * F, T]` backbone input.
pub fn dsm_forward(f: &FbankFeatures, p: &DsmParams) -> tensor::Result<Tensor> {
    dsm_forward_traced(f, p).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Conv2dSpec};

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
        }
    }

    fn ds(c_in: usize, c_out: usize, stride: usize, r: &mut impl FnMut() -> f32, zero: bool) -> DsConvParams {
        let mut v = || if zero { 0.0 } else { r() };
        DsConvParams {
            dw_weight: Tensor::from_fn(&[c_in, 1, 3, 3], |_| v()),
            dw_bias: (0..c_in).map(|_| v()).collect(),
            pw_weight: Tensor::from_fn(&[c_out, c_in, 1, 1], |_| v()),
            pw_bias: (0..c_out).map(|_| v()).collect(),
            spec: Conv2dSpec {
                in_channels: c_in,
                out_channels: c_out,
                kernel: (3, 3),
                stride: (stride, 1),
                padding: (1, 1),
                groups: c_in,
            },
        }
    }

    fn rand_bn(c: usize, r: &mut impl FnMut() -> f32) -> BatchNormParams {
        BatchNormParams {
            gamma: (0..c).map(|_| 1.0 + r()).collect(),
            beta: (0..c).map(|_| r()).collect(),
            running_mean: (0..c).map(|_| r()).collect(),
            running_var: (0..c).map(|_| 1.0 + r()).collect(),
            epsilon: 1e-5,
        }
    }

    #[test]
    fn zero_main_path_passes_nonnegative_input() {
        let mut r = lcg(1);
        let block = DsmResBlockParams {
            ds1: ds(3, 3, 1, &mut r, true),
            bn1: BatchNormParams::identity(3, 0.0),
            ds2: ds(3, 3, 1, &mut r, true),
            bn2: BatchNormParams::identity(3, 0.0),
            shortcut: None,
        };
        let x = Tensor::from_fn(&[3, 4, 5], |i| (i % 7) as f32 * 0.5);
        assert_eq!(dsm_resblock(&x, &block).unwrap(), x);
    }

    #[test]
    fn stride_two_halves_frequency() {
        let mut r = lcg(2);
        let block = DsmResBlockParams {
            ds1: ds(32, 32, 2, &mut r, false),
            bn1: BatchNormParams::identity(32, 1e-5),
            ds2: ds(32, 32, 1, &mut r, false),
            bn2: BatchNormParams::identity(32, 1e-5),
            shortcut: Some((
                ConvParams {
                    weight: Tensor::from_fn(&[32, 32, 1, 1], |_| r()),
                    bias: vec![0.0; 32],
                    spec: Conv2dSpec::regular(32, 32, (1, 1), (2, 1), (0, 0)),
                },
                BatchNormParams::identity(32, 1e-5),
            )),
        };
        let y = dsm_resblock(&Tensor::from_fn(&[32, 40, 7], |_| r()), &block).unwrap();
        assert_eq!(y.shape(), &[32, 20, 7]);
    }

    #[test]
    fn block_matches_sequential_primitive_composition() {
        let mut r = lcg(3);
        let block = DsmResBlockParams {
            ds1: ds(2, 3, 2, &mut r, false),
            bn1: rand_bn(3, &mut r),
            ds2: ds(3, 3, 1, &mut r, false),
            bn2: rand_bn(3, &mut r),
            shortcut: Some((
                ConvParams {
                    weight: Tensor::from_fn(&[3, 2, 1, 1], |_| r()),
                    bias: (0..3).map(|_| r()).collect(),
                    spec: Conv2dSpec::regular(2, 3, (1, 1), (2, 1), (0, 0)),
                },
                rand_bn(3, &mut r),
            )),
        };
        let x = Tensor::from_fn(&[2, 4, 3], |_| r());

        // straight-line: depthwise and pointwise as separate conv2d calls
        let stage = |x: &Tensor, p: &DsConvParams| {
            let dw = Conv2dSpec::depthwise(p.spec.in_channels, (3, 3), p.spec.stride, (1, 1));
            let mid = conv2d(x, &p.dw_weight, &p.dw_bias, &dw).unwrap();
            conv2d(&mid, &p.pw_weight, &p.pw_bias, &Conv2dSpec::pointwise(p.spec.in_channels, p.spec.out_channels)).unwrap()
        };
        let bn = |x: &Tensor, p: &BatchNormParams| {
            let inner = x.len() / x.shape()[0];
            Tensor::from_fn(x.shape(), |i| {
                let c = i / inner;
                p.gamma[c] * (x.data()[i] - p.running_mean[c]) / (p.running_var[c] + p.epsilon).sqrt() + p.beta[c]
            })
        };
        let h = bn(&stage(&x, &block.ds1), &block.bn1).map(|v| v.max(0.0));
        let main = bn(&stage(&h, &block.ds2), &block.bn2);
        let (sc, sc_bn) = block.shortcut.as_ref().unwrap();
        let short = bn(&conv2d(&x, &sc.weight, &sc.bias, &sc.spec).unwrap(), sc_bn);
        let want: Vec<f32> = main.data().iter().zip(short.data()).map(|(a, b)| (a + b).max(0.0)).collect();

        let got = dsm_resblock(&x, &block).unwrap();
        assert_eq!(got.shape(), &[3, 2, 3]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn features_transpose_to_channel_map() {
        let f = FbankFeatures {
            frames: Tensor::from_fn(&[3, 80], |i| i as f32),
        };
        let m = features_to_map(&f).unwrap();
        assert_eq!(m.shape(), &[1, 80, 3]);
        assert_eq!(m.data()[5 * 3 + 2], f.frames.data()[2 * 80 + 5]);
    }
}
