//! Densely connected TDNN backbone with context-aware masking.
//!
//! Each layer runs a frame-wise feed-forward bottleneck, a dilated TDNN
//! convolution producing `growth` channels, and a mask predicted from
//! pooled context of the bottleneck output. The masked TDNN output is
//! appended to the layer input, so channels grow by `growth` per layer.

use crate::tensor::{self, batchnorm_infer, conv1d, linear, linear_over_time, relu, sigmoid, BatchNormParams, Tensor, TensorError};

/// Weights of the two-layer mask predictor: `W1 [b, h]`, `W2 [g, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamParams {
    pub w1: Tensor,
    pub b1: Vec<f32>,
    pub w2: Tensor,
    pub b2: Vec<f32>,
    pub segment_length: usize,
}

/// Global context and per-segment context of a `[h, T]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVectors {
    pub global: Vec<f32>,
    /// `[K, h]`, one row per segment.
    pub segments: Tensor,
    /// `K + 1` zero-based frame boundaries; segment `k` covers
    /// `boundaries[k]..boundaries[k + 1]`.
    pub boundaries: Vec<usize>,
}

impl ContextVectors {
    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }
}

fn row_mean(row: &[f32]) -> f32 {
    (row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64) as f32
}

/// Per-channel mean over time of `[h, T]`.
pub fn global_avg_pool(x: &Tensor) -> tensor::Result<Vec<f32>> {
    let (h, t) = x.dims2("global_avg_pool")?;
    Ok((0..h).map(|c| row_mean(&x.data()[c * t..(c + 1) * t])).collect())
}

/// Split `[h, T]` into consecutive `segment_length`-frame segments (the last
/// one possibly shorter) and average each.
pub fn segment_avg_pool(x: &Tensor, segment_length: usize) -> tensor::Result<ContextVectors> {
    let (h, t) = x.dims2("segment_avg_pool")?;
    if segment_length == 0 {
        return Err(TensorError::EmptyOutput {
            op: "segment_avg_pool",
            axis: "segment",
        });
    }
    let k = t.div_ceil(segment_length);
    let boundaries: Vec<usize> = (0..=k).map(|i| (i * segment_length).min(t)).collect();
    let mut seg = Vec::with_capacity(k * h);
    for s in 0..k {
        let (a, b) = (boundaries[s], boundaries[s + 1]);
        for c in 0..h {
            seg.push(row_mean(&x.data()[c * t + a..c * t + b]));
        }
    }
    Ok(ContextVectors {
        global: global_avg_pool(x)?,
        segments: Tensor::new(vec![k, h], seg)?,
        boundaries,
    })
}

/// Sigmoid mask `[g, T]`: per segment `k`, `sigmoid(W2 relu(W1 (e_g + e_s^k) + b1) + b2)`,
/// broadcast over the segment's frames.
pub fn cam_mask(x: &Tensor, p: &CamParams) -> tensor::Result<Tensor> {
    let (h, t) = x.dims2("cam_mask")?;
    let ctx = segment_avg_pool(x, p.segment_length)?;
    let k = ctx.num_segments();
    let mut pooled = ctx.segments.clone();
    for row in pooled.data_mut().chunks_mut(h) {
        for (v, g) in row.iter_mut().zip(&ctx.global) {
            *v += g;
        }
    }
    let m = mask_columns(&pooled, p)?;
    let g = m.shape()[1];
    let mut out = vec![0f32; g * t];
    for s in 0..k {
        let col = m.row(s);
        for (c, &v) in col.iter().enumerate() {
            out[c * t + ctx.boundaries[s]..c * t + ctx.boundaries[s + 1]].fill(v);
        }
    }
    Tensor::new(vec![g, t], out)
}

/// The mask predictor applied to pooled context rows `[K, h] -> [K, g]`.
pub fn mask_columns(pooled: &Tensor, p: &CamParams) -> tensor::Result<Tensor> {
    let hidden = relu(&linear(pooled, &p.w1, &p.b1)?);
    Ok(sigmoid(&linear(&hidden, &p.w2, &p.b2)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtdnnLayerParams {
    /// `[h, C_in]`
    pub fnn_weight: Tensor,
    pub fnn_bias: Vec<f32>,
    pub fnn_bn: BatchNormParams,
    /// `[g, h, k]`
    pub tdnn_weight: Tensor,
    pub tdnn_bias: Vec<f32>,
    pub dilation: usize,
    pub cam: CamParams,
}

impl DtdnnLayerParams {
    pub fn in_channels(&self) -> usize {
        self.fnn_weight.shape()[1]
    }

    pub fn growth(&self) -> usize {
        self.tdnn_weight.shape()[0]
    }

    fn same_padding(&self) -> usize {
        self.dilation * (self.tdnn_weight.shape()[2] - 1) / 2
    }
}

/// `[C_in, T] -> [C_in + g, T]`.
pub fn dtdnn_layer(x: &Tensor, p: &DtdnnLayerParams) -> tensor::Result<Tensor> {
    let hidden = relu(&batchnorm_infer(&linear_over_time(x, &p.fnn_weight, &p.fnn_bias)?, &p.fnn_bn)?);
    let y = conv1d(&hidden, &p.tdnn_weight, &p.tdnn_bias, p.dilation, p.same_padding())?;
    let mask = cam_mask(&hidden, &p.cam)?;
    tensor::concat_channels(&[x, &tensor::mul(&mask, &y)?])
}

pub fn dense_block(x: &Tensor, layers: &[DtdnnLayerParams]) -> tensor::Result<Tensor> {
    let mut h = x.clone();
    for layer in layers {
        h = dtdnn_layer(&h, layer)?;
    }
    Ok(h)
}

/// Channel-halving reducer between dense blocks: BN, ReLU, frame-wise affine.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionParams {
    pub bn: BatchNormParams,
    /// `[C / 2, C]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

pub fn transition(x: &Tensor, p: &TransitionParams) -> tensor::Result<Tensor> {
    const OP: &str = "transition";
    let (c, _) = x.dims2(OP)?;
    if c % 2 != 0 {
        return Err(TensorError::AxisMismatch {
            op: OP,
            axis: "channel (must be even)",
            expected: c + 1,
            actual: c,
        });
    }
    if p.weight.shape()[0] != c / 2 {
        return Err(TensorError::AxisMismatch {
            op: OP,
            axis: "output channel",
            expected: c / 2,
            actual: p.weight.shape()[0],
        });
    }
    linear_over_time(&relu(&batchnorm_infer(x, &p.bn)?), &p.weight, &p.bias)
}

/// TDNN stem mapping the flattened front-end output to the first block.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnnStemParams {
    /// `[C_out, C_in, k]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub bn: BatchNormParams,
}

pub fn tdnn_stem(x: &Tensor, p: &TdnnStemParams) -> tensor::Result<Tensor> {
    let pad = (p.weight.shape()[2] - 1) / 2;
    Ok(relu(&batchnorm_infer(&conv1d(x, &p.weight, &p.bias, 1, pad)?, &p.bn)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed.wrapping_add(0xA076_1D64_78BD_642F);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        }
    }

    fn rand_cam(h: usize, b: usize, g: usize, seg: usize, r: &mut impl FnMut() -> f32) -> CamParams {
        CamParams {
            w1: Tensor::from_fn(&[b, h], |_| r()),
            b1: (0..b).map(|_| r()).collect(),
            w2: Tensor::from_fn(&[g, b], |_| r()),
            b2: (0..g).map(|_| r()).collect(),
            segment_length: seg,
        }
    }

    #[test]
    fn global_pool_examples() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap(), vec![1.5, 3.5]);
        assert_eq!(global_avg_pool(&Tensor::full(&[3, 9], 0.7)).unwrap(), vec![0.7; 3]);

        let mut r = lcg(1);
        let x = Tensor::from_fn(&[3, 7], |_| r());
        let got = global_avg_pool(&x).unwrap();
        for c in 0..3 {
            let mut acc = 0.0f64;
            for t in 0..7 {
                acc += x.data()[c * 7 + t] as f64;
            }
            assert!((got[c] as f64 - acc / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn segment_pool_boundaries() {
        let ctx = segment_avg_pool(&Tensor::zeros(&[1, 250]), 100).unwrap();
        assert_eq!(ctx.boundaries, vec![0, 100, 200, 250]);
        let sizes: Vec<usize> = ctx.boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(sizes, vec![100, 100, 50]);

        let ctx = segment_avg_pool(&Tensor::full(&[2, 100], 1.25), 100).unwrap();
        assert_eq!(ctx.num_segments(), 1);
        assert_eq!(ctx.segments.data(), &[1.25, 1.25]);
        assert_eq!(ctx.segments.data(), ctx.global.as_slice());
    }

    #[test]
    fn segment_pool_matches_naive_loop() {
        let mut r = lcg(2);
        let x = Tensor::from_fn(&[2, 130], |_| r());
        let ctx = segment_avg_pool(&x, 100).unwrap();
        for (k, (a, b)) in [(0usize, 100usize), (100, 130)].into_iter().enumerate() {
            for c in 0..2 {
                let mut acc = 0.0f64;
                for t in a..b {
                    acc += x.data()[c * 130 + t] as f64;
                }
                assert!((ctx.segments.data()[k * 2 + c] as f64 - acc / (b - a) as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_cam_gives_half_mask() {
        let p = CamParams {
            w1: Tensor::zeros(&[2, 3]),
            b1: vec![0.0; 2],
            w2: Tensor::zeros(&[4, 2]),
            b2: vec![0.0; 4],
            segment_length: 3,
        };
        let mut r = lcg(3);
        let m = cam_mask(&Tensor::from_fn(&[3, 8], |_| r()), &p).unwrap();
        assert_eq!(m.shape(), &[4, 8]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_input_gives_identical_columns() {
        let mut r = lcg(4);
        let p = rand_cam(3, 2, 2, 4, &mut r);
        let m = cam_mask(&Tensor::full(&[3, 11], -0.3), &p).unwrap();
        for c in 0..2 {
            let row = &m.data()[c * 11..(c + 1) * 11];
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn layer_with_zero_cam_halves_tdnn_output() {
        let mut r = lcg(5);
        let p = DtdnnLayerParams {
            fnn_weight: Tensor::from_fn(&[4, 3], |_| r()),
            fnn_bias: vec![0.1; 4],
            fnn_bn: BatchNormParams::identity(4, 1e-5),
            tdnn_weight: Tensor::from_fn(&[2, 4, 3], |_| r()),
            tdnn_bias: vec![0.0, 0.2],
            dilation: 2,
            cam: CamParams {
                w1: Tensor::zeros(&[2, 4]),
                b1: vec![0.0; 2],
                w2: Tensor::zeros(&[2, 2]),
                b2: vec![0.0; 2],
                segment_length: 4,
            },
        };
        let x = Tensor::from_fn(&[3, 9], |_| r());
        let out = dtdnn_layer(&x, &p).unwrap();
        assert_eq!(out.shape(), &[5, 9]);
        assert_eq!(&out.data()[..27], x.data());
        let hidden = relu(&batchnorm_infer(&linear_over_time(&x, &p.fnn_weight, &p.fnn_bias).unwrap(), &p.fnn_bn).unwrap());
        let y = conv1d(&hidden, &p.tdnn_weight, &p.tdnn_bias, 2, 2).unwrap();
        for (o, yv) in out.data()[27..].iter().zip(y.data()) {
            assert_eq!(*o, 0.5 * yv);
        }
    }

    #[test]
    fn dense_block_grows_by_growth_per_layer() {
        let mut r = lcg(6);
        let layers: Vec<DtdnnLayerParams> = (0..3)
            .map(|i| DtdnnLayerParams {
                fnn_weight: Tensor::from_fn(&[4, 5 + 2 * i], |_| r() * 0.3),
                fnn_bias: vec![0.0; 4],
                fnn_bn: BatchNormParams::identity(4, 1e-5),
                tdnn_weight: Tensor::from_fn(&[2, 4, 3], |_| r() * 0.3),
                tdnn_bias: vec![0.0; 2],
                dilation: 1,
                cam: rand_cam(4, 3, 2, 5, &mut r),
            })
            .collect();
        let x = Tensor::from_fn(&[5, 12], |_| r());
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            h = dtdnn_layer(&h, l).unwrap();
            assert_eq!(h.shape(), &[5 + 2 * (i + 1), 12]);
        }
        assert_eq!(dense_block(&x, &layers).unwrap(), h);
    }

    #[test]
    fn transition_averages_with_half_weights() {
        let p = TransitionParams {
            bn: BatchNormParams::identity(2, 0.0),
            weight: Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(),
            bias: vec![0.0],
        };
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        let y = transition(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.data(), &[3.0, 4.0, 5.0]);
        // relu clips before the reduction
        let x = Tensor::new(vec![2, 1], vec![-4.0, 2.0]).unwrap();
        assert_eq!(transition(&x, &p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn transition_rejects_odd_channels() {
        let p = TransitionParams {
            bn: BatchNormParams::identity(3, 0.0),
            weight: Tensor::zeros(&[1, 3]),
            bias: vec![0.0],
        };
        assert!(transition(&Tensor::zeros(&[3, 2]), &p).is_err());
    }
}
