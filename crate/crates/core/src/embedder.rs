//! Multi-scale aggregation, statistics pooling and the embedding head.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use crate::tensor::{self, batchnorm_infer, linear, BatchNormParams, Tensor, TensorError};

/// Floor added to the variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f32>,
}

/// Concatenate block outputs along channels (in the given order) and
/// normalize the result.
pub fn mfa_concat(blocks: &[&Tensor], bn: &BatchNormParams) -> tensor::Result<Tensor> {
    let t = blocks.first().map(|b| b.shape().last().copied().unwrap_or(0)).unwrap_or(0);
    for b in blocks {
        let (_, bt) = b.dims2("mfa_concat")?;
        if bt != t {
            return Err(TensorError::AxisMismatch {
                op: "mfa_concat",
                axis: "time",
                expected: t,
                actual: bt,
            });
        }
    }
    batchnorm_infer(&tensor::concat_channels(blocks)?, bn)
}

/// Per-channel mean followed by per-channel standard deviation over time:
/// `[C, T] -> [2C]`.
pub fn tstp(x: &Tensor) -> tensor::Result<Vec<f32>> {
    let (c, t) = x.dims2("tstp")?;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for row in x.data().chunks(t) {
        let (mut s, mut sq) = (0f64, 0f64);
        for &v in row {
            let v = v as f64;
            s += v;
            sq += v * v;
        }
        let mean = s / t as f64;
        let var = (sq / t as f64 - mean * mean).max(0.0);
        means.push(mean as f32);
        stds.push((var + VARIANCE_FLOOR).sqrt() as f32);
    }
    means.extend(stds);
    Ok(means)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub bn_in: BatchNormParams,
    /// `[D, 2C]`
    pub fc_weight: Tensor,
    pub fc_bias: Vec<f32>,
    pub bn_out: BatchNormParams,
}

/// BN, fully connected, BN.
pub fn embedding_head(stats: &[f32], p: &HeadParams) -> tensor::Result<Vec<f32>> {
    let s = Tensor::new(vec![stats.len()], stats.to_vec())?;
    if stats.len() != p.fc_weight.shape()[1] {
        return Err(TensorError::AxisMismatch {
            op: "embedding_head",
            axis: "statistics",
            expected: p.fc_weight.shape()[1],
            actual: stats.len(),
        });
    }
    let normed = batchnorm_infer(&s, &p.bn_in)?;
    let e = linear(&normed, &p.fc_weight, &p.fc_bias)?;
    Ok(batchnorm_infer(&e, &p.bn_out)?.into_data())
}

/// `<id>\t<values>` with nine significant digits per value.
pub fn write_embedding_line(e: &Embedding, mut out: impl Write) -> io::Result<()> {
    let values: Vec<String> = e.vector.iter().map(|v| format!("{v:.8e}")).collect();
    writeln!(out, "{}\t{}", e.id, values.join(" "))
}

pub fn write_embeddings(list: &[Embedding], mut out: impl Write) -> io::Result<()> {
    for e in list {
        write_embedding_line(e, &mut out)?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingFileError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate utterance id '{0}'")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_embeddings(input: impl BufRead) -> Result<Vec<Embedding>, EmbeddingFileError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| EmbeddingFileError::Parse { line: n + 1, reason };
        let (id, rest) = line.split_once('\t').ok_or_else(|| err("missing tab separator".into()))?;
        let vector = rest
            .split_whitespace()
            .map(|v| v.parse::<f32>().map_err(|e| err(format!("bad value '{v}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(err("embedding must be non-empty and finite".into()));
        }
        if *dim.get_or_insert(vector.len()) != vector.len() {
            return Err(err(format!("dimension {} differs from {}", vector.len(), dim.unwrap())));
        }
        out.push(Embedding { id: id.to_string(), vector });
    }
    Ok(out)
}

/// Index embeddings by utterance id, rejecting duplicates.
pub fn index_embeddings(list: Vec<Embedding>) -> Result<HashMap<String, Vec<f32>>, EmbeddingFileError> {
    let mut map = HashMap::with_capacity(list.len());
    for e in list {
        if map.contains_key(&e.id) {
            return Err(EmbeddingFileError::Duplicate(e.id));
        }
        map.insert(e.id, e.vector);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mfa_concat_channel_arithmetic_and_order() {
        let d1 = Tensor::from_fn(&[512, 1], |i| i as f32 * 1e-3);
        let d2 = Tensor::from_fn(&[1024, 1], |i| -(i as f32) * 1e-3);
        let d3 = Tensor::from_fn(&[1024, 1], |i| (i % 5) as f32);
        let bn = BatchNormParams::identity(2560, 0.0);
        let y = mfa_concat(&[&d1, &d2, &d3], &bn).unwrap();
        assert_eq!(y.shape(), &[2560, 1]);
        let swapped = mfa_concat(&[&d3, &d2, &d1], &bn).unwrap();
        assert_ne!(y, swapped);
        let err = mfa_concat(&[&d1, &Tensor::zeros(&[1024, 2])], &BatchNormParams::identity(1536, 0.0)).unwrap_err();
        assert!(matches!(err, TensorError::AxisMismatch { axis: "time", .. }));
    }

    #[test]
    fn tstp_examples() {
        let s = tstp(&Tensor::full(&[3, 17], 0.75)).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s[..3].iter().all(|&v| v == 0.75));
        assert!(s[3..].iter().all(|&v| (v - 1e-5).abs() < 1e-9));

        let s = tstp(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(s[0], 2.0);
        assert!((s[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn head_examples() {
        let p = HeadParams {
            bn_in: BatchNormParams::identity(6, 0.0),
            fc_weight: Tensor::from_fn(&[4, 6], |i| (i as f32 - 10.0) * 0.1),
            fc_bias: vec![0.0; 4],
            bn_out: BatchNormParams::identity(4, 0.0),
        };
        assert_eq!(embedding_head(&[0.0; 6], &p).unwrap(), vec![0.0; 4]);

        let stats = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let got = embedding_head(&stats, &p).unwrap();
        for o in 0..4 {
            let want: f64 = (0..6).map(|i| p.fc_weight.data()[o * 6 + i] as f64 * stats[i] as f64).sum();
            assert!((got[o] as f64 - want).abs() < 1e-5);
        }
        assert!(embedding_head(&[0.0; 5], &p).is_err());
    }

    #[test]
    fn embedding_text_round_trip() {
        let list = vec![
            Embedding { id: "a".into(), vector: vec![1.0, -2.5e-7, 3.3333333] },
            Embedding { id: "b".into(), vector: vec![0.0, 1e10, -1.0] },
        ];
        let mut buf = Vec::new();
        write_embeddings(&list, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a\t1.00000000e0 "));
        assert_eq!(read_embeddings(&buf[..]).unwrap(), list);
        assert!(read_embeddings(&b"x 1 2\n"[..]).is_err());
        let dup = index_embeddings(vec![list[0].clone(), list[0].clone()]);
        assert!(matches!(dup, Err(EmbeddingFileError::Duplicate(_))));
    }

    proptest! {
        #[test]
        fn tstp_scales_with_alpha(seed in 0u64..500, alpha in prop::sample::select(vec![-3.0f32, -0.5, 0.5, 2.0])) {
            let mut s = seed;
            let x = Tensor::from_fn(&[4, 9], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            });
            let base = tstp(&x).unwrap();
            let scaled = tstp(&x.map(|v| alpha * v)).unwrap();
            for c in 0..4 {
                prop_assert!((scaled[c] - alpha * base[c]).abs() <= 1e-5);
                prop_assert!((scaled[4 + c] - alpha.abs() * base[4 + c]).abs() <= 1e-5);
            }
        }
    }
}
