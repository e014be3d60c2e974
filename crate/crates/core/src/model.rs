//! Parameter layout, deterministic initialization and the end-to-end
//! embedding extractor.
//!
//! Tensor names follow the forward pass, e.g. `dsm.block3.ds1.pw_weight`,
//! `block2.layer7.cam.w1`, `transition1.weight`, `head.fc.weight`. A weight
//! store is valid for a config only if it holds exactly the records of
//! [`param_specs`] in the same order with the same shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{compute_fbank, read_wav, FbankFeatures, Waveform};
use crate::config::ModelConfig;
use crate::dsm::{dsm_forward_traced, ConvParams, DsConvParams, DsmParams, DsmResBlockParams};
use crate::dtdnn::{dense_block, tdnn_stem, transition, CamParams, DtdnnLayerParams, TdnnStemParams, TransitionParams};
use crate::embedder::{embedding_head, mfa_concat, tstp, Embedding, HeadParams};
use crate::error::Error;
use crate::tensor::{BatchNormParams, Conv2dSpec, Tensor, TensorError};
use crate::weights::{WeightStore, WeightsError};

/// Metadata key holding the JSON-encoded [`ModelConfig`].
pub const CONFIG_KEY: &str = "config";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are stored but not learned.
    pub fn is_learned(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn weight(&mut self, name: String, shape: Vec<usize>) {
        let fan_in = shape[1..].iter().product();
        self.0.push(ParamSpec { name, shape, kind: ParamKind::Weight { fan_in } });
    }

    fn bias(&mut self, name: String, n: usize) {
        self.0.push(ParamSpec { name, shape: vec![n], kind: ParamKind::Bias });
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        for (suffix, kind) in [
            ("gamma", ParamKind::BnGamma),
            ("beta", ParamKind::BnBeta),
            ("running_mean", ParamKind::BnRunningMean),
            ("running_var", ParamKind::BnRunningVar),
        ] {
            self.0.push(ParamSpec { name: format!("{prefix}.{suffix}"), shape: vec![c], kind });
        }
    }

    fn ds_conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.weight(format!("{prefix}.dw_weight"), vec![c_in, 1, k, k]);
        self.bias(format!("{prefix}.dw_bias"), c_in);
        self.weight(format!("{prefix}.pw_weight"), vec![c_out, c_in, 1, 1]);
        self.bias(format!("{prefix}.pw_bias"), c_out);
    }
}

/// Whether DSM block `i` needs a projection shortcut.
pub fn dsm_block_has_shortcut(cfg: &ModelConfig, i: usize) -> bool {
    let c_in = if i == 0 { cfg.dsm.stem_out_channels } else { cfg.dsm.block_out_channels[i - 1] };
    c_in != cfg.dsm.block_out_channels[i] || cfg.dsm.freq_strides[i] != 1
}

/// Every stored tensor of the model, in forward order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = SpecList::default();
    let k = cfg.dsm.dsm_kernel;
    let stem = cfg.dsm.stem_out_channels;
    s.weight("dsm.stem.weight".into(), vec![stem, 1, k, k]);
    s.bias("dsm.stem.bias".into(), stem);
    s.bn("dsm.stem_bn", stem);
    let mut c_in = stem;
    for (i, &c_out) in cfg.dsm.block_out_channels.iter().enumerate() {
        let p = format!("dsm.block{}", i + 1);
        s.ds_conv(&format!("{p}.ds1"), c_in, c_out, k);
        s.bn(&format!("{p}.bn1"), c_out);
        s.ds_conv(&format!("{p}.ds2"), c_out, c_out, k);
        s.bn(&format!("{p}.bn2"), c_out);
        if dsm_block_has_shortcut(cfg, i) {
            s.weight(format!("{p}.shortcut.weight"), vec![c_out, c_in, 1, 1]);
            s.bias(format!("{p}.shortcut.bias"), c_out);
            s.bn(&format!("{p}.shortcut_bn"), c_out);
        }
        c_in = c_out;
    }

    let stem_c = cfg.stem_tdnn_channels;
    s.weight("tdnn_stem.weight".into(), vec![stem_c, cfg.backbone_input_channels(), cfg.stem_tdnn_kernel]);
    s.bias("tdnn_stem.bias".into(), stem_c);
    s.bn("tdnn_stem.bn", stem_c);

    for b in 0..3 {
        let mut c = cfg.block_input_channels(b);
        for l in 0..cfg.block_depths[b] {
            let p = format!("block{}.layer{}", b + 1, l + 1);
            s.weight(format!("{p}.fnn.weight"), vec![cfg.fnn_hidden, c]);
            s.bias(format!("{p}.fnn.bias"), cfg.fnn_hidden);
            s.bn(&format!("{p}.fnn_bn"), cfg.fnn_hidden);
            s.weight(format!("{p}.tdnn.weight"), vec![cfg.growth, cfg.fnn_hidden, cfg.tdnn_kernel]);
            s.bias(format!("{p}.tdnn.bias"), cfg.growth);
            s.weight(format!("{p}.cam.w1"), vec![cfg.cam_bottleneck, cfg.fnn_hidden]);
            s.bias(format!("{p}.cam.b1"), cfg.cam_bottleneck);
            s.weight(format!("{p}.cam.w2"), vec![cfg.growth, cfg.cam_bottleneck]);
            s.bias(format!("{p}.cam.b2"), cfg.growth);
            c += cfg.growth;
        }
        if b < 2 {
            let p = format!("transition{}", b + 1);
            s.bn(&format!("{p}.bn"), c);
            s.weight(format!("{p}.weight"), vec![c / 2, c]);
            s.bias(format!("{p}.bias"), c / 2);
        }
    }

    s.bn("mfa.bn", cfg.mfa_channels());
    s.bn("head.bn_in", cfg.stats_dim());
    s.weight("head.fc.weight".into(), vec![cfg.embedding_dim, cfg.stats_dim()]);
    s.bias("head.fc.bias".into(), cfg.embedding_dim);
    s.bn("head.bn_out", cfg.embedding_dim);
    s.0
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`,
/// biases 0, batch norm as identity. Same config and seed give a
/// bit-identical store.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::new();
    ws.set_metadata(CONFIG_KEY, cfg.to_json_string());
    ws.set_metadata("seed", seed.to_string());
    for spec in param_specs(cfg) {
        let n = spec.numel();
        let data: Vec<f32> = match spec.kind {
            ParamKind::Weight { fan_in } => {
                let a = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => vec![0.0; n],
            ParamKind::BnGamma | ParamKind::BnRunningVar => vec![1.0; n],
        };
        ws.push(spec.name, Tensor::new(spec.shape, data).expect("spec shape")).expect("unique names");
    }
    ws
}

/// Scalars stored in `ws`, excluding batch-norm running statistics.
pub fn learned_scalars(ws: &WeightStore) -> usize {
    ws.iter()
        .filter(|(name, _)| !name.ends_with(".running_mean") && !name.ends_with(".running_var"))
        .map(|(_, t)| t.len())
        .sum()
}

/// Shapes observed during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub fbank: Vec<usize>,
    pub dsm_freq_chain: Vec<usize>,
    pub dsm: Vec<usize>,
    pub blocks: Vec<Vec<usize>>,
    pub mfa: Vec<usize>,
    pub stats_dim: usize,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug)]
pub struct LightCam {
    config: ModelConfig,
    dsm: DsmParams,
    stem: TdnnStemParams,
    blocks: Vec<Vec<DtdnnLayerParams>>,
    transitions: Vec<TransitionParams>,
    mfa_bn: BatchNormParams,
    head: HeadParams,
}

struct Reader<'a> {
    ws: &'a WeightStore,
    eps: f32,
}

impl Reader<'_> {
    fn t(&self, name: &str) -> Result<Tensor, WeightsError> {
        self.ws.require(name).cloned()
    }

    fn v(&self, name: &str) -> Result<Vec<f32>, WeightsError> {
        self.ws.require(name).map(|t| t.data().to_vec())
    }

    fn bn(&self, prefix: &str) -> Result<BatchNormParams, WeightsError> {
        Ok(BatchNormParams {
            gamma: self.v(&format!("{prefix}.gamma"))?,
            beta: self.v(&format!("{prefix}.beta"))?,
            running_mean: self.v(&format!("{prefix}.running_mean"))?,
            running_var: self.v(&format!("{prefix}.running_var"))?,
            epsilon: self.eps,
        })
    }

    fn ds(&self, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<DsConvParams, WeightsError> {
        let pad = k / 2;
        Ok(DsConvParams {
            dw_weight: self.t(&format!("{prefix}.dw_weight"))?,
            dw_bias: self.v(&format!("{prefix}.dw_bias"))?,
            pw_weight: self.t(&format!("{prefix}.pw_weight"))?,
            pw_bias: self.v(&format!("{prefix}.pw_bias"))?,
            spec: Conv2dSpec {
                in_channels: c_in,
                out_channels: c_out,
                kernel: (k, k),
                stride: (stride, 1),
                padding: (pad, pad),
                groups: c_in,
            },
        })
    }
}

impl LightCam {
    /// Build from a store whose metadata carries the config.
    pub fn from_store(ws: &WeightStore, allow_override: bool) -> Result<Self, Error> {
        let text = ws.metadata().get(CONFIG_KEY).ok_or(Error::MissingConfig)?;
        let cfg = ModelConfig::from_json_str(text)?;
        Self::from_store_with_config(cfg, ws, allow_override)
    }

    pub fn from_store_with_config(cfg: ModelConfig, ws: &WeightStore, allow_override: bool) -> Result<Self, Error> {
        cfg.validate(allow_override)?;
        check_layout(&cfg, ws)?;
        let r = Reader { ws, eps: cfg.bn_epsilon };
        let k = cfg.dsm.dsm_kernel;
        let pad = k / 2;

        let stem_c = cfg.dsm.stem_out_channels;
        let mut blocks = Vec::new();
        let mut c_in = stem_c;
        for (i, (&c_out, &stride)) in cfg.dsm.block_out_channels.iter().zip(&cfg.dsm.freq_strides).enumerate() {
            let p = format!("dsm.block{}", i + 1);
            let shortcut = if dsm_block_has_shortcut(&cfg, i) {
                Some((
                    ConvParams {
                        weight: r.t(&format!("{p}.shortcut.weight"))?,
                        bias: r.v(&format!("{p}.shortcut.bias"))?,
                        spec: Conv2dSpec::regular(c_in, c_out, (1, 1), (stride, 1), (0, 0)),
                    },
                    r.bn(&format!("{p}.shortcut_bn"))?,
                ))
            } else {
                None
            };
            blocks.push(DsmResBlockParams {
                ds1: r.ds(&format!("{p}.ds1"), c_in, c_out, k, stride)?,
                bn1: r.bn(&format!("{p}.bn1"))?,
                ds2: r.ds(&format!("{p}.ds2"), c_out, c_out, k, 1)?,
                bn2: r.bn(&format!("{p}.bn2"))?,
                shortcut,
            });
            c_in = c_out;
        }
        let dsm = DsmParams {
            stem: ConvParams {
                weight: r.t("dsm.stem.weight")?,
                bias: r.v("dsm.stem.bias")?,
                spec: Conv2dSpec::regular(1, stem_c, (k, k), (1, 1), (pad, pad)),
            },
            stem_bn: r.bn("dsm.stem_bn")?,
            blocks,
        };

        let stem = TdnnStemParams {
            weight: r.t("tdnn_stem.weight")?,
            bias: r.v("tdnn_stem.bias")?,
            bn: r.bn("tdnn_stem.bn")?,
        };

        let mut dense = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..3 {
            let mut layers = Vec::new();
            for l in 0..cfg.block_depths[b] {
                let p = format!("block{}.layer{}", b + 1, l + 1);
                layers.push(DtdnnLayerParams {
                    fnn_weight: r.t(&format!("{p}.fnn.weight"))?,
                    fnn_bias: r.v(&format!("{p}.fnn.bias"))?,
                    fnn_bn: r.bn(&format!("{p}.fnn_bn"))?,
                    tdnn_weight: r.t(&format!("{p}.tdnn.weight"))?,
                    tdnn_bias: r.v(&format!("{p}.tdnn.bias"))?,
                    dilation: cfg.tdnn_dilations[b],
                    cam: CamParams {
                        w1: r.t(&format!("{p}.cam.w1"))?,
                        b1: r.v(&format!("{p}.cam.b1"))?,
                        w2: r.t(&format!("{p}.cam.w2"))?,
                        b2: r.v(&format!("{p}.cam.b2"))?,
                        segment_length: cfg.segment_length,
                    },
                });
            }
            dense.push(layers);
            if b < 2 {
                let p = format!("transition{}", b + 1);
                transitions.push(TransitionParams {
                    bn: r.bn(&format!("{p}.bn"))?,
                    weight: r.t(&format!("{p}.weight"))?,
                    bias: r.v(&format!("{p}.bias"))?,
                });
            }
        }

        let mfa_bn = r.bn("mfa.bn")?;
        let head = HeadParams {
            bn_in: r.bn("head.bn_in")?,
            fc_weight: r.t("head.fc.weight")?,
            fc_bias: r.v("head.fc.bias")?,
            bn_out: r.bn("head.bn_out")?,
        };
        Ok(LightCam {
            config: cfg,
            dsm,
            stem,
            blocks: dense,
            transitions,
            mfa_bn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dsm(&self) -> &DsmParams {
        &self.dsm
    }

    pub fn dense_blocks(&self) -> &[Vec<DtdnnLayerParams>] {
        &self.blocks
    }

    pub fn embed_features(&self, f: &FbankFeatures) -> Result<Vec<f32>, TensorError> {
        self.embed_features_traced(f).map(|(e, _)| e)
    }

    /// Full network on F-bank features, returning the embedding and the
    /// intermediate shapes.
    pub fn embed_features_traced(&self, f: &FbankFeatures) -> Result<(Vec<f32>, ForwardTrace), TensorError> {
        let (x, chain) = dsm_forward_traced(f, &self.dsm)?;
        let dsm_shape = x.shape().to_vec();
        let mut h = tdnn_stem(&x, &self.stem)?;
        let mut taps = Vec::with_capacity(3);
        for (b, layers) in self.blocks.iter().enumerate() {
            h = dense_block(&h, layers)?;
            let want = self.config.block_output_channels(b);
            if h.shape()[0] != want {
                return Err(TensorError::AxisMismatch {
                    op: "mfa tap",
                    axis: "channel",
                    expected: want,
                    actual: h.shape()[0],
                });
            }
            if let Some(tr) = self.transitions.get(b) {
                let next = transition(&h, tr)?;
                taps.push(h);
                h = next;
            } else {
                taps.push(h.clone());
            }
        }
        let tap_refs: Vec<&Tensor> = taps.iter().collect();
        let mfa = mfa_concat(&tap_refs, &self.mfa_bn)?;
        let stats = tstp(&mfa)?;
        let emb = embedding_head(&stats, &self.head)?;
        let trace = ForwardTrace {
            fbank: f.frames.shape().to_vec(),
            dsm_freq_chain: chain,
            dsm: dsm_shape,
            blocks: taps.iter().map(|t| t.shape().to_vec()).collect(),
            mfa: mfa.shape().to_vec(),
            stats_dim: stats.len(),
            embedding_dim: emb.len(),
        };
        Ok((emb, trace))
    }

    pub fn embed_waveform(&self, w: &Waveform) -> Result<Vec<f32>, Error> {
        let f = compute_fbank(w)?;
        Ok(self.embed_features(&f)?)
    }
}

fn check_layout(cfg: &ModelConfig, ws: &WeightStore) -> Result<(), Error> {
    let specs = param_specs(cfg);
    if specs.len() != ws.len() {
        return Err(Error::Layout(format!("expected {} tensors, store has {}", specs.len(), ws.len())));
    }
    for (spec, (name, t)) in specs.iter().zip(ws.iter()) {
        if spec.name != name {
            return Err(Error::Layout(format!("expected tensor '{}', found '{}'", spec.name, name)));
        }
        if spec.shape != t.shape() {
            return Err(Error::Layout(format!("tensor '{}' has shape {:?}, expected {:?}", name, t.shape(), spec.shape)));
        }
    }
    Ok(())
}

/// WAV bytes to an embedding; any failure is tagged with `id`.
pub fn extract_embedding(wav: &[u8], id: &str, model: &LightCam) -> Result<Embedding, Error> {
    let run = || -> Result<Vec<f32>, Error> {
        let w = read_wav(wav)?;
        model.embed_waveform(&w)
    };
    run().map(|vector| Embedding { id: id.to_string(), vector }).map_err(|e| e.for_utterance(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{encode_wav, SAMPLE_RATE};

    fn tiny() -> (ModelConfig, WeightStore) {
        let cfg = ModelConfig::tiny();
        let ws = init_weights(&cfg, 3);
        (cfg, ws)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny();
        assert_eq!(init_weights(&cfg, 1).to_bytes(), init_weights(&cfg, 1).to_bytes());
        assert_ne!(init_weights(&cfg, 1).to_bytes(), init_weights(&cfg, 2).to_bytes());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let (cfg, ws) = tiny();
        for spec in param_specs(&cfg) {
            let t = ws.get(&spec.name).unwrap();
            match spec.kind {
                ParamKind::Weight { fan_in } => {
                    let a = 1.0 / (fan_in as f32).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= a), "{}", spec.name);
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => assert!(t.data().iter().all(|&v| v == 1.0)),
                _ => assert!(t.data().iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn silence_forward_succeeds_after_round_trip() {
        let (_, ws) = tiny();
        let back = crate::weights::load_weights(&ws.to_bytes()).unwrap();
        let model = LightCam::from_store(&back, true).unwrap();
        let wav = encode_wav(&vec![0i16; SAMPLE_RATE as usize]);
        let e = extract_embedding(&wav, "silence", &model).unwrap();
        assert_eq!(e.vector.len(), 12);
        assert!(e.vector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_model_requires_override() {
        let (_, ws) = tiny();
        assert!(matches!(LightCam::from_store(&ws, false), Err(Error::Config(_))));
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let (cfg, ws) = tiny();
        let other = ModelConfig { embedding_dim: 10, ..cfg };
        assert!(matches!(LightCam::from_store_with_config(other, &ws, true), Err(Error::Layout(_))));
    }

    #[test]
    fn errors_carry_utterance_id() {
        let (_, ws) = tiny();
        let model = LightCam::from_store(&ws, true).unwrap();
        let err = extract_embedding(&encode_wav(&[0; 100]), "short-utt", &model).unwrap_err();
        assert!(err.to_string().contains("short-utt"), "{err}");
        let err = extract_embedding(b"garbage", "bad", &model).unwrap_err();
        assert!(matches!(err, Error::Utterance { ref id, .. } if id == "bad"));
    }

    #[test]
    fn learned_scalars_excludes_running_stats() {
        let (cfg, ws) = tiny();
        let running: usize = param_specs(&cfg).iter().filter(|s| !s.kind.is_learned()).map(|s| s.numel()).sum();
        assert_eq!(learned_scalars(&ws) + running, ws.total_scalars());
    }
}
