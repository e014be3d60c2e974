//! Analytical parameter / FLOPs accounting and the RTF benchmark.
//!
//! Counting rules: a multiply-accumulate is two FLOPs; bias adds,
//! batch-norm, activations, masks, residual adds and pooling are one FLOP
//! per output element (pooling: per input element). Every row knows how it
//! scales with the number of frames, which makes the linearity checks exact.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::config::ModelConfig;
use crate::error::Error;
use crate::model::{dsm_block_has_shortcut, LightCam};
use crate::tensor::Conv2dSpec;
use crate::weights::WeightStore;

/// Frames per second of audio; reports default to one second.
pub const FRAMES_PER_SECOND: usize = 100;

/// Published single-thread CPU RTF, printed for comparison only.
pub const REFERENCE_RTF: f64 = 0.017;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Proportional to the number of frames.
    PerFrame,
    /// Proportional to the number of CAM segments, `ceil(T / segment_length)`.
    PerSegment,
    /// Independent of the input length.
    PerUtterance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub name: String,
    pub module: String,
    pub params: u64,
    pub flops: u64,
    pub scaling: Scaling,
}

/// What the depthwise-separable convolutions of the front-end are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frontend {
    DepthwiseSeparable,
    /// Each depthwise-separable convolution replaced by a regular
    /// convolution of identical input/output shape.
    Regular,
}

/// FLOPs of one 2-D convolution producing `f_out x t_out` per channel.
pub fn conv2d_flops(spec: &Conv2dSpec, f_out: usize, t_out: usize, bias: bool) -> u64 {
    let out = (spec.out_channels * f_out * t_out) as u64;
    let macs = (spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1) as u64 * out;
    2 * macs + if bias { out } else { 0 }
}

pub fn conv2d_params(spec: &Conv2dSpec, bias: bool) -> u64 {
    let w: usize = spec.weight_shape().iter().product();
    (w + if bias { spec.out_channels } else { 0 }) as u64
}

/// FLOPs of a 1-D convolution over `t_out` frames.
pub fn conv1d_flops(c_in: usize, c_out: usize, kernel: usize, t_out: usize, bias: bool) -> u64 {
    let out = (c_out * t_out) as u64;
    2 * (c_in * kernel) as u64 * out + if bias { out } else { 0 }
}

struct Rows {
    rows: Vec<ProfileRow>,
    module: String,
}

impl Rows {
    fn push(&mut self, name: impl Into<String>, params: u64, flops: u64, scaling: Scaling) {
        self.rows.push(ProfileRow {
            name: name.into(),
            module: self.module.clone(),
            params,
            flops,
            scaling,
        });
    }

    fn bn(&mut self, name: String, channels: usize, elements: usize, scaling: Scaling) {
        self.push(name, 2 * channels as u64, elements as u64, scaling);
    }

    fn conv(&mut self, name: String, spec: &Conv2dSpec, f_out: usize, t: usize) {
        self.push(name, conv2d_params(spec, true), conv2d_flops(spec, f_out, t, true), Scaling::PerFrame);
    }

    /// Per-frame affine `d_in -> d_out` with bias over `t` frames.
    fn linear(&mut self, name: String, d_in: usize, d_out: usize, t: usize, scaling: Scaling) {
        let params = (d_in * d_out + d_out) as u64;
        self.push(name, params, (2 * d_in * d_out * t + d_out * t) as u64, scaling);
    }
}

fn ds_or_regular(r: &mut Rows, prefix: &str, frontend: Frontend, c_in: usize, c_out: usize, k: usize, stride: usize, f_out: usize, t: usize) {
    let pad = k / 2;
    match frontend {
        Frontend::DepthwiseSeparable => {
            let dw = Conv2dSpec::depthwise(c_in, (k, k), (stride, 1), (pad, pad));
            let pw = Conv2dSpec::pointwise(c_in, c_out);
            let params = conv2d_params(&dw, true) + conv2d_params(&pw, true);
            let flops = conv2d_flops(&dw, f_out, t, true) + conv2d_flops(&pw, f_out, t, true);
            r.push(prefix, params, flops, Scaling::PerFrame);
        }
        Frontend::Regular => {
            r.conv(prefix.to_string(), &Conv2dSpec::regular(c_in, c_out, (k, k), (stride, 1), (pad, pad)), f_out, t);
        }
    }
}

/// Per-layer rows for an input of `frames` frames.
pub fn profile_rows(cfg: &ModelConfig, frames: usize, frontend: Frontend) -> Vec<ProfileRow> {
    use Scaling::*;
    let t = frames;
    let mut r = Rows { rows: Vec::new(), module: "dsm".into() };

    let k = cfg.dsm.dsm_kernel;
    let pad = k / 2;
    let chain = cfg.dsm_freq_chain();
    let stem_c = cfg.dsm.stem_out_channels;
    let n = stem_c * chain[0] * t;
    r.conv("dsm.stem".into(), &Conv2dSpec::regular(1, stem_c, (k, k), (1, 1), (pad, pad)), chain[0], t);
    r.bn("dsm.stem_bn".into(), stem_c, n, PerFrame);
    r.push("dsm.stem_relu", 0, n as u64, PerFrame);
    let mut c_in = stem_c;
    for (i, (&c_out, &stride)) in cfg.dsm.block_out_channels.iter().zip(&cfg.dsm.freq_strides).enumerate() {
        let p = format!("dsm.block{}", i + 1);
        let f = chain[i + 1];
        let n = c_out * f * t;
        ds_or_regular(&mut r, &format!("{p}.ds1"), frontend, c_in, c_out, k, stride, f, t);
        r.bn(format!("{p}.bn1"), c_out, n, PerFrame);
        r.push(format!("{p}.relu1"), 0, n as u64, PerFrame);
        ds_or_regular(&mut r, &format!("{p}.ds2"), frontend, c_out, c_out, k, 1, f, t);
        r.bn(format!("{p}.bn2"), c_out, n, PerFrame);
        if dsm_block_has_shortcut(cfg, i) {
            r.conv(format!("{p}.shortcut"), &Conv2dSpec::regular(c_in, c_out, (1, 1), (stride, 1), (0, 0)), f, t);
            r.bn(format!("{p}.shortcut_bn"), c_out, n, PerFrame);
        }
        r.push(format!("{p}.residual_add"), 0, n as u64, PerFrame);
        r.push(format!("{p}.relu2"), 0, n as u64, PerFrame);
        c_in = c_out;
    }

    r.module = "tdnn_stem".into();
    let (c0, ks) = (cfg.stem_tdnn_channels, cfg.stem_tdnn_kernel);
    let c_bb = cfg.backbone_input_channels();
    r.push("tdnn_stem", (c0 * c_bb * ks + c0) as u64, conv1d_flops(c_bb, c0, ks, t, true), PerFrame);
    r.bn("tdnn_stem.bn".into(), c0, c0 * t, PerFrame);
    r.push("tdnn_stem.relu", 0, (c0 * t) as u64, PerFrame);

    let (h, g, b) = (cfg.fnn_hidden, cfg.growth, cfg.cam_bottleneck);
    let segs = t.div_ceil(cfg.segment_length);
    for blk in 0..3 {
        r.module = format!("block{}", blk + 1);
        let mut c = cfg.block_input_channels(blk);
        for l in 0..cfg.block_depths[blk] {
            let p = format!("block{}.layer{}", blk + 1, l + 1);
            r.linear(format!("{p}.fnn"), c, h, t, PerFrame);
            r.bn(format!("{p}.fnn_bn"), h, h * t, PerFrame);
            r.push(format!("{p}.fnn_relu"), 0, (h * t) as u64, PerFrame);
            let kt = cfg.tdnn_kernel;
            r.push(format!("{p}.tdnn"), (g * h * kt + g) as u64, conv1d_flops(h, g, kt, t, true), PerFrame);
            // global and segment means each read every element once
            r.push(format!("{p}.cam_pool"), 0, (2 * h * t) as u64, PerFrame);
            // per segment: context add, W1 + bias, ReLU, W2 + bias, sigmoid
            let per_seg = h + (2 * h * b + b) + b + (2 * b * g + g) + g;
            r.push(format!("{p}.cam"), (b * h + b + g * b + g) as u64, (segs * per_seg) as u64, PerSegment);
            r.push(format!("{p}.mask_mul"), 0, (g * t) as u64, PerFrame);
            c += g;
        }
        if blk < 2 {
            r.module = format!("transition{}", blk + 1);
            let p = format!("transition{}", blk + 1);
            r.bn(format!("{p}.bn"), c, c * t, PerFrame);
            r.push(format!("{p}.relu"), 0, (c * t) as u64, PerFrame);
            r.linear(p, c, c / 2, t, PerFrame);
        }
    }

    r.module = "mfa".into();
    let m = cfg.mfa_channels();
    r.bn("mfa.bn".into(), m, m * t, PerFrame);
    r.module = "pooling".into();
    // sum, sum of squares, and the squaring multiply
    r.push("tstp", 0, (3 * m * t) as u64, PerFrame);

    r.module = "head".into();
    let (s, d) = (cfg.stats_dim(), cfg.embedding_dim);
    r.bn("head.bn_in".into(), s, s, PerUtterance);
    r.linear("head.fc".into(), s, d, 1, PerUtterance);
    r.bn("head.bn_out".into(), d, d, PerUtterance);
    r.rows
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleSummary {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RtfStats {
    pub audio_secs: f64,
    pub repetitions: usize,
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    pub rtf: f64,
    pub rtf_min: f64,
    pub rtf_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub frames: usize,
    pub total_params: u64,
    pub total_flops: u64,
    pub rtf: Option<RtfStats>,
    pub rows: Vec<ProfileRow>,
}

impl ProfileReport {
    pub fn new(cfg: &ModelConfig, frames: usize) -> Self {
        Self::from_rows(profile_rows(cfg, frames, Frontend::DepthwiseSeparable), frames)
    }

    pub fn from_rows(rows: Vec<ProfileRow>, frames: usize) -> Self {
        ProfileReport {
            frames,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rtf: None,
            rows,
        }
    }

    /// Rows whose name is `prefix` or starts with `prefix.`.
    pub fn sum_prefix(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.name == prefix || r.name.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('.') || rest.starts_with('_')))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    pub fn modules(&self) -> Vec<ModuleSummary> {
        let mut out: Vec<ModuleSummary> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(m) if m.module == r.module => {
                    m.params += r.params;
                    m.flops += r.flops;
                }
                _ => out.push(ModuleSummary { module: r.module.clone(), params: r.params, flops: r.flops }),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "FLOPs: 2 per multiply-accumulate, counted for {} frames ({:.2} s of audio)", self.frames, self.frames as f64 / FRAMES_PER_SECOND as f64);
        let _ = writeln!(s, "{:<14} {:>12} {:>14}", "module", "params", "MFLOPs");
        for m in self.modules() {
            let _ = writeln!(s, "{:<14} {:>12} {:>14.3}", m.module, m.params, m.flops as f64 / 1e6);
        }
        let _ = writeln!(s, "{:<14} {:>12} {:>14.3}", "total", self.total_params, self.total_flops as f64 / 1e6);
        let _ = writeln!(s, "params: {:.3} M", self.total_params as f64 / 1e6);
        let _ = writeln!(s, "flops: {:.3} G", self.total_flops as f64 / 1e9);
        if let Some(r) = &self.rtf {
            let _ = writeln!(s, "rtf: {:.5} (min {:.5}, max {:.5}, {} runs on {:.1} s audio)", r.rtf, r.rtf_min, r.rtf_max, r.repetitions, r.audio_secs);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Learned scalars per stored layer (name minus its last component),
/// batch-norm running statistics excluded.
pub fn count_params(ws: &WeightStore) -> (u64, BTreeMap<String, u64>) {
    let mut layers = BTreeMap::new();
    for (name, t) in ws.iter() {
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            continue;
        }
        let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
        *layers.entry(layer.to_string()).or_insert(0) += t.len() as u64;
    }
    (layers.values().sum(), layers)
}

pub fn count_flops(cfg: &ModelConfig, frames: usize) -> u64 {
    profile_rows(cfg, frames, Frontend::DepthwiseSeparable).iter().map(|r| r.flops).sum()
}

pub fn rtf_from_timing(processing_secs: f64, audio_secs: f64) -> f64 {
    processing_secs / audio_secs
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Median single-thread wall-clock time of fbank plus forward, over
/// `repetitions` runs after one warm-up, divided by the audio duration.
/// Benchmarks within one process are serialized.
pub fn measure_rtf(model: &LightCam, wav: &Waveform, repetitions: usize) -> Result<RtfStats, Error> {
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let reps = repetitions.max(1);
    model.embed_waveform(wav)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.embed_waveform(std::hint::black_box(wav))?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 { times[reps / 2] } else { 0.5 * (times[reps / 2 - 1] + times[reps / 2]) };
    let d = wav.duration_secs();
    Ok(RtfStats {
        audio_secs: d,
        repetitions: reps,
        median_secs: median,
        min_secs: times[0],
        max_secs: times[reps - 1],
        rtf: rtf_from_timing(median, d),
        rtf_min: rtf_from_timing(times[0], d),
        rtf_max: rtf_from_timing(times[reps - 1], d),
    })
}

/// Deterministic voiced-like test signal: a gliding harmonic series with
/// syllable-rate amplitude modulation and a little noise.
pub fn synthetic_waveform(duration_secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let n = (duration_secs * sr).round() as usize;
    let f0_base = rng.random_range(100.0..220.0);
    let mut phase = 0f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f0 = f0_base * (1.0 + 0.1 * (2.0 * std::f64::consts::PI * 0.7 * t).sin());
            phase += 2.0 * std::f64::consts::PI * f0 / sr;
            let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            let voiced: f64 = (1..=8).map(|h| (h as f64 * phase).sin() / h as f64).sum();
            (0.2 * env * voiced + 0.01 * rng.random_range(-1.0..1.0)) as f32
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).expect("positive duration")
}
