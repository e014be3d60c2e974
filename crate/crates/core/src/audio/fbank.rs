use std::io::{self, Write};
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use super::wav::{Waveform, SAMPLE_RATE};
use crate::tensor::Tensor;

pub const NUM_MEL_BINS: usize = 80;
/// 25 ms at 16 kHz.
pub const FRAME_LENGTH: usize = 400;
/// 10 ms at 16 kHz.
pub const FRAME_SHIFT: usize = 160;
const FFT_SIZE: usize = 512;
const PREEMPHASIS: f64 = 0.97;
const LOW_FREQ: f64 = 20.0;
const HIGH_FREQ: f64 = 7600.0;
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FbankError {
    #[error("utterance too short: {samples} samples, need at least {FRAME_LENGTH}")]
    TooShort { samples: usize },
}

/// Log-mel energies, `[T, 80]`, one row per 10 ms frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankFeatures {
    pub frames: Tensor,
}

impl FbankFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Number of full 25 ms windows; a trailing partial window is dropped.
pub fn frame_count(n_samples: usize) -> Result<usize, FbankError> {
    if n_samples < FRAME_LENGTH {
        return Err(FbankError::TooShort { samples: n_samples });
    }
    Ok((n_samples - FRAME_LENGTH) / FRAME_SHIFT + 1)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn mel_points() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(LOW_FREQ), hz_to_mel(HIGH_FREQ));
    let step = (hi - lo) / (NUM_MEL_BINS + 1) as f64;
    (0..NUM_MEL_BINS + 2).map(|i| lo + step * i as f64).collect()
}

/// Center frequency in Hz of each mel filter.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_points()[1..=NUM_MEL_BINS].iter().map(|&m| mel_to_hz(m)).collect()
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

struct Extractor {
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl Extractor {
    fn new() -> Self {
        let n = FRAME_LENGTH as f64;
        let window = (0..FRAME_LENGTH)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1.0)).cos())
            .collect();

        // triangles are linear on the mel axis
        let pts = mel_points();
        let bin_mel: Vec<f64> = (0..=FFT_SIZE / 2)
            .map(|k| hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64))
            .collect();
        let filters = (0..NUM_MEL_BINS)
            .map(|j| {
                let (left, center, right) = (pts[j], pts[j + 1], pts[j + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for (k, &m) in bin_mel.iter().enumerate() {
                    let w = if m > left && m < center {
                        (m - left) / (center - left)
                    } else if m >= center && m < right {
                        (right - m) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                MelFilter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Extractor { window, filters, fft }
    }

    fn log_mel(&self, samples: &[f32]) -> Result<Vec<f32>, FbankError> {
        let frames = frame_count(samples.len())?;
        let mut out = Vec::with_capacity(frames * NUM_MEL_BINS);
        let mut buf = vec![Complex::new(0.0f64, 0.0); FFT_SIZE];
        let mut power = vec![0f64; FFT_SIZE / 2 + 1];
        for f in 0..frames {
            let frame = &samples[f * FRAME_SHIFT..f * FRAME_SHIFT + FRAME_LENGTH];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < FRAME_LENGTH {
                    let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                    let v = frame[i] as f64 - PREEMPHASIS * prev as f64;
                    Complex::new(v * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filter in &self.filters {
                let energy: f64 = filter
                    .weights
                    .iter()
                    .zip(&power[filter.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                out.push(energy.max(LOG_FLOOR).ln() as f32);
            }
        }
        Ok(out)
    }
}

fn extractor() -> &'static Extractor {
    static EXTRACTOR: OnceLock<Extractor> = OnceLock::new();
    EXTRACTOR.get_or_init(Extractor::new)
}

/// Log-mel energies without mean normalization, `[T, 80]`.
pub fn compute_log_mel(w: &Waveform) -> Result<FbankFeatures, FbankError> {
    let data = extractor().log_mel(w.samples())?;
    let t = data.len() / NUM_MEL_BINS;
    Ok(FbankFeatures {
        frames: Tensor::new(vec![t, NUM_MEL_BINS], data).expect("fbank shape"),
    })
}

/// 80-bin log-mel features with per-utterance mean subtraction per bin.
pub fn compute_fbank(w: &Waveform) -> Result<FbankFeatures, FbankError> {
    let mut feats = compute_log_mel(w)?;
    let t = feats.num_frames();
    let mut means = [0f64; NUM_MEL_BINS];
    for row in feats.frames.data().chunks(NUM_MEL_BINS) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut means {
        *m /= t as f64;
    }
    for row in feats.frames.data_mut().chunks_mut(NUM_MEL_BINS) {
        for (v, &m) in row.iter_mut().zip(&means) {
            *v = (*v as f64 - m) as f32;
        }
    }
    Ok(feats)
}

/// One frame per line, 80 space-separated decimals.
pub fn write_feature_text(feats: &FbankFeatures, mut out: impl Write) -> io::Result<()> {
    for row in feats.frames.data().chunks(NUM_MEL_BINS) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(16000), Ok(98));
        assert_eq!(frame_count(400), Ok(1));
        assert_eq!(frame_count(399), Err(FbankError::TooShort { samples: 399 }));
        assert_eq!(frame_count(32000), Ok(198));
    }

    #[test]
    fn silence_normalizes_to_zero() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let raw = compute_log_mel(&w).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(raw.frames.data().iter().all(|&v| v == floor));
        let f = compute_fbank(&w).unwrap();
        assert_eq!(f.frames.shape(), &[98, 80]);
        assert!(f.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_seconds_shape() {
        let f = compute_fbank(&tone(440.0, 0.3, 32000)).unwrap();
        assert_eq!(f.frames.shape(), &[198, 80]);
    }

    #[test]
    fn one_khz_tone_peaks_at_nearest_filter() {
        // independent mel centers: 82 equally spaced mel points over 20..7600 Hz
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let (lo, hi) = (mel(20.0), mel(7600.0));
        let nearest = (0..80)
            .map(|j| {
                let m = lo + (hi - lo) * (j + 1) as f64 / 81.0;
                (j, (700.0 * (10f64.powf(m / 2595.0) - 1.0) - 1000.0).abs())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        let raw = compute_log_mel(&tone(1000.0, 0.5, 16000)).unwrap();
        for row in raw.frames.data().chunks(80) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn too_short_propagates() {
        let w = Waveform::new(vec![0.1; 399], SAMPLE_RATE).unwrap();
        assert_eq!(compute_fbank(&w), Err(FbankError::TooShort { samples: 399 }));
    }

    #[test]
    fn feature_text_has_80_columns() {
        let f = compute_fbank(&tone(300.0, 0.2, 800)).unwrap();
        let mut buf = Vec::new();
        write_feature_text(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split(' ').count() == 80));
    }
}
