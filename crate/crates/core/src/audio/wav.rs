use thiserror::Error;

/// The only accepted sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    BadMagic,
    #[error("missing '{0}' chunk")]
    MissingChunk(&'static str),
    #[error("unsupported format code {0} (only PCM = 1)")]
    UnsupportedFormat(u16),
    #[error("unsupported channel count {0} (only mono)")]
    UnsupportedChannelCount(u16),
    #[error("unsupported sample rate {0} Hz (only 16000)")]
    UnsupportedSampleRate(u32),
    #[error("unsupported bit depth {0} (only 16)")]
    UnsupportedBitDepth(u16),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("no audio samples")]
    Empty,
}

/// Mono audio at 16 kHz with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, WavError> {
        if sample_rate != SAMPLE_RATE {
            return Err(WavError::UnsupportedSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(WavError::Empty);
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode a 16 kHz, 16-bit, mono PCM RIFF/WAVE file. Chunks other than
/// `fmt ` and `data` are skipped.
pub fn read_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadMagic);
    }
    let mut pos = 12;
    let mut format_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::Truncated("fmt chunk"));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(WavError::UnsupportedFormat(format));
                }
                if channels != 1 {
                    return Err(WavError::UnsupportedChannelCount(channels));
                }
                if rate != SAMPLE_RATE {
                    return Err(WavError::UnsupportedSampleRate(rate));
                }
                if bits != 16 {
                    return Err(WavError::UnsupportedBitDepth(bits));
                }
                format_seen = true;
            }
            b"data" => {
                if !format_seen {
                    return Err(WavError::MissingChunk("fmt "));
                }
                if body + size > bytes.len() || size % 2 != 0 {
                    return Err(WavError::Truncated("data chunk"));
                }
                let samples: Vec<f32> = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Waveform::new(samples, SAMPLE_RATE);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    if format_seen {
        Err(WavError::MissingChunk("data"))
    } else {
        Err(WavError::MissingChunk("fmt "))
    }
}

/// Canonical 44-byte-header mono 16-bit PCM file at 16 kHz.
pub fn encode_wav(samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_fmt(format: u16, channels: u16, rate: u32, bits: u16) -> Vec<u8> {
        let mut b = encode_wav(&[0, 0]);
        b[20..22].copy_from_slice(&format.to_le_bytes());
        b[22..24].copy_from_slice(&channels.to_le_bytes());
        b[24..28].copy_from_slice(&rate.to_le_bytes());
        b[34..36].copy_from_slice(&bits.to_le_bytes());
        b
    }

    #[test]
    fn decodes_extreme_samples() {
        let w = read_wav(&encode_wav(&[32767])).unwrap();
        assert_eq!(w.samples(), &[32767.0 / 32768.0]);
        assert!((w.samples()[0] - 0.99996948).abs() < 1e-8);
        let w = read_wav(&encode_wav(&[-32768])).unwrap();
        assert_eq!(w.samples(), &[-1.0]);
    }

    #[test]
    fn rejects_each_header_violation_distinctly() {
        assert_eq!(read_wav(&with_fmt(1, 2, 16000, 16)), Err(WavError::UnsupportedChannelCount(2)));
        assert_eq!(read_wav(&with_fmt(3, 1, 16000, 16)), Err(WavError::UnsupportedFormat(3)));
        assert_eq!(read_wav(&with_fmt(1, 1, 8000, 16)), Err(WavError::UnsupportedSampleRate(8000)));
        assert_eq!(read_wav(&with_fmt(1, 1, 16000, 24)), Err(WavError::UnsupportedBitDepth(24)));
        let mut b = encode_wav(&[1]);
        b[0] = b'X';
        assert_eq!(read_wav(&b), Err(WavError::BadMagic));
        assert_eq!(read_wav(b"RIFF"), Err(WavError::BadMagic));
    }

    #[test]
    fn rejects_truncated_data() {
        let b = encode_wav(&[1, 2, 3, 4]);
        assert_eq!(read_wav(&b[..b.len() - 3]), Err(WavError::Truncated("data chunk")));
        assert_eq!(read_wav(&b[..36]), Err(WavError::MissingChunk("data")));
        assert_eq!(read_wav(&encode_wav(&[])), Err(WavError::Empty));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = encode_wav(&[5, -5, 7]);
        let mut b = plain[..12].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&plain[12..]);
        assert_eq!(read_wav(&b).unwrap(), read_wav(&plain).unwrap());
    }
}
