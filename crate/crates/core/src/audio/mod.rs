//! PCM-WAV decoding and log-mel filterbank features.

mod fbank;
mod wav;

pub use fbank::{
    compute_fbank, compute_log_mel, frame_count, mel_center_frequencies, write_feature_text, FbankError,
    FbankFeatures, FRAME_LENGTH, FRAME_SHIFT, NUM_MEL_BINS,
};
pub use wav::{encode_wav, read_wav, WavError, Waveform, SAMPLE_RATE};
