//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::audio::{compute_fbank, read_wav, write_feature_text};
use crate::config::ModelConfig;
use crate::embedder::{index_embeddings, read_embeddings, write_embeddings, Embedding};
use crate::error::Error;
use crate::eval::{compute_eer, compute_min_dcf, label_scores, read_scores, read_trials, score_trials, write_scores, DcfParams};
use crate::model::{extract_embedding, init_weights, LightCam};
use crate::profile::{count_params, measure_rtf, synthetic_waveform, ProfileReport, FRAMES_PER_SECOND, REFERENCE_RTF};
use crate::weights::{load_weights, save_weights, WeightStore};

#[derive(Parser, Debug)]
#[command(name = "lightcam", version, about = "Speaker embedding extraction, scoring and profiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministically initialized weight file.
    Init {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Flat TOML config; defaults to the reference architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept configs that change the pinned architecture constants.
        #[arg(long = "override")]
        allow_override: bool,
    },
    /// Embed WAV files, one output line per input in input order.
    Extract {
        model: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        threads: u16,
        #[arg(long = "override")]
        allow_override: bool,
    },
    /// Cosine-score a trial list against embedding files.
    Score {
        #[arg(required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and MinDCF of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
    },
    /// Parameter and FLOPs report.
    Profile {
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = FRAMES_PER_SECOND as u32, value_parser = clap::value_parser!(u32).range(1..))]
        frames: u32,
        /// Machine-readable report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override")]
        allow_override: bool,
    },
    /// Single-thread real-time factor on a synthetic waveform.
    Bench {
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override")]
        allow_override: bool,
    },
    /// Dump mean-normalized log-mel features as text.
    Fbank {
        wav: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().ansi().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Init { seed, out, config, allow_override } => {
            let cfg = load_config(config.as_deref(), allow_override)?;
            fs::write(&out, save_weights(&init_weights(&cfg, seed)))?;
            writeln!(stdout, "wrote {}", out.display())?;
            Ok(())
        }
        Command::Extract { model, wavs, out, threads, allow_override } => {
            let model = load_model(&model, allow_override)?;
            let list = extract_all(&model, &wavs, threads as usize)?;
            emit(out.as_deref(), stdout, |w| write_embeddings(&list, w))
        }
        Command::Score { embeddings, trials, out } => {
            let mut all = Vec::new();
            for path in &embeddings {
                all.extend(read_embeddings(BufReader::new(open(path)?))?);
            }
            let index = index_embeddings(all)?;
            let trials = read_trials(BufReader::new(open(&trials)?))?;
            let scores = score_trials(&trials, &index)?;
            emit(out.as_deref(), stdout, |w| write_scores(&scores, w))
        }
        Command::Eval { scores, trials, p_target } => {
            let scores = read_scores(BufReader::new(open(&scores)?))?;
            let trials = read_trials(BufReader::new(open(&trials)?))?;
            let labeled = label_scores(&scores, &trials)?;
            let eer = compute_eer(&labeled)?;
            let dcf = compute_min_dcf(&labeled, &DcfParams { p_target, ..DcfParams::default() })?;
            writeln!(stdout, "trials: {} target, {} nontarget", labeled.target.len(), labeled.nontarget.len())?;
            writeln!(stdout, "EER: {:.6} ({:.4}%) at threshold {:.6}", eer.eer, 100.0 * eer.eer, eer.threshold)?;
            writeln!(stdout, "MinDCF(p_target={p_target}): {:.6} at threshold {:.6}", dcf.min_dcf, dcf.threshold)?;
            Ok(())
        }
        Command::Profile { model, config, frames, out, allow_override } => {
            let cfg = match &model {
                Some(path) => {
                    if config.is_some() {
                        return Err(Failure::Usage("give either a model file or --config, not both".into()));
                    }
                    let ws = read_store(path)?;
                    let m = LightCam::from_store(&ws, allow_override)?;
                    let report = ProfileReport::new(m.config(), frames as usize);
                    let (stored, _) = count_params(&ws);
                    if stored != report.total_params {
                        return Err(Error::Layout(format!("stored scalars {stored} disagree with analytic count {}", report.total_params)).into());
                    }
                    m.config().clone()
                }
                None => load_config(config.as_deref(), allow_override)?,
            };
            let report = ProfileReport::new(&cfg, frames as usize);
            write!(stdout, "{}", report.to_text())?;
            if let Some(path) = out {
                fs::write(path, report.to_json())?;
            }
            Ok(())
        }
        Command::Bench { model, seed, duration, repetitions, threads, config, allow_override } => {
            if threads != 1 {
                return Err(Failure::Usage("bench runs single-threaded only; use --threads 1".into()));
            }
            if !(duration > 0.0 && duration.is_finite()) || repetitions == 0 {
                return Err(Failure::Usage("--duration must be positive and --repetitions at least 1".into()));
            }
            let model = match &model {
                Some(path) => load_model(path, allow_override)?,
                None => {
                    let cfg = load_config(config.as_deref(), allow_override)?;
                    LightCam::from_store(&init_weights(&cfg, seed), allow_override)?
                }
            };
            let wav = synthetic_waveform(duration, seed);
            let stats = measure_rtf(&model, &wav, repetitions)?;
            writeln!(stdout, "audio: {:.2} s synthetic, threads: 1, repetitions: {}", stats.audio_secs, stats.repetitions)?;
            writeln!(stdout, "median time: {:.4} s", stats.median_secs)?;
            writeln!(stdout, "RTF (median): {:.5}", stats.rtf)?;
            writeln!(stdout, "RTF spread: min {:.5}, max {:.5}", stats.rtf_min, stats.rtf_max)?;
            writeln!(stdout, "reference RTF: {REFERENCE_RTF} (published figure, hardware-dependent, not compared)")?;
            Ok(())
        }
        Command::Fbank { wav, out } => {
            let feats = compute_fbank(&read_wav(&read(&wav)?)?)?;
            emit(out.as_deref(), stdout, |w| write_feature_text(&feats, w))
        }
    }
}

fn open(path: &Path) -> Result<fs::File, Error> {
    fs::File::open(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn read_store(path: &Path) -> Result<WeightStore, Error> {
    Ok(load_weights(&read(path)?)?)
}

fn load_model(path: &Path, allow_override: bool) -> Result<LightCam, Error> {
    LightCam::from_store(&read_store(path)?, allow_override)
}

fn load_config(path: Option<&Path>, allow_override: bool) -> Result<ModelConfig, Error> {
    let cfg = match path {
        Some(p) => ModelConfig::from_toml_file(p)?,
        None => ModelConfig::default(),
    };
    cfg.validate(allow_override)?;
    Ok(cfg)
}

fn emit(path: Option<&Path>, stdout: &mut dyn Write, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Outcome {
    match path {
        Some(p) => {
            let mut f = io::BufWriter::new(fs::File::create(p)?);
            body(&mut f)?;
            f.flush()?;
        }
        None => body(stdout)?,
    }
    Ok(())
}

fn utterance_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Embed every file; `threads` workers take inputs round-robin and results
/// are returned in input order.
fn extract_all(model: &LightCam, wavs: &[PathBuf], threads: usize) -> Result<Vec<Embedding>, Error> {
    let one = |path: &PathBuf| -> Result<Embedding, Error> {
        let id = utterance_id(path);
        let bytes = read(path).map_err(|e| e.for_utterance(&id))?;
        extract_embedding(&bytes, &id, model)
    };
    let workers = threads.min(wavs.len()).max(1);
    let mut slots: Vec<Option<Result<Embedding, Error>>> = (0..wavs.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, path) in slots.iter_mut().zip(wavs) {
            *slot = Some(one(path));
        }
    } else {
        let done: Vec<Vec<(usize, Result<Embedding, Error>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let one = &one;
                    s.spawn(move || (w..wavs.len()).step_by(workers).map(|i| (i, one(&wavs[i]))).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("extract worker panicked")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
    }
    slots.into_iter().map(|s| s.expect("every input processed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("lightcam").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["frobnicate"]).0, 1);
        assert_eq!(run_args(&["init", "--seed", "1"]).0, 1);
        let (code, _, err) = run_args(&["bench", "--threads", "4"]);
        assert_eq!(code, 1);
        assert!(err.contains("single-threaded"));
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("extract"));
    }

    #[test]
    fn data_errors_exit_two() {
        let (code, _, err) = run_args(&["fbank", "/nonexistent/x.wav"]);
        assert_eq!(code, 2);
        assert!(err.contains("/nonexistent/x.wav"));
    }

    #[test]
    fn profile_default_config() {
        let (code, out, _) = run_args(&["profile"]);
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("params:"));
    }
}
