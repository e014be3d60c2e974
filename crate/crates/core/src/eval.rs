//! Cosine back-end, detection metrics and AAM-Softmax loss value.
//!
//! Decision rule for both metrics: a trial is accepted when its score is
//! `>= threshold`. Hence at threshold `θ` the miss rate counts target
//! scores `< θ` and the false-alarm rate counts non-target scores `>= θ`.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no {0} scores")]
    Empty(&'static str),
    #[error("non-finite score")]
    NonFinite,
    #[error("zero-norm vector cannot be scored")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid detection cost parameters: {0}")]
    InvalidCost(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown utterance '{0}'")]
    UnknownUtterance(String),
    #[error("no trial label for pair '{0}' '{1}'")]
    UnlabeledScore(String, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialScores {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl TrialScores {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        TrialScores { target, nontarget }
    }

    fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(EvalError::Empty("target"));
        }
        if self.nontarget.is_empty() {
            return Err(EvalError::Empty("non-target"));
        }
        if self.target.iter().chain(&self.nontarget).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(())
    }

    /// Sorted distinct scores over both classes.
    fn thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.target.iter().chain(&self.nontarget).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

struct ErrorRates {
    sorted_target: Vec<f64>,
    sorted_nontarget: Vec<f64>,
}

impl ErrorRates {
    fn new(t: &TrialScores) -> Self {
        let mut sorted_target = t.target.clone();
        let mut sorted_nontarget = t.nontarget.clone();
        sorted_target.sort_by(f64::total_cmp);
        sorted_nontarget.sort_by(f64::total_cmp);
        ErrorRates { sorted_target, sorted_nontarget }
    }

    /// `(P_miss, P_fa)` at `threshold`.
    fn at(&self, threshold: f64) -> (f64, f64) {
        let miss = self.sorted_target.partition_point(|&s| s < threshold);
        let below = self.sorted_nontarget.partition_point(|&s| s < threshold);
        (
            miss as f64 / self.sorted_target.len() as f64,
            (self.sorted_nontarget.len() - below) as f64 / self.sorted_nontarget.len() as f64,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate over a sweep of every distinct score (plus `+inf`).
/// When miss and false-alarm rates do not meet at a sweep point, the two
/// curves are linearly interpolated between the bracketing points.
pub fn compute_eer(t: &TrialScores) -> Result<EerResult> {
    t.validate()?;
    let rates = ErrorRates::new(t);
    let mut points: Vec<(f64, f64, f64)> = t
        .thresholds()
        .into_iter()
        .map(|th| {
            let (frr, far) = rates.at(th);
            (th, frr, far)
        })
        .collect();
    points.push((f64::INFINITY, 1.0, 0.0));

    let j = points.iter().position(|&(_, frr, far)| frr >= far).expect("+inf sentinel crosses");
    let (tb, frr_b, far_b) = points[j];
    if frr_b == far_b || j == 0 {
        return Ok(EerResult { eer: frr_b, threshold: tb });
    }
    let (ta, frr_a, far_a) = points[j - 1];
    let gap_a = far_a - frr_a;
    let gap_b = far_b - frr_b;
    let lambda = gap_a / (gap_a - gap_b);
    let eer = frr_a + lambda * (frr_b - frr_a);
    let threshold = if tb.is_finite() { ta + lambda * (tb - ta) } else { ta };
    Ok(EerResult { eer, threshold })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_target) || !(self.c_miss >= 0.0) || !(self.c_fa >= 0.0) {
            return Err(EvalError::InvalidCost(format!("{self:?}")));
        }
        Ok(())
    }

    /// Cost of the best trivial system; degenerate priors give zero and
    /// the cost is then reported unnormalized.
    fn normalizer(&self) -> f64 {
        let n = (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target));
        if n > 0.0 {
            n
        } else {
            1.0
        }
    }

    fn raw_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa
    }
}

/// Normalized detection cost at one threshold.
pub fn detection_cost(t: &TrialScores, threshold: f64, p: &DcfParams) -> Result<f64> {
    t.validate()?;
    p.validate()?;
    let (miss, fa) = ErrorRates::new(t).at(threshold);
    Ok(p.raw_cost(miss, fa) / p.normalizer())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfResult {
    pub min_dcf: f64,
    pub threshold: f64,
}

/// Minimum normalized detection cost over `-inf`, every distinct score and
/// `+inf`.
pub fn compute_min_dcf(t: &TrialScores, p: &DcfParams) -> Result<DcfResult> {
    t.validate()?;
    p.validate()?;
    let rates = ErrorRates::new(t);
    let norm = p.normalizer();
    let mut best = DcfResult { min_dcf: f64::INFINITY, threshold: f64::NEG_INFINITY };
    let sweep = std::iter::once(f64::NEG_INFINITY)
        .chain(t.thresholds())
        .chain(std::iter::once(f64::INFINITY));
    for th in sweep {
        let (miss, fa) = rates.at(th);
        let cost = p.raw_cost(miss, fa) / norm;
        if cost < best.min_dcf {
            best = DcfResult { min_dcf: cost, threshold: th };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    /// `[num_classes, dim]`
    pub class_weights: Tensor,
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    Ok(v.iter().map(|&x| x as f64 / n).collect())
}

/// Forward value of the additive angular margin softmax loss.
///
/// The target logit is `cos(θ + m)`; once `θ + m > π` it falls back to the
/// first-order form `cos θ − m·sin θ`.
pub fn aam_softmax_loss(e: &[f32], label: usize, cfg: &AamConfig) -> Result<f64> {
    let (classes, dim) = cfg.class_weights.dims2("aam_softmax_loss").map_err(|_| EvalError::Dimension(0, e.len()))?;
    if label >= classes {
        return Err(EvalError::LabelOutOfRange { label, classes });
    }
    if dim != e.len() {
        return Err(EvalError::Dimension(dim, e.len()));
    }
    let e_hat = unit(e)?;
    let mut logits = Vec::with_capacity(classes);
    for j in 0..classes {
        let w_hat = unit(cfg.class_weights.row(j))?;
        let cos = e_hat.iter().zip(&w_hat).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
        let logit = if j == label {
            let theta = cos.acos();
            if theta + cfg.margin <= std::f64::consts::PI {
                (theta + cfg.margin).cos()
            } else {
                cos - cfg.margin * theta.sin()
            }
        } else {
            cos
        };
        logits.push(cfg.scale * logit);
    }
    let (arg_max, max) = logits
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg_max)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    Ok((max - logits[label]) + rest.ln_1p())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// `<enroll-id> <test-id> <target|nontarget>` per line.
pub fn read_trials(input: impl BufRead) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |reason: String| EvalError::Parse { line: n + 1, reason };
        let [enroll, test, label] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let target = match label {
            "target" => true,
            "nontarget" => false,
            other => return Err(err(format!("label must be target or nontarget, got '{other}'"))),
        };
        out.push(Trial { enroll: enroll.into(), test: test.into(), target });
    }
    Ok(out)
}

/// `<enroll-id> <test-id> <score>` per line.
pub fn read_scores(input: impl BufRead) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |reason: String| EvalError::Parse { line: n + 1, reason };
        let [enroll, test, score] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let score: f64 = score.parse().map_err(|e| err(format!("bad score '{score}': {e}")))?;
        if !score.is_finite() {
            return Err(err("score must be finite".into()));
        }
        out.push(ScoredTrial { enroll: enroll.into(), test: test.into(), score });
    }
    Ok(out)
}

pub fn write_scores(scores: &[ScoredTrial], mut out: impl Write) -> io::Result<()> {
    for s in scores {
        writeln!(out, "{} {} {:.8}", s.enroll, s.test, s.score)?;
    }
    Ok(())
}

/// Cosine-score every trial, in trial order.
pub fn score_trials(trials: &[Trial], embeddings: &HashMap<String, Vec<f32>>) -> Result<Vec<ScoredTrial>> {
    trials
        .iter()
        .map(|t| {
            let a = embeddings.get(&t.enroll).ok_or_else(|| EvalError::UnknownUtterance(t.enroll.clone()))?;
            let b = embeddings.get(&t.test).ok_or_else(|| EvalError::UnknownUtterance(t.test.clone()))?;
            Ok(ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine_score(a, b)?,
            })
        })
        .collect()
}

/// Split scores into target / non-target using the trial labels.
pub fn label_scores(scores: &[ScoredTrial], trials: &[Trial]) -> Result<TrialScores> {
    let labels: HashMap<(&str, &str), bool> = trials
        .iter()
        .map(|t| ((t.enroll.as_str(), t.test.as_str()), t.target))
        .collect();
    let mut out = TrialScores::default();
    for s in scores {
        match labels.get(&(s.enroll.as_str(), s.test.as_str())) {
            Some(true) => out.target.push(s.score),
            Some(false) => out.nontarget.push(s.score),
            None => return Err(EvalError::UnlabeledScore(s.enroll.clone(), s.test.clone())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> TrialScores {
        TrialScores::new(vec![0.6, 0.2], vec![0.4, 0.1])
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3f32, -1.2, 2.0];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]), Err(EvalError::ZeroNorm)));
        assert!(matches!(cosine_score(&[1.0], &[1.0, 1.0]), Err(EvalError::Dimension(1, 2))));
    }

    #[test]
    fn eer_examples() {
        let sep = TrialScores::new(vec![0.9, 0.8], vec![0.1, 0.2]);
        assert_eq!(compute_eer(&sep).unwrap().eer, 0.0);
        let r = compute_eer(&hand()).unwrap();
        assert_eq!(r.eer, 0.5);
        assert!(r.threshold > 0.2 && r.threshold <= 0.4);
        let same = TrialScores::new(vec![0.1, 0.5, 0.7], vec![0.7, 0.1, 0.5]);
        assert_eq!(compute_eer(&same).unwrap().eer, 0.5);
        let single = TrialScores::new(vec![0.3], vec![0.3]);
        assert_eq!(compute_eer(&single).unwrap().eer, 0.5);
        assert!(matches!(compute_eer(&TrialScores::new(vec![], vec![0.1])), Err(EvalError::Empty("target"))));
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        let sep = TrialScores::new(vec![0.9, 0.8], vec![0.1, 0.2]);
        assert_eq!(compute_min_dcf(&sep, &p).unwrap().min_dcf, 0.0);
        let r = compute_min_dcf(&hand(), &p).unwrap();
        assert!((r.min_dcf - 0.5).abs() < 1e-12);
        assert!(r.threshold > 0.4 && r.threshold <= 0.6);
        let degenerate = DcfParams { p_target: 1.0, ..p };
        assert_eq!(compute_min_dcf(&hand(), &degenerate).unwrap().min_dcf, 0.0);
        assert!(compute_min_dcf(&hand(), &DcfParams { p_target: 1.5, ..p }).is_err());
        assert!(matches!(compute_min_dcf(&TrialScores::new(vec![0.1], vec![]), &p), Err(EvalError::Empty(_))));
    }

    fn aam(margin: f64, scale: f64, w: Tensor) -> AamConfig {
        AamConfig { margin, scale, class_weights: w }
    }

    #[test]
    fn aam_examples() {
        let e = [0.6f32, 0.8];
        let one = aam(0.2, 32.0, Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        assert_eq!(aam_softmax_loss(&e, 0, &one).unwrap(), 0.0);

        let w = Tensor::new(vec![2, 2], vec![0.6, 0.8, -0.8, 0.6]).unwrap();
        let loss = aam_softmax_loss(&e, 0, &aam(0.0, 1.0, w.clone())).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-8);
        assert!((loss - 0.31326).abs() < 1e-5);

        let loss = aam_softmax_loss(&e, 0, &aam(0.2, 32.0, w.clone())).unwrap();
        let want = (-32.0 * 0.2f64.cos()).exp().ln_1p();
        assert!((loss - want).abs() < 1e-10 && loss.abs() < 1e-10);

        assert!(matches!(aam_softmax_loss(&e, 2, &aam(0.2, 32.0, w)), Err(EvalError::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn aam_margin_fallback_past_pi() {
        // θ = π (opposite), m = 0.2: fallback cos θ − m sin θ = −1
        let w = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = aam_softmax_loss(&[1.0, 0.0], 0, &aam(0.2, 1.0, w)).unwrap();
        let want = 1.0 + (-1.0f64).exp().ln_1p();
        assert!((loss - want).abs() < 1e-9);
    }

    #[test]
    fn trial_and_score_files() {
        let trials = read_trials(&b"a b target\n\na c nontarget\n"[..]).unwrap();
        assert_eq!(trials.len(), 2);
        assert!(read_trials(&b"a b maybe\n"[..]).is_err());
        assert!(read_trials(&b"a b\n"[..]).is_err());

        let mut emb = HashMap::new();
        emb.insert("a".to_string(), vec![1.0f32, 0.0]);
        emb.insert("b".to_string(), vec![1.0f32, 0.0]);
        emb.insert("c".to_string(), vec![0.0f32, 1.0]);
        let scores = score_trials(&trials, &emb).unwrap();
        let mut buf = Vec::new();
        write_scores(&scores, &mut buf).unwrap();
        let back = read_scores(&buf[..]).unwrap();
        assert_eq!(back, scores);
        let labeled = label_scores(&back, &trials).unwrap();
        assert_eq!(labeled, TrialScores::new(vec![1.0], vec![0.0]));

        let missing = [Trial { enroll: "a".into(), test: "zz".into(), target: true }];
        assert!(matches!(score_trials(&missing, &emb), Err(EvalError::UnknownUtterance(u)) if u == "zz"));
        assert!(matches!(label_scores(&back, &trials[..1]), Err(EvalError::UnlabeledScore(..))));
    }
}
