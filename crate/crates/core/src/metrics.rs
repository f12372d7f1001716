//! Evaluation metrics over run records and explanations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::{Label, QaInstance};
use crate::prompting::{answer_likelihood_prefix, answer_scoring_prefix};
use crate::selfexplain::RunRecord;

/// Number of equal-width confidence bins used for ECE.
pub const ECE_BINS: usize = 10;
/// Width of length-histogram bins, in tokens.
pub const LENGTH_BIN_WIDTH: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}: input is empty")]
    Empty(&'static str),
    #[error("selection bias needs 4 options per instance, `{id}` has {found}")]
    Arity { id: String, found: usize },
    #[error("option confidences for `{id}` are not normalized (sum {sum})")]
    NotNormalized { id: String, sum: f64 },
    #[error("option confidences disagree on labels: `{id}` has {found:?}, expected {expected:?}")]
    LabelMismatch {
        id: String,
        found: Vec<Label>,
        expected: Vec<Label>,
    },
    #[error("record sets differ; only in self: [{}]; only in human: [{}]", only_self.join(", "), only_human.join(", "))]
    IdMismatch {
        only_self: Vec<String>,
        only_human: Vec<String>,
    },
    #[error("duplicate record for instance `{0}`")]
    DuplicateRecord(String),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("scoring `{id}`: {source}")]
    Scoring {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MetricsError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            MetricsError::Scoring { source, .. } => Some(source),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------- accuracy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub n: usize,
    pub correct: usize,
    pub parse_failures: usize,
    pub accuracy: f64,
}

/// Fraction of correct records; parse failures count as incorrect.
pub fn accuracy(records: &[RunRecord]) -> Result<f64, MetricsError> {
    accuracy_summary(records).map(|s| s.accuracy)
}

pub fn accuracy_summary(records: &[RunRecord]) -> Result<AccuracySummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty("accuracy"));
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(AccuracySummary {
        n: records.len(),
        correct,
        parse_failures: records.iter().filter(|r| !r.parsed.is_ok()).count(),
        accuracy: correct as f64 / records.len() as f64,
    })
}

// ------------------------------------------------------ option confidences

/// Per-option confidence for one instance. `q` is normalized to sum to one;
/// `raw` keeps the unnormalized probabilities exp(sum_logprob).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionConfidences {
    pub instance_id: String,
    pub labels: Vec<Label>,
    pub q: Vec<f64>,
    pub raw: Vec<f64>,
}

impl OptionConfidences {
    /// Normalizes label log-probabilities with a shifted softmax, so even
    /// very small probabilities do not underflow to an all-zero vector.
    pub fn from_logprobs(instance_id: &str, labels: Vec<Label>, logprobs: &[f64]) -> Self {
        let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = logprobs.iter().map(|lp| (lp - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        OptionConfidences {
            instance_id: instance_id.to_string(),
            labels,
            q: shifted.iter().map(|p| p / total).collect(),
            raw: logprobs.iter().map(|lp| lp.exp()).collect(),
        }
    }
}

/// Scores every option label after `prompt_prefix`, which must end at an
/// `Answer:` slot, and normalizes the label probabilities.
pub fn option_confidences(
    instance: &QaInstance,
    prompt_prefix: &str,
    backend: &Backend,
) -> Result<OptionConfidences, MetricsError> {
    let prefix = answer_scoring_prefix(prompt_prefix, None);
    let labels: Vec<Label> = instance.labels().cloned().collect();
    let mut logprobs = Vec::with_capacity(labels.len());
    for label in &labels {
        let score = backend
            .score_continuation(&prefix, label.as_str())
            .map_err(|source| MetricsError::Scoring {
                id: instance.id.clone(),
                source,
            })?;
        logprobs.push(score.sum_logprob);
    }
    Ok(OptionConfidences::from_logprobs(
        &instance.id,
        labels,
        &logprobs,
    ))
}

/// Per-option mean of `q` over a set of instances sharing one label order.
pub fn mean_option_confidence(confidences: &[OptionConfidences]) -> Result<Vec<f64>, MetricsError> {
    let first = confidences
        .first()
        .ok_or(MetricsError::Empty("option confidences"))?;
    let mut sums = vec![0.0; first.q.len()];
    for c in confidences {
        if c.labels != first.labels || c.q.len() != c.labels.len() {
            return Err(MetricsError::LabelMismatch {
                id: c.instance_id.clone(),
                found: c.labels.clone(),
                expected: first.labels.clone(),
            });
        }
        let sum: f64 = c.q.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || c.q.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(MetricsError::NotNormalized {
                id: c.instance_id.clone(),
                sum,
            });
        }
        for (acc, q) in sums.iter_mut().zip(&c.q) {
            *acc += q;
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| s / confidences.len() as f64)
        .collect())
}

/// (1/4) * sum |q_i - 1/4| of an averaged 4-option confidence vector.
pub fn bias_of_mean(q_bar: &[f64; 4]) -> f64 {
    q_bar.iter().map(|q| (q - 0.25).abs()).sum::<f64>() / 4.0
}

/// Selection bias on a balanced 4-option set: confidences are averaged per
/// option first, then the deviation from uniform is measured.
pub fn selection_bias(confidences: &[OptionConfidences]) -> Result<f64, MetricsError> {
    if let Some(bad) = confidences.iter().find(|c| c.q.len() != 4) {
        return Err(MetricsError::Arity {
            id: bad.instance_id.clone(),
            found: bad.q.len(),
        });
    }
    let q_bar = mean_option_confidence(confidences)?;
    Ok(bias_of_mean(&[q_bar[0], q_bar[1], q_bar[2], q_bar[3]]))
}

// ------------------------------------------------------------- similarity

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

/// ROUGE-L with beta = 1. Scores involving an empty sequence are 0.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f = if lcs == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore {
        precision,
        recall,
        f,
    }
}

/// Anything that pulls domain terms out of text.
pub trait TermExtractor: Sync {
    fn extract(&self, text: &str) -> BTreeSet<String>;
}

/// Matches a fixed term list against tokenized text, preferring the longest
/// term at each position and never matching inside an accepted term.
#[derive(Debug, Clone)]
pub struct LexiconMatcher {
    /// Terms by first token, longest first.
    by_head: HashMap<String, Vec<(Vec<String>, String)>>,
}

impl LexiconMatcher {
    pub fn new<S: AsRef<str>>(terms: &[S]) -> Result<Self, MetricsError> {
        let mut by_head: HashMap<String, Vec<(Vec<String>, String)>> = HashMap::new();
        for (i, term) in terms.iter().enumerate() {
            let term = term.as_ref().trim();
            let bad = |message: &str| MetricsError::Lexicon {
                line: i + 1,
                message: message.to_string(),
            };
            if term.is_empty() {
                return Err(bad("empty term"));
            }
            if term.to_lowercase() != term {
                return Err(bad(&format!("term `{term}` is not lowercase")));
            }
            let tokens = tokenize(term);
            let Some(head) = tokens.first().cloned() else {
                return Err(bad(&format!("term `{term}` has no word characters")));
            };
            let canonical = tokens.join(" ");
            let bucket = by_head.entry(head).or_default();
            if !bucket.iter().any(|(_, c)| *c == canonical) {
                bucket.push((tokens, canonical));
            }
        }
        for bucket in by_head.values_mut() {
            bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        }
        Ok(LexiconMatcher { by_head })
    }

    /// Reads one lowercase term per line; blank lines and `#` comments are
    /// skipped.
    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut terms = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            LexiconMatcher::new(&[line]).map_err(|e| match e {
                MetricsError::Lexicon { message, .. } => MetricsError::Lexicon {
                    line: i + 1,
                    message,
                },
                other => other,
            })?;
            terms.push(line.to_string());
        }
        LexiconMatcher::new(&terms)
    }

    pub fn len(&self) -> usize {
        self.by_head.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_head.is_empty()
    }
}

impl TermExtractor for LexiconMatcher {
    fn extract(&self, text: &str) -> BTreeSet<String> {
        let tokens = tokenize(text);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.by_head.get(&tokens[i]).and_then(|bucket| {
                bucket
                    .iter()
                    .find(|(term, _)| tokens[i..].starts_with(term))
            });
            match hit {
                Some((term, canonical)) => {
                    found.insert(canonical.clone());
                    i += term.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

pub fn extract_terms(text: &str, extractor: &dyn TermExtractor) -> BTreeSet<String> {
    extractor.extract(text)
}

/// F1 between two term sets; two empty sets agree perfectly.
pub fn term_f1(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let common = a.intersection(b).count();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / a.len() as f64;
    let r = common as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower token count.
    pub lower: usize,
    /// Exclusive upper token count.
    pub upper: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub histogram: Vec<HistogramBin>,
}

pub fn length_stats<S: AsRef<str>>(texts: &[S]) -> Result<LengthStats, MetricsError> {
    let counts: Vec<usize> = texts.iter().map(|t| tokenize(t.as_ref()).len()).collect();
    length_stats_of_counts(&counts)
}

pub fn length_stats_of_counts(counts: &[usize]) -> Result<LengthStats, MetricsError> {
    if counts.is_empty() {
        return Err(MetricsError::Empty("length statistics"));
    }
    let (mean, stddev) = mean_std(counts.iter().map(|&c| c as f64));
    let max_bin = counts.iter().max().copied().unwrap_or(0) / LENGTH_BIN_WIDTH;
    let mut histogram: Vec<HistogramBin> = (0..=max_bin)
        .map(|b| HistogramBin {
            lower: b * LENGTH_BIN_WIDTH,
            upper: (b + 1) * LENGTH_BIN_WIDTH,
            count: 0,
        })
        .collect();
    for &c in counts {
        histogram[c / LENGTH_BIN_WIDTH].count += 1;
    }
    Ok(LengthStats {
        n: counts.len(),
        mean,
        stddev,
        histogram,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub instance_id: String,
    pub rouge_l: RougeScore,
    pub term_f1: Option<f64>,
    pub len_self: usize,
    pub len_human: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| {
            let (mean, stddev) = mean_std(values.iter().copied());
            MeanStd { mean, stddev }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairs: Vec<SimilarityPair>,
    pub rouge_precision: MeanStd,
    pub rouge_recall: MeanStd,
    pub rouge_f: MeanStd,
    /// Absent when no term extractor was supplied.
    pub term_f1: Option<MeanStd>,
    pub len_self: LengthStats,
    pub len_human: LengthStats,
}

/// One (self-explanation, human CoT) pair to compare.
#[derive(Debug, Clone, Copy)]
pub struct TextPair<'a> {
    pub instance_id: &'a str,
    pub self_text: &'a str,
    pub human_text: &'a str,
}

/// Compares self-explanations (candidates) against human CoTs (references).
pub fn similarity_report(
    pairs: &[TextPair<'_>],
    extractor: Option<&dyn TermExtractor>,
) -> Result<SimilarityReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("similarity"));
    }
    let scored: Vec<SimilarityPair> = pairs
        .iter()
        .map(|p| {
            let s = tokenize(p.self_text);
            let h = tokenize(p.human_text);
            SimilarityPair {
                instance_id: p.instance_id.to_string(),
                rouge_l: rouge_l(&s, &h),
                term_f1: extractor
                    .map(|x| term_f1(&x.extract(p.self_text), &x.extract(p.human_text))),
                len_self: s.len(),
                len_human: h.len(),
            }
        })
        .collect();
    let col = |f: fn(&SimilarityPair) -> f64| -> MeanStd {
        MeanStd::of(&scored.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    let term: Vec<f64> = scored.iter().filter_map(|p| p.term_f1).collect();
    Ok(SimilarityReport {
        rouge_precision: col(|p| p.rouge_l.precision),
        rouge_recall: col(|p| p.rouge_l.recall),
        rouge_f: col(|p| p.rouge_l.f),
        term_f1: MeanStd::of(&term),
        len_self: length_stats_of_counts(&scored.iter().map(|p| p.len_self).collect::<Vec<_>>())?,
        len_human: length_stats_of_counts(&scored.iter().map(|p| p.len_human).collect::<Vec<_>>())?,
        pairs: scored,
    })
}

// ------------------------------------------------------------ calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Expected calibration error over `ECE_BINS` equal-width bins on [0, 1].
/// A confidence of exactly 1 falls in the top bin.
pub fn expected_calibration_error(points: &[(f64, bool)]) -> Result<Calibration, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::Empty("calibration"));
    }
    let mut sums = vec![(0usize, 0usize, 0.0f64); ECE_BINS];
    for &(conf, correct) in points {
        let conf = conf.clamp(0.0, 1.0);
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        sums[b].0 += 1;
        sums[b].1 += correct as usize;
        sums[b].2 += conf;
    }
    let n = points.len() as f64;
    let mut ece = 0.0;
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, hits, conf_sum))| {
            let (accuracy, mean_confidence) = if count == 0 {
                (None, None)
            } else {
                let acc = hits as f64 / count as f64;
                let conf = conf_sum / count as f64;
                ece += count as f64 / n * (acc - conf).abs();
                (Some(acc), Some(conf))
            };
            CalibrationBin {
                lower: b as f64 / ECE_BINS as f64,
                upper: (b + 1) as f64 / ECE_BINS as f64,
                count,
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok(Calibration {
        n: points.len(),
        ece,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub count: usize,
    /// Mean of the per-record mean token logprob.
    pub mean_logprob: Option<f64>,
}

fn class_confidence<'a>(records: impl Iterator<Item = &'a RunRecord>) -> ClassConfidence {
    let mut count = 0;
    let mut logprobs = Vec::new();
    for r in records {
        count += 1;
        if let Some(c) = r.confidence {
            logprobs.push(c.mean_logprob);
        }
    }
    ClassConfidence {
        count,
        mean_logprob: (!logprobs.is_empty())
            .then(|| logprobs.iter().sum::<f64>() / logprobs.len() as f64),
    }
}

/// Accuracy and confidence summary of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracySummary,
    pub correct: ClassConfidence,
    pub incorrect: ClassConfidence,
    /// Records carrying a confidence score.
    pub scored: usize,
    /// Absent when no record carries a confidence score.
    pub calibration: Option<Calibration>,
}

pub fn eval_report(records: &[RunRecord]) -> Result<EvalReport, MetricsError> {
    let accuracy = accuracy_summary(records)?;
    let points: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.confidence.map(|c| (c.mean_logprob.exp(), r.correct)))
        .collect();
    Ok(EvalReport {
        accuracy,
        correct: class_confidence(records.iter().filter(|r| r.correct)),
        incorrect: class_confidence(records.iter().filter(|r| !r.correct)),
        scored: points.len(),
        calibration: (!points.is_empty())
            .then(|| expected_calibration_error(&points))
            .transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Agreement {
    #[serde(rename = "S_T&H_T")]
    BothTrue,
    #[serde(rename = "S_T&H_F")]
    SelfOnly,
    #[serde(rename = "S_F&H_T")]
    HumanOnly,
    #[serde(rename = "S_F&H_F")]
    BothFalse,
}

impl Agreement {
    pub const ALL: [Agreement; 4] = [
        Agreement::BothTrue,
        Agreement::SelfOnly,
        Agreement::HumanOnly,
        Agreement::BothFalse,
    ];

    pub fn of(self_correct: bool, human_correct: bool) -> Self {
        match (self_correct, human_correct) {
            (true, true) => Agreement::BothTrue,
            (true, false) => Agreement::SelfOnly,
            (false, true) => Agreement::HumanOnly,
            (false, false) => Agreement::BothFalse,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Agreement::BothTrue => "S_T&H_T",
            Agreement::SelfOnly => "S_T&H_F",
            Agreement::HumanOnly => "S_F&H_T",
            Agreement::BothFalse => "S_F&H_F",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub category: Agreement,
    pub count: usize,
    pub self_mean_logprob: Option<f64>,
    pub human_mean_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideCalibration {
    pub correct: ClassConfidence,
    pub incorrect: ClassConfidence,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_pairs: usize,
    pub categories: Vec<CategoryStat>,
    pub self_run: SideCalibration,
    pub human_run: SideCalibration,
}

fn index_by_id(records: &[RunRecord]) -> Result<BTreeMap<&str, &RunRecord>, MetricsError> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.instance_id.as_str(), r).is_some() {
            return Err(MetricsError::DuplicateRecord(r.instance_id.clone()));
        }
    }
    Ok(map)
}

fn side(records: &[&RunRecord]) -> Result<SideCalibration, MetricsError> {
    let points: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| r.confidence.map(|c| (c.mean_logprob.exp(), r.correct)))
        .collect();
    Ok(SideCalibration {
        correct: class_confidence(records.iter().copied().filter(|r| r.correct)),
        incorrect: class_confidence(records.iter().copied().filter(|r| !r.correct)),
        calibration: (!points.is_empty())
            .then(|| expected_calibration_error(&points))
            .transpose()?,
    })
}

/// Pairs two runs by instance id and breaks them down by which side answered
/// correctly, with confidence per category and per run.
pub fn agreement_report(
    records_self: &[RunRecord],
    records_human: &[RunRecord],
) -> Result<CalibrationReport, MetricsError> {
    let by_self = index_by_id(records_self)?;
    let by_human = index_by_id(records_human)?;
    let only_self: Vec<String> = by_self
        .keys()
        .filter(|k| !by_human.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let only_human: Vec<String> = by_human
        .keys()
        .filter(|k| !by_self.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !only_self.is_empty() || !only_human.is_empty() {
        return Err(MetricsError::IdMismatch {
            only_self,
            only_human,
        });
    }
    if by_self.is_empty() {
        return Err(MetricsError::Empty("agreement"));
    }
    let mut cells: BTreeMap<Agreement, Vec<(&RunRecord, &RunRecord)>> = BTreeMap::new();
    for (id, s) in &by_self {
        let h = by_human[id];
        cells
            .entry(Agreement::of(s.correct, h.correct))
            .or_default()
            .push((s, h));
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let categories = Agreement::ALL
        .iter()
        .map(|&category| {
            let pairs = cells.get(&category).map(Vec::as_slice).unwrap_or_default();
            CategoryStat {
                category,
                count: pairs.len(),
                self_mean_logprob: mean(
                    pairs
                        .iter()
                        .filter_map(|(s, _)| s.confidence.map(|c| c.mean_logprob))
                        .collect(),
                ),
                human_mean_logprob: mean(
                    pairs
                        .iter()
                        .filter_map(|(_, h)| h.confidence.map(|c| c.mean_logprob))
                        .collect(),
                ),
            }
        })
        .collect();
    Ok(CalibrationReport {
        n_pairs: by_self.len(),
        categories,
        self_run: side(&by_self.values().copied().collect::<Vec<_>>())?,
        human_run: side(&by_human.values().copied().collect::<Vec<_>>())?,
    })
}

// ------------------------------------------------------ answer likelihood

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarLikelihood {
    pub exemplar_id: String,
    pub probability: f64,
    pub sum_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub per_exemplar: Vec<ExemplarLikelihood>,
    pub mean_probability: f64,
}

/// Mean over exemplars of P(gold label | question, explanation).
pub fn mean_answer_likelihood(
    exemplars: &[(&QaInstance, &str)],
    backend: &Backend,
) -> Result<LikelihoodReport, MetricsError> {
    if exemplars.is_empty() {
        return Err(MetricsError::Empty("answer likelihood"));
    }
    let mut per_exemplar = Vec::with_capacity(exemplars.len());
    for (instance, explanation) in exemplars {
        let prefix = answer_likelihood_prefix(instance, explanation);
        let score = backend
            .score_continuation(&prefix, instance.gold_label.as_str())
            .map_err(|source| MetricsError::Scoring {
                id: instance.id.clone(),
                source,
            })?;
        per_exemplar.push(ExemplarLikelihood {
            exemplar_id: instance.id.clone(),
            probability: score.probability(),
            sum_logprob: score.sum_logprob,
        });
    }
    let mean_probability =
        per_exemplar.iter().map(|e| e.probability).sum::<f64>() / per_exemplar.len() as f64;
    Ok(LikelihoodReport {
        per_exemplar,
        mean_probability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, MockEntry, MockMatch, MockScript, ScriptedLogprob};
    use crate::corpus::{QaOption, Split};
    use crate::prompting::{Condition, ParsedAnswer};
    use crate::selfexplain::Confidence;
    use proptest::prelude::*;

    fn record(id: &str, correct: bool, mean_logprob: Option<f64>) -> RunRecord {
        let label = Label::letter(0).unwrap();
        RunRecord {
            instance_id: id.into(),
            condition: Condition::SelfExp,
            gold_label: label.clone(),
            prompt_hash: String::new(),
            completion_text: String::new(),
            extraction_text: None,
            parsed: ParsedAnswer::failure(),
            correct,
            confidence: mean_logprob.map(|m| Confidence {
                sum_logprob: m,
                mean_logprob: m,
            }),
            variant_choice: None,
        }
    }

    fn records(flags: &[bool]) -> Vec<RunRecord> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &c)| record(&format!("r{i}"), c, None))
            .collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&records(&[true; 5])).unwrap(), 1.0);
        assert_eq!(
            accuracy(&records(&[true, false, true, false, true])).unwrap(),
            0.6
        );
        // Two correct, two wrong and one parse failure; `record` parses nothing,
        // so mark the wrong ones as parsed to separate the cases.
        let mut rs = records(&[true, true, false, false, false]);
        for r in &mut rs[2..4] {
            r.parsed.status = crate::prompting::ParseStatus::Ok;
        }
        let s = accuracy_summary(&rs).unwrap();
        assert_eq!(s.accuracy, 0.4);
        assert_eq!(s.parse_failures, 3);
        assert!(accuracy(&[]).is_err());
    }

    fn conf(q: [f64; 4]) -> OptionConfidences {
        OptionConfidences {
            instance_id: "x".into(),
            labels: (0..4).map(|i| Label::letter(i).unwrap()).collect(),
            q: q.to_vec(),
            raw: q.to_vec(),
        }
    }

    #[test]
    fn selection_bias_examples() {
        assert_eq!(selection_bias(&[conf([0.25; 4])]).unwrap(), 0.0);
        assert_eq!(
            selection_bias(&[conf([1.0, 0.0, 0.0, 0.0])]).unwrap(),
            0.375
        );
        let v = selection_bias(&[conf([0.4, 0.3, 0.2, 0.1])]).unwrap();
        assert!((v - (0.15 + 0.05 + 0.05 + 0.15) / 4.0).abs() < 1e-12);
        // Averaging first: two opposite one-hots average to a flatter vector.
        let v = selection_bias(&[conf([1.0, 0.0, 0.0, 0.0]), conf([0.0, 1.0, 0.0, 0.0])]).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        let mut two = conf([0.5, 0.5, 0.0, 0.0]);
        two.q.truncate(2);
        two.labels.truncate(2);
        assert!(matches!(
            selection_bias(&[two]),
            Err(MetricsError::Arity { .. })
        ));
        assert!(matches!(
            selection_bias(&[conf([0.5, 0.6, 0.0, 0.0])]),
            Err(MetricsError::NotNormalized { .. })
        ));
    }

    #[test]
    fn softmax_normalization() {
        let labels: Vec<Label> = (0..4).map(|i| Label::letter(i).unwrap()).collect();
        let ln = f64::ln;
        let c = OptionConfidences::from_logprobs(
            "x",
            labels.clone(),
            &[ln(0.2), ln(0.2), ln(0.4), ln(0.2)],
        );
        for (got, want) in c.q.iter().zip([0.2, 0.2, 0.4, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        let c = OptionConfidences::from_logprobs("x", labels, &[0.0, -1e6, -1e6, -1e6]);
        assert!((c.q[0] - 1.0).abs() < 1e-12 && c.q[1] < 1e-12);
    }

    /// LCS by enumerating every subsequence of the shorter input.
    fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let is_subseq = |s: &[u8]| {
            let mut it = long.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << short.len())
            .filter_map(|mask| {
                let s: Vec<u8> = (0..short.len())
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| short[i])
                    .collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn rouge_examples() {
        let toks = |s: &str| tokenize(s);
        let r = rouge_l(&toks("the cat on the mat sat"), &toks("the cat sat"));
        assert_eq!(
            lcs_len(&toks("the cat on the mat sat"), &toks("the cat sat")),
            3
        );
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).f, 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).f, 0.0);
        assert_eq!(rouge_l::<String>(&[], &toks("c d")).f, 0.0);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(
            tokenize("The Cat, sat!  (on) it's"),
            ["the", "cat", "sat", "on", "its"]
        );
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn lexicon_examples() {
        let lex = LexiconMatcher::new(&["pyloric stenosis", "stenosis"]).unwrap();
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(
            lex.extract("acute pyloric stenosis"),
            set(&["pyloric stenosis"])
        );
        assert_eq!(
            lex.extract("Stenosis, then pyloric stenosis."),
            set(&["pyloric stenosis", "stenosis"])
        );
        assert!(lex.extract("nothing here").is_empty());
        assert_eq!(lex.extract("stenosis and stenosis"), set(&["stenosis"]));
        assert!(LexiconMatcher::new(&["Upper"]).is_err());
        assert!(LexiconMatcher::new(&[""]).is_err());
    }

    #[test]
    fn term_f1_examples() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(term_f1(&set(&["a"]), &set(&["a"])), 1.0);
        assert_eq!(term_f1(&set(&["a"]), &set(&["b"])), 0.0);
        assert!(
            (term_f1(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])) - 2.0 / 3.0).abs() < 1e-12
        );
        assert_eq!(term_f1(&set(&[]), &set(&[])), 1.0);
        assert_eq!(term_f1(&set(&["a"]), &set(&[])), 0.0);
    }

    #[test]
    fn length_examples() {
        let s = length_stats(&["a b c"]).unwrap();
        assert_eq!((s.mean, s.stddev), (3.0, 0.0));
        let s = length_stats(&["a", "a b c"]).unwrap();
        assert_eq!((s.mean, s.stddev), (2.0, 1.0));
        let texts = vec!["w ".repeat(23); 100];
        let s = length_stats(&texts).unwrap();
        let used: Vec<_> = s.histogram.iter().filter(|b| b.count > 0).collect();
        assert_eq!(used.len(), 1);
        assert_eq!((used[0].lower, used[0].count), (20, 100));
        assert!(length_stats::<&str>(&[]).is_err());
    }

    #[test]
    fn ece_known_value() {
        // Bin 9: two points at 0.95, one correct -> |0.5 - 0.95| weighted 2/4.
        // Bin 2: two points at 0.25, both wrong  -> |0 - 0.25| weighted 2/4.
        let cal = expected_calibration_error(&[
            (0.95, true),
            (0.95, false),
            (0.25, false),
            (0.25, false),
        ])
        .unwrap();
        assert!((cal.ece - (0.5 * 0.45 + 0.5 * 0.25)).abs() < 1e-12);
        assert_eq!(cal.bins.len(), ECE_BINS);
        assert_eq!(cal.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        let top = expected_calibration_error(&[(1.0, true)]).unwrap();
        assert_eq!(top.bins[9].count, 1);
        assert_eq!(top.ece, 0.0);
    }

    #[test]
    fn agreement_examples() {
        let selfs = vec![record("a", true, Some(-0.1)), record("b", true, Some(-0.2))];
        let humans = vec![
            record("a", false, Some(-1.0)),
            record("b", false, Some(-2.0)),
        ];
        let rep = agreement_report(&selfs, &humans).unwrap();
        assert_eq!(rep.categories[1].count, 2);
        assert!((rep.categories[1].self_mean_logprob.unwrap() + 0.15).abs() < 1e-12);

        let same = agreement_report(&selfs, &selfs).unwrap();
        assert_eq!(same.categories[0].count + same.categories[3].count, 2);

        let s = vec![
            record("1", true, None),
            record("2", true, None),
            record("3", false, None),
            record("4", false, None),
        ];
        let h = vec![
            record("1", true, None),
            record("2", false, None),
            record("3", true, None),
            record("4", false, None),
        ];
        let rep = agreement_report(&s, &h).unwrap();
        assert!(rep.categories.iter().all(|c| c.count == 1));

        let err = agreement_report(&selfs, &[record("a", true, None), record("z", true, None)])
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("only in self: [b]") && msg.contains("only in human: [z]"),
            "{msg}"
        );
    }

    fn abcd(id: &str) -> QaInstance {
        QaInstance {
            id: id.into(),
            question: format!("Question {id}?"),
            options: ["w", "x", "y", "z"]
                .iter()
                .enumerate()
                .map(|(i, t)| QaOption {
                    label: Label::letter(i).unwrap(),
                    text: t.to_string(),
                })
                .collect(),
            gold_label: Label::letter(0).unwrap(),
            human_cot: None,
            split: Split::Train,
        }
    }

    fn scorer(entries: Vec<MockEntry>) -> Backend {
        Backend::with_mock(BackendConfig::default(), MockScript::new(entries)).unwrap()
    }

    fn logprob_entry(matcher: MockMatch, lp: f64) -> MockEntry {
        MockEntry {
            matcher,
            token_logprobs: Some(vec![ScriptedLogprob::Value(lp)]),
            ..Default::default()
        }
    }

    #[test]
    fn option_confidences_via_mock() {
        let b = scorer(vec![logprob_entry(MockMatch::any(), -1.3)]);
        let c = option_confidences(&abcd("q"), "Question: q\nAnswer:", &b).unwrap();
        assert!(c.q.iter().all(|q| (q - 0.25).abs() < 1e-12));
        let b = scorer(vec![
            logprob_entry(MockMatch::continuation("C"), 0.4f64.ln()),
            logprob_entry(MockMatch::any(), 0.2f64.ln()),
        ]);
        let c = option_confidences(&abcd("q"), "Answer:", &b).unwrap();
        for (got, want) in c.q.iter().zip([0.2, 0.2, 0.4, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        let b = scorer(vec![MockEntry::default()]);
        let err = option_confidences(&abcd("q"), "Answer:", &b).unwrap_err();
        assert!(matches!(
            err.backend_error(),
            Some(BackendError::Capability(_))
        ));
    }

    #[test]
    fn answer_likelihood_means() {
        let insts = [abcd("e1"), abcd("e2"), abcd("e3")];
        let pairs: Vec<(&QaInstance, &str)> = insts.iter().map(|i| (i, "because")).collect();
        let b = scorer(vec![logprob_entry(MockMatch::any(), 0.0)]);
        assert_eq!(
            mean_answer_likelihood(&pairs, &b).unwrap().mean_probability,
            1.0
        );
        let b = scorer(vec![
            logprob_entry(MockMatch::substring("Question e1?"), 0.0),
            logprob_entry(MockMatch::substring("Question e2?"), 0.8f64.ln()),
            logprob_entry(MockMatch::substring("Question e3?"), 0.6f64.ln()),
        ]);
        let rep = mean_answer_likelihood(&pairs, &b).unwrap();
        assert!((rep.mean_probability - (1.0 + 0.8 + 0.6) / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rouge_matches_oracle(
            a in prop::collection::vec(0u8..5, 0..=12),
            b in prop::collection::vec(0u8..5, 0..=12),
        ) {
            let lcs = lcs_oracle(&a, &b);
            prop_assert_eq!(lcs_len(&a, &b), lcs);
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r.f));
            if !a.is_empty() && !b.is_empty() {
                let p = lcs as f64 / a.len() as f64;
                let rc = lcs as f64 / b.len() as f64;
                prop_assert!((r.precision - p).abs() <= 1e-12);
                prop_assert!((r.recall - rc).abs() <= 1e-12);
                prop_assert_eq!(r.f == 1.0, a == b);
            }
        }

        #[test]
        fn bias_properties(raw in prop::array::uniform4(0.0f64..1.0), rot in 0usize..4) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let q = raw.map(|x| x / total);
            let v = bias_of_mean(&q);
            prop_assert!((0.0..=0.375 + 1e-12).contains(&v));
            let mut rotated = q;
            rotated.rotate_left(rot);
            rotated.swap(0, 3);
            prop_assert!((bias_of_mean(&rotated) - v).abs() <= 1e-12);
        }

        #[test]
        fn term_f1_symmetric(
            a in prop::collection::btree_set("[a-e]", 0..5),
            b in prop::collection::btree_set("[a-e]", 0..5),
        ) {
            let f = term_f1(&a, &b);
            prop_assert_eq!(f, term_f1(&b, &a));
            prop_assert_eq!(f == 1.0, a == b);
        }

        #[test]
        fn agreement_counts_sum(flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..30)) {
            let s: Vec<_> = flags.iter().enumerate().map(|(i, f)| record(&i.to_string(), f.0, None)).collect();
            let h: Vec<_> = flags.iter().enumerate().map(|(i, f)| record(&i.to_string(), f.1, None)).collect();
            let rep = agreement_report(&s, &h).unwrap();
            prop_assert_eq!(rep.categories.iter().map(|c| c.count).sum::<usize>(), flags.len());
        }

        #[test]
        fn accuracy_counts_records(flags in prop::collection::vec(any::<bool>(), 1..50)) {
            let acc = accuracy(&records(&flags)).unwrap();
            let scaled = acc * flags.len() as f64;
            prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            prop_assert_eq!(scaled.round() as usize, flags.iter().filter(|f| **f).count());
        }
    }
}
