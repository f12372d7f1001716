//! The self-explanation pipeline: generate explanation variants for the
//! exemplars, pick one per test item, and run ICL inference under any of the
//! four prompting conditions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{parallel_map, Backend, BackendError, CompletionRequest};
use crate::corpus::{
    sample_wrong_label, CorpusError, Dataset, ExemplarSet, Label, QaInstance, Split,
};
use crate::hashing::{seeded_rng, sha256_hex};
use crate::prompting::{
    answer_scoring_prefix, build_explanation_prompt, build_icl_prompt, build_zero_shot_extraction,
    parse_answer, parse_explanation_variants, Condition, Cue, Domain, IclExemplar, ParsedAnswer,
    PromptError, TEMPLATE_VERSION,
};

/// Generation stops before the model invents a further question block.
pub const ANSWER_STOP: &str = "\n\nQuestion:";

const RUN_FORMAT: &str = "selfexplain-run/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("generating explanations for exemplar `{id}`: {source}")]
    Generation {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("exemplar `{id}`: completion yielded no explanation variants")]
    EmptyVariants { id: String },
    #[error("unknown exemplar `{0}`")]
    UnknownExemplar(String),
    #[error("inference for instance `{id}`: {source}")]
    Inference {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// The backend error behind this failure, if any.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Generation { source, .. } | PipelineError::Inference { source, .. } => {
                Some(source)
            }
            _ => None,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMode {
    Right,
    Wrong,
}

impl ExplainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExplainMode::Right => "right",
            ExplainMode::Wrong => "wrong",
        }
    }
}

impl std::fmt::Display for ExplainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExplainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "right" => Ok(ExplainMode::Right),
            "wrong" => Ok(ExplainMode::Wrong),
            other => Err(format!("unknown mode `{other}` (expected right or wrong)")),
        }
    }
}

/// One line of an explanation-map file: an exemplar's variants plus the
/// provenance needed to tell maps apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationEntry {
    pub exemplar_id: String,
    pub variants: Vec<String>,
    pub cue_id: u8,
    pub domain: Domain,
    pub answer_label_used: Label,
    pub gold_label: Label,
    pub mode: ExplainMode,
    pub n_requested: usize,
    pub seed: u64,
    pub model_id: String,
    pub template_version: String,
    pub exemplar_set_digest: String,
    pub config_digest: String,
    pub prompt_hash: String,
    pub prompt: String,
}

/// Explanation variants for every exemplar, in exemplar order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationMap {
    entries: Vec<ExplanationEntry>,
}

impl ExplanationMap {
    /// Checks the per-entry invariants and that all entries share provenance.
    pub fn new(entries: Vec<ExplanationEntry>) -> Result<Self, String> {
        let mut seen = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.exemplar_id.as_str()) {
                return Err(format!("duplicate exemplar `{}`", e.exemplar_id));
            }
            if e.variants.is_empty() || e.variants.iter().any(|v| v.trim().is_empty()) {
                return Err(format!("exemplar `{}` has an empty variant", e.exemplar_id));
            }
            if e.variants.len() > e.n_requested {
                return Err(format!(
                    "exemplar `{}` has {} variants but only {} were requested",
                    e.exemplar_id,
                    e.variants.len(),
                    e.n_requested
                ));
            }
            if e.mode == ExplainMode::Wrong && e.answer_label_used == e.gold_label {
                return Err(format!(
                    "exemplar `{}` is in wrong mode but uses the gold label",
                    e.exemplar_id
                ));
            }
            if e.mode == ExplainMode::Right && e.answer_label_used != e.gold_label {
                return Err(format!(
                    "exemplar `{}` is in right mode but uses a non-gold label",
                    e.exemplar_id
                ));
            }
            if i > 0 && provenance(e) != provenance(&entries[0]) {
                return Err(format!(
                    "exemplar `{}` was generated under different settings than `{}`",
                    e.exemplar_id, entries[0].exemplar_id
                ));
            }
        }
        Ok(ExplanationMap { entries })
    }

    pub fn entries(&self) -> &[ExplanationEntry] {
        &self.entries
    }

    pub fn get(&self, exemplar_id: &str) -> Option<&ExplanationEntry> {
        self.entries.iter().find(|e| e.exemplar_id == exemplar_id)
    }

    pub fn mode(&self) -> Option<ExplainMode> {
        self.entries.first().map(|e| e.mode)
    }

    pub fn exemplar_set_digest(&self) -> Option<&str> {
        self.entries.first().map(|e| e.exemplar_set_digest.as_str())
    }

    pub fn variant_count(&self) -> usize {
        self.entries.iter().map(|e| e.variants.len()).sum()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
            .collect()
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl())
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, PipelineError> {
        let format = |line, message| PipelineError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(line).map_err(|e| format(i + 1, e.to_string()))?;
            entries.push(entry);
        }
        ExplanationMap::new(entries).map_err(|m| format(0, m))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(path, &text)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Confirms the map was generated for `exemplars` and covers all of them.
    pub fn check_covers(&self, exemplars: &ExemplarSet) -> Result<(), PipelineError> {
        let digest = exemplars.digest();
        if let Some(found) = self.exemplar_set_digest() {
            if found != digest {
                return Err(PipelineError::Precondition(format!(
                    "explanation map was generated for exemplar set {found}, not {digest}"
                )));
            }
        }
        let missing: Vec<&str> = exemplars
            .members
            .iter()
            .filter(|id| self.get(id).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::Precondition(format!(
                "explanation map lacks exemplars: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

fn provenance(e: &ExplanationEntry) -> impl PartialEq + '_ {
    (
        e.cue_id,
        e.domain,
        e.mode,
        e.n_requested,
        e.seed,
        (
            &e.model_id,
            &e.template_version,
            &e.exemplar_set_digest,
            &e.config_digest,
        ),
    )
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(io_error(path))?;
    tmp.write_all(bytes).map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerationSpec {
    pub cue: Cue,
    pub domain: Domain,
    pub n: usize,
    pub mode: ExplainMode,
    pub seed: u64,
    /// Digest of the experiment configuration, recorded as provenance.
    pub config_digest: String,
}

/// Generates explanation variants for every exemplar with one completion per
/// exemplar, issued in parallel.
pub fn generate_explanations(
    dataset: &Dataset,
    exemplars: &ExemplarSet,
    spec: &GenerationSpec,
    backend: &Backend,
) -> Result<ExplanationMap, PipelineError> {
    if spec.n == 0 {
        return Err(PromptError::ZeroVariants.into());
    }
    let instances = exemplars.resolve(dataset)?;
    let mut labels = Vec::with_capacity(instances.len());
    let mut requests = Vec::with_capacity(instances.len());
    for inst in &instances {
        let label = match spec.mode {
            ExplainMode::Right => inst.gold_label.clone(),
            ExplainMode::Wrong => sample_wrong_label(inst, spec.seed)?,
        };
        let prompt = build_explanation_prompt(inst, &label, &spec.cue, spec.domain, spec.n)?;
        requests.push(CompletionRequest {
            prompt,
            temperature: backend.config().temperature_generate,
            max_tokens: backend.config().max_tokens,
            want_logprobs: false,
            stop: None,
        });
        labels.push(label);
    }

    let results = backend.batch_complete(&requests);
    let set_digest = exemplars.digest();
    let mut entries = Vec::with_capacity(instances.len());
    for ((inst, label), (request, result)) in instances
        .iter()
        .zip(labels)
        .zip(requests.into_iter().zip(results))
    {
        let completion = result.map_err(|source| PipelineError::Generation {
            id: inst.id.clone(),
            source,
        })?;
        let variants = parse_explanation_variants(&completion.text, spec.n).map_err(|_| {
            PipelineError::EmptyVariants {
                id: inst.id.clone(),
            }
        })?;
        if variants.len() < spec.n {
            log::warn!(
                "exemplar `{}`: asked for {} explanations, parsed {}",
                inst.id,
                spec.n,
                variants.len()
            );
        }
        entries.push(ExplanationEntry {
            exemplar_id: inst.id.clone(),
            variants,
            cue_id: spec.cue.id,
            domain: spec.domain,
            answer_label_used: label,
            gold_label: inst.gold_label.clone(),
            mode: spec.mode,
            n_requested: spec.n,
            seed: spec.seed,
            model_id: backend.config().model_id.clone(),
            template_version: TEMPLATE_VERSION.to_string(),
            exemplar_set_digest: set_digest.clone(),
            config_digest: spec.config_digest.clone(),
            prompt_hash: request.prompt.content_hash,
            prompt: request.prompt.text,
        });
    }
    ExplanationMap::new(entries).map_err(PipelineError::Precondition)
}

/// Picks the variant of `exemplar_id` shown to `test_id`, uniformly and
/// deterministically per (exemplar, test item, seed).
pub fn select_variant<'m>(
    map: &'m ExplanationMap,
    exemplar_id: &str,
    test_id: &str,
    seed: u64,
) -> Result<(usize, &'m str), PipelineError> {
    let entry = map
        .get(exemplar_id)
        .ok_or_else(|| PipelineError::UnknownExemplar(exemplar_id.to_string()))?;
    let mut rng = seeded_rng(
        "variant",
        &[
            exemplar_id.as_bytes(),
            test_id.as_bytes(),
            &seed.to_le_bytes(),
        ],
    );
    let index = rng.random_range(0..entry.variants.len());
    Ok((index, &entry.variants[index]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    pub sum_logprob: f64,
    pub mean_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub instance_id: String,
    pub condition: Condition,
    pub gold_label: Label,
    pub prompt_hash: String,
    pub completion_text: String,
    /// Second-stage completion of two-stage zero-shot CoT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_text: Option<String>,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub confidence: Option<Confidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_choice: Option<BTreeMap<String, usize>>,
}

/// First line of a run-record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub format: String,
    pub experiment_id: String,
    pub condition: Condition,
    pub config_digest: String,
    pub exemplar_set_digest: String,
    pub dataset: String,
    pub split: Split,
    pub seed: u64,
    pub model_id: String,
    pub template_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_map_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_mode: Option<ExplainMode>,
}

impl RunHeader {
    pub fn new(
        experiment_id: &str,
        config_digest: &str,
        spec: &InferenceSpec<'_>,
        model_id: &str,
    ) -> Self {
        RunHeader {
            format: RUN_FORMAT.to_string(),
            experiment_id: experiment_id.to_string(),
            condition: spec.condition,
            config_digest: config_digest.to_string(),
            exemplar_set_digest: spec.exemplars.digest(),
            dataset: spec.dataset.name.clone(),
            split: spec.split,
            seed: spec.seed,
            model_id: model_id.to_string(),
            template_version: TEMPLATE_VERSION.to_string(),
            explanation_map_digest: spec
                .map
                .filter(|_| spec.condition == Condition::SelfExp)
                .map(ExplanationMap::digest),
            explanation_mode: spec
                .map
                .filter(|_| spec.condition == Condition::SelfExp)
                .and_then(ExplanationMap::mode),
        }
    }
}

/// Appends records to `<path>.partial` as they arrive and moves the file
/// into place once the run completes.
pub struct RunWriter {
    path: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
}

impl RunWriter {
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        let mut partial = path.as_os_str().to_owned();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let file = File::create(&partial).map_err(io_error(&partial))?;
        let mut writer = RunWriter {
            path: path.to_path_buf(),
            partial,
            out: BufWriter::new(file),
        };
        writer.write_line(header)?;
        Ok(writer)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        let line = serde_json::to_string(value).expect("run lines serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(io_error(&self.partial))
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), PipelineError> {
        self.write_line(record)
    }

    pub fn finish(mut self) -> Result<PathBuf, PipelineError> {
        self.out.flush().map_err(io_error(&self.partial))?;
        fs::rename(&self.partial, &self.path).map_err(io_error(&self.path))?;
        Ok(self.path)
    }
}

/// Reads a run-record file, validating the header and every record line.
pub fn read_run_file(path: &Path) -> Result<(RunHeader, Vec<RunRecord>), PipelineError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let format = |line, message: String| PipelineError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| format(1, "empty run file".into()))?;
    let header: RunHeader =
        serde_json::from_str(first).map_err(|e| format(1, format!("bad header: {e}")))?;
    if header.format != RUN_FORMAT {
        return Err(format(
            1,
            format!("unsupported run format `{}`", header.format),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let record: RunRecord =
            serde_json::from_str(line).map_err(|e| format(i + 1, e.to_string()))?;
        if record.condition != header.condition {
            return Err(format(
                i + 1,
                format!(
                    "record condition {} differs from header condition {}",
                    record.condition, header.condition
                ),
            ));
        }
        records.push(record);
    }
    Ok((header, records))
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceSpec<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    pub exemplars: &'a ExemplarSet,
    pub map: Option<&'a ExplanationMap>,
    pub condition: Condition,
    pub seed: u64,
    /// Score the parsed answer's likelihood for each record.
    pub score: bool,
}

/// Resolved exemplars with their fixed answer labels and, for human CoT,
/// their explanations.
struct Prepared<'a> {
    instances: Vec<&'a QaInstance>,
    labels: Vec<Label>,
}

fn preflight<'a>(spec: &InferenceSpec<'a>) -> Result<Prepared<'a>, PipelineError> {
    let instances = spec.exemplars.resolve(spec.dataset)?;
    match spec.condition {
        Condition::SelfExp => {
            let map = spec.map.ok_or_else(|| {
                PipelineError::Precondition("condition self_exp requires an explanation map".into())
            })?;
            map.check_covers(spec.exemplars)?;
        }
        Condition::HumanCot => {
            let missing: Vec<&str> = instances
                .iter()
                .filter(|i| i.human_cot.as_deref().is_none_or(|c| c.trim().is_empty()))
                .map(|i| i.id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(PipelineError::Precondition(format!(
                    "condition human_cot requires human_cot on every exemplar; missing: {}",
                    missing.join(", ")
                )));
            }
        }
        Condition::NoCot | Condition::ZeroShotCot => {}
    }
    if spec.dataset.split(spec.split).next().is_none() {
        return Err(PipelineError::Precondition(format!(
            "dataset `{}` has no {} instances",
            spec.dataset.name, spec.split
        )));
    }
    let labels = instances
        .iter()
        .map(|inst| match (spec.condition, spec.map) {
            (Condition::SelfExp, Some(map)) => map
                .get(&inst.id)
                .expect("coverage checked")
                .answer_label_used
                .clone(),
            _ => inst.gold_label.clone(),
        })
        .collect();
    Ok(Prepared { instances, labels })
}

/// Checks the preconditions of `spec` without touching the backend.
pub fn check_inference(spec: &InferenceSpec<'_>) -> Result<(), PipelineError> {
    preflight(spec).map(|_| ())
}

/// Runs ICL inference over the split's instances in file order. Records are
/// passed to `sink` in order, chunk by chunk, so a crash loses at most one
/// chunk; reruns replay finished items from the backend cache.
pub fn run_inference(
    spec: &InferenceSpec<'_>,
    backend: &Backend,
    mut sink: impl FnMut(&RunRecord) -> Result<(), PipelineError>,
) -> Result<Vec<RunRecord>, PipelineError> {
    let prepared = preflight(spec)?;
    let tests: Vec<&QaInstance> = spec.dataset.split(spec.split).collect();
    let chunk_size = backend.config().max_parallel.max(1) * 4;
    let mut records = Vec::with_capacity(tests.len());
    let mut capability_warned = false;
    for chunk in tests.chunks(chunk_size) {
        let outcomes = parallel_map(chunk, backend.config().max_parallel, |query| {
            infer_one(spec, &prepared, query, backend)
        });
        for outcome in outcomes {
            let (record, capability_gap) = outcome?;
            if let Some(message) = capability_gap {
                if !capability_warned {
                    log::warn!("confidence scoring unavailable: {message}");
                    capability_warned = true;
                }
            }
            sink(&record)?;
            records.push(record);
        }
    }
    Ok(records)
}

/// The record for one test item, plus the reason confidence is missing when
/// the backend cannot score.
fn infer_one(
    spec: &InferenceSpec<'_>,
    prepared: &Prepared<'_>,
    query: &QaInstance,
    backend: &Backend,
) -> Result<(RunRecord, Option<String>), PipelineError> {
    let fail = |source| PipelineError::Inference {
        id: query.id.clone(),
        source,
    };
    let mut variant_choice = None;
    let mut explanations: Vec<Option<&str>> = vec![None; prepared.instances.len()];
    match (spec.condition, spec.map) {
        (Condition::SelfExp, Some(map)) => {
            let mut choice = BTreeMap::new();
            for (slot, inst) in explanations.iter_mut().zip(&prepared.instances) {
                let (index, text) = select_variant(map, &inst.id, &query.id, spec.seed)?;
                choice.insert(inst.id.clone(), index);
                *slot = Some(text);
            }
            variant_choice = Some(choice);
        }
        (Condition::HumanCot, _) => {
            for (slot, inst) in explanations.iter_mut().zip(&prepared.instances) {
                *slot = inst.human_cot.as_deref();
            }
        }
        _ => {}
    }
    let demos: Vec<IclExemplar<'_>> = prepared
        .instances
        .iter()
        .zip(&prepared.labels)
        .zip(explanations)
        .map(|((instance, answer_label), explanation)| IclExemplar {
            instance,
            explanation,
            answer_label,
        })
        .collect();
    let prompt = build_icl_prompt(&demos, query, spec.condition)?;
    let request = |prompt| CompletionRequest {
        prompt,
        temperature: backend.config().temperature_answer,
        max_tokens: backend.config().max_tokens,
        want_logprobs: false,
        stop: Some(vec![ANSWER_STOP.to_string()]),
    };

    let first = request(prompt.clone());
    let completion = backend.complete(&first).map_err(fail)?;
    let (parsed, extraction_text, scoring_prefix) = if spec.condition == Condition::ZeroShotCot {
        let extraction = build_zero_shot_extraction(&prompt, &completion.text, query);
        let second = backend
            .complete(&request(extraction.clone()))
            .map_err(fail)?;
        let parsed = parse_answer(&second.text, query);
        let prefix = answer_scoring_prefix(&extraction.text, None);
        (parsed, Some(second.text), prefix)
    } else {
        let parsed = parse_answer(&completion.text, query);
        let prefix = if spec.condition.uses_explanations() {
            let reasoning = &completion.text[..parsed.offset.unwrap_or(completion.text.len())];
            answer_scoring_prefix(&prompt.text, Some(reasoning))
        } else {
            answer_scoring_prefix(&prompt.text, None)
        };
        (parsed, None, prefix)
    };

    let mut confidence = None;
    let mut capability_gap = None;
    if spec.score {
        if let Some(label) = &parsed.label {
            match backend.score_continuation(&scoring_prefix, label.as_str()) {
                Ok(score) => {
                    confidence = Some(Confidence {
                        sum_logprob: score.sum_logprob,
                        mean_logprob: score.mean_logprob,
                    })
                }
                Err(BackendError::Capability(message)) => capability_gap = Some(message),
                Err(other) => return Err(fail(other)),
            }
        }
    }

    let correct = parsed.is_ok() && parsed.label.as_ref() == Some(&query.gold_label);
    Ok((
        RunRecord {
            instance_id: query.id.clone(),
            condition: spec.condition,
            gold_label: query.gold_label.clone(),
            prompt_hash: first.prompt.content_hash,
            completion_text: completion.text,
            extraction_text,
            parsed,
            correct,
            confidence,
            variant_choice,
        },
        capability_gap,
    ))
}
