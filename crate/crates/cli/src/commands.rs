//! Subcommand implementations. Each returns the lines to print, the files it
//! wrote and how many backend calls it made.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use selfexplain::backend::{parallel_map, Backend};
use selfexplain::corpus::{balanced_subset, remap_gold_option, Label, QaInstance};
use selfexplain::metrics::{
    agreement_report, eval_report, mean_answer_likelihood, mean_option_confidence,
    option_confidences, selection_bias, similarity_report, CalibrationReport, EvalReport,
    LexiconMatcher, LikelihoodReport, OptionConfidences, SideCalibration, SimilarityReport,
    TermExtractor, TextPair,
};
use selfexplain::prompting::{build_icl_prompt_with_slot, Condition, IclExemplar, QuerySlot};
use selfexplain::selfexplain::{
    check_inference, generate_explanations, read_run_file, run_inference, select_variant,
    ExplanationMap, GenerationSpec, InferenceSpec, RunHeader, RunRecord, RunWriter,
};
use serde::Serialize;
use serde_json::Value;

use crate::exit::ValidationError;
use crate::experiment::Experiment;
use crate::output::{write_report, Cell, Stamp, Table};

#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
    pub backend_calls: u64,
}

impl Outcome {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    fn finish(mut self, backend: Option<&Backend>) -> Self {
        if let Some(b) = backend {
            self.backend_calls = b.request_count();
            self.say(format!("backend calls: {}", self.backend_calls));
        }
        self
    }
}

pub fn explain(exp: &Experiment) -> anyhow::Result<Outcome> {
    let cfg = &exp.config;
    let backend = exp.backend()?;
    let spec = GenerationSpec {
        cue: cfg.cue(),
        domain: cfg.domain,
        n: cfg.n,
        mode: cfg.mode,
        seed: cfg.seed(),
        config_digest: exp.config_digest.clone(),
    };
    let map = generate_explanations(&exp.dataset, &exp.exemplars, &spec, &backend)?;
    let path = exp.map_path(cfg.mode);
    map.save(&path)?;
    let mut out = Outcome::default();
    out.say(format!(
        "{} mode: {} variants for {} exemplars -> {}",
        cfg.mode,
        map.variant_count(),
        map.entries().len(),
        path.display()
    ));
    out.files.push(path);
    Ok(out.finish(Some(&backend)))
}

pub fn run(exp: &Experiment, conditions: &[Condition], score: bool) -> anyhow::Result<Outcome> {
    let cfg = &exp.config;
    let conditions = if conditions.is_empty() {
        &cfg.conditions[..]
    } else {
        conditions
    };
    let map = if conditions.contains(&Condition::SelfExp) {
        Some(exp.load_map(cfg.mode)?)
    } else {
        None
    };
    let specs: Vec<InferenceSpec<'_>> = conditions
        .iter()
        .map(|&condition| InferenceSpec {
            dataset: &exp.dataset,
            split: cfg.split,
            exemplars: &exp.exemplars,
            map: map.as_ref(),
            condition,
            seed: cfg.seed(),
            score,
        })
        .collect();
    for spec in &specs {
        check_inference(spec).with_context(|| format!("condition {}", spec.condition))?;
    }

    let backend = exp.backend()?;
    let mut out = Outcome::default();
    for spec in &specs {
        let path = exp.run_path(spec.condition, cfg.mode);
        let header = RunHeader::new(
            &cfg.experiment_id,
            &exp.config_digest,
            spec,
            &cfg.backend.model_id,
        );
        let mut writer = RunWriter::create(&path, &header)?;
        let total = exp.dataset.split(cfg.split).count();
        let mut done = 0;
        let records = run_inference(spec, &backend, |record| {
            done += 1;
            log::debug!("{} [{done}/{total}] {}", spec.condition, record.instance_id);
            writer.append(record)
        })?;
        writer.finish()?;
        let summary = selfexplain::metrics::accuracy_summary(&records)?;
        out.say(format!(
            "{}: accuracy {:.4} ({}/{}) -> {}",
            spec.condition,
            summary.accuracy,
            summary.correct,
            summary.n,
            path.display()
        ));
        out.files.push(path);
    }
    Ok(out.finish(Some(&backend)))
}

fn side_rows(table: &mut Table, run: &str, side: &SideCalibration) {
    for (class, c) in [("correct", &side.correct), ("incorrect", &side.incorrect)] {
        table.push(vec![
            run.into(),
            class.into(),
            c.count.into(),
            c.mean_logprob.into(),
        ]);
    }
}

fn bin_rows(table: &mut Table, run: &str, side: &SideCalibration) {
    for b in side.calibration.iter().flat_map(|c| &c.bins) {
        table.push(vec![
            run.into(),
            b.lower.into(),
            b.upper.into(),
            b.count.into(),
            b.accuracy.into(),
            b.mean_confidence.into(),
        ]);
    }
}

#[derive(Serialize)]
struct EvalDoc<'a> {
    run: &'a RunHeader,
    eval: &'a EvalReport,
}

pub fn eval(
    exp: &Experiment,
    runs: &[PathBuf],
    conditions: &[Condition],
) -> anyhow::Result<Outcome> {
    let mut paths: Vec<PathBuf> = runs.to_vec();
    paths.extend(conditions.iter().map(|&c| exp.run_path(c, exp.config.mode)));
    if paths.is_empty() {
        paths = existing_runs(exp)?;
    }
    if paths.is_empty() {
        return Err(ValidationError(
            "no run files to evaluate; run `selfexplain run` first".into(),
        )
        .into());
    }
    let mut out = Outcome::default();
    for path in paths {
        let (header, records) = read_run_file(&path)?;
        let report = eval_report(&records)?;
        let side = SideCalibration {
            correct: report.correct.clone(),
            incorrect: report.incorrect.clone(),
            calibration: report.calibration.clone(),
        };
        let mut summary = Table::new(
            "summary",
            &[
                "condition",
                "n",
                "correct",
                "parse_failures",
                "accuracy",
                "scored",
                "ece",
            ],
        );
        summary.push(vec![
            header.condition.as_str().into(),
            report.accuracy.n.into(),
            report.accuracy.correct.into(),
            report.accuracy.parse_failures.into(),
            report.accuracy.accuracy.into(),
            report.scored.into(),
            report.calibration.as_ref().map(|c| c.ece).into(),
        ]);
        let mut classes = Table::new("classes", &["run", "class", "count", "mean_logprob"]);
        side_rows(&mut classes, header.condition.as_str(), &side);
        let mut bins = Table::new(
            "bins",
            &[
                "run",
                "lower",
                "upper",
                "count",
                "accuracy",
                "mean_confidence",
            ],
        );
        bin_rows(&mut bins, header.condition.as_str(), &side);

        let stem = format!("eval-{}", file_stem(&path));
        let stamp = Stamp {
            experiment_id: header.experiment_id.clone(),
            config_digest: header.config_digest.clone(),
        };
        let doc = EvalDoc {
            run: &header,
            eval: &report,
        };
        out.files.extend(write_report(
            &exp.reports_dir(),
            &stem,
            "eval",
            &stamp,
            &doc,
            &[summary, classes, bins],
        )?);
        out.say(format!(
            "{}: accuracy {:.4} ({}/{}), parse failures {}{}",
            file_stem(&path),
            report.accuracy.accuracy,
            report.accuracy.correct,
            report.accuracy.n,
            report.accuracy.parse_failures,
            report
                .calibration
                .as_ref()
                .map(|c| format!(", ECE {:.4}", c.ece))
                .unwrap_or_default()
        ));
    }
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Run files of the experiment, sorted by name.
fn existing_runs(exp: &Experiment) -> anyhow::Result<Vec<PathBuf>> {
    let dir = exp.runs_dir();
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    Ok(paths)
}

#[derive(Serialize)]
struct CompareDoc<'a> {
    self_run: &'a RunHeader,
    human_run: &'a RunHeader,
    agreement: &'a CalibrationReport,
}

pub fn compare(
    exp: &Experiment,
    self_run: Option<&Path>,
    human_run: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let self_path = self_run.map_or_else(
        || exp.run_path(Condition::SelfExp, exp.config.mode),
        Path::to_path_buf,
    );
    let human_path = human_run.map_or_else(
        || exp.run_path(Condition::HumanCot, exp.config.mode),
        Path::to_path_buf,
    );
    let (self_header, self_records) = read_run_file(&self_path)?;
    let (human_header, human_records) = read_run_file(&human_path)?;
    if self_header.exemplar_set_digest != human_header.exemplar_set_digest {
        return Err(ValidationError(format!(
            "runs used different exemplar sets ({} vs {})",
            self_header.exemplar_set_digest, human_header.exemplar_set_digest
        ))
        .into());
    }
    let report = agreement_report(&self_records, &human_records)?;

    let mut categories = Table::new(
        "categories",
        &[
            "category",
            "count",
            "fraction",
            "self_mean_logprob",
            "human_mean_logprob",
        ],
    );
    for c in &report.categories {
        categories.push(vec![
            c.category.as_str().into(),
            c.count.into(),
            (c.count as f64 / report.n_pairs as f64).into(),
            c.self_mean_logprob.into(),
            c.human_mean_logprob.into(),
        ]);
    }
    let mut classes = Table::new("classes", &["run", "class", "count", "mean_logprob"]);
    side_rows(&mut classes, "self", &report.self_run);
    side_rows(&mut classes, "human", &report.human_run);
    let mut bins = Table::new(
        "bins",
        &[
            "run",
            "lower",
            "upper",
            "count",
            "accuracy",
            "mean_confidence",
        ],
    );
    bin_rows(&mut bins, "self", &report.self_run);
    bin_rows(&mut bins, "human", &report.human_run);

    let stamp = Stamp {
        experiment_id: self_header.experiment_id.clone(),
        config_digest: self_header.config_digest.clone(),
    };
    let doc = CompareDoc {
        self_run: &self_header,
        human_run: &human_header,
        agreement: &report,
    };
    let mut out = Outcome {
        files: write_report(
            &exp.reports_dir(),
            "compare",
            "compare",
            &stamp,
            &doc,
            &[categories, classes, bins],
        )?,
        ..Default::default()
    };
    for c in &report.categories {
        out.say(format!(
            "{}: {}/{}",
            c.category.as_str(),
            c.count,
            report.n_pairs
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct BiasSetting {
    setting: String,
    /// Label every exemplar's correct option was moved to, if any.
    target: Option<Label>,
    mean_q: Vec<f64>,
    bias: f64,
    confidences: Vec<OptionConfidences>,
}

#[derive(Debug, Serialize)]
struct BiasDoc {
    condition: Condition,
    per_label: usize,
    labels: Vec<Label>,
    instances: Vec<String>,
    settings: Vec<BiasSetting>,
}

/// Option-confidence sweep: exemplars unchanged, then with every exemplar's
/// correct option moved to each label in turn.
pub fn bias(exp: &Experiment, per_label: usize, condition: Condition) -> anyhow::Result<Outcome> {
    let cfg = &exp.config;
    let labels = exp.dataset.labels();
    if labels.len() != 4 {
        return Err(ValidationError(format!(
            "bias needs a 4-option dataset; `{}` has {} options",
            exp.dataset.name,
            labels.len()
        ))
        .into());
    }
    if condition == Condition::ZeroShotCot {
        return Err(ValidationError("zero_shot_cot has no exemplars to remap".into()).into());
    }
    let subset = balanced_subset(&exp.dataset, per_label, cfg.seed())?;
    if subset.is_empty() {
        return Err(ValidationError("per_label must be at least 1".into()).into());
    }
    let originals = exp.exemplars.resolve(&exp.dataset)?;
    let map = if condition == Condition::SelfExp {
        Some(exp.load_map(cfg.mode)?)
    } else {
        None
    };
    check_inference(&InferenceSpec {
        dataset: &exp.dataset,
        split: cfg.split,
        exemplars: &exp.exemplars,
        map: map.as_ref(),
        condition,
        seed: cfg.seed(),
        score: true,
    })?;

    let backend = exp.backend()?;
    let mut settings = Vec::new();
    let targets = std::iter::once(None).chain(labels.iter().cloned().map(Some));
    for target in targets {
        let demos_owned: Vec<QaInstance> = match &target {
            None => originals.iter().map(|i| (*i).clone()).collect(),
            Some(t) => originals
                .iter()
                .map(|i| remap_gold_option(i, t))
                .collect::<Result<_, _>>()?,
        };
        let results = parallel_map(&subset, cfg.backend.max_parallel, |query| {
            let explanations =
                exemplar_explanations(&originals, map.as_ref(), condition, &query.id, cfg.seed())?;
            let demos: Vec<IclExemplar<'_>> = demos_owned
                .iter()
                .zip(&explanations)
                .map(|(instance, explanation)| IclExemplar {
                    instance,
                    explanation: explanation.as_deref(),
                    answer_label: &instance.gold_label,
                })
                .collect();
            let prompt = build_icl_prompt_with_slot(&demos, query, condition, QuerySlot::Answer)?;
            Ok::<_, anyhow::Error>(option_confidences(query, &prompt.text, &backend)?)
        });
        let confidences = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
        settings.push(BiasSetting {
            setting: target
                .as_ref()
                .map_or("original".to_string(), |t| format!("gold_at_{t}")),
            mean_q: mean_option_confidence(&confidences)?,
            bias: selection_bias(&confidences)?,
            target,
            confidences,
        });
    }

    let mut headers = vec!["setting".to_string()];
    headers.extend(labels.iter().map(|l| format!("q_{l}")));
    headers.push("bias".into());
    let mut summary = Table {
        name: "settings".into(),
        headers,
        rows: Vec::new(),
    };
    let mut bars = Table::new("bars", &["setting", "option", "mean_q"]);
    for s in &settings {
        let mut row: Vec<Cell> = vec![s.setting.as_str().into()];
        row.extend(s.mean_q.iter().map(|&q| Cell::Num(q)));
        row.push(s.bias.into());
        summary.push(row);
        for (label, q) in labels.iter().zip(&s.mean_q) {
            bars.push(vec![
                s.setting.as_str().into(),
                label.as_str().into(),
                (*q).into(),
            ]);
        }
    }
    let doc = BiasDoc {
        condition,
        per_label,
        labels: labels.clone(),
        instances: subset.iter().map(|i| i.id.clone()).collect(),
        settings,
    };
    let mut out = Outcome {
        files: write_report(
            &exp.reports_dir(),
            &format!("bias-{condition}"),
            "bias",
            &exp.stamp(),
            &doc,
            &[summary, bars],
        )?,
        ..Default::default()
    };
    for s in &doc.settings {
        out.say(format!("{}: selection bias {:.6}", s.setting, s.bias));
    }
    Ok(out.finish(Some(&backend)))
}

/// Explanation text for each exemplar as seen by one test item.
fn exemplar_explanations(
    exemplars: &[&QaInstance],
    map: Option<&ExplanationMap>,
    condition: Condition,
    test_id: &str,
    seed: u64,
) -> anyhow::Result<Vec<Option<String>>> {
    exemplars
        .iter()
        .map(|inst| {
            Ok(match condition {
                Condition::HumanCot => inst.human_cot.clone(),
                Condition::SelfExp => {
                    let map = map.expect("self_exp map loaded");
                    Some(select_variant(map, &inst.id, test_id, seed)?.1.to_string())
                }
                _ => None,
            })
        })
        .collect()
}

fn lexicon(exp: &Experiment) -> anyhow::Result<Option<LexiconMatcher>> {
    exp.config
        .lexicon
        .as_deref()
        .map(LexiconMatcher::load)
        .transpose()
        .map_err(Into::into)
}

#[derive(Serialize)]
struct SimilarityDoc<'a> {
    mode: selfexplain::selfexplain::ExplainMode,
    skipped_without_human_cot: Vec<String>,
    similarity: &'a SimilarityReport,
}

/// Compares every explanation variant with the human CoT of its exemplar.
pub fn similarity(exp: &Experiment) -> anyhow::Result<Outcome> {
    let map = exp.load_map(exp.config.mode)?;
    let instances = exp.exemplars.resolve(&exp.dataset)?;
    let mut ids = Vec::new();
    let mut texts = Vec::new();
    let mut skipped = Vec::new();
    for inst in &instances {
        let Some(human) = inst.human_cot.as_deref().filter(|h| !h.trim().is_empty()) else {
            skipped.push(inst.id.clone());
            continue;
        };
        let entry = map.get(&inst.id).expect("coverage checked");
        for (v, text) in entry.variants.iter().enumerate() {
            ids.push(format!("{}#{v}", inst.id));
            texts.push((text.as_str(), human));
        }
    }
    if ids.is_empty() {
        return Err(
            ValidationError("no exemplar has a human CoT to compare against".into()).into(),
        );
    }
    if !skipped.is_empty() {
        log::warn!(
            "skipping exemplars without human_cot: {}",
            skipped.join(", ")
        );
    }
    let pairs: Vec<TextPair<'_>> = ids
        .iter()
        .zip(&texts)
        .map(|(id, (s, h))| TextPair {
            instance_id: id,
            self_text: s,
            human_text: h,
        })
        .collect();
    let lex = lexicon(exp)?;
    let report = similarity_report(&pairs, lex.as_ref().map(|l| l as &dyn TermExtractor))?;

    let mut pair_table = Table::new(
        "pairs",
        &[
            "pair",
            "rouge_p",
            "rouge_r",
            "rouge_f",
            "term_f1",
            "len_self",
            "len_human",
        ],
    );
    for p in &report.pairs {
        pair_table.push(vec![
            p.instance_id.as_str().into(),
            p.rouge_l.precision.into(),
            p.rouge_l.recall.into(),
            p.rouge_l.f.into(),
            p.term_f1.into(),
            p.len_self.into(),
            p.len_human.into(),
        ]);
    }
    let mut summary = Table::new("summary", &["metric", "mean", "stddev"]);
    for (name, m) in [
        ("rouge_p", Some(&report.rouge_precision)),
        ("rouge_r", Some(&report.rouge_recall)),
        ("rouge_f", Some(&report.rouge_f)),
        ("term_f1", report.term_f1.as_ref()),
    ] {
        summary.push(vec![
            name.into(),
            m.map(|m| m.mean).into(),
            m.map(|m| m.stddev).into(),
        ]);
    }
    summary.push(vec![
        "len_self".into(),
        report.len_self.mean.into(),
        report.len_self.stddev.into(),
    ]);
    summary.push(vec![
        "len_human".into(),
        report.len_human.mean.into(),
        report.len_human.stddev.into(),
    ]);
    let mut lengths = Table::new("lengths", &["source", "lower", "upper", "count"]);
    for (source, stats) in [("self", &report.len_self), ("human", &report.len_human)] {
        for b in &stats.histogram {
            lengths.push(vec![
                source.into(),
                b.lower.into(),
                b.upper.into(),
                b.count.into(),
            ]);
        }
    }
    let doc = SimilarityDoc {
        mode: exp.config.mode,
        skipped_without_human_cot: skipped,
        similarity: &report,
    };
    let mut out = Outcome {
        files: write_report(
            &exp.reports_dir(),
            &format!("similarity-{}", exp.config.mode),
            "similarity",
            &exp.stamp(),
            &doc,
            &[pair_table, summary, lengths],
        )?,
        ..Default::default()
    };
    out.say(format!(
        "{} pairs: ROUGE-L f {:.4}{}",
        report.pairs.len(),
        report.rouge_f.mean,
        report
            .term_f1
            .as_ref()
            .map(|t| format!(", term F1 {:.4}", t.mean))
            .unwrap_or_else(|| ", term F1 n/a (no lexicon)".into())
    ));
    Ok(out)
}

#[derive(Serialize)]
struct LikelihoodDoc {
    mode: selfexplain::selfexplain::ExplainMode,
    variant: usize,
    self_explanations: LikelihoodReport,
    human_cot: Option<LikelihoodReport>,
}

/// Mean probability of each exemplar's gold label given its explanation,
/// for self-explanations and, where present, human CoTs.
pub fn likelihood(exp: &Experiment, variant: usize) -> anyhow::Result<Outcome> {
    let map = exp.load_map(exp.config.mode)?;
    let instances = exp.exemplars.resolve(&exp.dataset)?;
    let mut self_pairs = Vec::new();
    for inst in &instances {
        let entry = map.get(&inst.id).expect("coverage checked");
        let text = entry.variants.get(variant).ok_or_else(|| {
            ValidationError(format!(
                "exemplar `{}` has {} variants; --variant {variant} is out of range",
                inst.id,
                entry.variants.len()
            ))
        })?;
        self_pairs.push((*inst, text.as_str()));
    }
    let human_pairs: Vec<(&QaInstance, &str)> = instances
        .iter()
        .filter_map(|i| i.human_cot.as_deref().map(|h| (*i, h)))
        .collect();
    let backend = exp.backend()?;
    let self_report = mean_answer_likelihood(&self_pairs, &backend)?;
    let human_report = if human_pairs.is_empty() {
        None
    } else {
        Some(mean_answer_likelihood(&human_pairs, &backend)?)
    };

    let mut table = Table::new(
        "exemplars",
        &["source", "exemplar", "probability", "sum_logprob"],
    );
    let mut summary = Table::new("summary", &["source", "n", "mean_probability"]);
    for (source, rep) in [
        ("self", Some(&self_report)),
        ("human", human_report.as_ref()),
    ] {
        let Some(rep) = rep else { continue };
        for e in &rep.per_exemplar {
            table.push(vec![
                source.into(),
                e.exemplar_id.as_str().into(),
                e.probability.into(),
                e.sum_logprob.into(),
            ]);
        }
        summary.push(vec![
            source.into(),
            rep.per_exemplar.len().into(),
            rep.mean_probability.into(),
        ]);
    }
    let doc = LikelihoodDoc {
        mode: exp.config.mode,
        variant,
        self_explanations: self_report,
        human_cot: human_report,
    };
    let mut out = Outcome {
        files: write_report(
            &exp.reports_dir(),
            &format!("likelihood-{}", exp.config.mode),
            "likelihood",
            &exp.stamp(),
            &doc,
            &[summary, table],
        )?,
        ..Default::default()
    };
    out.say(format!(
        "mean P(gold | self-explanation) = {:.4}",
        doc.self_explanations.mean_probability
    ));
    if let Some(h) = &doc.human_cot {
        out.say(format!(
            "mean P(gold | human CoT) = {:.4}",
            h.mean_probability
        ));
    }
    Ok(out.finish(Some(&backend)))
}

#[derive(Serialize)]
struct RunSummary {
    file: String,
    condition: Condition,
    config_digest: String,
    n: usize,
    correct: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct Bundle {
    runs: Vec<RunSummary>,
    reports: BTreeMap<String, Value>,
}

/// Merges run accuracies and every report of the experiment into one bundle.
pub fn report(exp: &Experiment) -> anyhow::Result<Outcome> {
    let mut runs = Vec::new();
    for path in existing_runs(exp)? {
        let (header, records): (RunHeader, Vec<RunRecord>) = read_run_file(&path)?;
        let acc = selfexplain::metrics::accuracy_summary(&records)?;
        runs.push(RunSummary {
            file: file_stem(&path),
            condition: header.condition,
            config_digest: header.config_digest,
            n: acc.n,
            correct: acc.correct,
            accuracy: acc.accuracy,
        });
    }
    let mut reports = BTreeMap::new();
    let dir = exp.reports_dir();
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let value: Value = serde_json::from_slice(&std::fs::read(&p)?)
                .map_err(|e| ValidationError(format!("{}: {e}", p.display())))?;
            reports.insert(file_stem(&p), value);
        }
    }
    if runs.is_empty() && reports.is_empty() {
        return Err(
            ValidationError("nothing to report yet; run some subcommands first".into()).into(),
        );
    }
    let mut table = Table::new(
        "accuracy",
        &["run", "condition", "n", "correct", "accuracy"],
    );
    for r in &runs {
        table.push(vec![
            r.file.as_str().into(),
            r.condition.as_str().into(),
            r.n.into(),
            r.correct.into(),
            r.accuracy.into(),
        ]);
    }
    let mut listing = Table::new("reports", &["report", "kind"]);
    for (name, v) in &reports {
        listing.push(vec![
            name.as_str().into(),
            v.get("kind").and_then(Value::as_str).unwrap_or("?").into(),
        ]);
    }
    let mut out = Outcome::default();
    out.say(table.aligned().trim_end().to_string());
    out.files = write_report(
        &exp.dir,
        "report",
        "bundle",
        &exp.stamp(),
        &Bundle { runs, reports },
        &[table, listing],
    )?;
    Ok(out)
}
