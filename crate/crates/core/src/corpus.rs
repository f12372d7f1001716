//! Question-answering datasets, exemplar sampling and the option-remapping
//! control used by the selection-bias experiments.
//!
//! Datasets are read from JSONL, one record per line:
//!
//! ```text
//! {"id": "q1", "question": "...", "options": ["...", "...", "...", "..."],
//!  "answer": "B", "human_cot": "...", "split": "train"}
//! ```
//!
//! * `options` is A-indexed in order. It may be omitted for yes/no records.
//! * `answer` is a label string (`"B"`), a 0-based option index (`1`), or, for
//!   yes/no datasets, a boolean (or the strings `"yes"` / `"no"`).
//! * `human_cot` is optional; `split` is one of `train`, `dev`, `test`.
//!
//! Yes/no records are normalized to two options labelled `yes` and `no`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{json_digest, seeded_rng};

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance `{id}`: {message}")]
    Validation { id: String, message: String },
    #[error("duplicate instance id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("dataset `{dataset}`: {message}")]
    InvalidDataset { dataset: String, message: String },
    #[error("requested {requested} exemplars but the train split has only {available}")]
    InsufficientTrain { requested: usize, available: usize },
    #[error("instance `{id}` has no wrong option to choose from")]
    NoWrongOption { id: String },
    #[error("label `{label}` is not an option of instance `{id}`")]
    InvalidLabel { id: String, label: String },
    #[error("label `{label}` has {available} test instances, {needed} needed")]
    InsufficientLabel {
        label: Label,
        needed: usize,
        available: usize,
    },
}

/// An option label: `A`..`D` for multiple choice, `yes` / `no` for boolean QA.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(String);

impl Label {
    pub fn letter(index: usize) -> Option<Label> {
        LETTERS.get(index).map(|s| Label((*s).to_string()))
    }

    pub fn yes() -> Label {
        Label("yes".into())
    }

    pub fn no() -> Label {
        Label("no".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_letter(&self) -> bool {
        LETTERS.contains(&self.0.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "B" | "C" | "D" | "yes" | "no" => Ok(Label(s.to_string())),
            other => Err(format!("invalid option label `{other}`")),
        }
    }
}

impl TryFrom<String> for Label {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Label> for String {
    fn from(label: Label) -> String {
        label.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Which answer format a dataset file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSchema {
    /// Lettered options, answer given as a label or an index.
    MultipleChoice,
    /// Boolean answers, normalized to `yes` / `no` options.
    YesNo,
}

impl FromStr for DatasetSchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiple-choice" | "mcq" => Ok(DatasetSchema::MultipleChoice),
            "yes-no" | "yesno" | "boolean" => Ok(DatasetSchema::YesNo),
            other => Err(format!("unknown dataset schema `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaOption {
    pub label: Label,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    pub options: Vec<QaOption>,
    pub gold_label: Label,
    pub human_cot: Option<String>,
    pub split: Split,
}

impl QaInstance {
    pub fn option(&self, label: &Label) -> Option<&QaOption> {
        self.options.iter().find(|o| &o.label == label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.options.iter().map(|o| &o.label)
    }

    pub fn has_label(&self, label: &Label) -> bool {
        self.option(label).is_some()
    }

    pub fn gold_text(&self) -> &str {
        self.option(&self.gold_label)
            .map(|o| o.text.as_str())
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Validation {
            id: self.id.clone(),
            message,
        };
        if !(2..=4).contains(&self.options.len()) {
            return Err(invalid(format!(
                "expected 2 to 4 options, found {}",
                self.options.len()
            )));
        }
        let mut seen = HashSet::new();
        for option in &self.options {
            if !seen.insert(&option.label) {
                return Err(invalid(format!(
                    "duplicate option label `{}`",
                    option.label
                )));
            }
        }
        let gold_hits = self.labels().filter(|l| **l == self.gold_label).count();
        if gold_hits != 1 {
            return Err(invalid(format!(
                "gold label `{}` is not among the options",
                self.gold_label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<QaInstance>,
    pub option_arity: usize,
}

impl Dataset {
    /// Validates every instance and the dataset-level invariants.
    pub fn new(name: impl Into<String>, instances: Vec<QaInstance>) -> Result<Self, CorpusError> {
        let name = name.into();
        let mut ids = HashSet::new();
        for (i, instance) in instances.iter().enumerate() {
            instance.validate()?;
            if !ids.insert(instance.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: instance.id.clone(),
                    line: i + 1,
                });
            }
        }
        let Some(first) = instances.first() else {
            return Err(CorpusError::InvalidDataset {
                dataset: name,
                message: "no instances".into(),
            });
        };
        let labels: Vec<&Label> = first.labels().collect();
        if let Some(odd) = instances
            .iter()
            .find(|inst| !inst.labels().eq(labels.iter().copied()))
        {
            return Err(CorpusError::InvalidDataset {
                dataset: name,
                message: format!(
                    "instance `{}` has options {:?}, expected {:?}",
                    odd.id,
                    odd.labels().map(Label::as_str).collect::<Vec<_>>(),
                    labels.iter().map(|l| l.as_str()).collect::<Vec<_>>()
                ),
            });
        }
        let option_arity = labels.len();
        Ok(Dataset {
            name,
            instances,
            option_arity,
        })
    }

    pub fn get(&self, id: &str) -> Option<&QaInstance> {
        self.instances.iter().find(|inst| inst.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &QaInstance> {
        self.instances
            .iter()
            .filter(move |inst| inst.split == split)
    }

    /// The label sequence shared by every instance.
    pub fn labels(&self) -> Vec<Label> {
        self.instances[0].labels().cloned().collect()
    }

    pub fn is_yes_no(&self) -> bool {
        self.labels() == [Label::yes(), Label::no()]
    }

    pub fn schema(&self) -> DatasetSchema {
        if self.is_yes_no() {
            DatasetSchema::YesNo
        } else {
            DatasetSchema::MultipleChoice
        }
    }

    /// Serializes back to the JSONL input format.
    pub fn to_jsonl(&self) -> String {
        let yes_no = self.is_yes_no();
        let mut out = String::new();
        for inst in &self.instances {
            let texts: Vec<String> = inst.options.iter().map(|o| o.text.clone()).collect();
            let default_yes_no = yes_no && texts == [YES_TEXT, NO_TEXT];
            let record = RawRecord {
                id: inst.id.clone(),
                question: inst.question.clone(),
                options: if default_yes_no { None } else { Some(texts) },
                answer: if yes_no {
                    RawAnswer::Bool(inst.gold_label == Label::yes())
                } else {
                    RawAnswer::Label(inst.gold_label.to_string())
                },
                human_cot: inst.human_cot.clone(),
                split: inst.split,
            };
            out.push_str(&serde_json::to_string(&record).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

const YES_TEXT: &str = "yes";
const NO_TEXT: &str = "no";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<String>>,
    answer: RawAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    human_cot: Option<String>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawAnswer {
    Bool(bool),
    Index(u64),
    Label(String),
}

fn normalize_record(
    raw: RawRecord,
    schema: DatasetSchema,
    line: usize,
) -> Result<QaInstance, CorpusError> {
    let parse_err = |message: String| CorpusError::Parse { line, message };
    let (options, gold_label) = match schema {
        DatasetSchema::MultipleChoice => {
            let texts = raw.options.unwrap_or_default();
            if !(2..=4).contains(&texts.len()) {
                return Err(parse_err(format!(
                    "expected 2 to 4 options, found {}",
                    texts.len()
                )));
            }
            let options: Vec<QaOption> = texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| QaOption {
                    label: Label::letter(i).expect("at most four options"),
                    text,
                })
                .collect();
            let gold = match raw.answer {
                RawAnswer::Label(s) => {
                    s.trim()
                        .parse::<Label>()
                        .map_err(|e| CorpusError::Validation {
                            id: raw.id.clone(),
                            message: e,
                        })?
                }
                RawAnswer::Index(i) => {
                    Label::letter(i as usize).ok_or_else(|| CorpusError::Validation {
                        id: raw.id.clone(),
                        message: format!("answer index {i} out of range"),
                    })?
                }
                RawAnswer::Bool(_) => {
                    return Err(parse_err(
                        "boolean answer in a multiple-choice dataset".into(),
                    ))
                }
            };
            (options, gold)
        }
        DatasetSchema::YesNo => {
            let texts = match raw.options {
                None => vec![YES_TEXT.to_string(), NO_TEXT.to_string()],
                Some(t) if t.is_empty() => vec![YES_TEXT.to_string(), NO_TEXT.to_string()],
                Some(t) if t.len() == 2 => t,
                Some(t) => {
                    return Err(parse_err(format!(
                        "yes/no record must have 0 or 2 options, found {}",
                        t.len()
                    )))
                }
            };
            let gold = match raw.answer {
                RawAnswer::Bool(true) => Label::yes(),
                RawAnswer::Bool(false) => Label::no(),
                RawAnswer::Label(s) => match s.trim().to_ascii_lowercase().as_str() {
                    "yes" | "true" => Label::yes(),
                    "no" | "false" => Label::no(),
                    other => {
                        return Err(CorpusError::Validation {
                            id: raw.id,
                            message: format!("`{other}` is not a yes/no answer"),
                        })
                    }
                },
                RawAnswer::Index(_) => {
                    return Err(parse_err("numeric answer in a yes/no dataset".into()))
                }
            };
            let mut texts = texts.into_iter();
            let options = vec![
                QaOption {
                    label: Label::yes(),
                    text: texts.next().expect("two texts"),
                },
                QaOption {
                    label: Label::no(),
                    text: texts.next().expect("two texts"),
                },
            ];
            (options, gold)
        }
    };
    let instance = QaInstance {
        id: raw.id,
        question: raw.question,
        options,
        gold_label,
        human_cot: raw.human_cot,
        split: raw.split,
    };
    instance.validate()?;
    Ok(instance)
}

/// Parses JSONL text into a validated dataset. Blank lines are skipped.
pub fn parse_dataset(
    name: &str,
    text: &str,
    schema: DatasetSchema,
) -> Result<Dataset, CorpusError> {
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let instance = normalize_record(raw, schema, line_no)?;
        if !seen.insert(instance.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: instance.id,
                line: line_no,
            });
        }
        instances.push(instance);
    }
    Dataset::new(name, instances)
}

/// Loads a dataset file; the dataset is named after the file stem.
pub fn load_dataset(path: &Path, schema: DatasetSchema) -> Result<Dataset, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_dataset(&name, &text, schema)
}

/// The K demonstrations shared by every prompting condition of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub dataset_name: String,
    pub seed: u64,
    pub members: Vec<String>,
}

impl ExemplarSet {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Resolves member ids to instances, in member order.
    pub fn resolve<'a>(&self, dataset: &'a Dataset) -> Result<Vec<&'a QaInstance>, CorpusError> {
        self.members
            .iter()
            .map(|id| {
                dataset.get(id).ok_or_else(|| CorpusError::Validation {
                    id: id.clone(),
                    message: format!("exemplar not found in dataset `{}`", dataset.name),
                })
            })
            .collect()
    }
}

/// Draws `k` distinct train-split instances, uniformly and without replacement.
pub fn sample_exemplars(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<ExemplarSet, CorpusError> {
    let train: Vec<&QaInstance> = dataset.split(Split::Train).collect();
    if k > train.len() {
        return Err(CorpusError::InsufficientTrain {
            requested: k,
            available: train.len(),
        });
    }
    let mut rng = seeded_rng("exemplars", &[&seed.to_le_bytes()]);
    let members = rand::seq::index::sample(&mut rng, train.len(), k)
        .into_iter()
        .map(|i| train[i].id.clone())
        .collect();
    Ok(ExemplarSet {
        dataset_name: dataset.name.clone(),
        seed,
        members,
    })
}

/// Picks a non-gold label uniformly, deterministically per (instance id, seed).
pub fn sample_wrong_label(instance: &QaInstance, seed: u64) -> Result<Label, CorpusError> {
    let wrong: Vec<&Label> = instance
        .labels()
        .filter(|l| **l != instance.gold_label)
        .collect();
    if wrong.is_empty() {
        return Err(CorpusError::NoWrongOption {
            id: instance.id.clone(),
        });
    }
    let mut rng = seeded_rng(
        "wrong-label",
        &[instance.id.as_bytes(), &seed.to_le_bytes()],
    );
    Ok(wrong[rng.random_range(0..wrong.len())].clone())
}

/// Moves the gold option's text to `target` by swapping it with whatever text
/// sits there. All other options keep their positions.
pub fn remap_gold_option(instance: &QaInstance, target: &Label) -> Result<QaInstance, CorpusError> {
    let invalid = || CorpusError::InvalidLabel {
        id: instance.id.clone(),
        label: target.to_string(),
    };
    let target_pos = instance
        .options
        .iter()
        .position(|o| &o.label == target)
        .ok_or_else(invalid)?;
    let gold_pos = instance
        .options
        .iter()
        .position(|o| o.label == instance.gold_label)
        .ok_or_else(invalid)?;
    let mut remapped = instance.clone();
    if gold_pos != target_pos {
        let gold_text = std::mem::take(&mut remapped.options[gold_pos].text);
        remapped.options[gold_pos].text =
            std::mem::replace(&mut remapped.options[target_pos].text, gold_text);
    }
    remapped.gold_label = target.clone();
    Ok(remapped)
}

/// Test instances with exactly `per_label` items for every gold label,
/// grouped by label in option order.
pub fn balanced_subset(
    dataset: &Dataset,
    per_label: usize,
    seed: u64,
) -> Result<Vec<QaInstance>, CorpusError> {
    let mut subset = Vec::with_capacity(per_label * dataset.option_arity);
    for label in dataset.labels() {
        let group: Vec<&QaInstance> = dataset
            .split(Split::Test)
            .filter(|inst| inst.gold_label == label)
            .collect();
        if group.len() < per_label {
            return Err(CorpusError::InsufficientLabel {
                label,
                needed: per_label,
                available: group.len(),
            });
        }
        let mut rng = seeded_rng(
            "balanced",
            &[label.as_str().as_bytes(), &seed.to_le_bytes()],
        );
        subset.extend(
            rand::seq::index::sample(&mut rng, group.len(), per_label)
                .into_iter()
                .map(|i| group[i].clone()),
        );
    }
    Ok(subset)
}
