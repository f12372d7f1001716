//! Cue catalog, prompt rendering and completion parsing.
//!
//! Templates live in `templates/*.txt` as plain text with `{{name}}`
//! placeholders. They are compiled in and versioned by [`TEMPLATE_VERSION`];
//! any edit to a template must bump the version so run artifacts stay
//! attributable to the revision that produced them.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, QaInstance};
use crate::hashing::sha256_hex;

pub const TEMPLATE_VERSION: &str = "v1";

const EXPLAIN_GEN: &str = include_str!("../templates/explain_gen.txt");
const EXPLAIN_DIVERSITY: &str = include_str!("../templates/explain_diversity.txt");
const ICL_EXEMPLAR: &str = include_str!("../templates/icl_exemplar.txt");
const ICL_EXEMPLAR_COT: &str = include_str!("../templates/icl_exemplar_cot.txt");
const ICL_QUERY: &str = include_str!("../templates/icl_query.txt");
const ICL_QUERY_COT: &str = include_str!("../templates/icl_query_cot.txt");
const ZERO_SHOT_COT: &str = include_str!("../templates/zero_shot_cot.txt");
const ZERO_SHOT_EXTRACT: &str = include_str!("../templates/zero_shot_extract.txt");
const ANSWER_LIKELIHOOD: &str = include_str!("../templates/answer_likelihood.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("label `{label}` is not an option of instance `{id}`")]
    InvalidLabel { id: String, label: Label },
    #[error("exemplar `{id}` has no explanation, required by condition {condition}")]
    MissingExplanation { id: String, condition: Condition },
    #[error("variant count must be at least 1")]
    ZeroVariants,
    #[error("completion is empty")]
    EmptyCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Medical,
    General,
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "medical" => Ok(Domain::Medical),
            "general" => Ok(Domain::General),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// An instruction sentence that elicits an explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cue {
    pub id: u8,
    pub text_medical: &'static str,
    pub text_general: &'static str,
}

const CUES: [Cue; 4] = [
    Cue {
        id: 1,
        text_medical: "Explain how to reach this answer.",
        text_general: "Explain how to reach this answer.",
    },
    Cue {
        id: 2,
        text_medical: "Let's think step by step.",
        text_general: "Let's think step by step.",
    },
    Cue {
        id: 3,
        text_medical: "Let's think step by step like a medical expert.",
        text_general: "Let's think step by step like an expert.",
    },
    Cue {
        id: 4,
        text_medical: "Let\u{2019}s use step by step inductive reasoning, given the medical nature of the question.",
        text_general: "Let\u{2019}s use step by step inductive reasoning.",
    },
];

impl Cue {
    pub fn catalog() -> &'static [Cue] {
        &CUES
    }

    pub fn by_id(id: u8) -> Option<Cue> {
        CUES.iter().copied().find(|c| c.id == id)
    }

    /// Cue #1, the best-performing one.
    pub fn default_cue() -> Cue {
        CUES[0]
    }

    pub fn text(&self, domain: Domain) -> &'static str {
        match domain {
            Domain::Medical => self.text_medical,
            Domain::General => self.text_general,
        }
    }
}

/// The four inference conditions compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoCot,
    ZeroShotCot,
    HumanCot,
    SelfExp,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::NoCot,
        Condition::ZeroShotCot,
        Condition::HumanCot,
        Condition::SelfExp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::NoCot => "no_cot",
            Condition::ZeroShotCot => "zero_shot_cot",
            Condition::HumanCot => "human_cot",
            Condition::SelfExp => "self_exp",
        }
    }

    /// Whether exemplar blocks carry an explanation line.
    pub fn uses_explanations(&self) -> bool {
        matches!(self, Condition::HumanCot | Condition::SelfExp)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    NoCot,
    ZeroShotCot,
    HumanCot,
    SelfExp,
    ExplainGen,
}

impl From<Condition> for PromptKind {
    fn from(c: Condition) -> Self {
        match c {
            Condition::NoCot => PromptKind::NoCot,
            Condition::ZeroShotCot => PromptKind::ZeroShotCot,
            Condition::HumanCot => PromptKind::HumanCot,
            Condition::SelfExp => PromptKind::SelfExp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub condition: PromptKind,
    pub text: String,
    pub template_version: String,
    pub content_hash: String,
}

impl PromptBundle {
    pub fn new(condition: PromptKind, text: String) -> Self {
        let content_hash = sha256_hex(&text);
        PromptBundle {
            condition,
            text,
            template_version: TEMPLATE_VERSION.to_string(),
            content_hash,
        }
    }
}

/// Substitutes `{{name}}` placeholders. Templates are compile-time constants,
/// so an unknown or unterminated placeholder is a programming error.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let template = template.strip_suffix('\n').unwrap_or(template);
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").expect("unterminated template placeholder");
        let name = &after[..end];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("template placeholder `{name}` has no value"));
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

fn render_options(instance: &QaInstance) -> String {
    instance
        .options
        .iter()
        .map(|o| {
            if o.text.eq_ignore_ascii_case(o.label.as_str()) {
                format!("({})", o.label)
            } else {
                format!("({}) {}", o.label, o.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_label(label: &Label) -> String {
    format!("({label})")
}

fn check_label(instance: &QaInstance, label: &Label) -> Result<(), PromptError> {
    if instance.has_label(label) {
        Ok(())
    } else {
        Err(PromptError::InvalidLabel {
            id: instance.id.clone(),
            label: label.clone(),
        })
    }
}

/// Prompt asking the model to explain why `answer_label` answers `instance`.
///
/// Only `answer_label` is ever stated as the answer, so wrong-answer
/// generation never leaks the gold label.
pub fn build_explanation_prompt(
    instance: &QaInstance,
    answer_label: &Label,
    cue: &Cue,
    domain: Domain,
    n_variants: usize,
) -> Result<PromptBundle, PromptError> {
    if n_variants == 0 {
        return Err(PromptError::ZeroVariants);
    }
    check_label(instance, answer_label)?;
    let answer_text = instance
        .option(answer_label)
        .map(|o| o.text.as_str())
        .unwrap_or_default();
    let answer = if answer_text.eq_ignore_ascii_case(answer_label.as_str()) {
        render_label(answer_label)
    } else {
        format!("{} {answer_text}", render_label(answer_label))
    };
    let options = render_options(instance);
    let mut text = fill(
        EXPLAIN_GEN,
        &[
            ("question", &instance.question),
            ("options", &options),
            ("answer", &answer),
            ("cue", cue.text(domain)),
        ],
    );
    if n_variants > 1 {
        text.push('\n');
        text.push_str(&fill(EXPLAIN_DIVERSITY, &[("n", &n_variants.to_string())]));
    }
    Ok(PromptBundle::new(PromptKind::ExplainGen, text))
}

/// One demonstration block of an ICL prompt.
#[derive(Debug, Clone, Copy)]
pub struct IclExemplar<'a> {
    pub instance: &'a QaInstance,
    pub explanation: Option<&'a str>,
    pub answer_label: &'a Label,
}

/// Where the query block stops and the model takes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySlot {
    /// `Explanation:`, so the model reasons before answering.
    Reasoning,
    /// `Answer:`, for direct answers and option scoring.
    Answer,
}

/// Renders the ICL prompt for `condition` with the condition's natural slot.
pub fn build_icl_prompt(
    exemplars: &[IclExemplar<'_>],
    query: &QaInstance,
    condition: Condition,
) -> Result<PromptBundle, PromptError> {
    let slot = if condition.uses_explanations() {
        QuerySlot::Reasoning
    } else {
        QuerySlot::Answer
    };
    build_icl_prompt_with_slot(exemplars, query, condition, slot)
}

pub fn build_icl_prompt_with_slot(
    exemplars: &[IclExemplar<'_>],
    query: &QaInstance,
    condition: Condition,
    slot: QuerySlot,
) -> Result<PromptBundle, PromptError> {
    let query_options = render_options(query);
    if condition == Condition::ZeroShotCot {
        let text = fill(
            ZERO_SHOT_COT,
            &[
                ("question", &query.question),
                ("options", &query_options),
                ("cue", Cue::by_id(2).expect("cue #2 exists").text_general),
            ],
        );
        return Ok(PromptBundle::new(PromptKind::ZeroShotCot, text));
    }

    let mut blocks = Vec::with_capacity(exemplars.len() + 1);
    for ex in exemplars {
        check_label(ex.instance, ex.answer_label)?;
        let options = render_options(ex.instance);
        let answer = render_label(ex.answer_label);
        let block = if condition.uses_explanations() {
            let explanation = ex
                .explanation
                .map(str::trim)
                .filter(|e| !e.is_empty())
                .ok_or_else(|| PromptError::MissingExplanation {
                    id: ex.instance.id.clone(),
                    condition,
                })?;
            fill(
                ICL_EXEMPLAR_COT,
                &[
                    ("question", &ex.instance.question),
                    ("options", &options),
                    ("explanation", explanation),
                    ("answer", &answer),
                ],
            )
        } else {
            fill(
                ICL_EXEMPLAR,
                &[
                    ("question", &ex.instance.question),
                    ("options", &options),
                    ("answer", &answer),
                ],
            )
        };
        blocks.push(block);
    }
    let query_template = match slot {
        QuerySlot::Reasoning if condition.uses_explanations() => ICL_QUERY_COT,
        _ => ICL_QUERY,
    };
    blocks.push(fill(
        query_template,
        &[("question", &query.question), ("options", &query_options)],
    ));
    Ok(PromptBundle::new(condition.into(), blocks.join("\n\n")))
}

/// Second stage of zero-shot CoT: feed the reasoning back and ask for the
/// answer alone.
pub fn build_zero_shot_extraction(
    reasoning_prompt: &PromptBundle,
    reasoning: &str,
    query: &QaInstance,
) -> PromptBundle {
    let labels: Vec<String> = query.labels().map(render_label).collect();
    let choices = match labels.as_slice() {
        [] => String::new(),
        [only] => only.clone(),
        [a, b] => format!("{a} and {b}"),
        [first, .., last] => format!("{first} through {last}"),
    };
    let text = fill(
        ZERO_SHOT_EXTRACT,
        &[
            ("reasoning_prompt", &reasoning_prompt.text),
            ("reasoning", reasoning.trim()),
            ("choices", &choices),
        ],
    );
    PromptBundle::new(PromptKind::ZeroShotCot, text)
}

/// Prefix whose next token is the option label, for answer-likelihood scoring
/// of an exemplar under a given explanation.
pub fn answer_likelihood_prefix(instance: &QaInstance, explanation: &str) -> String {
    let options = render_options(instance);
    fill(
        ANSWER_LIKELIHOOD,
        &[
            ("question", &instance.question),
            ("options", &options),
            ("explanation", explanation.trim()),
        ],
    )
}

/// Prefix for scoring the label the model produced after `prompt`.
///
/// `prompt` must end at an `Answer:` or `Explanation:` slot. For reasoning
/// slots the generated reasoning is replayed before the answer slot.
pub fn answer_scoring_prefix(prompt: &str, reasoning: Option<&str>) -> String {
    match reasoning.map(str::trim) {
        Some(r) => {
            let r = r.strip_suffix("Answer:").unwrap_or(r).trim_end();
            format!("{prompt} {r}\nAnswer: (")
        }
        None => format!("{prompt} ("),
    }
}

/// The labels a rendered prompt states as answers (`Answer: (X)` lines).
pub fn asserted_answer_labels(prompt: &str) -> Vec<Label> {
    static ANSWER_LINE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?m)^Answer: \((A|B|C|D|yes|no)\)").unwrap());
    ANSWER_LINE
        .captures_iter(prompt)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub label: Option<Label>,
    pub raw_span: String,
    /// Byte offset of `raw_span` in the completion.
    pub offset: Option<usize>,
    pub status: ParseStatus,
}

impl ParsedAnswer {
    fn ok(label: Label, raw_span: &str, offset: usize) -> Self {
        ParsedAnswer {
            label: Some(label),
            raw_span: raw_span.to_string(),
            offset: Some(offset),
            status: ParseStatus::Ok,
        }
    }

    pub fn failure() -> Self {
        ParsedAnswer {
            label: None,
            raw_span: String::new(),
            offset: None,
            status: ParseStatus::ParseFailure,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }
}

fn label_alternation(instance: &QaInstance) -> String {
    instance
        .labels()
        .map(|l| {
            if l.is_letter() {
                regex::escape(l.as_str())
            } else {
                format!("(?i:{})", regex::escape(l.as_str()))
            }
        })
        .collect::<Vec<_>>()
        .join("|")
}

fn resolve_label(instance: &QaInstance, raw: &str) -> Option<Label> {
    instance
        .labels()
        .find(|l| {
            if l.is_letter() {
                l.as_str() == raw
            } else {
                l.as_str().eq_ignore_ascii_case(raw)
            }
        })
        .cloned()
}

/// Extracts the answer label from a completion.
///
/// Rules, highest priority first; within a rule the earliest match wins:
/// 1. `answer is (L)` / `Answer: L`
/// 2. a standalone `(L)` or `L.` token
/// 3. an option text appearing verbatim (case-insensitive, whole words)
pub fn parse_answer(completion: &str, instance: &QaInstance) -> ParsedAnswer {
    let labels = label_alternation(instance);
    if labels.is_empty() {
        return ParsedAnswer::failure();
    }

    let explicit = Regex::new(&format!(
        r"(?i:answer\s+is\s*:?|answer\s*:)\s*\(?\s*({labels})\b\s*\)?"
    ))
    .expect("answer regex");
    if let Some(c) = explicit.captures(completion) {
        let whole = c.get(0).expect("group 0");
        if let Some(label) = resolve_label(instance, &c[1]) {
            return ParsedAnswer::ok(label, whole.as_str().trim_end(), whole.start());
        }
    }

    let standalone = Regex::new(&format!(
        r"\(\s*({labels})\s*\)|(?:^|\s)(({labels})\.)(?:\s|$)"
    ))
    .expect("standalone regex");
    if let Some(c) = standalone.captures(completion) {
        let (span, raw) = match (c.get(1), c.get(2), c.get(3)) {
            (Some(inner), _, _) => (c.get(0).expect("group 0"), inner.as_str()),
            (None, Some(token), Some(inner)) => (token, inner.as_str()),
            _ => unreachable!("one alternative always matches"),
        };
        if let Some(label) = resolve_label(instance, raw) {
            return ParsedAnswer::ok(label, span.as_str(), span.start());
        }
    }

    let mut best: Option<(usize, usize, &Label)> = None;
    for option in &instance.options {
        let text = option.text.trim();
        if text.is_empty() {
            continue;
        }
        let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
        let lead = if word(text.chars().next()) { r"\b" } else { "" };
        let tail = if word(text.chars().last()) { r"\b" } else { "" };
        let re =
            Regex::new(&format!("(?i){lead}{}{tail}", regex::escape(text))).expect("option regex");
        if let Some(m) = re.find(completion) {
            let better = match best {
                None => true,
                Some((start, len, _)) => m.start() < start || (m.start() == start && m.len() > len),
            };
            if better {
                best = Some((m.start(), m.len(), &option.label));
            }
        }
    }
    match best {
        Some((start, len, label)) => {
            ParsedAnswer::ok(label.clone(), &completion[start..start + len], start)
        }
        None => ParsedAnswer::failure(),
    }
}

/// Splits a completion into enumerated explanation variants (`1.`, `2)`,
/// `Variant 3:`). Text before the first enumerator is dropped; a completion
/// with no enumerators is a single variant. At most `n_expected` are returned.
pub fn parse_explanation_variants(
    completion: &str,
    n_expected: usize,
) -> Result<Vec<String>, PromptError> {
    static ENUMERATOR: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?im)^[ \t]*(?:variant[ \t]*\d+[ \t]*[:.)]|\d+[.)](?:[ \t]|$))[ \t]*").unwrap()
    });
    if n_expected == 0 {
        return Err(PromptError::ZeroVariants);
    }
    if completion.trim().is_empty() {
        return Err(PromptError::EmptyCompletion);
    }
    let starts: Vec<(usize, usize)> = ENUMERATOR
        .find_iter(completion)
        .map(|m| (m.start(), m.end()))
        .collect();
    if starts.is_empty() {
        return Ok(vec![completion.trim().to_string()]);
    }
    let mut variants = Vec::new();
    for (i, &(_, body_start)) in starts.iter().enumerate() {
        let body_end = starts.get(i + 1).map_or(completion.len(), |&(s, _)| s);
        let body = completion[body_start..body_end].trim();
        if !body.is_empty() {
            variants.push(body.to_string());
        }
    }
    if variants.is_empty() {
        return Err(PromptError::EmptyCompletion);
    }
    variants.truncate(n_expected);
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{QaOption, Split};
    use proptest::prelude::*;

    fn instance(id: &str, gold: &str) -> QaInstance {
        QaInstance {
            id: id.into(),
            question: format!("Which drug fits case {id}?"),
            options: ["Propofol", "Ketamine", "Halothane", "Nitrous oxide"]
                .iter()
                .enumerate()
                .map(|(i, t)| QaOption {
                    label: Label::letter(i).unwrap(),
                    text: (*t).into(),
                })
                .collect(),
            gold_label: gold.parse().unwrap(),
            human_cot: Some(format!("Human reasoning for {id}.")),
            split: Split::Train,
        }
    }

    fn yes_no(id: &str) -> QaInstance {
        QaInstance {
            id: id.into(),
            question: "Is Cape Town south of the Equator?".into(),
            options: vec![
                QaOption {
                    label: Label::yes(),
                    text: "yes".into(),
                },
                QaOption {
                    label: Label::no(),
                    text: "no".into(),
                },
            ],
            gold_label: Label::yes(),
            human_cot: None,
            split: Split::Test,
        }
    }

    fn l(s: &str) -> Label {
        s.parse().unwrap()
    }

    #[test]
    fn catalog_has_four_cues() {
        let ids: Vec<u8> = Cue::catalog().iter().map(|c| c.id).collect();
        assert_eq!(ids, [1, 2, 3, 4]);
        assert_eq!(
            Cue::default_cue().text(Domain::General),
            "Explain how to reach this answer."
        );
        assert_eq!(
            Cue::by_id(3).unwrap().text(Domain::Medical),
            "Let's think step by step like a medical expert."
        );
        assert!(Cue::by_id(5).is_none());
    }

    #[test]
    fn single_variant_prompt_ends_with_cue() {
        let p = build_explanation_prompt(
            &instance("e1", "A"),
            &l("A"),
            &Cue::default_cue(),
            Domain::Medical,
            1,
        )
        .unwrap();
        assert!(
            p.text.ends_with("Explain how to reach this answer."),
            "{}",
            p.text
        );
        assert_eq!(p.condition, PromptKind::ExplainGen);
        assert_eq!(p.content_hash, sha256_hex(&p.text));
    }

    #[test]
    fn multi_variant_prompt_requests_numbered_list() {
        let p = build_explanation_prompt(
            &instance("e1", "A"),
            &l("A"),
            &Cue::default_cue(),
            Domain::Medical,
            5,
        )
        .unwrap();
        assert!(p.text.contains("exactly 5 different explanations"));
        assert!(p.text.contains("Number them 1. to 5,"));
        let q = p.text.find("Question:").unwrap();
        let a = p.text.find("Answer: (A) Propofol").unwrap();
        let c = p.text.find("Explain how to reach").unwrap();
        let d = p.text.find("Give exactly").unwrap();
        assert!(q < a && a < c && c < d);
    }

    #[test]
    fn wrong_answer_prompt_only_states_given_label() {
        let inst = instance("e2", "A");
        let p = build_explanation_prompt(&inst, &l("B"), &Cue::default_cue(), Domain::Medical, 5)
            .unwrap();
        assert_eq!(asserted_answer_labels(&p.text), [l("B")]);
        assert!(!p.text.contains("Answer: (A)"));
    }

    #[test]
    fn explanation_prompt_rejects_bad_label_and_zero_variants() {
        let mut inst = instance("e3", "A");
        inst.options.truncate(2);
        assert!(matches!(
            build_explanation_prompt(&inst, &l("C"), &Cue::default_cue(), Domain::General, 1),
            Err(PromptError::InvalidLabel { .. })
        ));
        assert_eq!(
            build_explanation_prompt(&inst, &l("A"), &Cue::default_cue(), Domain::General, 0),
            Err(PromptError::ZeroVariants)
        );
    }

    #[test]
    fn no_cot_has_no_explanation_lines() {
        let ex = instance("x1", "B");
        let q = instance("q1", "C");
        let label = l("B");
        let p = build_icl_prompt(
            &[IclExemplar {
                instance: &ex,
                explanation: Some("ignored"),
                answer_label: &label,
            }],
            &q,
            Condition::NoCot,
        )
        .unwrap();
        assert_eq!(p.text.split("\n\n").count(), 2);
        assert!(!p.text.contains("Explanation"));
        assert!(p.text.ends_with("Answer:"));
    }

    #[test]
    fn self_exp_keeps_order_and_has_one_explanation_each() {
        let exs: Vec<_> = (0..5).map(|i| instance(&format!("x{i}"), "A")).collect();
        let label = l("A");
        let explanations: Vec<String> = (0..5).map(|i| format!("self reasoning {i}")).collect();
        let items: Vec<_> = exs
            .iter()
            .zip(&explanations)
            .map(|(e, x)| IclExemplar {
                instance: e,
                explanation: Some(x),
                answer_label: &label,
            })
            .collect();
        let p = build_icl_prompt(&items, &instance("q", "B"), Condition::SelfExp).unwrap();
        assert_eq!(p.text.matches("\nExplanation: ").count(), 5);
        let positions: Vec<usize> = explanations
            .iter()
            .map(|x| p.text.find(x.as_str()).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(p.text.ends_with("Explanation:"));
        assert_eq!(p.condition, PromptKind::SelfExp);
    }

    #[test]
    fn answer_slot_override_for_scoring() {
        let ex = instance("x1", "B");
        let label = l("B");
        let p = build_icl_prompt_with_slot(
            &[IclExemplar {
                instance: &ex,
                explanation: Some("why"),
                answer_label: &label,
            }],
            &instance("q", "A"),
            Condition::HumanCot,
            QuerySlot::Answer,
        )
        .unwrap();
        assert!(p.text.ends_with("Answer:"));
        assert!(p.text.contains("Explanation: why"));
    }

    #[test]
    fn zero_shot_cot_ignores_exemplars() {
        let ex = instance("x1", "B");
        let label = l("B");
        let p = build_icl_prompt(
            &[IclExemplar {
                instance: &ex,
                explanation: None,
                answer_label: &label,
            }],
            &instance("q", "A"),
            Condition::ZeroShotCot,
        )
        .unwrap();
        assert!(p.text.contains("Let's think step by step."));
        assert!(!p.text.contains("case x1"));
        let stage2 = build_zero_shot_extraction(&p, "  It is propofol. ", &instance("q", "A"));
        assert!(stage2.text.starts_with(&p.text));
        assert!(stage2
            .text
            .ends_with("Therefore, among (A) through (D), the answer is"));
        let yn = build_zero_shot_extraction(&p, "r", &yes_no("s"));
        assert!(yn.text.ends_with("among (yes) and (no), the answer is"));
    }

    #[test]
    fn missing_explanation_names_exemplar() {
        let mut ex = instance("medqa-7", "B");
        ex.human_cot = None;
        let label = l("B");
        let err = build_icl_prompt(
            &[IclExemplar {
                instance: &ex,
                explanation: ex.human_cot.as_deref(),
                answer_label: &label,
            }],
            &instance("q", "A"),
            Condition::HumanCot,
        )
        .unwrap_err();
        assert_eq!(
            err,
            PromptError::MissingExplanation {
                id: "medqa-7".into(),
                condition: Condition::HumanCot
            }
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let ex = instance("x1", "B");
        let label = l("B");
        let items = [IclExemplar {
            instance: &ex,
            explanation: Some("e"),
            answer_label: &label,
        }];
        let a = build_icl_prompt(&items, &instance("q", "A"), Condition::HumanCot).unwrap();
        let b = build_icl_prompt(&items, &instance("q", "A"), Condition::HumanCot).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn yes_no_options_render_bare_labels() {
        let p = build_icl_prompt(&[], &yes_no("s"), Condition::NoCot).unwrap();
        assert!(
            p.text.contains("Options:\n(yes)\n(no)\nAnswer:"),
            "{}",
            p.text
        );
    }

    #[test]
    fn parse_explicit_patterns() {
        let inst = instance("p", "A");
        let p = parse_answer("The answer is (B).", &inst);
        assert_eq!((p.label, p.status), (Some(l("B")), ParseStatus::Ok));
        assert_eq!(p.raw_span, "The answer is (B)".trim_start_matches("The "));
        let p = parse_answer("Answer: D. Because halothane...", &inst);
        assert_eq!(p.label, Some(l("D")));
        let p = parse_answer("I cannot determine this.", &inst);
        assert_eq!(p.status, ParseStatus::ParseFailure);
        assert!(p.label.is_none());
    }

    #[test]
    fn explicit_pattern_beats_earlier_standalone() {
        let inst = instance("p", "A");
        let p = parse_answer("(A) is tempting, but the answer is (C)", &inst);
        assert_eq!(p.label, Some(l("C")));
    }

    #[test]
    fn standalone_tokens_and_option_text() {
        let inst = instance("p", "A");
        assert_eq!(parse_answer(" (C)", &inst).label, Some(l("C")));
        assert_eq!(
            parse_answer("I pick B. It fits.", &inst).label,
            Some(l("B"))
        );
        let p = parse_answer("Clearly ketamine is used here, not nitrous oxide.", &inst);
        assert_eq!(p.label, Some(l("B")));
        assert_eq!(p.raw_span, "ketamine");
        // "Answer: Denied" must not read as D
        assert!(!parse_answer("Answer: Denied", &inst).is_ok());
        // labels outside the instance never parse
        let mut two = instance("p2", "A");
        two.options.truncate(2);
        assert!(!parse_answer("The answer is (C).", &two).is_ok());
    }

    #[test]
    fn yes_no_parsing() {
        let inst = yes_no("s");
        assert_eq!(
            parse_answer("So the answer is yes.", &inst).label,
            Some(Label::yes())
        );
        assert_eq!(parse_answer("Answer: No", &inst).label, Some(Label::no()));
        assert_eq!(parse_answer(" (no)", &inst).label, Some(Label::no()));
        assert!(!parse_answer("I do not know.", &inst).is_ok());
    }

    proptest! {
        #[test]
        fn embedded_answer_roundtrips(idx in 0usize..4, pre in "[a-z ,]{0,40}", post in "[a-z ,]{0,40}") {
            let inst = instance("r", "A");
            let label = Label::letter(idx).unwrap();
            let text = format!("{pre} so the answer is ({label}). {post}");
            let parsed = parse_answer(&text, &inst);
            prop_assert_eq!(parsed.label, Some(label));
        }
    }

    #[test]
    fn embedded_yes_no_roundtrips() {
        let inst = yes_no("s");
        for label in [Label::yes(), Label::no()] {
            let text = format!("Reasoning. The answer is ({label}).");
            assert_eq!(parse_answer(&text, &inst).label, Some(label));
        }
    }

    #[test]
    fn variants_split_on_enumerators() {
        assert_eq!(
            parse_explanation_variants("1. A\n2. B\n3. C", 3).unwrap(),
            ["A", "B", "C"]
        );
        assert_eq!(
            parse_explanation_variants("Here you go:\nVariant 1: A\nvariant 2: B\n3) C", 5)
                .unwrap(),
            ["A", "B", "C"]
        );
        assert_eq!(
            parse_explanation_variants("One paragraph with no numbering.", 5).unwrap(),
            ["One paragraph with no numbering."]
        );
        assert_eq!(
            parse_explanation_variants("1. A\n2. B", 5).unwrap(),
            ["A", "B"]
        );
        assert_eq!(
            parse_explanation_variants("1. A\n2. B\n3. C", 2).unwrap(),
            ["A", "B"]
        );
        assert_eq!(
            parse_explanation_variants("1. Dose is 1.5 mg daily.\n2. B", 2).unwrap()[0],
            "Dose is 1.5 mg daily."
        );
        assert_eq!(
            parse_explanation_variants("  \n", 3),
            Err(PromptError::EmptyCompletion)
        );
        assert_eq!(
            parse_explanation_variants("x", 0),
            Err(PromptError::ZeroVariants)
        );
    }

    #[test]
    fn scoring_prefixes() {
        assert_eq!(answer_scoring_prefix("Q\nAnswer:", None), "Q\nAnswer: (");
        assert_eq!(
            answer_scoring_prefix("Q\nExplanation:", Some(" Because X.\nAnswer:")),
            "Q\nExplanation: Because X.\nAnswer: ("
        );
        let inst = instance("s", "A");
        let prefix = answer_likelihood_prefix(&inst, " why ");
        assert!(prefix.ends_with("Explanation: why\nAnswer: ("));
    }

    #[test]
    #[should_panic(expected = "no value")]
    fn unknown_placeholder_panics() {
        fill("{{missing}}", &[]);
    }
}
