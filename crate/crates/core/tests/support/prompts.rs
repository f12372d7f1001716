//! Renders the five prompt kinds over the fixture dataset.

use std::path::{Path, PathBuf};

use selfexplain::backend::{Backend, BackendConfig};
use selfexplain::corpus::{load_dataset, sample_exemplars, Dataset, DatasetSchema, QaInstance};
use selfexplain::prompting::{
    build_explanation_prompt, build_icl_prompt, Condition, Cue, Domain, IclExemplar,
};
use selfexplain::selfexplain::{
    generate_explanations, select_variant, ExplainMode, GenerationSpec,
};

pub const SEED: u64 = 7;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn dataset() -> Dataset {
    load_dataset(&fixture("mcq.jsonl"), DatasetSchema::MultipleChoice).unwrap()
}

/// The five prompt kinds for query `te01`, in a fixed order.
pub fn render_all() -> Vec<(&'static str, String)> {
    let ds = dataset();
    let set = sample_exemplars(&ds, 5, SEED).unwrap();
    let exemplars = set.resolve(&ds).unwrap();
    let query = ds.get("te01").unwrap();

    let first = exemplars[0];
    let explain = build_explanation_prompt(
        first,
        &first.gold_label,
        &Cue::default_cue(),
        Domain::General,
        1,
    )
    .unwrap()
    .text;

    let config = BackendConfig {
        mock_script: Some(fixture("mock_script.jsonl")),
        ..BackendConfig::default()
    };
    let backend = Backend::from_config(config).unwrap();
    let spec = GenerationSpec {
        cue: Cue::default_cue(),
        domain: Domain::General,
        n: 5,
        mode: ExplainMode::Right,
        seed: SEED,
        config_digest: "golden".into(),
    };
    let map = generate_explanations(&ds, &set, &spec, &backend).unwrap();

    let icl = |condition: Condition| {
        let demos: Vec<IclExemplar<'_>> = exemplars
            .iter()
            .map(|inst: &&QaInstance| IclExemplar {
                instance: inst,
                explanation: match condition {
                    Condition::HumanCot => inst.human_cot.as_deref(),
                    Condition::SelfExp => {
                        Some(select_variant(&map, &inst.id, &query.id, SEED).unwrap().1)
                    }
                    _ => None,
                },
                answer_label: &inst.gold_label,
            })
            .collect();
        build_icl_prompt(&demos, query, condition).unwrap().text
    };
    vec![
        ("explain_gen", explain),
        ("no_cot", icl(Condition::NoCot)),
        ("zero_shot_cot", icl(Condition::ZeroShotCot)),
        ("human_cot", icl(Condition::HumanCot)),
        ("self_exp", icl(Condition::SelfExp)),
    ]
}
