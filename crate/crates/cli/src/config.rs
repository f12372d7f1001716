//! Experiment configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use selfexplain::backend::{BackendConfig, BackendKind};
use selfexplain::corpus::{DatasetSchema, Split};
use selfexplain::prompting::{Condition, Cue, Domain};
use selfexplain::selfexplain::ExplainMode;
use serde::{Deserialize, Serialize};

use crate::exit::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub schema: DatasetSchema,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            schema: DatasetSchema::MultipleChoice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub dataset: DatasetConfig,
    /// Split evaluated by `run` and `bias`.
    pub split: Split,
    /// Exemplars per prompt.
    pub k: usize,
    /// Explanation variants requested per exemplar.
    pub n: usize,
    pub cue_id: u8,
    pub domain: Domain,
    pub mode: ExplainMode,
    pub conditions: Vec<Condition>,
    /// Required; every sampling step derives from it.
    pub seed: Option<u64>,
    /// Score answer likelihoods during `run`.
    pub score: bool,
    pub lexicon: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub backend: BackendConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "default".into(),
            dataset: DatasetConfig::default(),
            split: Split::Test,
            k: 5,
            n: 5,
            cue_id: 1,
            domain: Domain::General,
            mode: ExplainMode::Right,
            conditions: Condition::ALL.to_vec(),
            seed: None,
            score: true,
            lexicon: None,
            output_dir: PathBuf::from("runs"),
            backend: BackendConfig::default(),
        }
    }
}

/// Flags mirroring the config fields. Any flag given wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub experiment_id: Option<String>,
    /// Dataset JSONL file.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// multiple-choice or yes-no.
    #[arg(long, global = true)]
    pub schema: Option<DatasetSchema>,
    #[arg(long, global = true)]
    pub split: Option<Split>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Cue 1-4.
    #[arg(long = "cue", global = true)]
    pub cue_id: Option<u8>,
    /// medical or general cue wording.
    #[arg(long, global = true)]
    pub domain: Option<Domain>,
    /// right or wrong answers for explanation generation.
    #[arg(long, global = true)]
    pub mode: Option<ExplainMode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// http or mock.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long = "model", global = true)]
    pub model_id: Option<String>,
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub max_parallel: Option<usize>,
    #[arg(long, global = true)]
    pub max_attempts: Option<u32>,
    #[arg(long, global = true)]
    pub temperature_generate: Option<f64>,
    #[arg(long, global = true)]
    pub temperature_answer: Option<f64>,
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
}

fn rebase(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut config.dataset.path);
        rebase(base, &mut config.lexicon);
        rebase(base, &mut config.backend.cache_dir);
        rebase(base, &mut config.backend.mock_script);
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    /// The file named by `--config` (if any) with flag overrides applied.
    pub fn resolve(args: &ConfigArgs) -> anyhow::Result<Self> {
        let mut c = match &args.config {
            Some(path) => Self::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = &args.$field { $target = v.clone().into(); })*
            };
        }
        set! {
            experiment_id => c.experiment_id,
            dataset => c.dataset.path,
            schema => c.dataset.schema,
            split => c.split,
            k => c.k,
            n => c.n,
            cue_id => c.cue_id,
            domain => c.domain,
            mode => c.mode,
            seed => c.seed,
            lexicon => c.lexicon,
            output_dir => c.output_dir,
            backend => c.backend.kind,
            base_url => c.backend.base_url,
            model_id => c.backend.model_id,
            api_key_env => c.backend.api_key_env,
            mock_script => c.backend.mock_script,
            cache_dir => c.backend.cache_dir,
            max_parallel => c.backend.max_parallel,
            max_attempts => c.backend.retry.max_attempts,
            temperature_generate => c.backend.temperature_generate,
            temperature_answer => c.backend.temperature_answer,
            max_tokens => c.backend.max_tokens,
        }
        Ok(c)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn dataset_path(&self) -> &Path {
        self.dataset
            .path
            .as_deref()
            .expect("validated config has a dataset")
    }

    pub fn cue(&self) -> Cue {
        Cue::by_id(self.cue_id).expect("validated cue id")
    }

    /// Checks every field and that referenced files exist.
    pub fn validate(&self) -> anyhow::Result<()> {
        let fail = |m: String| Err(ValidationError(m).into());
        let id_ok = !self.experiment_id.is_empty()
            && self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.experiment_id.starts_with('.');
        if !id_ok {
            return fail(format!(
                "experiment_id `{}` must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.experiment_id
            ));
        }
        if self.seed.is_none() {
            return fail("seed is required (set `seed` in the config or pass --seed)".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if Cue::by_id(self.cue_id).is_none() {
            return fail(format!("cue {} does not exist (expected 1-4)", self.cue_id));
        }
        if self.conditions.is_empty() {
            return fail("at least one condition is required".into());
        }
        match &self.dataset.path {
            None => {
                return fail(
                    "dataset path is required (set [dataset] path or pass --dataset)".into(),
                )
            }
            Some(p) if !p.is_file() => {
                return fail(format!("dataset file {} does not exist", p.display()))
            }
            _ => {}
        }
        if let Some(p) = &self.lexicon {
            if !p.is_file() {
                return fail(format!("lexicon file {} does not exist", p.display()));
            }
        }
        if self.backend.kind == BackendKind::Mock {
            match &self.backend.mock_script {
                None => return fail("mock backend requires mock_script".into()),
                Some(p) if !p.is_file() => {
                    return fail(format!("mock script {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        self.backend
            .validate()
            .map_err(|e| ValidationError(e.to_string()))
            .context("backend configuration")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            r#"
experiment_id = "demo"
seed = 7
conditions = ["no_cot", "self_exp"]
mode = "wrong"
output_dir = "out"

[dataset]
path = "data/mcq.jsonl"
schema = "multiple-choice"

[backend]
kind = "mock"
mock_script = "script.jsonl"
max_parallel = 2
"#,
        )
        .unwrap();
        let c = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(c.dataset.path.unwrap(), dir.path().join("data/mcq.jsonl"));
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(
            c.backend.mock_script.unwrap(),
            dir.path().join("script.jsonl")
        );
        assert_eq!(c.conditions, [Condition::NoCot, Condition::SelfExp]);
        assert_eq!(c.mode, ExplainMode::Wrong);
        assert_eq!(c.backend.max_parallel, 2);
        assert_eq!(c.k, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "sed = 7\n").unwrap();
        let err = ExperimentConfig::from_file(&path).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn flags_override_and_validation() {
        let args = ConfigArgs {
            seed: Some(3),
            k: Some(2),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(&args).unwrap();
        assert_eq!((c.seed, c.k), (Some(3), 2));
        let err = c.validate().unwrap_err();
        assert!(
            err.to_string().contains("dataset path is required"),
            "{err}"
        );
        let err = ExperimentConfig::default().validate().unwrap_err();
        assert!(err.to_string().contains("seed is required"), "{err}");
    }
}
