//! One experiment directory: `<output_dir>/<experiment_id>/`.
//!
//! ```text
//! experiment.json              config digest + the exemplar set, fixed on first use
//! explanations-<mode>.jsonl    explanation maps
//! runs/<condition>.jsonl       run records (self_exp-wrong.jsonl for wrong-mode maps)
//! reports/                     eval / compare / bias / similarity / likelihood outputs
//! report.{json,txt,csv}        merged bundle
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use selfexplain::backend::{Backend, BackendKind};
use selfexplain::corpus::{load_dataset, sample_exemplars, Dataset, ExemplarSet};
use selfexplain::hashing::{json_digest, sha256_hex};
use selfexplain::prompting::{Condition, TEMPLATE_VERSION};
use selfexplain::selfexplain::{write_atomic, ExplainMode, ExplanationMap};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::exit::ValidationError;
use crate::output::Stamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    experiment_id: String,
    config_digest: String,
    dataset_sha256: String,
    exemplar_set_digest: String,
    exemplars: ExemplarSet,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub config_digest: String,
    pub exemplars: ExemplarSet,
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Digest of everything that determines experiment outputs. File contents
/// are hashed instead of paths, so moving an experiment keeps its digest.
fn config_digest(config: &ExperimentConfig, dataset_sha256: &str) -> anyhow::Result<String> {
    let mock_sha256 = match (config.backend.kind, &config.backend.mock_script) {
        (BackendKind::Mock, Some(p)) => Some(sha256_hex(read(p)?)),
        _ => None,
    };
    Ok(json_digest(&json!({
        "template_version": TEMPLATE_VERSION,
        "dataset_sha256": dataset_sha256,
        "schema": config.dataset.schema,
        "split": config.split,
        "k": config.k,
        "n": config.n,
        "cue_id": config.cue_id,
        "domain": config.domain,
        "seed": config.seed,
        "backend": config.backend.output_digest(),
        "mock_script_sha256": mock_sha256,
    })))
}

impl Experiment {
    /// Validates the config, loads the dataset and pins the exemplar set.
    /// Reopening an experiment with a different configuration is an error.
    pub fn open(config: ExperimentConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let dataset_bytes = read(config.dataset_path())?;
        let dataset_sha256 = sha256_hex(&dataset_bytes);
        let dataset = load_dataset(config.dataset_path(), config.dataset.schema)?;
        let digest = config_digest(&config, &dataset_sha256)?;
        let exemplars = sample_exemplars(&dataset, config.k, config.seed())?;
        let dir = config.output_dir.join(&config.experiment_id);
        let manifest = Manifest {
            experiment_id: config.experiment_id.clone(),
            config_digest: digest.clone(),
            dataset_sha256,
            exemplar_set_digest: exemplars.digest(),
            exemplars: exemplars.clone(),
        };
        let manifest_path = dir.join("experiment.json");
        if manifest_path.exists() {
            let found: Manifest = serde_json::from_slice(&read(&manifest_path)?)
                .map_err(|e| ValidationError(format!("{}: {e}", manifest_path.display())))?;
            if found.config_digest != manifest.config_digest {
                return Err(ValidationError(format!(
                    "experiment `{}` in {} was created with config digest {}, but the current \
                     configuration digests to {}; use a new experiment_id",
                    config.experiment_id,
                    dir.display(),
                    found.config_digest,
                    manifest.config_digest
                ))
                .into());
            }
            if found.exemplar_set_digest != manifest.exemplar_set_digest
                || found.exemplars != manifest.exemplars
            {
                return Err(ValidationError(format!(
                    "exemplar set of experiment `{}` no longer matches its manifest",
                    config.experiment_id
                ))
                .into());
            }
        } else {
            let mut text = serde_json::to_string_pretty(&manifest)?;
            text.push('\n');
            write_atomic(&manifest_path, text.as_bytes())?;
        }
        Ok(Experiment {
            config,
            dir,
            dataset,
            config_digest: digest,
            exemplars,
        })
    }

    /// Backend with the cache defaulting to `<output_dir>/cache`.
    pub fn backend(&self) -> anyhow::Result<Backend> {
        let mut cfg = self.config.backend.clone();
        if cfg.cache_dir.is_none() {
            cfg.cache_dir = Some(self.config.output_dir.join("cache"));
        }
        Ok(Backend::from_config(cfg)?)
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            experiment_id: self.config.experiment_id.clone(),
            config_digest: self.config_digest.clone(),
        }
    }

    pub fn map_path(&self, mode: ExplainMode) -> PathBuf {
        self.dir.join(format!("explanations-{mode}.jsonl"))
    }

    /// Loads the explanation map for `mode`, with a hint when it is missing.
    pub fn load_map(&self, mode: ExplainMode) -> anyhow::Result<ExplanationMap> {
        let path = self.map_path(mode);
        if !path.is_file() {
            return Err(ValidationError(format!(
                "explanation map {} not found; run `selfexplain explain --mode {mode}` first",
                path.display()
            ))
            .into());
        }
        let map = ExplanationMap::load(&path)?;
        map.check_covers(&self.exemplars)?;
        Ok(map)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.dir.join("runs")
    }

    pub fn run_path(&self, condition: Condition, mode: ExplainMode) -> PathBuf {
        let name = match (condition, mode) {
            (Condition::SelfExp, ExplainMode::Wrong) => "self_exp-wrong".to_string(),
            _ => condition.to_string(),
        };
        self.runs_dir().join(format!("{name}.jsonl"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }
}
