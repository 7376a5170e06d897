//! The pipeline config file: one TOML document with a section per stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslspk::clustering::IterationPlan;
use sslspk::corpus::CorpusSpec;
use sslspk::rng::{sub_seed, tag};
use sslspk::supervised::FinetuneConfig;
use sslspk::{AamConfig, DinoConfig, NetworkConfig, ProjectionConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Run seed. Stage seeds are mixed with it, so one number reseeds
    /// every training stage while the corpus stays fixed.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub trials: Vec<TrialSpec>,
    pub network: NetworkConfig,
    pub projection: ProjectionConfig,
    pub dino: DinoConfig,
    pub cluster: IterationPlan,
    pub aam: AamConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep: Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Relative paths resolve against the config file's directory.
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/corpus`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out"), corpus_dir: None }
    }
}

/// One named trial list drawn from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub name: String,
    pub n_target: usize,
    pub n_nontarget: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Chunk lengths for the large-margin fine-tuning sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub segment_seconds: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self { segment_seconds: vec![2.0, 3.0, 4.0] }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        Self {
            seed: 0,
            paths: Paths::default(),
            cluster: IterationPlan { k: 2 * corpus.n_speakers, ..IterationPlan::default() },
            corpus,
            trials: vec![TrialSpec { name: "synthetic".into(), n_target: 500, n_nontarget: 500, seed: 0 }],
            network: NetworkConfig::default(),
            projection: ProjectionConfig::default(),
            dino: DinoConfig::default(),
            aam: AamConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sweep: Sweep::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config { key: e.path().to_string(), message: e.inner().message().trim().to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Read, parse and validate; relative paths are anchored at the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        cfg.paths.corpus_dir = cfg.paths.corpus_dir.map(|d| base.join(d));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.network.validate()?;
        self.projection.validate()?;
        self.dino.validate()?;
        self.cluster.validate()?;
        self.aam.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if self.trials.is_empty() {
            return Err(sslspk::Error::config("trials", "need at least one trial list").into());
        }
        let mut names = BTreeSet::new();
        for t in &self.trials {
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(sslspk::Error::config("trials.name", format!("`{}` must be a nonempty [A-Za-z0-9_-] word", t.name)).into());
            }
            if !names.insert(&t.name) {
                return Err(sslspk::Error::config("trials.name", format!("duplicate trial list `{}`", t.name)).into());
            }
        }
        if self.sweep.segment_seconds.is_empty() || self.sweep.segment_seconds.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(sslspk::Error::config("sweep.segment_seconds", "need positive chunk lengths").into());
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.corpus_dir.clone().unwrap_or_else(|| self.paths.out_dir.join("corpus"))
    }

    /// Seed for a training stage: the stage's own seed mixed with the run
    /// seed.
    pub fn stage_seed(&self, stage: &str, own: u64) -> u64 {
        sub_seed(self.seed, &[tag(stage), own])
    }
}
