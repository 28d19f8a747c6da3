//! JSON run configuration.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "output_dir": "runs/demo",
//!   "data": {
//!     "synthetic": { "num_classes": 4, "modes_per_class": 2, "dim": 16,
//!                    "mode_stddev": 1.0, "samples_per_mode": 500 },
//!     "split": { "train": 0.75, "test": 0.25 }
//!   },
//!   "model": { "hidden": [32, 16], "tap_index": 0, "num_experts": 4,
//!              "ensembler": "bagging" },
//!   "train": { "gamma": 0.05, "em": { "steps": 0 } },
//!   "anytime": { "taus": [0.0, 0.05, 0.1, 1.0] }
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anytime::Policy;
use crate::data::{generate_synthetic, load_csv, split, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gate_init::DEFAULT_GAMMA;
use crate::moe::EnsemblerKind;
use crate::nn::SgdConfig;
use crate::rng::sub_seed;
use crate::training::{Architecture, KMeansConfig, NegativeHandling, Routing, StageSgd, TrainPlan};

pub const WORKERS_ENV: &str = "MOE_FORGE_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub anytime: AnytimeSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Declared class count for CSV data; inferred from labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub split: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, test: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub tap_index: usize,
    pub num_experts: usize,
    #[serde(default = "default_ensembler")]
    pub ensembler: EnsemblerKind,
    /// Gate-initialization temperature; median centroid distance when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn default_ensembler() -> EnsemblerKind {
    EnsemblerKind::Bagging
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub negative_handling: NegativeHandling,
    pub routing: Routing,
    pub sgd: StageSgd,
    pub kmeans: KMeansConfig,
    pub em: EmConfig,
    /// Threads for per-expert training; overridden by `MOE_FORGE_WORKERS`.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: DEFAULT_GAMMA,
            negative_handling: NegativeHandling::Reweight,
            routing: Routing::PerSample,
            sgd: StageSgd::default(),
            kmeans: KMeansConfig::default(),
            em: EmConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// E steps `N_E`; the expert budget is `train.sgd.expert.epochs`.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnytimeSettings {
    pub taus: Vec<f64>,
    pub policy: Policy,
    /// Accuracy slack for threshold selection on the training split.
    pub max_acc_drop: f64,
    /// Exit fraction used to label samples for the learned exit gate.
    pub exit_budget: f64,
    pub exit_gate_sgd: SgdConfig,
}

impl Default for AnytimeSettings {
    fn default() -> Self {
        AnytimeSettings {
            taus: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
            policy: Policy::AlphaThreshold,
            max_acc_drop: 0.01,
            exit_budget: 0.5,
            exit_gate_sgd: SgdConfig {
                epochs: 30,
                ..SgdConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative paths become relative to the file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = resolve(dir, &cfg.output_dir);
        if let Some(csv) = &cfg.data.csv {
            cfg.data.csv = Some(resolve(dir, csv));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        match (&self.data.synthetic, &self.data.csv) {
            (Some(s), None) => s.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?,
            (None, Some(p)) => {
                if !p.is_file() {
                    return err(format!("data.csv: {} does not exist", p.display()));
                }
            }
            _ => return err("data needs exactly one of \"synthetic\" or \"csv\"".into()),
        }
        let s = &self.data.split;
        if !(s.train > 0.0 && s.test > 0.0 && (s.train + s.test - 1.0).abs() <= 1e-9) {
            return err("data.split: train and test must be positive and sum to 1".into());
        }
        if self.anytime.taus.is_empty() || self.anytime.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return err("anytime.taus must be a nonempty list in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.anytime.max_acc_drop) {
            return err("anytime.max_acc_drop must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.anytime.exit_budget) {
            return err("anytime.exit_budget must be in [0, 1]".into());
        }
        self.anytime
            .exit_gate_sgd
            .validate()
            .map_err(|e| Error::Config(format!("anytime.exit_gate_sgd: {e}")))?;
        self.plan(1).validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The training plan, with `workers` threads.
    pub fn plan(&self, workers: usize) -> TrainPlan {
        TrainPlan {
            architecture: Architecture {
                hidden: self.model.hidden.clone(),
                tap_index: self.model.tap_index,
            },
            num_experts: self.model.num_experts,
            gamma: self.train.gamma,
            temperature: self.model.temperature,
            negative_handling: self.train.negative_handling,
            ensembler: self.model.ensembler,
            routing: self.train.routing,
            sgd: self.train.sgd.clone(),
            em_steps: self.train.em.steps,
            kmeans: self.train.kmeans.clone(),
            seed: self.seed,
            workers,
        }
    }

    /// `MOE_FORGE_WORKERS` when set, else `train.workers`.
    pub fn workers(&self) -> Result<usize> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
            },
            Err(_) => Ok(self.train.workers.max(1)),
        }
    }

    /// Full dataset, then stratified train and test splits.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let full = match (&self.data.synthetic, &self.data.csv) {
            (Some(spec), _) => generate_synthetic(spec)?.dataset,
            (None, Some(path)) => load_csv(path, self.data.num_classes)?,
            (None, None) => return Err(Error::Config("no data source".into())),
        };
        let mut parts = split(
            &full,
            &[self.data.split.train, self.data.split.test],
            sub_seed(self.seed, "split"),
        )?
        .into_iter();
        let train = parts.next().expect("two splits");
        let test = parts.next().expect("two splits");
        Ok((train, test))
    }

    /// The config as canonical JSON with execution-only settings removed.
    pub fn normalized_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.train.workers = 1;
        Ok(serde_json::to_string(&c)?)
    }

    /// SHA-256 of [`RunConfig::normalized_json`], hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.normalized_json()?.as_bytes())))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}
