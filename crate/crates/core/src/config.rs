// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration, read from a TOML file.
//!
//! Grammar: flat sections of `key = value` pairs. Every key is optional;
//! omitted keys take the defaults below, and `[env]` defaults depend on
//! `kind`.
//!
//! ```toml
//! algorithms = ["iqs", "do-iqs-lb"]   # or "all"
//! seeds = [0, 1, 2, 3, 4]
//! out_dir = "runs/bmG"
//! jobs = 0                            # 0 = all cores
//!
//! [env]
//! kind = "bmG"                        # bmG bmgG cp1 cp2 cp3 radial star
//!
//! [data]
//! train_paths = 175
//! test_paths = 75
//! val_frac = 0.3
//!
//! [train]
//! epochs = 200
//! batch_size = 128
//!
//! [train.smote]
//! k_neighbors = 12
//!
//! [export]
//! surface_times = [25]
//! ```
//!
//! `IOS_LAB_OUT_DIR` and `IOS_LAB_JOBS` override `out_dir` and `jobs`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::IngestSchema;
use crate::env::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::model::Algorithm;
use crate::train::TrainConfig;

pub const ENV_OUT_DIR: &str = "IOS_LAB_OUT_DIR";
pub const ENV_JOBS: &str = "IOS_LAB_JOBS";

/// How expert stopping times of the Brownian problems are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Exact backward induction on a radial grid.
    Grid,
    /// Nearest-neighbour regression over simulated reference paths.
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_paths: usize,
    pub test_paths: usize,
    pub val_frac: f64,
    /// Held-out fraction for ingested datasets (simulated sets use `test_paths`).
    pub test_frac: f64,
    /// Expert of the Brownian problems.
    pub expert: ExpertKind,
    /// Independent paths on which the regression expert is fitted.
    pub reference_paths: usize,
    pub knn_k: usize,
    pub seed: u64,
    /// Per-feature standardization fitted on the train split.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_paths: 175,
            test_paths: 75,
            val_frac: 0.3,
            test_frac: 0.3,
            expert: ExpertKind::Grid,
            reference_paths: 2000,
            knn_k: 50,
            seed: 2024,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub half_width: f64,
    pub grid_points: usize,
    /// Times with a full Q grid written out.
    pub surface_times: Vec<usize>,
    /// Times with an extracted boundary; empty means every decision time.
    pub boundary_times: Vec<usize>,
    pub normalize: bool,
    /// `y` fed to augmented models on the grid.
    pub fixed_y: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            half_width: 3.0,
            grid_points: 61,
            surface_times: vec![25],
            boundary_times: Vec::new(),
            normalize: true,
            fixed_y: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub ingest: Option<IngestSchema>,
    pub export: ExportConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    algorithms: Option<Algorithms>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    jobs: Option<usize>,
    #[serde(default)]
    env: Option<toml::Table>,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    ingest: Option<IngestSchema>,
    #[serde(default)]
    export: ExportConfig,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Algorithms {
    Keyword(String),
    List(Vec<Algorithm>),
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        let env = env_from_table(raw.env.unwrap_or_default())?;
        let algorithms = match raw.algorithms {
            None => Algorithm::ALL.to_vec(),
            Some(Algorithms::Keyword(k)) if k == "all" => Algorithm::ALL.to_vec(),
            Some(Algorithms::Keyword(k)) => vec![k.parse().map_err(|e: Error| cfg_err(e.to_string()))?],
            Some(Algorithms::List(l)) => l,
        };
        let cfg = RunConfig {
            env,
            data: raw.data,
            train: raw.train,
            algorithms,
            seeds: raw.seeds.unwrap_or_else(|| vec![0, 1, 2, 3, 4]),
            out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("runs")),
            jobs: raw.jobs.unwrap_or(0),
            ingest: raw.ingest,
            export: raw.export,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        if let Some(ing) = &mut cfg.ingest {
            if ing.file.is_relative() {
                if let Some(dir) = path.parent() {
                    ing.file = dir.join(&ing.file);
                }
            }
        }
        cfg.validate_files()?;
        Ok(cfg)
    }

    /// Applies `IOS_LAB_OUT_DIR` / `IOS_LAB_JOBS` when set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
        if let Ok(j) = std::env::var(ENV_JOBS) {
            self.jobs = j
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("{ENV_JOBS} must be a non-negative integer, got `{j}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds must be non-empty"));
        }
        if self.algorithms.is_empty() {
            return Err(cfg_err("algorithms must be non-empty"));
        }
        let d = &self.data;
        if !(d.val_frac > 0.0 && d.val_frac < 1.0) || !(d.test_frac > 0.0 && d.test_frac < 1.0) {
            return Err(cfg_err("val_frac and test_frac must lie in (0,1)"));
        }
        if self.ingest.is_none() && (d.train_paths < 2 || d.test_paths == 0) {
            return Err(cfg_err("need at least 2 train paths and 1 test path"));
        }
        if d.knn_k == 0 || d.reference_paths < d.knn_k {
            return Err(cfg_err("reference_paths must be at least knn_k >= 1"));
        }
        if self.export.grid_points < 2 || !(self.export.half_width > 0.0) {
            return Err(cfg_err("export grid needs >= 2 points and a positive half width"));
        }
        Ok(())
    }

    pub fn validate_files(&self) -> Result<()> {
        if let Some(ing) = &self.ingest {
            if !ing.file.exists() {
                return Err(cfg_err(format!("ingest file {} does not exist", ing.file.display())));
            }
        }
        Ok(())
    }

    /// `(algorithm, seed)` pairs in sweep order.
    pub fn runs(&self) -> Vec<(Algorithm, u64)> {
        self.algorithms
            .iter()
            .flat_map(|&a| self.seeds.iter().map(move |&s| (a, s)))
            .collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn run_dir(&self, algo: Algorithm, seed: u64) -> PathBuf {
        self.out_dir.join(algo.tag()).join(seed.to_string())
    }
}

/// `[env]` keys overlay the defaults of the chosen `kind`.
fn env_from_table(mut table: toml::Table) -> Result<EnvSpec> {
    let kind: EnvKind = match table.remove("kind") {
        None => EnvKind::BmG,
        Some(toml::Value::String(s)) => s.parse().map_err(|e: Error| cfg_err(e.to_string()))?,
        Some(v) => return Err(cfg_err(format!("env.kind must be a string, got {v}"))),
    };
    let base = EnvSpec::for_kind(kind);
    let mut merged = toml::Table::try_from(&base).map_err(|e| cfg_err(e.to_string()))?;
    for (k, v) in table {
        if !merged.contains_key(&k) {
            return Err(cfg_err(format!("unknown env key `{k}`")));
        }
        merged.insert(k, v);
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| cfg_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.env, EnvSpec::for_kind(EnvKind::BmG));
        assert_eq!(c.algorithms.len(), 10);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.data.train_paths, 175);
    }

    #[test]
    fn env_defaults_follow_kind() {
        let c = RunConfig::from_toml_str("[env]\nkind = \"cp2\"\nhorizon = 60\n").unwrap();
        assert_eq!(c.env.kind, EnvKind::Cp2);
        assert_eq!(c.env.dim, 1);
        assert_eq!(c.env.horizon, 60);
        assert!(c.env.include_time_in_state);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        for text in [
            "[env]\nkind = \"bm3\"\n",
            "algorithms = [\"dqn\"]\n",
            "seeds = []\n",
            "[train]\ngamma = 1.5\n",
            "[env]\ncolour = 3\n",
            "bogus = 1\n",
            "[data]\nexpert = \"lsm\"\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn nested_train_sections() {
        let c = RunConfig::from_toml_str(
            "algorithms = \"iqs-cs-smote\"\n[train]\nepochs = 3\n[train.smote]\nk_neighbors = 5\n[train.epsilon]\ninitial = 0.2\nfactor = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.algorithms, vec![Algorithm::IqsCsSmote]);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.smote.k_neighbors, 5);
        assert_eq!(c.train.epsilon.initial, 0.2);
    }

    #[test]
    fn expert_choice() {
        assert_eq!(RunConfig::from_toml_str("").unwrap().data.expert, ExpertKind::Grid);
        let c = RunConfig::from_toml_str("[data]\nexpert = \"knn\"\nknn_k = 7\n").unwrap();
        assert_eq!(c.data.expert, ExpertKind::Knn);
        assert_eq!(c.data.knn_k, 7);
    }
}
