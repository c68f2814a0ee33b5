//! Run configuration: one JSON file drives every stage, CLI flags
//! override it, and a single global seed feeds every randomized step
//! through named sub-seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairexp_core::cef::CefConfig;
use fairexp_core::error::{Error, Result};
use fairexp_core::ingest::FileFormat;
use fairexp_core::ranker::MergeKind;
use fairexp_core::seed::{stable_hash, sub_seed};
use fairexp_core::synth::SynthConfig;
use fairexp_core::train::TrainConfig;

pub const VERSION: &str = concat!("fairexp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub interactions: Option<PathBuf>,
    pub quadruples: Option<PathBuf>,
    pub format: FileFormat,
    /// When set (or when `ingest --synthetic` is passed) the generator
    /// replaces the file parsers and the sparsity filter is skipped.
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            quadruples: None,
            format: FileFormat::Tsv,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub rating_scale: f64,
    pub min_reviews: usize,
    pub holdout: usize,
    pub negatives: usize,
    pub top_fraction: f64,
    pub merge: MergeKind,
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
    pub cef: CefConfig,
    pub baselines: Vec<String>,
    pub shapley_samples: usize,
    pub shapley_exact: bool,
    pub e_levels: Vec<usize>,
    pub curve_step: usize,
    pub curve_max_e: usize,
    pub k_list: Vec<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            rating_scale: 5.0,
            min_reviews: 20,
            holdout: 5,
            negatives: 100,
            top_fraction: 0.2,
            merge: MergeKind::Product,
            hidden_dims: vec![256, 64],
            train: TrainConfig::default(),
            cef: CefConfig::default(),
            baselines: vec![
                "random".into(),
                "pop-user".into(),
                "pop-item".into(),
                "efm-user".into(),
                "efm-item".into(),
                "shapley".into(),
                "cef".into(),
            ],
            shapley_samples: 100,
            shapley_exact: false,
            e_levels: vec![0, 5, 10, 20],
            curve_step: 5,
            curve_max_e: 20,
            k_list: vec![5, 20, 50],
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::data(format!("bad config {}: {e}", p.display()))
                })?
            }
            None => RunConfig::default(),
        };
        config.resolve_seeds();
        Ok(config)
    }

    /// Derive every stage seed from the global seed. Called again after
    /// flag overrides so the echoed config always shows the live values.
    pub fn resolve_seeds(&mut self) {
        self.train.seed = sub_seed(self.seed, "train");
        self.cef.seed = sub_seed(self.seed, "cef");
        if let Some(synth) = self.data.synthetic.as_mut() {
            synth.seed = sub_seed(self.seed, "synth");
        }
    }

    pub fn split_seed(&self) -> u64 {
        sub_seed(self.seed, "split")
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    pub fn random_baseline_seed(&self) -> u64 {
        sub_seed(self.seed, "explain/random")
    }

    pub fn shapley_seed(&self) -> u64 {
        sub_seed(self.seed, "explain/shapley")
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash(text.as_bytes()))
    }

    /// Hash of only the fields that determine the ingested data
    /// artifacts. Cross-stage consistency checks compare this, so
    /// evaluation-time overrides (methods, erasure levels) do not trip
    /// false mismatches.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataFields<'a> {
            data: &'a DataConfig,
            rating_scale: f64,
            min_reviews: usize,
            holdout: usize,
            negatives: usize,
            top_fraction: f64,
            seed: u64,
        }
        let fields = DataFields {
            data: &self.data,
            rating_scale: self.rating_scale,
            min_reviews: self.min_reviews,
            holdout: self.holdout,
            negatives: self.negatives,
            top_fraction: self.top_fraction,
            seed: self.seed,
        };
        let text = serde_json::to_string(&fields).expect("config serializes");
        format!("{:016x}", stable_hash(text.as_bytes()))
    }

    pub fn meta(&self) -> Meta {
        Meta {
            version: VERSION.to_string(),
            config_hash: self.hash(),
            config: self.clone(),
        }
    }
}

/// Provenance block embedded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Meta {
    pub fn data_hash(&self) -> String {
        self.config.data_hash()
    }
}
