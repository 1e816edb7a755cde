//! Experiment configuration (JSON), canonical hashing and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RawMeta;
use crate::error::{GapError, Result};
use crate::instrument::GapParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    /// Raw byte files; relative paths resolve against the config file's directory.
    Raw {
        train_features: PathBuf,
        train_labels: PathBuf,
        test_features: PathBuf,
        test_labels: PathBuf,
        /// Per-record shape, e.g. `[3, 32, 32]`.
        shape: Vec<usize>,
        train_count: usize,
        test_count: usize,
        classes: usize,
    },
}

impl DatasetConfig {
    pub fn n_classes(&self) -> usize {
        match self {
            DatasetConfig::Blobs { classes, .. } | DatasetConfig::Raw { classes, .. } => *classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DatasetConfig::Blobs { dim, .. } => vec![*dim],
            DatasetConfig::Raw { shape, .. } => shape.clone(),
        }
    }

    pub fn raw_meta(&self) -> Option<(RawMeta, RawMeta)> {
        match self {
            DatasetConfig::Raw {
                shape,
                train_count,
                test_count,
                classes,
                ..
            } => Some((
                RawMeta {
                    shape: shape.clone(),
                    count: *train_count,
                    n_classes: *classes,
                },
                RawMeta {
                    shape: shape.clone(),
                    count: *test_count,
                    n_classes: *classes,
                },
            )),
            DatasetConfig::Blobs { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp { hidden: Vec<usize> },
    Smallcnn { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Task sizes in percent of the training set.
    pub fractions: Vec<f64>,
    pub joint: bool,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub k: usize,
    pub w: usize,
    pub tolerance: f64,
    pub window: u64,
    pub lmc_step: f64,
    pub eval_batch: usize,
    /// Post-boundary trajectory checkpoints evaluated for the SGD path.
    pub path_window: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let gap = GapParams::default();
        Self {
            k: gap.k,
            w: gap.w,
            tolerance: gap.tolerance,
            window: gap.window,
            lmc_step: 0.01,
            eval_batch: 256,
            path_window: 400,
        }
    }
}

impl AnalysisConfig {
    pub fn gap_params(&self) -> GapParams {
        GapParams {
            k: self.k,
            w: self.w,
            tolerance: self.tolerance,
            window: self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Parses and fully validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| GapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative raw-data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| GapError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok((cfg, text))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Raw {
            train_features,
            train_labels,
            test_features,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [train_features, train_labels, test_features, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GapError::Config(m));
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                ..
            } => {
                if *classes < 2 || *dim < 2 || *per_class < 2 {
                    return bad("blobs need classes >= 2, dim >= 2, per_class >= 2".into());
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return bad(format!("blob spread must be positive, got {spread}"));
                }
            }
            DatasetConfig::Raw {
                shape,
                train_count,
                test_count,
                classes,
                ..
            } => {
                if shape.is_empty() || shape.contains(&0) {
                    return bad(format!("invalid raw shape {shape:?}"));
                }
                if *train_count == 0 || *test_count == 0 {
                    return bad("raw datasets need at least one train and one test record".into());
                }
                if !(2..=256).contains(classes) {
                    return bad(format!("raw datasets hold 2..=256 classes, got {classes}"));
                }
            }
        }
        match &self.model {
            ModelConfig::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad("mlp hidden sizes must be positive".into());
                }
            }
            ModelConfig::Smallcnn { channels } => {
                let shape = self.dataset.sample_shape();
                if channels.is_empty() || channels.contains(&0) {
                    return bad("smallcnn needs positive channel counts".into());
                }
                if shape.len() != 3 {
                    return bad(format!("smallcnn needs [channels, height, width] data, got {shape:?}"));
                }
                let shrink = 1usize << channels.len();
                if shape[1] / shrink == 0 || shape[2] / shrink == 0 {
                    return bad(format!("{} pooling stages are too many for {shape:?}", channels.len()));
                }
            }
        }
        let f = &self.split.fractions;
        if f.is_empty() || f.iter().any(|&x| !(x > 0.0 && x <= 100.0)) || (f.iter().sum::<f64>() - 100.0).abs() > 1e-9 {
            return bad(format!("split fractions must be positive and sum to 100, got {f:?}"));
        }
        self.train.validate()?;
        self.analysis.gap_params().validate()?;
        let a = &self.analysis;
        if !(a.lmc_step > 0.0 && a.lmc_step <= 0.5) {
            return bad(format!("lmc_step must be in (0, 0.5], got {}", a.lmc_step));
        }
        if a.eval_batch == 0 || a.path_window == 0 {
            return bad("eval_batch and path_window must be at least 1".into());
        }
        if a.path_window > self.train.dense_window as u64 {
            return bad(format!(
                "path_window {} exceeds dense_window {}; those checkpoints would not exist",
                a.path_window, self.train.dense_window
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// Sorted keys, no insignificant whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(value).expect("json value serializes")
}

/// Hex SHA-256 of the canonical form of a JSON document.
pub fn config_hash(text: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GapError::Config(e.to_string()))?;
    let digest = Sha256::digest(canonical_json(&value).as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Inventory written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Paths relative to the run directory, sorted.
    pub files: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub timestamps: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("gaplab".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint_format".to_string(), crate::checkpoint::FORMAT_VERSION.to_string());
        Self {
            config_hash,
            files: Vec::new(),
            versions,
            timestamps: BTreeMap::new(),
        }
    }

    pub fn stamp(&mut self, key: &str) {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.timestamps.insert(key.to_string(), now);
    }

    /// Lists every file under `root` (relative, sorted), excluding the manifest itself.
    pub fn collect_files(&mut self, root: &Path, manifest_name: &str) -> Result<()> {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
            let entries = std::fs::read_dir(dir).map_err(|e| GapError::io(dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| GapError::io(dir, e))?;
                let path = entry.path();
                if path.is_dir() {
                    walk(&path, root, out)?;
                } else {
                    let rel = path.strip_prefix(root).unwrap_or(&path);
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
            Ok(())
        }
        let mut files = Vec::new();
        walk(root, root, &mut files)?;
        files.retain(|f| f != manifest_name);
        files.sort();
        self.files = files;
        Ok(())
    }
}
