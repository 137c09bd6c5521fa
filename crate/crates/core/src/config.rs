//! TOML run configuration.
//!
//! ```toml
//! output_dir = "runs"
//!
//! [dataset]
//! kind = "idx"            # idx | manifest | synthetic
//! train_images = "data/mnist-subset/train-images-idx3-ubyte.gz"
//! train_labels = "data/mnist-subset/train-labels-idx1-ubyte.gz"
//! test_images = "data/mnist-subset/t10k-images-idx3-ubyte.gz"
//! test_labels = "data/mnist-subset/t10k-labels-idx1-ubyte.gz"
//! novel_digit = 2
//!
//! [arch]
//! input_size = 32
//!
//! [train]
//! epochs = 15
//!
//! [scoring]
//! variant = "v1"
//! scaling = "global"
//!
//! [eval]
//! threshold_range = [0.4, 0.6]
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Loading reports every unknown key and every invalid value at once.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::manifest::TestNormal;
use crate::datasets::SceneConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::Criterion;
use crate::model::ArchConfig;
use crate::scoring::{Scaling, Variant};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Idx,
    Manifest,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Seed for split shuffles.
    pub seed: u64,

    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub novel_digit: Option<u8>,
    /// Cap on training normals for reduced-budget runs.
    pub max_train: Option<usize>,

    pub manifest: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub novel_classes: Vec<String>,
    pub test_normal: Option<TestNormal>,
    pub abnormal_count: Option<usize>,

    pub synthetic: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            novel_digit: None,
            max_train: None,
            manifest: None,
            image_root: None,
            novel_classes: Vec::new(),
            test_normal: None,
            abnormal_count: None,
            synthetic: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub variant: Variant,
    pub scaling: Scaling,
    /// Abnormal test images set aside (with as many normals) to pick the
    /// threshold. 0 sweeps on the evaluated set itself.
    pub calibration_holdout: usize,
    /// Keep the calibration images in the evaluated set.
    pub calibration_included: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            variant: Variant::V1,
            scaling: Scaling::Global,
            calibration_holdout: 0,
            calibration_included: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold_range: [f64; 2],
    pub threshold_step: f64,
    pub criterion: Criterion,
    /// Fixed threshold; when set the sweep is still reported but not used.
    pub threshold: Option<f64>,
    pub plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_range: [0.4, 0.6],
            threshold_step: 0.01,
            criterion: Criterion::Accuracy,
            threshold: None,
            plot: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse, collecting unknown keys; no validation.
    pub fn parse(text: &str) -> Result<(RunConfig, Vec<String>)> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        Ok((cfg, unknown))
    }

    /// Load, resolve relative paths against the file's directory and validate.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut cfg, unknown) = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        let mut problems: Vec<String> = unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect();
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigList(problems))
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let d = &mut self.dataset;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.manifest,
            &mut d.image_root,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.arch.problems().into_iter().map(|p| format!("arch: {p}")));
        out.extend(self.train.problems());
        out.extend(self.dataset_problems());
        let e = &self.eval;
        let [lo, hi] = e.threshold_range;
        if !(lo <= hi) || !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            out.push(format!("eval.threshold_range [{lo}, {hi}] must be an ordered range inside [0, 1]"));
        }
        if !(e.threshold_step > 0.0) {
            out.push(format!("eval.threshold_step must be > 0, got {}", e.threshold_step));
        }
        if let Some(t) = e.threshold {
            if !(0.0..=1.0).contains(&t) {
                out.push(format!("eval.threshold must be in [0, 1], got {t}"));
            }
        }
        if self.scoring.scaling == Scaling::None {
            out.push("scoring.scaling = \"none\" leaves nothing to threshold; use global, partitioned or reference-range".into());
        }
        out
    }

    fn dataset_problems(&self) -> Vec<String> {
        let d = &self.dataset;
        let mut out = Vec::new();
        let need_file = |out: &mut Vec<String>, key: &str, p: &Option<PathBuf>| match p {
            None => out.push(format!("dataset.{key} is required for kind = {:?}", d.kind)),
            Some(p) if !p.exists() => out.push(format!("dataset.{key}: {} does not exist", p.display())),
            _ => {}
        };
        match d.kind {
            DatasetKind::Idx => {
                need_file(&mut out, "train_images", &d.train_images);
                need_file(&mut out, "train_labels", &d.train_labels);
                need_file(&mut out, "test_images", &d.test_images);
                need_file(&mut out, "test_labels", &d.test_labels);
                match d.novel_digit {
                    None => out.push("dataset.novel_digit is required for kind = \"idx\"".into()),
                    Some(n) if n > 9 => out.push(format!("dataset.novel_digit must be 0-9, got {n}")),
                    _ => {}
                }
            }
            DatasetKind::Manifest => {
                need_file(&mut out, "manifest", &d.manifest);
                need_file(&mut out, "image_root", &d.image_root);
                if d.novel_classes.is_empty() {
                    out.push("dataset.novel_classes must name at least one class".into());
                }
                match d.test_normal {
                    Some(TestNormal::Fraction(f)) if !(0.0..=1.0).contains(&f) => {
                        out.push(format!("dataset.test_normal fraction must be in [0, 1], got {f}"))
                    }
                    _ => {}
                }
            }
            DatasetKind::Synthetic => {
                out.extend(d.synthetic.problems().into_iter().map(|p| format!("dataset.{p}")));
            }
        }
        out
    }

    pub fn novel_classes(&self) -> BTreeSet<String> {
        self.dataset.novel_classes.iter().cloned().collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }
}
