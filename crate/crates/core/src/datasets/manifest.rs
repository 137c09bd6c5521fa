//! Label-manifest driven scene datasets.
//!
//! Manifest schema:
//!
//! ```json
//! { "images": [ { "id": "b1c66a42", "file": "images/b1c66a42.jpg",
//!                 "labels": ["car", "road", "motorcycle"] } ] }
//! ```
//!
//! `file` is resolved relative to the image root. An image is abnormal iff
//! its label set intersects the configured novel classes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{preprocess, DatasetSplit, LabeledSample, Partition, PlanEntry, RawImage, SplitPlan, SplitRule};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// How many normal images are held out for testing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestNormal {
    Count(usize),
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplitOptions {
    pub test_normal: TestNormal,
    /// `None` keeps every abnormal image.
    pub abnormal_count: Option<usize>,
    pub seed: u64,
}

impl Default for ManifestSplitOptions {
    fn default() -> Self {
        ManifestSplitOptions {
            test_normal: TestNormal::Fraction(0.125),
            abnormal_count: None,
            seed: 0,
        }
    }
}

pub fn is_abnormal(labels: &[String], novel_classes: &BTreeSet<String>) -> bool {
    labels.iter().any(|l| novel_classes.contains(l))
}

/// Assign every manifest image to a partition without decoding any pixels.
///
/// Fails with the full list of ids whose files are missing under `root`.
pub fn plan_manifest_split(
    manifest: &Manifest,
    root: &Path,
    novel_classes: &BTreeSet<String>,
    opts: &ManifestSplitOptions,
) -> Result<SplitPlan> {
    if novel_classes.is_empty() {
        return Err(Error::Config("novel class set is empty".into()));
    }
    let missing: Vec<String> = manifest
        .images
        .iter()
        .filter(|e| !root.join(&e.file).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    let mut entries: Vec<&ManifestEntry> = manifest.images.iter().collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let (mut abnormal, mut normal): (Vec<&ManifestEntry>, Vec<&ManifestEntry>) =
        entries.into_iter().partition(|e| is_abnormal(&e.labels, novel_classes));
    if normal.is_empty() {
        return Err(Error::NoNormalData("every manifest image contains a novel class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    normal.shuffle(&mut rng);
    abnormal.shuffle(&mut rng);
    let held = match opts.test_normal {
        TestNormal::Count(c) => c,
        TestNormal::Fraction(f) => (f * normal.len() as f64).round() as usize,
    };
    if held > normal.len() {
        return Err(Error::Config(format!(
            "{held} test normals requested but only {} normal images exist",
            normal.len()
        )));
    }
    let keep_abnormal = opts.abnormal_count.unwrap_or(abnormal.len());
    if keep_abnormal > abnormal.len() {
        return Err(Error::Config(format!(
            "{keep_abnormal} abnormal test images requested but only {} exist",
            abnormal.len()
        )));
    }
    let entry = |e: &ManifestEntry, partition, anomaly_label| {
        let mut labels = e.labels.clone();
        labels.sort();
        labels.dedup();
        PlanEntry {
            id: e.id.clone(),
            partition,
            anomaly_label,
            source_label: labels.join(","),
            file: Some(e.file.clone()),
        }
    };
    let mut out: Vec<PlanEntry> = Vec::with_capacity(normal.len() + keep_abnormal);
    for (i, e) in normal.iter().enumerate() {
        let p = if i < held { Partition::Test } else { Partition::Train };
        out.push(entry(e, p, false));
    }
    for e in abnormal.iter().take(keep_abnormal) {
        out.push(entry(e, Partition::Test, true));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SplitPlan {
        rule: SplitRule {
            protocol: "novel-object-classes".into(),
            novel: novel_classes.iter().cloned().collect(),
            description: format!(
                "images containing any of {{{}}} are abnormal",
                novel_classes.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
        },
        entries: out,
    })
}

/// Decode an image file into a [`RawImage`] (grayscale stays 1 channel,
/// everything else becomes RGB).
pub fn read_image(path: &Path, id: &str) -> Result<RawImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 | 2 => RawImage::new(id, h, w, 1, img.into_luma8().into_raw()),
        _ => RawImage::new(id, h, w, 3, img.into_rgb8().into_raw()),
    }
}

/// Load the images of a manifest-backed plan.
pub fn materialize_plan(plan: &SplitPlan, root: &Path, target_size: usize, channels: usize) -> Result<DatasetSplit> {
    let mut train_normal = Vec::new();
    let mut test = Vec::new();
    for e in &plan.entries {
        let file = e
            .file
            .as_ref()
            .ok_or_else(|| Error::Consistency(format!("plan entry {} has no file", e.id)))?;
        let raw = read_image(&root.join(file), &e.id)?;
        let sample = LabeledSample {
            id: e.id.clone(),
            image: preprocess(&raw, target_size, channels)?,
            anomaly_label: e.anomaly_label,
            source_label: e.source_label.clone(),
            partition: e.partition,
        };
        match e.partition {
            Partition::Train => train_normal.push(sample),
            Partition::Test => test.push(sample),
        }
    }
    let split = DatasetSplit {
        train_normal,
        test,
        rule: plan.rule.clone(),
    };
    split.validate()?;
    Ok(split)
}

pub fn make_manifest_split(
    manifest: &Manifest,
    root: &Path,
    novel_classes: &BTreeSet<String>,
    opts: &ManifestSplitOptions,
    target_size: usize,
    channels: usize,
) -> Result<DatasetSplit> {
    let plan = plan_manifest_split(manifest, root, novel_classes, opts)?;
    materialize_plan(&plan, root, target_size, channels)
}
