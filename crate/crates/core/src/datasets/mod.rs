//! Image ingestion, preprocessing and normal/novel split construction.
//!
//! Three sources are supported: IDX digit files (leave-one-digit-out),
//! a JSON label manifest of scene images (novel object classes), and a
//! procedural scene generator used as a small stand-in for real driving
//! data. Every split keeps abnormal samples out of `train_normal`.

pub mod idx;
pub mod manifest;
pub mod preprocess;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::load_idx;
pub use manifest::{make_manifest_split, plan_manifest_split, Manifest, ManifestEntry, ManifestSplitOptions};
pub use preprocess::preprocess;
pub use synthetic::{generate_synthetic_scenes, SceneConfig};

/// 8-bit image in `H×W×C` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(id: impl Into<String>, height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if height == 0 || width == 0 {
            return Err(Error::Format(format!("image {id} has a zero dimension")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("image {id}: unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Format(format!(
                "image {id}: expected {} bytes, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(RawImage {
            id,
            height,
            width,
            channels,
            pixels,
        })
    }
}

/// Normalized `C×H×W` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * size * size {
            return Err(Error::Shape(format!(
                "{channels}x{size}x{size} image needs {} values, got {}",
                channels * size * size,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("image value {v} outside [-1, 1]")));
        }
        Ok(ImageTensor { channels, size, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

/// Stack images into an `N×C×H×W` batch.
pub fn to_batch<'a, I>(images: I) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let images: Vec<&ImageTensor> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
    let rows: Vec<&[f32]> = images.iter().map(|i| i.data()).collect();
    Tensor::stack(&rows, &first.shape())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageTensor,
    /// `true` = novel / abnormal.
    pub anomaly_label: bool,
    /// Digit name or the comma-joined scene class set.
    pub source_label: String,
    pub partition: Partition,
}

/// How a split was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub protocol: String,
    pub novel: Vec<String>,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_normal: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub rule: SplitRule,
}

/// One row of an on-disk split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub partition: Partition,
    pub anomaly_label: bool,
    pub source_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

/// Image-free description of a split: which id lands where, with which label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub rule: SplitRule,
    pub entries: Vec<PlanEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

impl SplitPlan {
    pub fn counts(&self) -> PartitionCounts {
        let mut c = PartitionCounts::default();
        for e in &self.entries {
            match (e.partition, e.anomaly_label) {
                (Partition::Train, _) => c.train_normal += 1,
                (Partition::Test, false) => c.test_normal += 1,
                (Partition::Test, true) => c.test_abnormal += 1,
            }
        }
        c
    }
}

impl DatasetSplit {
    /// Enforce the split invariant: nothing abnormal and nothing from the
    /// test partition in `train_normal`.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self
            .train_normal
            .iter()
            .find(|s| s.anomaly_label || s.partition != Partition::Train)
        {
            return Err(Error::Consistency(format!(
                "sample {} is not a normal training sample",
                s.id
            )));
        }
        Ok(())
    }

    pub fn plan(&self) -> SplitPlan {
        let entries = self
            .train_normal
            .iter()
            .chain(&self.test)
            .map(|s| PlanEntry {
                id: s.id.clone(),
                partition: s.partition,
                anomaly_label: s.anomaly_label,
                source_label: s.source_label.clone(),
                file: None,
            })
            .collect();
        SplitPlan {
            rule: self.rule.clone(),
            entries,
        }
    }

    pub fn counts(&self) -> PartitionCounts {
        PartitionCounts {
            train_normal: self.train_normal.len(),
            test_normal: self.test.iter().filter(|s| !s.anomaly_label).count(),
            test_abnormal: self.test.iter().filter(|s| s.anomaly_label).count(),
        }
    }
}

/// Build the leave-one-digit-out split from a single pool of digit images.
///
/// Every sample of `novel_digit` goes to the test partition as abnormal;
/// for each normal digit, `round(test_fraction · count)` samples (chosen by
/// a seeded shuffle after sorting by id) are held out for testing.
pub fn make_leave_one_out_split(
    samples: &[(RawImage, u8)],
    novel_digit: u8,
    test_fraction: f64,
    seed: u64,
    target_size: usize,
    channels: usize,
) -> Result<DatasetSplit> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if samples.is_empty() {
        return Err(Error::Config("digit corpus is empty".into()));
    }
    if novel_digit > 9 {
        return Err(Error::Config(format!("novel digit must be 0-9, got {novel_digit}")));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must be in [0, 1], got {test_fraction}")));
    }
    if !samples.iter().any(|(_, d)| *d == novel_digit) {
        return Err(Error::EmptyNovelClass(novel_digit.to_string()));
    }
    let mut by_digit: Vec<Vec<&(RawImage, u8)>> = vec![Vec::new(); 10];
    for s in samples {
        by_digit
            .get_mut(s.1 as usize)
            .ok_or_else(|| Error::Format(format!("digit label {} out of range", s.1)))?
            .push(s);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (digit, mut group) in by_digit.into_iter().enumerate() {
        group.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        let novel = digit == novel_digit as usize;
        let held = if novel {
            group.len()
        } else {
            group.shuffle(&mut rng);
            (test_fraction * group.len() as f64).round() as usize
        };
        for (i, (raw, d)) in group.into_iter().enumerate() {
            let partition = if i < held { Partition::Test } else { Partition::Train };
            let sample = LabeledSample {
                id: raw.id.clone(),
                image: preprocess(raw, target_size, channels)?,
                anomaly_label: *d == novel_digit,
                source_label: d.to_string(),
                partition,
            };
            match partition {
                Partition::Train => train.push(sample),
                Partition::Test => test.push(sample),
            }
        }
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let split = DatasetSplit {
        train_normal: train,
        test,
        rule: SplitRule {
            protocol: "leave-one-digit-out".into(),
            novel: vec![novel_digit.to_string()],
            description: format!("digit {novel_digit} novel, test fraction {test_fraction} of each normal digit"),
        },
    };
    split.validate()?;
    Ok(split)
}

/// Leave-one-digit-out over the standard train/test file boundary: the
/// training file minus the novel digit forms `train_normal`, the whole test
/// file forms `test`. `max_train` caps the training set (first ids after a
/// seeded shuffle) for reduced-budget runs.
pub fn make_idx_protocol_split(
    train_pool: &[(RawImage, u8)],
    test_pool: &[(RawImage, u8)],
    novel_digit: u8,
    max_train: Option<usize>,
    seed: u64,
    target_size: usize,
    channels: usize,
) -> Result<DatasetSplit> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if novel_digit > 9 {
        return Err(Error::Config(format!("novel digit must be 0-9, got {novel_digit}")));
    }
    if !test_pool.iter().any(|(_, d)| *d == novel_digit) {
        return Err(Error::EmptyNovelClass(novel_digit.to_string()));
    }
    let mut normals: Vec<&(RawImage, u8)> = train_pool.iter().filter(|(_, d)| *d != novel_digit).collect();
    if normals.is_empty() {
        return Err(Error::NoNormalData("training file holds only the novel digit".into()));
    }
    normals.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    if let Some(cap) = max_train.filter(|c| *c < normals.len()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        normals.shuffle(&mut rng);
        normals.truncate(cap);
        normals.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    }
    let label = |raw: &RawImage, d: u8, partition| -> Result<LabeledSample> {
        Ok(LabeledSample {
            id: raw.id.clone(),
            image: preprocess(raw, target_size, channels)?,
            anomaly_label: d == novel_digit,
            source_label: d.to_string(),
            partition,
        })
    };
    let train_normal = normals
        .iter()
        .map(|(r, d)| label(r, *d, Partition::Train))
        .collect::<Result<Vec<_>>>()?;
    let mut test = test_pool
        .iter()
        .map(|(r, d)| label(r, *d, Partition::Test))
        .collect::<Result<Vec<_>>>()?;
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let split = DatasetSplit {
        train_normal,
        test,
        rule: SplitRule {
            protocol: "leave-one-digit-out".into(),
            novel: vec![novel_digit.to_string()],
            description: format!(
                "digit {novel_digit} novel; train file minus digit {novel_digit} for training, test file for testing"
            ),
        },
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit_pool(labels: &[u8]) -> Vec<(RawImage, u8)> {
        labels
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let raw = RawImage::new(format!("d:{i:05}"), 28, 28, 1, vec![(i * 7 % 256) as u8; 784]).unwrap();
                (raw, *d)
            })
            .collect()
    }

    #[test]
    fn novel_digit_never_in_training() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let split = make_leave_one_out_split(&digit_pool(&labels), 2, 0.2, 1, 32, 1).unwrap();
        assert!(split.train_normal.iter().all(|s| s.source_label != "2" && !s.anomaly_label));
        assert_eq!(split.train_normal.len() + split.test.len(), 100);
        assert_eq!(split.test.iter().filter(|s| s.anomaly_label).count(), 10);
        // 9 normal digits x round(0.2 * 10)
        assert_eq!(split.test.iter().filter(|s| !s.anomaly_label).count(), 18);
    }

    #[test]
    fn single_novel_sample_goes_to_test() {
        let labels = [0u8, 1, 3, 4, 5, 6, 7, 8, 9, 2];
        let split = make_leave_one_out_split(&digit_pool(&labels), 2, 0.0, 1, 32, 1).unwrap();
        let novel: Vec<_> = split.test.iter().filter(|s| s.source_label == "2").collect();
        assert_eq!(novel.len(), 1);
        assert!(novel[0].anomaly_label);
        assert_eq!(split.train_normal.len(), 9);
    }

    #[test]
    fn absent_novel_digit_is_an_error() {
        let labels = [0u8, 1, 3];
        let err = make_leave_one_out_split(&digit_pool(&labels), 2, 0.5, 1, 32, 1).unwrap_err();
        assert!(matches!(err, Error::EmptyNovelClass(_)));
    }

    #[test]
    fn idx_protocol_uses_file_boundary() {
        let train = digit_pool(&[0, 1, 2, 3, 2, 5]);
        let mut test = digit_pool(&[2, 4, 6]);
        for (r, _) in &mut test {
            r.id = r.id.replace("d:", "t:");
        }
        let split = make_idx_protocol_split(&train, &test, 2, None, 0, 32, 1).unwrap();
        assert_eq!(split.counts(), PartitionCounts { train_normal: 4, test_normal: 2, test_abnormal: 1 });
        let capped = make_idx_protocol_split(&train, &test, 2, Some(2), 0, 32, 1).unwrap();
        assert_eq!(capped.train_normal.len(), 2);
    }

    #[test]
    fn validate_rejects_abnormal_training_sample() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        let mut split = make_leave_one_out_split(&digit_pool(&labels), 2, 0.0, 1, 32, 1).unwrap();
        split.train_normal[0].anomaly_label = true;
        assert!(split.validate().is_err());
    }
}
