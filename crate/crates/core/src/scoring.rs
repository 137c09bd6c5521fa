//! Latent-space anomaly scores and their scaling to `[0, 1]`.
//!
//! Two scores are available:
//!
//! * `v1`: `‖G_E(x) − E(x̂)‖`, the encoder score
//! * `v2`: `‖G_E(x) − G_E(x̂)‖`, the generator encoder applied twice
//!
//! with `x̂ = G_D(G_E(x))`. All networks run in inference mode.
//!
//! Partitioned scaling min-max scales normal and abnormal samples with
//! separate ranges. It needs ground-truth labels, so its output is flagged
//! `label_dependent` and refused by [`ScoreSet::require_deployable`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{to_batch, DatasetSplit, ImageTensor, LabeledSample};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::Tensor;

/// Images scored per forward pass.
const SCORE_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Encoder score, `‖G_E(x) − E(x̂)‖`.
    #[serde(alias = "encoder")]
    V1,
    /// Generator-encoder score, `‖G_E(x) − G_E(x̂)‖`.
    #[serde(alias = "generator-encoder")]
    V2,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::V1, Variant::V2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" | "encoder" => Ok(Variant::V1),
            "v2" | "generator-encoder" => Ok(Variant::V2),
            _ => Err(Error::Config(format!("unknown score variant {s:?} (expected v1 or v2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    None,
    Global,
    Partitioned,
    /// Scale against a stored range from normal training data; clamps to `[0, 1]`.
    ReferenceRange,
}

impl Scaling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scaling::None => "none",
            Scaling::Global => "global",
            Scaling::Partitioned => "partitioned",
            Scaling::ReferenceRange => "reference-range",
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scaling::None),
            "global" => Ok(Scaling::Global),
            "partitioned" => Ok(Scaling::Partitioned),
            "reference-range" | "reference_range" => Ok(Scaling::ReferenceRange),
            _ => Err(Error::Config(format!(
                "unknown scaling {s:?} (expected none, global, partitioned or reference-range)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub raw_score: f64,
    pub scaled_score: Option<f64>,
    /// `true` = abnormal.
    pub anomaly_label: bool,
    pub source_label: String,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Range> {
        values.fold(None, |acc, v| {
            Some(match acc {
                None => Range { min: v, max: v },
                Some(r) => Range {
                    min: r.min.min(v),
                    max: r.max.max(v),
                },
            })
        })
    }

    fn width(&self) -> f64 {
        self.max - self.min
    }

    fn apply(&self, s: f64) -> f64 {
        (s - self.min) / self.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalingStats {
    Global(Range),
    Partitioned { normal: Range, abnormal: Range },
    ReferenceRange(Range),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub samples: Vec<ScoredSample>,
    pub scaling: Scaling,
    pub stats: Option<ScalingStats>,
    pub label_dependent: bool,
}

impl ScoreSet {
    pub fn unscaled(samples: Vec<ScoredSample>) -> Self {
        ScoreSet {
            samples,
            scaling: Scaling::None,
            stats: None,
            label_dependent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Guard for anything that claims deployment semantics.
    pub fn require_deployable(&self) -> Result<()> {
        if self.label_dependent {
            Err(Error::LabelDependent)
        } else {
            Ok(())
        }
    }

    fn raw(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.raw_score)
    }

    fn with_scaled(&self, scaling: Scaling, stats: ScalingStats, f: impl Fn(&ScoredSample) -> f64) -> ScoreSet {
        let samples = self
            .samples
            .iter()
            .map(|s| ScoredSample {
                scaled_score: Some(f(s)),
                ..s.clone()
            })
            .collect();
        ScoreSet {
            samples,
            scaling,
            stats: Some(stats),
            label_dependent: scaling == Scaling::Partitioned,
        }
    }

    /// Split off the samples for which `pick` is true.
    pub fn partition_by(&self, pick: impl Fn(&ScoredSample) -> bool) -> (ScoreSet, ScoreSet) {
        let (a, b): (Vec<_>, Vec<_>) = self.samples.iter().cloned().partition(|s| pick(s));
        let wrap = |samples| ScoreSet {
            samples,
            scaling: self.scaling,
            stats: self.stats,
            label_dependent: self.label_dependent,
        };
        (wrap(a), wrap(b))
    }
}

fn l2(a: &[f32], b: &[f32], squared: bool) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    if squared {
        s
    } else {
        s.sqrt()
    }
}

/// Row-wise distances between two `[N, d]` code matrices.
pub fn latent_distances(z: &Tensor, z_other: &Tensor, squared: bool) -> Result<Vec<f64>> {
    z.ensure_same_shape(z_other, "latent codes")?;
    Ok((0..z.batch()).map(|i| l2(z.row(i), z_other.row(i), squared)).collect())
}

/// Raw scores of a batch `[N, C, H, W]`.
pub fn score_batch(bundle: &ModelBundle, x: &Tensor, variant: Variant, squared: bool) -> Result<Vec<f64>> {
    let (x_hat, z) = bundle.generator_forward(x)?;
    let z_hat = match variant {
        Variant::V1 => bundle.encode(&x_hat)?,
        Variant::V2 => bundle.gen_encode(&x_hat)?,
    };
    latent_distances(&z, &z_hat, squared)
}

fn single(bundle: &ModelBundle, x: &ImageTensor, variant: Variant) -> Result<f64> {
    let batch = to_batch([x])?;
    Ok(score_batch(bundle, &batch, variant, false)?[0])
}

/// `‖G_E(x) − E(G_D(G_E(x)))‖₂`
pub fn anomaly_score_v1(bundle: &ModelBundle, x: &ImageTensor) -> Result<f64> {
    single(bundle, x, Variant::V1)
}

/// `‖G_E(x) − G_E(G_D(G_E(x)))‖₂`
pub fn anomaly_score_v2(bundle: &ModelBundle, x: &ImageTensor) -> Result<f64> {
    single(bundle, x, Variant::V2)
}

pub fn score_samples(
    bundle: &ModelBundle,
    samples: &[LabeledSample],
    variant: Variant,
    squared: bool,
) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_BATCH) {
        let x = to_batch(chunk.iter().map(|s| &s.image))?;
        let scores = score_batch(bundle, &x, variant, squared)?;
        for (s, raw) in chunk.iter().zip(scores) {
            if !raw.is_finite() {
                return Err(Error::Numeric(format!("non-finite anomaly score for {}", s.id)));
            }
            out.push(ScoredSample {
                id: s.id.clone(),
                raw_score: raw,
                scaled_score: None,
                anomaly_label: s.anomaly_label,
                source_label: s.source_label.clone(),
                variant,
            });
        }
    }
    Ok(out)
}

/// Score every test sample and apply `scaling`. Reference-range scaling
/// takes its range from the training normals.
pub fn score_dataset(bundle: &ModelBundle, split: &DatasetSplit, variant: Variant, scaling: Scaling) -> Result<ScoreSet> {
    if split.test.is_empty() {
        return Err(Error::Config("test partition is empty".into()));
    }
    let set = ScoreSet::unscaled(score_samples(bundle, &split.test, variant, false)?);
    match scaling {
        Scaling::None => Ok(set),
        Scaling::Global => scale_global(&set),
        Scaling::Partitioned => scale_partitioned(&set),
        Scaling::ReferenceRange => {
            let reference = reference_range(bundle, &split.train_normal, variant)?;
            scale_reference_range(&set, reference)
        }
    }
}

/// Min–max over the whole set.
pub fn scale_global(set: &ScoreSet) -> Result<ScoreSet> {
    if set.len() < 2 {
        return Err(Error::DegenerateRange(0.0));
    }
    let r = Range::of(set.raw()).expect("non-empty");
    if !(r.width() > 0.0) {
        return Err(Error::DegenerateRange(r.min));
    }
    Ok(set.with_scaled(Scaling::Global, ScalingStats::Global(r), |s| r.apply(s.raw_score)))
}

/// Min–max within each ground-truth partition. Label dependent.
pub fn scale_partitioned(set: &ScoreSet) -> Result<ScoreSet> {
    let range = |abnormal: bool| -> Result<Range> {
        let what = if abnormal { "abnormal" } else { "normal" };
        let r = Range::of(set.samples.iter().filter(|s| s.anomaly_label == abnormal).map(|s| s.raw_score))
            .ok_or_else(|| Error::Partition(format!("{what} partition is empty")))?;
        if !(r.width() > 0.0) {
            return Err(Error::Partition(format!(
                "{what} partition has a degenerate score range at {}",
                r.min
            )));
        }
        Ok(r)
    };
    let normal = range(false)?;
    let abnormal = range(true)?;
    Ok(set.with_scaled(Scaling::Partitioned, ScalingStats::Partitioned { normal, abnormal }, |s| {
        if s.anomaly_label {
            abnormal.apply(s.raw_score)
        } else {
            normal.apply(s.raw_score)
        }
    }))
}

/// Score range of normal training data, used as a fixed reference.
pub fn reference_range(bundle: &ModelBundle, train_normal: &[LabeledSample], variant: Variant) -> Result<Range> {
    let scores = score_samples(bundle, train_normal, variant, false)?;
    let r = Range::of(scores.iter().map(|s| s.raw_score))
        .ok_or_else(|| Error::Config("no training normals for the reference range".into()))?;
    if !(r.width() > 0.0) {
        return Err(Error::DegenerateRange(r.min));
    }
    Ok(r)
}

/// Scale against a stored range, clamping to `[0, 1]`. Labels are not used.
pub fn scale_reference_range(set: &ScoreSet, reference: Range) -> Result<ScoreSet> {
    if !(reference.width() > 0.0) {
        return Err(Error::DegenerateRange(reference.min));
    }
    Ok(set.with_scaled(Scaling::ReferenceRange, ScalingStats::ReferenceRange(reference), |s| {
        reference.apply(s.raw_score).clamp(0.0, 1.0)
    }))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scaling: Scaling,
    stats: &'a Option<ScalingStats>,
    label_dependent: bool,
    samples: usize,
}

/// Write `id,raw_score,scaled_score,label,variant,scaling` plus a JSON
/// sidecar with the scaling statistics (`<path>.json`).
pub fn write_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["id", "raw_score", "scaled_score", "label", "variant", "scaling"])?;
    for s in &set.samples {
        w.write_record([
            s.id.clone(),
            format!("{}", s.raw_score),
            s.scaled_score.map(|v| v.to_string()).unwrap_or_default(),
            if s.anomaly_label { "abnormal".into() } else { "normal".into() },
            s.variant.to_string(),
            set.scaling.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let body = serde_json::to_string_pretty(&Sidecar {
        scaling: set.scaling,
        stats: &set.stats,
        label_dependent: set.label_dependent,
        samples: set.len(),
    })?;
    fs::write(&side, body).map_err(|e| Error::io(&side, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn set(normal: &[f64], abnormal: &[f64]) -> ScoreSet {
        let mk = |v: f64, a: bool, i: usize| ScoredSample {
            id: format!("{}{i}", if a { "a" } else { "n" }),
            raw_score: v,
            scaled_score: None,
            anomaly_label: a,
            source_label: String::new(),
            variant: Variant::V1,
        };
        let mut s: Vec<_> = normal.iter().enumerate().map(|(i, v)| mk(*v, false, i)).collect();
        s.extend(abnormal.iter().enumerate().map(|(i, v)| mk(*v, true, i)));
        ScoreSet::unscaled(s)
    }

    fn scaled(s: &ScoreSet) -> Vec<f64> {
        s.samples.iter().map(|x| x.scaled_score.unwrap()).collect()
    }

    #[test]
    fn stubbed_code_distances() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(latent_distances(&a, &b, false).unwrap(), vec![2.0]);
        let a = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![4.0, 0.0]).unwrap();
        assert_eq!(latent_distances(&a, &b, false).unwrap(), vec![5.0]);
        assert_eq!(latent_distances(&a, &b, true).unwrap(), vec![25.0]);
    }

    #[test]
    fn global_scaling_example() {
        let s = scale_global(&set(&[2.0, 4.0, 6.0], &[])).unwrap();
        assert_eq!(scaled(&s), vec![0.0, 0.5, 1.0]);
        assert!(!s.label_dependent);
        assert!(matches!(scale_global(&set(&[3.0, 3.0], &[3.0])), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn partitioned_scaling_example() {
        let s = scale_partitioned(&set(&[1.0, 3.0], &[2.0, 10.0])).unwrap();
        assert_eq!(scaled(&s), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(s.label_dependent);
        assert!(matches!(s.require_deployable(), Err(Error::LabelDependent)));
        assert!(matches!(scale_partitioned(&set(&[1.0, 2.0], &[])), Err(Error::Partition(_))));
        assert!(matches!(scale_partitioned(&set(&[1.0, 2.0], &[4.0, 4.0])), Err(Error::Partition(_))));
    }

    #[test]
    fn reference_range_clamps() {
        let s = scale_reference_range(&set(&[0.0, 5.0], &[20.0]), Range { min: 1.0, max: 11.0 }).unwrap();
        assert_eq!(scaled(&s), vec![0.0, 0.4, 1.0]);
        assert!(s.require_deployable().is_ok());
    }

    #[test]
    fn variant_and_scaling_names() {
        assert_eq!("encoder".parse::<Variant>().unwrap(), Variant::V1);
        assert_eq!("v2".parse::<Variant>().unwrap(), Variant::V2);
        assert_eq!("reference-range".parse::<Scaling>().unwrap(), Scaling::ReferenceRange);
        assert!("minmax".parse::<Scaling>().is_err());
    }
}
