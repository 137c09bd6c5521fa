//! Confusion matrices, threshold sweeps and ROC-AUC.
//!
//! Confusion matrices count **Normal as the positive class**: a sample is
//! predicted Novel iff its scaled score is strictly above `τ`, so `tp` is a
//! normal sample kept as normal and `fp` an abnormal sample let through.
//! [`ConfusionMatrix::novel_positive`] gives the usual anomaly-detection
//! orientation. AUC always treats Novel as positive.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_idx_protocol_split, RawImage};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::scoring::{score_samples, ScoreSet, Variant};
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same counts with Novel as the positive class.
    pub fn novel_positive(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    /// Metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl DerivedMetrics {
    pub fn get(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Accuracy => self.accuracy,
            Criterion::F1 => self.f1,
        }
    }
}

pub fn derived_metrics(cm: &ConfusionMatrix) -> DerivedMetrics {
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(cm.tp, cm.tp + cm.fp, "precision");
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_, "sensitivity");
    let accuracy = ratio(cm.tp + cm.tn, cm.total(), "accuracy");
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        undefined.push("f1".into());
        0.0
    };
    DerivedMetrics {
        f1,
        accuracy,
        precision,
        sensitivity,
        undefined,
    }
}

pub fn confusion_at(scores: &ScoreSet, tau: f64) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for s in &scores.samples {
        let v = s
            .scaled_score
            .ok_or_else(|| Error::Contract(format!("sample {} has no scaled score", s.id)))?;
        let novel = v > tau;
        match (s.anomaly_label, novel) {
            (false, false) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (true, true) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Accuracy,
    F1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: DerivedMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepResult {
    pub points: Vec<SweepPoint>,
    pub best_threshold: f64,
    pub best_value: f64,
    pub selection_criterion: Criterion,
}

/// Inclusive grid `lo, lo + step, …, hi`, values rounded to 1e-10 so that
/// e.g. 0.47 is exactly the literal 0.47.
pub fn threshold_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || lo > hi || step <= 0.0 {
        return Err(Error::Config(format!(
            "threshold range [{lo}, {hi}] with step {step} gives an empty grid"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| ((lo + k as f64 * step) * 1e10).round() / 1e10).collect())
}

/// Evaluate every grid threshold; the best maximizes `criterion`, ties go
/// to the smallest threshold.
pub fn sweep_threshold(scores: &ScoreSet, lo: f64, hi: f64, step: f64, criterion: Criterion) -> Result<ThresholdSweepResult> {
    let grid = threshold_grid(lo, hi, step)?;
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for tau in grid {
        let confusion = confusion_at(scores, tau)?;
        let metrics = derived_metrics(&confusion);
        let v = metrics.get(criterion);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((tau, v));
        }
        points.push(SweepPoint {
            threshold: tau,
            confusion,
            metrics,
        });
    }
    let (best_threshold, best_value) = best.expect("grid is non-empty");
    debug_assert!(points.iter().all(|p| p.metrics.get(criterion) <= best_value));
    Ok(ThresholdSweepResult {
        points,
        best_threshold,
        best_value,
        selection_criterion: criterion,
    })
}

/// Mann-Whitney AUC with midranks; `abnormal` is the positive class.
pub fn auc_from_scores(normal: &[f64], abnormal: &[f64]) -> Result<f64> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::UndefinedAuc(format!("{} normal and {} abnormal samples; both classes are required", normal.len(), abnormal.len())));
    }
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|v| (*v, false))
        .chain(abnormal.iter().map(|v| (*v, true)))
        .collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Numeric("NaN score in AUC input".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|(_, a)| *a).count() as f64;
        i = j;
    }
    let (na, nn) = (abnormal.len() as f64, normal.len() as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nn))
}

fn split_labels(scores: &ScoreSet, value: impl Fn(usize) -> Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for (i, s) in scores.samples.iter().enumerate() {
        let v = value(i).ok_or_else(|| Error::Contract(format!("sample {} has no scaled score", s.id)))?;
        if s.anomaly_label {
            abnormal.push(v);
        } else {
            normal.push(v);
        }
    }
    Ok((normal, abnormal))
}

/// AUC of the raw scores.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    let (n, a) = split_labels(scores, |i| Some(scores.samples[i].raw_score))?;
    auc_from_scores(&n, &a)
}

/// AUC of the scaled scores.
pub fn roc_auc_scaled(scores: &ScoreSet) -> Result<f64> {
    let (n, a) = split_labels(scores, |i| scores.samples[i].scaled_score)?;
    auc_from_scores(&n, &a)
}

/// Everything written to `report.json` by an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub scaling: crate::scoring::Scaling,
    pub label_dependent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub samples: usize,
    pub normal: usize,
    pub abnormal: usize,
    pub threshold: f64,
    pub threshold_source: String,
    /// Normal = positive, as in the confusion tables.
    pub confusion: ConfusionMatrix,
    pub metrics: DerivedMetrics,
    pub confusion_novel_positive: ConfusionMatrix,
    pub metrics_novel_positive: DerivedMetrics,
    pub auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_scaled: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<ThresholdSweepResult>,
}

pub const LABEL_DEPENDENT_WARNING: &str = "scores were scaled with ground-truth labels (partitioned scaling); \
the metrics below are a diagnostic and do not describe deployable anomaly detection";

impl EvalReport {
    pub fn build(
        scores: &ScoreSet,
        threshold: f64,
        threshold_source: impl Into<String>,
        sweep: Option<ThresholdSweepResult>,
    ) -> Result<Self> {
        let variant = scores
            .samples
            .first()
            .map(|s| s.variant)
            .ok_or_else(|| Error::Config("nothing to evaluate".into()))?;
        let confusion = confusion_at(scores, threshold)?;
        let np = confusion.novel_positive();
        let abnormal = scores.samples.iter().filter(|s| s.anomaly_label).count();
        Ok(EvalReport {
            variant,
            scaling: scores.scaling,
            label_dependent: scores.label_dependent,
            warning: scores.label_dependent.then(|| LABEL_DEPENDENT_WARNING.to_string()),
            samples: scores.len(),
            normal: scores.len() - abnormal,
            abnormal,
            threshold,
            threshold_source: threshold_source.into(),
            metrics: derived_metrics(&confusion),
            confusion,
            metrics_novel_positive: derived_metrics(&np),
            confusion_novel_positive: np,
            auc: roc_auc(scores)?,
            auc_scaled: roc_auc_scaled(scores).ok(),
            sweep,
        })
    }
}

/// Scaled scores by class as a static SVG strip plot: sample index on x,
/// scaled score on y, normals blue, abnormals red, threshold dashed.
pub fn scatter_svg(scores: &ScoreSet, threshold: Option<f64>) -> Result<String> {
    const W: f64 = 720.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    let n = scores.len().max(2) as f64;
    let x = |i: usize| M + (W - 2.0 * M) * i as f64 / (n - 1.0);
    let y = |v: f64| H - M - (H - 2.0 * M) * v;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    for (label, v) in [("0", 0.0), ("0.5", 0.5), ("1", 1.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{label}</text>"#,
            M - 4.0,
            y(v) + 4.0
        );
    }
    if let Some(t) = threshold {
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{0}" x2="{1}" y2="{0}" stroke="gray" stroke-dasharray="4 3"/>"#,
            y(t),
            W - M
        );
    }
    for (i, smp) in scores.samples.iter().enumerate() {
        let v = smp
            .scaled_score
            .ok_or_else(|| Error::Contract(format!("sample {} has no scaled score", smp.id)))?;
        let color = if smp.anomaly_label { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.7"/>"#,
            x(i),
            y(v)
        );
    }
    let title = format!(
        "{} scores, {} scaling{}",
        scores.samples.first().map(|s| s.variant.as_str()).unwrap_or("-"),
        scores.scaling,
        if scores.label_dependent { " (label dependent)" } else { "" }
    );
    let _ = writeln!(s, r#"<text x="{M}" y="20" font-size="13">{title}</text>"#);
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub digit: u8,
    pub train_normal: usize,
    pub test: usize,
    pub auc_v1: Option<f64>,
    pub auc_v2: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub rows: Vec<AucRow>,
}

impl AucTable {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|a| format!("{a:.4}")).unwrap_or_default();
        let mut s = String::from("digit,auc_v1,auc_v2,train_normal,test\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.digit,
                cell(r.auc_v1),
                cell(r.auc_v2),
                r.train_normal,
                r.test
            );
        }
        s
    }
}

/// Options of a leave-one-digit-out sweep.
#[derive(Clone, Debug)]
pub struct DigitSweep {
    pub digits: Vec<u8>,
    pub variants: Vec<Variant>,
    pub max_train: Option<usize>,
}

/// Train one model per held-out digit and record the AUC of each variant.
pub fn per_digit_auc_table(
    train_pool: &[(RawImage, u8)],
    test_pool: &[(RawImage, u8)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sweep: &DigitSweep,
) -> Result<AucTable> {
    let mut table = AucTable::default();
    for &digit in &sweep.digits {
        let start = Instant::now();
        let split = make_idx_protocol_split(
            train_pool,
            test_pool,
            digit,
            sweep.max_train,
            cfg.seed,
            arch.input_size,
            arch.channels,
        )?;
        info!("digit {digit}: {} training normals, {} test", split.train_normal.len(), split.test.len());
        let (bundle, _) = train(&split, arch, cfg)?;
        let mut row = AucRow {
            digit,
            train_normal: split.train_normal.len(),
            test: split.test.len(),
            auc_v1: None,
            auc_v2: None,
            seconds: 0.0,
        };
        for &v in &sweep.variants {
            let set = ScoreSet::unscaled(score_samples(&bundle, &split.test, v, false)?);
            let auc = roc_auc(&set)?;
            info!("digit {digit} {v}: AUC {auc:.4}");
            match v {
                Variant::V1 => row.auc_v1 = Some(auc),
                Variant::V2 => row.auc_v2 = Some(auc),
            }
        }
        row.seconds = start.elapsed().as_secs_f64();
        table.rows.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{scale_global, ScoredSample};

    fn scored(normal: &[f64], abnormal: &[f64]) -> ScoreSet {
        let mk = |v: f64, a: bool| ScoredSample {
            id: String::new(),
            raw_score: v,
            scaled_score: Some(v),
            anomaly_label: a,
            source_label: String::new(),
            variant: Variant::V1,
        };
        ScoreSet::unscaled(
            normal
                .iter()
                .map(|v| mk(*v, false))
                .chain(abnormal.iter().map(|v| mk(*v, true)))
                .collect(),
        )
    }

    #[test]
    fn orientation_matches_tables() {
        // 902 normals, 957 abnormals
        let m = derived_metrics(&ConfusionMatrix::new(886, 954, 16, 3));
        assert!((m.precision - 886.0 / 1840.0).abs() < 1e-15);
        assert!((m.sensitivity - 886.0 / 902.0).abs() < 1e-15);
        let np = ConfusionMatrix::new(886, 954, 16, 3).novel_positive();
        assert_eq!(np, ConfusionMatrix::new(3, 16, 954, 886));
    }

    #[test]
    fn everything_normal_at_zero() {
        let s = scored(&[0.0, 0.0], &[0.0]);
        assert_eq!(confusion_at(&s, 0.5).unwrap(), ConfusionMatrix::new(2, 1, 0, 0));
        // strict >: a score exactly at the threshold is normal
        let s = scored(&[0.5], &[0.5]);
        assert_eq!(confusion_at(&s, 0.5).unwrap(), ConfusionMatrix::new(1, 1, 0, 0));
    }

    #[test]
    fn undefined_ratios_are_flagged() {
        let m = derived_metrics(&ConfusionMatrix::new(0, 0, 0, 5));
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.contains(&"precision".to_string()));
        assert!(m.undefined.contains(&"f1".to_string()));
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn grid_is_inclusive_and_exact() {
        let g = threshold_grid(0.4, 0.55, 0.01).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[7], 0.47);
        assert_eq!(*g.last().unwrap(), 0.55);
        assert_eq!(threshold_grid(0.5, 0.5, 0.01).unwrap(), vec![0.5]);
        assert!(threshold_grid(0.6, 0.5, 0.01).is_err());
        assert!(threshold_grid(0.4, 0.5, 0.0).is_err());
    }

    #[test]
    fn perfect_separation_sweep() {
        let s = scored(&[0.1, 0.2, 0.3], &[0.8, 0.9]);
        let r = sweep_threshold(&s, 0.35, 0.75, 0.05, Criterion::Accuracy).unwrap();
        assert!(r.points.iter().all(|p| p.metrics.accuracy == 1.0));
        assert_eq!(r.best_threshold, 0.35);
        let r = sweep_threshold(&s, 0.5, 0.5, 0.01, Criterion::F1).unwrap();
        assert_eq!(r.best_threshold, 0.5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_from_scores(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.4], &[0.3, 0.9]).unwrap(), 0.5);
        assert_eq!(auc_from_scores(&[0.7; 4], &[0.7; 3]).unwrap(), 0.5);
        assert!(matches!(auc_from_scores(&[], &[1.0]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn auc_survives_global_scaling() {
        let mut s = scored(&[1.0, 3.0, 2.5, 7.0], &[2.5, 9.0, 4.0]);
        s.samples.iter_mut().for_each(|x| x.scaled_score = None);
        let g = scale_global(&s).unwrap();
        assert_eq!(roc_auc(&s).unwrap(), roc_auc_scaled(&g).unwrap());
    }

    #[test]
    fn svg_lists_every_sample() {
        let s = scored(&[0.1, 0.2], &[0.9]);
        let svg = scatter_svg(&s, Some(0.5)).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg"));
    }
}
