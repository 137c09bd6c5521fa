//! End-to-end commands behind the CLI: prepare, train, evaluate,
//! reproduce-mnist and single-image scoring.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig};
use crate::datasets::manifest::{make_manifest_split, read_image, Manifest, ManifestSplitOptions};
use crate::datasets::{generate_synthetic_scenes, load_idx, make_idx_protocol_split, preprocess, DatasetSplit, PartitionCounts, RawImage, SceneConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{per_digit_auc_table, scatter_svg, sweep_threshold, AucTable, DigitSweep, EvalReport};
use crate::scoring::{score_dataset, score_batch, write_scores, Scaling, ScoreSet, Variant};
use crate::trainer::checkpoint::load_bundle;
use crate::trainer::{checkpoint_dir, latest_checkpoint, load_checkpoint, EpochRecord, Trainer};

/// Digits the original evaluation reports as easiest to separate.
pub const REFERENCE_HIGH_AUC_DIGITS: [u8; 4] = [0, 1, 2, 8];
pub const HIGH_AUC: f64 = 0.8;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Fresh `<output_dir>/<command>-<config hash>-<unix time>` directory.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let stem = format!("{command}-{}-{}", cfg.hash(), unix_now());
    let mut dir = cfg.output_dir.join(&stem);
    let mut k = 1;
    while dir.exists() {
        dir = cfg.output_dir.join(format!("{stem}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snap = dir.join("config.toml");
    fs::write(&snap, cfg.to_toml()).map_err(|e| Error::io(&snap, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_digits(images: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<Vec<(RawImage, u8)>> {
    match (images, labels) {
        (Some(i), Some(l)) => load_idx(i, l),
        _ => Err(Error::Config("idx dataset needs image and label paths".into())),
    }
}

/// Build the split described by the dataset section.
pub fn build_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let d = &cfg.dataset;
    let (size, ch) = (cfg.arch.input_size, cfg.arch.channels);
    match d.kind {
        DatasetKind::Idx => {
            let train = load_digits(&d.train_images, &d.train_labels)?;
            let test = load_digits(&d.test_images, &d.test_labels)?;
            let digit = d
                .novel_digit
                .ok_or_else(|| Error::Config("dataset.novel_digit is required".into()))?;
            make_idx_protocol_split(&train, &test, digit, d.max_train, d.seed, size, ch)
        }
        DatasetKind::Manifest => {
            let (Some(path), Some(root)) = (&d.manifest, &d.image_root) else {
                return Err(Error::Config("manifest dataset needs `manifest` and `image_root`".into()));
            };
            let manifest = Manifest::load(path)?;
            let mut opts = ManifestSplitOptions {
                abnormal_count: d.abnormal_count,
                seed: d.seed,
                ..ManifestSplitOptions::default()
            };
            if let Some(t) = d.test_normal {
                opts.test_normal = t;
            }
            make_manifest_split(&manifest, root, &cfg.novel_classes(), &opts, size, ch)
        }
        DatasetKind::Synthetic => {
            let scene = SceneConfig {
                image_size: size,
                ..d.synthetic.clone()
            };
            generate_synthetic_scenes(&scene, ch)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub run_dir: PathBuf,
    pub counts: PartitionCounts,
}

/// Write `split.json` (ids, partitions, labels) into a fresh run directory.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let split = build_split(cfg)?;
    let dir = create_run_dir(cfg, "prepare")?;
    let plan = split.plan();
    write_json(&dir.join("split.json"), &plan)?;
    let counts = plan.counts();
    info!(
        "split: {} train normal, {} test normal, {} test abnormal",
        counts.train_normal, counts.test_normal, counts.test_abnormal
    );
    Ok(PrepareSummary { run_dir: dir, counts })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub resumed_from: Option<PathBuf>,
    pub counts: PartitionCounts,
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub error: Option<String>,
}

pub const TELEMETRY_HEADER: &str = "epoch,l_adv,l_con,l_enc,l_g,l_d";

pub fn telemetry_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{},{}", r.epoch, r.l_adv, r.l_con, r.l_enc, r.l_g, r.l_d)
}

fn rewrite_telemetry(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut s = String::from(TELEMETRY_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&telemetry_row(r));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn append_telemetry(path: &Path, r: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", telemetry_row(r)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
}

/// Train from scratch into a new run directory, or continue the run in
/// `resume` from its latest checkpoint.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let split = build_split(cfg)?;
    let (dir, mut trainer, resumed_from) = match resume {
        Some(run) => {
            let ck_dir = latest_checkpoint(&run.join("checkpoints"))
                .ok_or_else(|| Error::Config(format!("no checkpoint under {}", run.join("checkpoints").display())))?;
            let ck = load_checkpoint(&ck_dir)?;
            if ck.meta.arch != cfg.arch {
                return Err(Error::Config(format!(
                    "checkpoint architecture {:?} differs from config {:?}",
                    ck.meta.arch, cfg.arch
                )));
            }
            info!("resuming from {} (epoch {})", ck_dir.display(), ck.meta.epoch);
            (run.to_path_buf(), Trainer::resume(ck, &cfg.train)?, Some(ck_dir))
        }
        None => (create_run_dir(cfg, "train")?, Trainer::new(&cfg.arch, &cfg.train)?, None),
    };
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&split.plan())?)
        .map_err(|e| Error::io(dir.join("split.json"), e))?;
    let telemetry = dir.join("telemetry.csv");
    rewrite_telemetry(&telemetry, &trainer.records)?;
    let ckpt_root = dir.join("checkpoints");
    let mut log = RunLog {
        command: "train".into(),
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg)?,
        started_unix: unix_now(),
        finished_unix: None,
        resumed_from,
        counts: split.counts(),
        records: trainer.records.clone(),
        checkpoints: Vec::new(),
        error: None,
    };
    let log_path = dir.join("run_log.json");
    write_json(&log_path, &log)?;
    let mut append_err = None;
    let result = trainer.fit(&split, Some(&ckpt_root), |r| {
        if let Err(e) = append_telemetry(&telemetry, r) {
            append_err.get_or_insert(e);
        }
    });
    log.records = trainer.records.clone();
    log.checkpoints = list_checkpoints(&ckpt_root);
    log.finished_unix = Some(unix_now());
    if let Err(e) = &result {
        log.error = Some(e.to_string());
    }
    write_json(&log_path, &log)?;
    result?;
    if let Some(e) = append_err {
        return Err(e);
    }
    Ok(TrainOutcome {
        final_checkpoint: checkpoint_dir(&ckpt_root, trainer.epochs_done()),
        run_dir: dir,
        records: trainer.records,
    })
}

fn list_checkpoints(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .map(|rd| rd.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// Split a scaled set into (calibration, evaluated) parts.
pub fn calibration_split(set: &ScoreSet, holdout: usize, included: bool, seed: u64) -> Result<(ScoreSet, ScoreSet)> {
    if holdout == 0 {
        return Ok((set.clone(), set.clone()));
    }
    let mut abnormal: Vec<&str> = set.samples.iter().filter(|s| s.anomaly_label).map(|s| s.id.as_str()).collect();
    let mut normal: Vec<&str> = set.samples.iter().filter(|s| !s.anomaly_label).map(|s| s.id.as_str()).collect();
    if holdout >= abnormal.len() || holdout >= normal.len() {
        return Err(Error::Config(format!(
            "calibration holdout of {holdout} leaves no evaluation data ({} normal, {} abnormal)",
            normal.len(),
            abnormal.len()
        )));
    }
    abnormal.sort_unstable();
    normal.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    abnormal.shuffle(&mut rng);
    normal.shuffle(&mut rng);
    let picked: std::collections::HashSet<String> = abnormal[..holdout]
        .iter()
        .chain(&normal[..holdout])
        .map(|s| s.to_string())
        .collect();
    let (calib, rest) = set.partition_by(|s| picked.contains(&s.id));
    Ok((calib, if included { set.clone() } else { rest }))
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    pub report: EvalReport,
}

/// Score the test partition with the checkpoint, scale, pick a threshold
/// and write `report.json`, `scores.csv`, `scores.json` and `scatter.svg`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, out_dir: Option<&Path>) -> Result<EvalOutcome> {
    let (bundle, _) = load_bundle(checkpoint)?;
    if bundle.arch.input_size != cfg.arch.input_size || bundle.arch.channels != cfg.arch.channels {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} images with {} channels, config prepares {}x{} with {}",
            bundle.arch.input_size,
            bundle.arch.input_size,
            bundle.arch.channels,
            cfg.arch.input_size,
            cfg.arch.input_size,
            cfg.arch.channels
        )));
    }
    let split = build_split(cfg)?;
    let sc = &cfg.scoring;
    let set = score_dataset(&bundle, &split, sc.variant, sc.scaling)?;
    if set.label_dependent {
        warn!("partitioned scaling uses ground-truth labels; metrics are diagnostic only");
    }
    let (calib, evaluated) = calibration_split(&set, sc.calibration_holdout, sc.calibration_included, cfg.dataset.seed)?;
    let e = &cfg.eval;
    let sweep = sweep_threshold(&calib, e.threshold_range[0], e.threshold_range[1], e.threshold_step, e.criterion)?;
    let (tau, source) = match e.threshold {
        Some(t) => (t, "fixed".to_string()),
        None if sc.calibration_holdout > 0 => (sweep.best_threshold, format!("sweep on {} calibration images", calib.len())),
        None => (sweep.best_threshold, "sweep on the evaluated set".to_string()),
    };
    let report = EvalReport::build(&evaluated, tau, source, Some(sweep))?;
    let dir = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            d.to_path_buf()
        }
        None => create_run_dir(cfg, "evaluate")?,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_scores(&dir.join("scores.csv"), &evaluated)?;
    if e.plot {
        let svg = scatter_svg(&evaluated, Some(tau))?;
        fs::write(dir.join("scatter.svg"), svg).map_err(|e| Error::io(dir.join("scatter.svg"), e))?;
    }
    info!(
        "{} / {}: tau {tau}, acc {:.4}, auc {:.4}{}",
        report.variant,
        report.scaling,
        report.metrics.accuracy,
        report.auc,
        if report.label_dependent { " (label dependent)" } else { "" }
    );
    Ok(EvalOutcome { out_dir: dir, report })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MnistSummary {
    pub table: AucTable,
    /// Digits whose AUC (v1) reaches [`HIGH_AUC`].
    pub high_auc_digits: Vec<u8>,
    pub reference_high_auc_digits: Vec<u8>,
    pub seconds: f64,
}

/// Leave-one-digit-out AUC table for the configured digits.
pub fn reproduce_mnist(cfg: &RunConfig, digits: &[u8], out_dir: Option<&Path>) -> Result<(PathBuf, MnistSummary)> {
    if cfg.dataset.kind != DatasetKind::Idx {
        return Err(Error::Config("reproduce-mnist needs dataset.kind = \"idx\"".into()));
    }
    if let Some(d) = digits.iter().find(|d| **d > 9) {
        return Err(Error::Config(format!("digit {d} out of range")));
    }
    let start = Instant::now();
    let train = load_digits(&cfg.dataset.train_images, &cfg.dataset.train_labels)?;
    let test = load_digits(&cfg.dataset.test_images, &cfg.dataset.test_labels)?;
    let sweep = DigitSweep {
        digits: digits.to_vec(),
        variants: Variant::ALL.to_vec(),
        max_train: cfg.dataset.max_train,
    };
    let table = per_digit_auc_table(&train, &test, &cfg.arch, &cfg.train, &sweep)?;
    let high_auc_digits = table
        .rows
        .iter()
        .filter(|r| r.auc_v1.is_some_and(|a| a >= HIGH_AUC))
        .map(|r| r.digit)
        .collect();
    let summary = MnistSummary {
        table,
        high_auc_digits,
        reference_high_auc_digits: REFERENCE_HIGH_AUC_DIGITS.to_vec(),
        seconds: start.elapsed().as_secs_f64(),
    };
    let dir = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            d.to_path_buf()
        }
        None => create_run_dir(cfg, "reproduce-mnist")?,
    };
    fs::write(dir.join("auc.csv"), summary.table.to_csv()).map_err(|e| Error::io(dir.join("auc.csv"), e))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((dir, summary))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageScore {
    pub path: PathBuf,
    pub raw_score: f64,
    /// Present when a reference range was given.
    pub scaled_score: Option<f64>,
    pub novel: Option<bool>,
}

/// Score single image files with a checkpoint. With a reference range and
/// threshold, also decide normal/novel.
pub fn score_images(
    checkpoint: &Path,
    images: &[PathBuf],
    variant: Variant,
    reference: Option<(f64, f64)>,
    threshold: f64,
) -> Result<Vec<ImageScore>> {
    let (bundle, _) = load_bundle(checkpoint)?;
    let a = bundle.arch;
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let raw = read_image(path, &path.display().to_string())?;
        let img = preprocess(&raw, a.input_size, a.channels)?;
        let x = crate::datasets::to_batch([&img])?;
        let s = score_batch(&bundle, &x, variant, false)?[0];
        let (scaled, novel) = match reference {
            Some((lo, hi)) if hi > lo => {
                let v = ((s - lo) / (hi - lo)).clamp(0.0, 1.0);
                (Some(v), Some(v > threshold))
            }
            Some((lo, _)) => return Err(Error::DegenerateRange(lo)),
            None => (None, None),
        };
        out.push(ImageScore {
            path: path.clone(),
            raw_score: s,
            scaled_score: scaled,
            novel,
        });
    }
    Ok(out)
}

/// Normal/novel decisions for deployment use. Refuses label-dependent sets.
pub fn novelty_decisions(set: &ScoreSet, tau: f64) -> Result<Vec<(String, bool)>> {
    set.require_deployable()?;
    if set.scaling == Scaling::None {
        return Err(Error::Contract("decisions need scaled scores".into()));
    }
    set.samples
        .iter()
        .map(|s| {
            s.scaled_score
                .map(|v| (s.id.clone(), v > tau))
                .ok_or_else(|| Error::Contract(format!("sample {} has no scaled score", s.id)))
        })
        .collect()
}
