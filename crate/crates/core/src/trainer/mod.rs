//! Alternating adversarial optimization on normal-only data.
//!
//! Per batch: one update of generator and encoder together under the
//! weighted generator loss (discriminator features of the real batch act as
//! fixed targets), then one discriminator update with binary cross entropy
//! on the same batch, using the reconstructions from before the generator
//! update.

pub mod checkpoint;
pub mod optim;

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use optim::{Adam, AdamConfig};

use crate::datasets::{to_batch, DatasetSplit, LabeledSample, Partition};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{build_models, flatten, ArchConfig, Discriminator, ModelBundle};
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Use squared L2 norms in the adversarial and encoder losses.
    pub squared_latent_norms: bool,
    /// Re-initialize the discriminator when its loss drops below this value.
    pub reinit_d_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            squared_latent_norms: false,
            reinit_d_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            out.push(format!("train.beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(format!("train.beta2 must be in [0, 1), got {}", self.beta2));
        }
        out.extend(self.loss_weights.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(p))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate as f32,
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            eps: 1e-8,
        }
    }
}

/// Mean losses of one step (or one epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_adv: f64,
    pub l_con: f64,
    pub l_enc: f64,
    pub l_g: f64,
    pub l_d: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [self.l_adv, self.l_con, self.l_enc, self.l_g, self.l_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub l_adv: f64,
    pub l_con: f64,
    pub l_enc: f64,
    pub l_g: f64,
    pub l_d: f64,
}

/// A batch of images whose provenance has been checked: only normal
/// samples from the training partition can be turned into one.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    images: Tensor,
    ids: Vec<String>,
}

impl TrainBatch {
    pub fn from_samples(samples: &[&LabeledSample]) -> Result<Self> {
        if let Some(s) = samples
            .iter()
            .find(|s| s.anomaly_label || s.partition != Partition::Train)
        {
            return Err(Error::Contract(format!(
                "sample {} ({:?}, abnormal = {}) may not be used for training",
                s.id, s.partition, s.anomaly_label
            )));
        }
        Ok(TrainBatch {
            images: to_batch(samples.iter().map(|s| &s.image))?,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    /// Wrap raw images the caller vouches for as normal training data.
    pub fn assume_normal(images: Tensor) -> Self {
        let n = images.batch();
        TrainBatch {
            images,
            ids: (0..n).map(|i| format!("unlabeled:{i}")).collect(),
        }
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One Adam instance over generator + encoder, one over the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
}

fn generator_params(bundle: &ModelBundle) -> Vec<&Tensor> {
    bundle
        .gen_encoder
        .params()
        .chain(bundle.gen_decoder.params())
        .chain(bundle.encoder.params())
        .map(|(_, t)| t)
        .collect()
}

fn discriminator_params(d: &Discriminator) -> Vec<&Tensor> {
    d.features.params().chain(d.head.params()).map(|(_, t)| t).collect()
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, cfg: &TrainConfig) -> Self {
        Optimizers {
            generator: Adam::new(cfg.adam(), generator_params(bundle)),
            discriminator: Adam::new(cfg.adam(), discriminator_params(&bundle.discriminator)),
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

fn to_tensor(shape: &[usize], v: &[f64], scale: f64) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), v.iter().map(|x| (x * scale) as f32).collect())
}

fn non_finite(what: &str, losses: &StepLosses, ids: &[String]) -> Error {
    Error::Numeric(format!(
        "{what}: non-finite loss (l_adv={}, l_con={}, l_enc={}, l_g={}, l_d={}) on batch starting {}",
        losses.l_adv,
        losses.l_con,
        losses.l_enc,
        losses.l_g,
        losses.l_d,
        ids.first().map(String::as_str).unwrap_or("<empty>")
    ))
}

/// Parameter gradients of one step: generator-side networks under the
/// weighted generator loss, discriminator under its BCE loss.
#[derive(Clone, Debug)]
pub struct StepGrads {
    pub gen_encoder: Vec<Tensor>,
    pub gen_decoder: Vec<Tensor>,
    pub encoder: Vec<Tensor>,
    pub disc_features: Vec<Tensor>,
    pub disc_head: Vec<Tensor>,
}

/// Forward both objectives in training mode (batch-norm running statistics
/// are updated once) and backpropagate them. Parameters are not touched.
pub fn step_gradients(bundle: &mut ModelBundle, batch: &TrainBatch, cfg: &TrainConfig) -> Result<(StepLosses, StepGrads)> {
    let x = batch.images();
    bundle.check_input(x)?;
    let n = x.batch();
    let d = bundle.arch.latent_dim;
    let w = cfg.loss_weights;
    let sq = cfg.squared_latent_norms;

    // forward
    let (z4, tape_ge) = bundle.gen_encoder.forward(x, Mode::Train)?;
    let (x_hat, tape_gd) = bundle.gen_decoder.forward(&z4, Mode::Train)?;
    let (zh4, tape_e) = bundle.encoder.forward(&x_hat, Mode::Train)?;
    let disc = &mut bundle.discriminator;
    let (f_real, tape_fr) = disc.features.forward(x, Mode::Train)?;
    let (p_real, tape_hr) = disc.head.forward(&f_real, Mode::Train)?;
    let (f_fake, tape_ff) = disc.features.forward(&x_hat, Mode::Train)?;
    let (p_fake, tape_hf) = disc.head.forward(&f_fake, Mode::Train)?;

    // generator objective
    let adv = losses::adversarial_loss(&to_f64(f_real.data()), &to_f64(f_fake.data()), n, sq)?;
    let con = losses::contextual_loss(&to_f64(x.data()), &to_f64(x_hat.data()))?;
    let enc = losses::encoder_loss(&to_f64(z4.data()), &to_f64(zh4.data()), n, sq)?;
    let l_g = losses::generator_total_loss(adv.value, con.value, enc.value, &w)
        .map_err(|e| Error::Numeric(format!("{e} (batch starting {})", batch.ids()[0])))?;
    let dl = losses::discriminator_loss(&to_f64(p_real.data()), &to_f64(p_fake.data()))?;
    let step = StepLosses {
        l_adv: adv.value,
        l_con: con.value,
        l_enc: enc.value,
        l_g,
        l_d: dl.value,
    };
    if !step.all_finite() {
        return Err(non_finite("train step", &step, batch.ids()));
    }

    // generator + encoder backward
    let mut g_ge = bundle.gen_encoder.zero_grads();
    let mut g_gd = bundle.gen_decoder.zero_grads();
    let mut g_e = bundle.encoder.zero_grads();
    let mut dx_hat = to_tensor(x_hat.shape(), &con.grad_b, w.w_con)?;
    if w.w_adv != 0.0 {
        let df = to_tensor(f_fake.shape(), &adv.grad_b, w.w_adv)?;
        let mut scratch = bundle.discriminator.features.zero_grads();
        let dx_adv = bundle.discriminator.features.backward(&tape_ff, &df, &mut scratch)?;
        dx_hat.add_assign(&dx_adv);
    }
    let dzh = to_tensor(zh4.shape(), &enc.grad_b, w.w_enc)?;
    dx_hat.add_assign(&bundle.encoder.backward(&tape_e, &dzh, &mut g_e)?);
    let mut dz = bundle.gen_decoder.backward(&tape_gd, &dx_hat, &mut g_gd)?;
    dz.add_assign(&to_tensor(&[n, d, 1, 1], &enc.grad_a, w.w_enc)?);
    bundle.gen_encoder.backward(&tape_ge, &dz, &mut g_ge)?;

    // discriminator backward on the detached reconstructions
    let disc = &bundle.discriminator;
    let mut g_df = disc.features.zero_grads();
    let mut g_dh = disc.head.zero_grads();
    let dpr = to_tensor(p_real.shape(), &dl.grad_a, 1.0)?;
    let dfr = disc.head.backward(&tape_hr, &dpr, &mut g_dh)?;
    disc.features.backward(&tape_fr, &dfr, &mut g_df)?;
    let dpf = to_tensor(p_fake.shape(), &dl.grad_b, 1.0)?;
    let dff = disc.head.backward(&tape_hf, &dpf, &mut g_dh)?;
    disc.features.backward(&tape_ff, &dff, &mut g_df)?;
    Ok((
        step,
        StepGrads {
            gen_encoder: g_ge,
            gen_decoder: g_gd,
            encoder: g_e,
            disc_features: g_df,
            disc_head: g_dh,
        },
    ))
}

/// One generator(+encoder) update followed by one discriminator update.
pub fn train_step(
    bundle: &mut ModelBundle,
    optim: &mut Optimizers,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let (step, g) = step_gradients(bundle, batch, cfg)?;
    let grads: Vec<&Tensor> = g.gen_encoder.iter().chain(&g.gen_decoder).chain(&g.encoder).collect();
    let params: Vec<&mut Tensor> = bundle
        .gen_encoder
        .params_mut()
        .chain(bundle.gen_decoder.params_mut())
        .chain(bundle.encoder.params_mut())
        .collect();
    optim.generator.apply(params, &grads)?;
    let disc = &mut bundle.discriminator;
    let grads: Vec<&Tensor> = g.disc_features.iter().chain(&g.disc_head).collect();
    let params: Vec<&mut Tensor> = disc.features.params_mut().chain(disc.head.params_mut()).collect();
    optim.discriminator.apply(params, &grads)?;

    let touched = bundle
        .networks()
        .iter()
        .all(|(_, net)| net.params().all(|(_, t)| t.all_finite()));
    if !touched {
        return Err(Error::Numeric(format!(
            "parameters became non-finite on batch starting {}",
            batch.ids()[0]
        )));
    }
    Ok(step)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Seeded mini-batch order for `epoch` (1-based). Trailing batches of a
/// single image are dropped: batch statistics need at least two samples.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut epoch_rng(seed, epoch));
    idx.chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2 || len == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Epochs (1-based) after which a checkpoint is written.
pub fn checkpoint_epochs(epochs: usize, every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = if every == 0 {
        Vec::new()
    } else {
        (1..=epochs).filter(|e| e % every == 0).collect()
    };
    if out.last() != Some(&epochs) {
        out.push(epochs);
    }
    out
}

/// Training state that can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub optim: Optimizers,
    pub cfg: TrainConfig,
    pub records: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(arch: &ArchConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = build_models(arch, cfg.seed)?;
        let optim = Optimizers::new(&bundle, cfg);
        Ok(Trainer {
            bundle,
            optim,
            cfg: cfg.clone(),
            records: Vec::new(),
        })
    }

    /// Continue from a checkpoint; `cfg.epochs` may extend the original run.
    pub fn resume(ckpt: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            bundle: ckpt.bundle,
            optim: ckpt.optim,
            cfg: cfg.clone(),
            records: ckpt.meta.records,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.records.len()
    }

    fn maybe_reinit_discriminator(&mut self, l_d: f64, epoch: usize, step: usize) {
        if let Some(t) = self.cfg.reinit_d_threshold {
            if l_d < t {
                warn!("epoch {epoch} step {step}: discriminator loss {l_d:.3e} < {t}, re-initializing D");
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.cfg.seed ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9E37_79B9),
                );
                self.bundle.discriminator = Discriminator::build(&self.bundle.arch, &mut rng);
                self.optim.discriminator.reset();
            }
        }
    }

    /// Run the next epoch over `train` and append its record.
    pub fn run_epoch(&mut self, train: &[LabeledSample]) -> Result<EpochRecord> {
        let epoch = self.epochs_done() + 1;
        let batches = epoch_batches(train.len(), self.cfg.batch_size, self.cfg.seed, epoch);
        let mut sum = StepLosses::default();
        for (step, idx) in batches.iter().enumerate() {
            let samples: Vec<&LabeledSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = TrainBatch::from_samples(&samples)?;
            let l = train_step(&mut self.bundle, &mut self.optim, &batch, &self.cfg)?;
            sum.l_adv += l.l_adv;
            sum.l_con += l.l_con;
            sum.l_enc += l.l_enc;
            sum.l_g += l.l_g;
            sum.l_d += l.l_d;
            self.maybe_reinit_discriminator(l.l_d, epoch, step);
        }
        let k = batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            l_adv: sum.l_adv / k,
            l_con: sum.l_con / k,
            l_enc: sum.l_enc / k,
            l_g: sum.l_g / k,
            l_d: sum.l_d / k,
        };
        let as_step = StepLosses {
            l_adv: rec.l_adv,
            l_con: rec.l_con,
            l_enc: rec.l_enc,
            l_g: rec.l_g,
            l_d: rec.l_d,
        };
        if !as_step.all_finite() {
            return Err(non_finite(&format!("epoch {epoch}"), &as_step, &[]));
        }
        self.records.push(rec);
        Ok(rec)
    }

    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.bundle, &self.optim, &self.cfg, &self.records)
    }

    /// Train until `cfg.epochs` epochs are done, checkpointing into
    /// `<ckpt_root>/epoch-NNNN` at the configured cadence. On a numeric
    /// failure the last completed epoch is checkpointed before returning the
    /// error.
    pub fn fit(
        &mut self,
        split: &DatasetSplit,
        ckpt_root: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        split.validate()?;
        if split.train_normal.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cadence = checkpoint_epochs(self.cfg.epochs, self.cfg.checkpoint_every);
        while self.epochs_done() < self.cfg.epochs {
            let last_good = ckpt_root.map(|_| (self.bundle.clone(), self.optim.clone(), self.records.clone()));
            match self.run_epoch(&split.train_normal) {
                Ok(rec) => {
                    info!(
                        "epoch {:>4}  l_adv {:.4}  l_con {:.4}  l_enc {:.4}  l_g {:.4}  l_d {:.4}",
                        rec.epoch, rec.l_adv, rec.l_con, rec.l_enc, rec.l_g, rec.l_d
                    );
                    on_epoch(&rec);
                    if let Some(root) = ckpt_root {
                        if cadence.contains(&rec.epoch) {
                            self.checkpoint(&checkpoint_dir(root, rec.epoch))?;
                        }
                    }
                }
                Err(e @ Error::Numeric(_)) => {
                    if let (Some(root), Some((bundle, optim, records))) = (ckpt_root, last_good) {
                        let dir = checkpoint_dir(root, records.len());
                        if !records.is_empty() && !dir.exists() {
                            save_checkpoint(&dir, &bundle, &optim, &self.cfg, &records)?;
                        }
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

pub fn checkpoint_dir(root: &Path, epoch: usize) -> std::path::PathBuf {
    root.join(format!("epoch-{epoch:04}"))
}

/// Most recent `epoch-NNNN` checkpoint under `root`.
pub fn latest_checkpoint(root: &Path) -> Option<std::path::PathBuf> {
    let mut best: Option<(usize, std::path::PathBuf)> = None;
    for entry in std::fs::read_dir(root).ok()?.flatten() {
        let name = entry.file_name();
        let Some(e) = name.to_str().and_then(|n| n.strip_prefix("epoch-")).and_then(|n| n.parse().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| e > *b) {
            best = Some((e, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}

/// Train from scratch without checkpointing.
pub fn train(split: &DatasetSplit, arch: &ArchConfig, cfg: &TrainConfig) -> Result<(ModelBundle, Vec<EpochRecord>)> {
    let mut t = Trainer::new(arch, cfg)?;
    t.fit(split, None, |_| {})?;
    Ok((t.bundle, t.records))
}

/// Encoder-only update used to check parameter independence: backpropagate
/// the encoder loss into `E` alone and step an optimizer over `E`.
pub fn encoder_only_step(bundle: &mut ModelBundle, opt: &mut Adam, x: &Tensor, squared: bool) -> Result<f64> {
    let (x_hat, z) = bundle.generator_forward(x)?;
    let n = x.batch();
    let (zh4, tape) = bundle.encoder.forward(&x_hat, Mode::Train)?;
    let zh = flatten(zh4.clone())?;
    let enc = losses::encoder_loss(&to_f64(z.data()), &to_f64(zh.data()), n, squared)?;
    let mut g = bundle.encoder.zero_grads();
    bundle
        .encoder
        .backward(&tape, &to_tensor(zh4.shape(), &enc.grad_b, 1.0)?, &mut g)?;
    let grads: Vec<&Tensor> = g.iter().collect();
    opt.apply(bundle.encoder.params_mut().collect(), &grads)?;
    Ok(enc.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence() {
        assert_eq!(checkpoint_epochs(5, 2), vec![2, 4, 5]);
        assert_eq!(checkpoint_epochs(4, 2), vec![2, 4]);
        assert_eq!(checkpoint_epochs(3, 0), vec![3]);
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = epoch_batches(10, 4, 3, 1);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // 9 = 4 + 4 + 1; the single leftover is dropped
        assert_eq!(epoch_batches(9, 4, 3, 1).concat().len(), 8);
        assert_ne!(epoch_batches(10, 4, 3, 1), epoch_batches(10, 4, 3, 2));
        assert_eq!(epoch_batches(10, 4, 3, 2), epoch_batches(10, 4, 3, 2));
    }

    #[test]
    fn config_validation_collects_everything() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 0,
            learning_rate: -1.0,
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 4);
    }
}
