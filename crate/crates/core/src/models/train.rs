//! Minibatch training loops for classifiers and VAEs.
//!
//! Both loops are single-writer and fully deterministic for a given seed:
//! shuffling, dropout, and sampling noise all come from one sequential Rng.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::vae::{vae_forward, vae_loss_tape};
use crate::models::{check_batch_shape, ClassifierSpec, VaeSpec};
use crate::nn::optim::{Adam, Sgd};
use crate::nn::{commit_bn_updates, losses, run_layers, Mode, ParamSet, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimKind,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Plain SGD, the classifier recipe.
    pub fn classifier(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimKind::Sgd,
            lr: 0.1,
            epochs: 5,
            batch_size: 32,
            seed,
        }
    }

    /// Adam, the VAE recipe.
    pub fn vae(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimKind::Adam,
            lr: 1e-3,
            epochs: 10,
            batch_size: 64,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain {
                op: "train".into(),
                detail: "epochs must be >= 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Domain {
                op: "train".into(),
                detail: "batch_size must be >= 1".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain {
                op: "train".into(),
                detail: format!("learning rate must be positive and finite, got {}", self.lr),
            });
        }
        Ok(())
    }
}

/// Stop when the reconstruction term stops moving: relative change across
/// the trailing `window` epochs falls below `tau`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarlyStop {
    pub tau: f64,
    pub window: usize,
}

impl EarlyStop {
    pub fn triggered(&self, recon_history: &[f64]) -> bool {
        if self.window == 0 || recon_history.len() <= self.window {
            return false;
        }
        let now = recon_history[recon_history.len() - 1];
        let then = recon_history[recon_history.len() - 1 - self.window];
        let rel = (then - now).abs() / then.abs().max(1e-12);
        rel < self.tau
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean total loss per epoch (cross-entropy for classifiers,
    /// recon + beta*KL for VAEs), sample-weighted.
    pub epoch_loss: Vec<f64>,
    /// Mean reconstruction term per epoch (VAE only, empty for classifiers).
    pub epoch_recon: Vec<f64>,
    /// Mean KL term per epoch (VAE only, empty for classifiers).
    pub epoch_kl: Vec<f64>,
    /// Loss of the untrained model, measured before the first update.
    pub initial_loss: f64,
    /// Classifier: training-subset accuracy after the last epoch.
    /// VAE: reconstruction term of the last epoch.
    pub final_metric: f64,
    pub wall_time_s: f64,
    pub stopped_early: bool,
}

enum Optim {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optim {
    fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimKind::Sgd => Optim::Sgd(Sgd::new(cfg.lr)),
            OptimKind::Adam => Optim::Adam(Adam::new(cfg.lr)),
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        match self {
            Optim::Sgd(s) => s.step(params, grads),
            Optim::Adam(a) => a.step(params, grads),
        }
    }
}

/// Copy the rows named by `indices` out of an `[n, ...]` batch tensor.
pub fn gather_rows(batch: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::Domain {
            op: "gather_rows".into(),
            detail: "empty index list".into(),
        });
    }
    let n = batch.shape()[0];
    let stride: usize = batch.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        if i >= n {
            return Err(Error::Domain {
                op: "gather_rows".into(),
                detail: format!("index {i} out of range for {n} rows"),
            });
        }
        data.extend_from_slice(&batch.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = batch.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

fn collect_grads(grads: &Gradients, param_vars: &[(String, Var)]) -> Vec<(String, Tensor)> {
    param_vars
        .iter()
        .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Domain {
            op: "train".into(),
            detail: "empty dataset".into(),
        });
    }
    if labels.len() != n {
        return Err(Error::Domain {
            op: "train".into(),
            detail: format!("{n} images but {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain {
            op: "train".into(),
            detail: format!("label {bad} out of range for {classes} classes"),
        });
    }
    Ok(())
}

/// Mean cross-entropy of the current params over (a capped slice of) the set.
fn eval_classifier_loss(
    spec: &ClassifierSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &[usize],
    cap: usize,
) -> Result<f64> {
    let n = labels.len().min(cap);
    let mut total = 0.0f64;
    let mut seen = 0usize;
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let xb = gather_rows(images, &idx)?;
        let yb = &labels[start..(start + 256).min(n)];
        let mut tape = Tape::new();
        let x = tape.leaf(xb, false);
        let out = run_layers(&mut tape, &spec.layers, params, x, Mode::Eval, None)?;
        let loss = losses::cross_entropy(&mut tape, out.output, yb)?;
        total += tape.value(loss).data()[0] as f64 * idx.len() as f64;
        seen += idx.len();
    }
    Ok(total / seen as f64)
}

fn eval_classifier_accuracy(
    spec: &ClassifierSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &[usize],
    cap: usize,
) -> Result<f64> {
    let n = labels.len().min(cap);
    let mut hits = 0usize;
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let xb = gather_rows(images, &idx)?;
        let preds = crate::models::classify(spec, params, &xb)?;
        hits += preds
            .iter()
            .zip(&labels[start..(start + 256).min(n)])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(hits as f64 / n as f64)
}

const EVAL_CAP: usize = 1000;

/// Shuffled-minibatch SGD/Adam over a labeled image set.
pub fn train_classifier(
    spec: &ClassifierSpec,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    check_batch_shape(&spec.input_shape, images)?;
    check_labels(labels, images.shape()[0], spec.classes)?;
    let started = Instant::now();

    let mut rng = Rng::new(cfg.seed);
    let mut params = spec.init(&mut rng)?;
    let mut optim = Optim::new(cfg);
    let initial_loss = eval_classifier_loss(spec, &params, images, labels, EVAL_CAP)?;

    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng.derive(&[0x5u64, epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(images, chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut batch_rng = rng.derive(&[0xdu64, epoch as u64, b as u64]);

            let mut tape = Tape::new();
            let x = tape.leaf(xb, false);
            let out = run_layers(
                &mut tape,
                &spec.layers,
                &params,
                x,
                Mode::Train,
                Some(&mut batch_rng),
            )?;
            let loss = losses::cross_entropy(&mut tape, out.output, &yb)?;
            loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;

            let grads = tape.backward(loss)?;
            let named = collect_grads(&grads, &out.param_vars);
            optim.step(&mut params, &named)?;
            commit_bn_updates(&mut params, &out.bn_updates, BN_MOMENTUM)?;
        }
        epoch_loss.push(loss_sum / n as f64);
        log::info!(
            "classifier {} epoch {}: mean loss {:.4}",
            spec.name,
            epoch + 1,
            epoch_loss[epoch]
        );
    }

    let final_metric = eval_classifier_accuracy(spec, &params, images, labels, EVAL_CAP)?;
    Ok((
        params,
        TrainReport {
            epoch_loss,
            epoch_recon: Vec::new(),
            epoch_kl: Vec::new(),
            initial_loss,
            final_metric,
            wall_time_s: started.elapsed().as_secs_f64(),
            stopped_early: false,
        },
    ))
}

/// What a VAE trains on: whole images matching the spec input, or random
/// crops taken from larger source images (for the patch models).
pub enum VaeData<'a> {
    Images(&'a Tensor),
    Patches {
        source: &'a Tensor,
        per_epoch: usize,
    },
}

fn sample_patch_batch(
    source: &Tensor,
    patch_shape: &[usize],
    count: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (n, h, w, c) = (
        source.shape()[0],
        source.shape()[1],
        source.shape()[2],
        source.shape()[3],
    );
    let (ph, pw, pc) = (patch_shape[0], patch_shape[1], patch_shape[2]);
    if pc != c || ph > h || pw > w {
        return Err(Error::Domain {
            op: "train_vae".into(),
            detail: format!(
                "patch {ph}x{pw}x{pc} does not fit source images {h}x{w}x{c}"
            ),
        });
    }
    let mut data = Vec::with_capacity(count * ph * pw * c);
    for _ in 0..count {
        let img = rng.below(n);
        let top = rng.below(h - ph + 1);
        let left = rng.below(w - pw + 1);
        for i in 0..ph {
            let row_start = Tensor::nhwc_index(source.shape(), img, top + i, left, 0);
            data.extend_from_slice(&source.data()[row_start..row_start + pw * c]);
        }
    }
    Tensor::new(vec![count, ph, pw, c], data)
}

/// Minibatch training of a VAE on images or random patches, with an
/// optional plateau-based early stop on the reconstruction term.
pub fn train_vae(
    spec: &VaeSpec,
    data: VaeData,
    cfg: &TrainConfig,
    early_stop: Option<EarlyStop>,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    if let VaeData::Images(images) = &data {
        check_batch_shape(&spec.input_shape, images)?;
    }
    let started = Instant::now();

    let mut rng = Rng::new(cfg.seed);
    let mut params = spec.init(&mut rng)?;
    let mut optim = Optim::new(cfg);

    // One epoch's batches, as index lists into `Images` or freshly sampled
    // crops for `Patches`.
    let epoch_batches = |epoch: usize, rng: &Rng| -> Result<Vec<Tensor>> {
        match &data {
            VaeData::Images(images) => {
                let n = images.shape()[0];
                let mut order: Vec<usize> = (0..n).collect();
                let mut r = rng.derive(&[0x5u64, epoch as u64]);
                r.shuffle(&mut order);
                order
                    .chunks(cfg.batch_size)
                    .map(|chunk| gather_rows(images, chunk))
                    .collect()
            }
            VaeData::Patches { source, per_epoch } => {
                if *per_epoch == 0 {
                    return Err(Error::Domain {
                        op: "train_vae".into(),
                        detail: "per_epoch patch count must be >= 1".into(),
                    });
                }
                let mut r = rng.derive(&[0x9u64, epoch as u64]);
                let mut out = Vec::new();
                let mut left = *per_epoch;
                while left > 0 {
                    let take = left.min(cfg.batch_size);
                    out.push(sample_patch_batch(source, &spec.input_shape, take, &mut r)?);
                    left -= take;
                }
                Ok(out)
            }
        }
    };

    // Untrained loss over the first epoch's worth of data, eval pass.
    let initial_loss = {
        let batches = epoch_batches(0, &rng)?;
        let mut total = 0.0f64;
        let mut seen = 0usize;
        let mut r = rng.derive(&[0x1u64]);
        for xb in batches.iter().take((EVAL_CAP / cfg.batch_size).max(1)) {
            let b = xb.shape()[0];
            let (loss, _, _) = crate::models::vae::vae_loss(spec, &params, xb, &mut r)?;
            total += loss * b as f64;
            seen += b;
        }
        total / seen as f64
    };

    let mut epoch_loss = Vec::new();
    let mut epoch_recon = Vec::new();
    let mut epoch_kl = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(epoch, &rng)?;
        let (mut ls, mut rs, mut ks, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (b, xb) in batches.into_iter().enumerate() {
            let bsz = xb.shape()[0];
            let mut batch_rng = rng.derive(&[0xdu64, epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let x = tape.leaf(xb, false);
            let fwd = vae_forward(&mut tape, spec, &params, x, Mode::Train, &mut batch_rng)?;
            let parts = vae_loss_tape(&mut tape, spec, &fwd, x)?;
            ls += tape.value(parts.loss).data()[0] as f64 * bsz as f64;
            rs += tape.value(parts.recon).data()[0] as f64 * bsz as f64;
            ks += tape.value(parts.kl).data()[0] as f64 * bsz as f64;
            n += bsz;

            let grads = tape.backward(parts.loss)?;
            let named = collect_grads(&grads, &fwd.param_vars);
            optim.step(&mut params, &named)?;
            commit_bn_updates(&mut params, &fwd.bn_updates, BN_MOMENTUM)?;
        }
        epoch_loss.push(ls / n as f64);
        epoch_recon.push(rs / n as f64);
        epoch_kl.push(ks / n as f64);
        log::info!(
            "vae {} epoch {}: loss {:.4} (recon {:.4}, kl {:.4})",
            spec.name,
            epoch + 1,
            epoch_loss[epoch],
            epoch_recon[epoch],
            epoch_kl[epoch]
        );
        if let Some(stop) = &early_stop {
            if stop.triggered(&epoch_recon) {
                stopped_early = true;
                break;
            }
        }
    }

    let final_metric = *epoch_recon.last().expect("epochs >= 1");
    Ok((
        params,
        TrainReport {
            epoch_loss,
            epoch_recon,
            epoch_kl,
            initial_loss,
            final_metric,
            wall_time_s: started.elapsed().as_secs_f64(),
            stopped_early,
        },
    ))
}
