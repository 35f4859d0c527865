//! Gradient-sign attacks against a fixed classifier: the single-step FGSM
//! and its iterated variant. Attacks see only the classifier (never any
//! defense) and take gradients in eval mode, one image at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::l2_relative_diff_one;
use crate::models::{ClassifierSpec, DatasetTag};
use crate::nn::{losses, run_layers, Mode};
use crate::nn::ParamSet;
use crate::tensor::{stack_images, Tensor};
use crate::tensor::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Ifgsm => "ifgsm",
        }
    }
}

/// Published per-pixel budget range for each dataset family.
pub fn epsilon_range(tag: DatasetTag) -> (f32, f32) {
    match tag {
        DatasetTag::Mnist => (0.0, 0.12),
        DatasetTag::Cifar10 => (0.0, 0.1),
        DatasetTag::SyntheticHires => (0.005, 0.09),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Per-pixel budget in normalized [0,1] units.
    pub epsilon: f32,
    /// Step count; only meaningful for the iterated attack.
    pub iterations: usize,
    /// Pixel clip bounds applied after every step.
    pub clip: (f32, f32),
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            iterations: 1,
            clip: (0.0, 1.0),
        }
    }

    /// The iterated attack; the published setup uses 10 iterations.
    pub fn ifgsm(epsilon: f32, iterations: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Ifgsm,
            epsilon,
            iterations,
            clip: (0.0, 1.0),
        }
    }

    /// Reject malformed budgets; out-of-range epsilon for the dataset is
    /// only worth a warning (the grid is an experiment knob, not a law).
    pub fn validate(&self, tag: Option<DatasetTag>) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::invalid(format!(
                "attack epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.kind == AttackKind::Ifgsm && self.iterations == 0 {
            return Err(Error::invalid("ifgsm needs at least one iteration"));
        }
        if self.clip.0 >= self.clip.1 {
            return Err(Error::invalid(format!(
                "attack clip bounds must satisfy lo < hi, got ({}, {})",
                self.clip.0, self.clip.1
            )));
        }
        if let Some(tag) = tag {
            let (lo, hi) = epsilon_range(tag);
            if self.epsilon < lo || self.epsilon > hi {
                log::warn!(
                    "epsilon {} outside the usual [{lo}, {hi}] range for {}",
                    self.epsilon,
                    tag.as_str()
                );
            }
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        match self.kind {
            AttackKind::Fgsm => 1,
            AttackKind::Ifgsm => self.iterations,
        }
    }
}

/// One image the attack could not process, and why.
#[derive(Debug)]
pub struct SkippedItem {
    pub index: usize,
    pub reason: String,
}

/// Clean and attacked copies of an evaluation slice. Skipped items keep
/// their original pixels so the batch stays rectangular.
#[derive(Debug)]
pub struct AdversarialBatch {
    pub originals: Vec<Tensor>,
    pub perturbed: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// ||x - x_adv||_2 / ||x||_2 per image.
    pub l2_rel: Vec<f64>,
    pub skipped: Vec<SkippedItem>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_l2_rel(&self) -> f64 {
        if self.l2_rel.is_empty() {
            return 0.0;
        }
        self.l2_rel.iter().sum::<f64>() / self.l2_rel.len() as f64
    }

    /// Stack the attacked images into one `[n, h, w, c]` tensor.
    pub fn perturbed_batch(&self) -> Result<Tensor> {
        stack_images(&self.perturbed)
    }

    /// Content hash of the perturbed images, for asserting that every
    /// defense column of a sweep row saw the same batch.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a
        for img in &self.perturbed {
            for v in img.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// d(cross-entropy)/d(input pixels) for a single image, eval mode.
fn input_gradient(
    spec: &ClassifierSpec,
    params: &ParamSet,
    image: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.as_batch_of_one()?, true);
    let out = run_layers(&mut tape, &spec.layers, params, x, Mode::Eval, None)?;
    let loss = losses::cross_entropy(&mut tape, out.output, &[label])?;
    let grads = tape.backward(loss)?;
    let g = grads
        .get(x)
        .expect("input leaf requires grad")
        .clone()
        .reshape(image.shape().to_vec())?;
    if !g.is_finite() {
        return Err(Error::NonFinite("attack input gradient".into()));
    }
    Ok(g)
}

fn check_attack_input(spec: &ClassifierSpec, image: &Tensor, label: usize) -> Result<()> {
    if image.shape() != spec.input_shape.as_slice() {
        return Err(Error::shape(
            "attack image",
            &spec.input_shape,
            image.shape(),
        ));
    }
    if label >= spec.classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            spec.classes
        )));
    }
    Ok(())
}

fn ascend(
    spec: &ClassifierSpec,
    params: &ParamSet,
    image: &Tensor,
    label: usize,
    epsilon: f32,
    steps: usize,
    clip: (f32, f32),
) -> Result<Tensor> {
    check_attack_input(spec, image, label)?;
    let step = epsilon / steps as f32;
    let mut x = image.clone();
    for _ in 0..steps {
        let g = input_gradient(spec, params, &x, label)?;
        x = x
            .zip(&g, |xi, gi| {
                let s = if gi > 0.0 {
                    1.0
                } else if gi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (xi + step * s).clamp(clip.0, clip.1)
            })
            .expect("same shape");
    }
    Ok(x)
}

/// x_adv = clip(x + eps * sign(grad_x loss)), one gradient evaluation.
pub fn fgsm(
    spec: &ClassifierSpec,
    params: &ParamSet,
    image: &Tensor,
    label: usize,
    epsilon: f32,
) -> Result<Tensor> {
    ascend(spec, params, image, label, epsilon, 1, (0.0, 1.0))
}

/// Iterated variant: `iterations` steps of size eps/iterations, re-clipped
/// to [0,1] after every step.
pub fn ifgsm(
    spec: &ClassifierSpec,
    params: &ParamSet,
    image: &Tensor,
    label: usize,
    epsilon: f32,
    iterations: usize,
) -> Result<Tensor> {
    if iterations == 0 {
        return Err(Error::invalid("ifgsm needs at least one iteration"));
    }
    ascend(spec, params, image, label, epsilon, iterations, (0.0, 1.0))
}

/// Attack every image in a slice independently. Output order matches input
/// order for any thread count; per-item failures are collected, not fatal.
pub fn attack_batch(
    cfg: &AttackConfig,
    spec: &ClassifierSpec,
    params: &ParamSet,
    images: &[Tensor],
    labels: &[usize],
) -> Result<AdversarialBatch> {
    cfg.validate(Some(spec.dataset))?;
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "attack_batch: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }

    let results: Vec<std::result::Result<Tensor, String>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(image, &label)| {
            ascend(
                spec,
                params,
                image,
                label,
                cfg.epsilon,
                cfg.steps(),
                cfg.clip,
            )
            .map_err(|e| e.to_string())
        })
        .collect();

    let mut perturbed = Vec::with_capacity(images.len());
    let mut l2_rel = Vec::with_capacity(images.len());
    let mut skipped = Vec::new();
    for (index, (result, original)) in results.into_iter().zip(images).enumerate() {
        let adv = match result {
            Ok(adv) => adv,
            Err(reason) => {
                skipped.push(SkippedItem { index, reason });
                original.clone()
            }
        };
        l2_rel.push(l2_relative_diff_one(original, &adv)?);
        perturbed.push(adv);
    }
    Ok(AdversarialBatch {
        originals: images.to_vec(),
        perturbed,
        labels: labels.to_vec(),
        l2_rel,
        skipped,
    })
}
