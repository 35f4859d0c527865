//! Evaluation metrics: the relative-L2 perturbation size, top-1 accuracy
//! (optionally behind a purification chain), and PSNR. Accumulation is
//! in f64 so results are stable under re-summation.

use crate::defenses::{apply_chain_batch, DefenseChain, ModelStore};
use crate::error::{Error, Result};
use crate::models::{classify, ClassifierSpec};
use crate::nn::ParamSet;
use crate::rng::Rng;
use crate::tensor::{stack_images, Tensor};

/// ||x - y||_2 / ||x||_2 for one image pair.
pub fn l2_relative_diff_one(original: &Tensor, perturbed: &Tensor) -> Result<f64> {
    if original.shape() != perturbed.shape() {
        return Err(Error::shape(
            "l2_relative_diff",
            original.shape(),
            perturbed.shape(),
        ));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in original.data().iter().zip(perturbed.data()) {
        let d = a as f64 - b as f64;
        num += d * d;
        den += a as f64 * a as f64;
    }
    if den == 0.0 {
        return Err(Error::Domain {
            op: "l2_relative_diff",
            detail: "original image has zero L2 norm".into(),
        });
    }
    Ok((num / den).sqrt())
}

/// Mean over image pairs of the per-image relative L2 difference
/// (mean of ratios, not ratio of means).
pub fn l2_relative_diff(originals: &[Tensor], perturbed: &[Tensor]) -> Result<f64> {
    if originals.len() != perturbed.len() {
        return Err(Error::invalid(format!(
            "l2_relative_diff: {} originals vs {} perturbed",
            originals.len(),
            perturbed.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::invalid("l2_relative_diff: empty image list"));
    }
    let mut total = 0.0f64;
    for (a, b) in originals.iter().zip(perturbed) {
        total += l2_relative_diff_one(a, b)?;
    }
    Ok(total / originals.len() as f64)
}

/// Fraction of predictions matching labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Forward pass batch size for accuracy evaluation; bounds activation
/// memory on large slices.
const CLASSIFY_CHUNK: usize = 64;

/// Fraction of images whose top class matches the label, optionally
/// after purifying every image with a defense chain first.
pub fn top1_accuracy(
    spec: &ClassifierSpec,
    params: &ParamSet,
    images: &[Tensor],
    labels: &[usize],
    defense: Option<(&DefenseChain, &ModelStore)>,
    rng: &Rng,
) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "top1_accuracy: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let purified;
    let inputs: &[Tensor] = match defense {
        Some((chain, store)) => {
            purified = apply_chain_batch(chain, images, store, rng)?;
            &purified
        }
        None => images,
    };
    let mut predictions = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CLASSIFY_CHUNK) {
        let batch = stack_images(chunk)?;
        predictions.extend(classify(spec, params, &batch)?);
    }
    accuracy(&predictions, labels)
}

/// Peak signal-to-noise ratio in dB for signals on a `[0, peak]` scale.
/// Identical inputs give +inf.
pub fn psnr(reference: &Tensor, image: &Tensor, peak: f64) -> Result<f64> {
    if reference.shape() != image.shape() {
        return Err(Error::shape("psnr", reference.shape(), image.shape()));
    }
    if peak <= 0.0 {
        return Err(Error::invalid("psnr: peak must be positive"));
    }
    let mut se = 0.0f64;
    for (&a, &b) in reference.data().iter().zip(image.data()) {
        let d = a as f64 - b as f64;
        se += d * d;
    }
    let mse = se / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
