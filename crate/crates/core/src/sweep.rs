//! Accuracy-vs-perturbation sweeps. One attack per epsilon; every
//! defense column is then scored on that same adversarial batch. Rows
//! run sequentially, images within a cell in parallel, and all
//! randomness derives from the sweep seed so results are identical at
//! any worker count.

use rayon::prelude::*;

use crate::attacks::{attack_batch, AttackConfig, AttackKind};
use crate::defenses::{apply_chain, DefenseChain, ModelStore};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::{classify, ClassifierSpec};
use crate::nn::ParamSet;
use crate::rng::Rng;
use crate::tensor::{stack_images, Tensor};

/// The attack half of a sweep: one kind, one iteration budget, a list
/// of perturbation sizes.
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub kind: AttackKind,
    pub iterations: usize,
    pub epsilons: Vec<f32>,
}

impl SweepGrid {
    fn config(&self, epsilon: f32) -> AttackConfig {
        match self.kind {
            AttackKind::Fgsm => AttackConfig::fgsm(epsilon),
            AttackKind::Ifgsm => AttackConfig::ifgsm(epsilon, self.iterations),
        }
    }
}

/// One defense column within one row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub accuracy: f64,
    /// Images that were successfully purified and classified.
    pub samples: usize,
    /// Aggregated description of per-image failures, if any.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f32,
    pub l2_diff: f64,
    pub cells: Vec<SweepCell>,
}

/// Table of accuracies: one row per epsilon, one column per defense
/// (the first column is always the undefended classifier).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Purify (optionally) and classify every image, scoring the column.
/// Per-image failures shrink the sample count instead of aborting.
fn eval_cell(
    spec: &ClassifierSpec,
    params: &ParamSet,
    chain: Option<&DefenseChain>,
    store: &ModelStore,
    images: &[Tensor],
    labels: &[usize],
    cell_rng: &Rng,
) -> SweepCell {
    let purified: Vec<(usize, std::result::Result<Tensor, String>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let out = match chain {
                Some(chain) => {
                    let mut rng = cell_rng.derive(&[0xcba1u64, i as u64]);
                    apply_chain(chain, image, store, &mut rng).map_err(|e| e.to_string())
                }
                None => Ok(image.clone()),
            };
            (i, out)
        })
        .collect();

    let mut kept_images = Vec::with_capacity(images.len());
    let mut kept_labels = Vec::with_capacity(images.len());
    let mut failures: Vec<String> = Vec::new();
    for (i, out) in purified {
        match out {
            Ok(x) => {
                kept_images.push(x);
                kept_labels.push(labels[i]);
            }
            Err(msg) => failures.push(format!("image {i}: {msg}")),
        }
    }

    let scored = (|| -> Result<(f64, usize)> {
        if kept_images.is_empty() {
            return Err(Error::invalid("no image survived purification"));
        }
        let mut predictions = Vec::with_capacity(kept_images.len());
        for chunk in kept_images.chunks(64) {
            predictions.extend(classify(spec, params, &stack_images(chunk)?)?);
        }
        Ok((accuracy(&predictions, &kept_labels)?, kept_labels.len()))
    })();

    match scored {
        Ok((acc, samples)) => SweepCell {
            accuracy: acc,
            samples,
            error: if failures.is_empty() {
                None
            } else {
                Some(format!(
                    "{} of {} images failed; first: {}",
                    failures.len(),
                    images.len(),
                    failures[0]
                ))
            },
        },
        Err(e) => SweepCell {
            accuracy: f64::NAN,
            samples: 0,
            error: Some(match failures.first() {
                Some(first) => format!("{e}; first failure: {first}"),
                None => e.to_string(),
            }),
        },
    }
}

/// Attack once per epsilon and score every defense on the shared
/// adversarial batch. Deterministic in (seed, inputs) at any
/// parallelism level.
pub fn run_sweep(
    spec: &ClassifierSpec,
    params: &ParamSet,
    grid: &SweepGrid,
    chains: &[DefenseChain],
    store: &ModelStore,
    images: &[Tensor],
    labels: &[usize],
    seed: u64,
) -> Result<SweepResult> {
    if grid.epsilons.is_empty() {
        return Err(Error::invalid("sweep: empty epsilon grid"));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "sweep: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut columns = vec!["none".to_string()];
    for chain in chains {
        if columns.iter().any(|c| c == &chain.name) {
            return Err(Error::invalid(format!(
                "sweep: duplicate defense column '{}'",
                chain.name
            )));
        }
        columns.push(chain.name.clone());
    }

    let root = Rng::new(seed);
    let mut rows = Vec::with_capacity(grid.epsilons.len());
    for (row_idx, &epsilon) in grid.epsilons.iter().enumerate() {
        let cfg = grid.config(epsilon);
        cfg.validate(Some(spec.dataset))?;
        let batch = attack_batch(&cfg, spec, params, images, labels)?;
        let l2_diff = batch.mean_l2_rel();
        let stamp = batch.fingerprint();

        let mut cells = Vec::with_capacity(columns.len());
        for (col_idx, _) in columns.iter().enumerate() {
            let chain = if col_idx == 0 {
                None
            } else {
                Some(&chains[col_idx - 1])
            };
            let cell_rng = root.derive(&[0x5eed, row_idx as u64, col_idx as u64]);
            cells.push(eval_cell(
                spec,
                params,
                chain,
                store,
                &batch.perturbed,
                &batch.labels,
                &cell_rng,
            ));
        }

        if batch.fingerprint() != stamp {
            return Err(Error::invalid(
                "sweep: adversarial batch changed while scoring columns",
            ));
        }
        rows.push(SweepRow {
            epsilon,
            l2_diff,
            cells,
        });
    }

    Ok(SweepResult { columns, rows })
}
