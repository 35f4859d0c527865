//! Command-line driver: train classifiers and VAEs, mount gradient
//! attacks, apply purification defenses, run accuracy-vs-perturbation
//! sweeps, and render the result tables.
//!
//! Every subcommand reads a JSON config (see the `config` module of the
//! core crate) and accepts a handful of flag overrides. On failure the
//! process exits nonzero after printing a single machine-readable
//! `{"error": ...}` line to stderr. `ADVDEF_THREADS` caps the worker
//! pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advdef_core::attacks::{attack_batch, AttackConfig, AttackKind};
use advdef_core::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ModelDesc,
};
use advdef_core::config::{load_config, Config};
use advdef_core::data::idx::{load_idx, write_idx_images, write_idx_labels};
use advdef_core::data::{Dataset, Split};
use advdef_core::defenses::{DefenseChain, ModelStore, TransformStep};
use advdef_core::error::{Error, Result};
use advdef_core::metrics::top1_accuracy;
use advdef_core::models::train::{train_classifier, train_vae, TrainConfig, TrainReport, VaeData};
use advdef_core::models::{ClassifierSpec, VaeSpec};
use advdef_core::nn::ParamSet;
use advdef_core::report::{emit_csv, emit_markdown, markdown_string, parse_csv};
use advdef_core::rng::Rng;
use advdef_core::sweep::{run_sweep, SweepGrid};
use advdef_core::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "advdef")]
#[command(about = "Train image classifiers, attack them, and measure purification defenses")]
#[command(version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier described by the config's model section.
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,

        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,

        /// Where to write the checkpoint.
        #[arg(long, default_value = "classifier.ckpt")]
        out: PathBuf,
    },

    /// Train one of the config's named VAE models.
    TrainVae {
        #[arg(long)]
        config: PathBuf,

        /// Which vae_models entry to train (defaults to the only one).
        #[arg(long)]
        model: Option<String>,

        #[arg(long)]
        seed: Option<u64>,

        /// Where to write the checkpoint (defaults to the entry's
        /// checkpoint path).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Perturb a test slice with the configured attack and report how
    /// far accuracy falls.
    Attack {
        #[arg(long)]
        config: PathBuf,

        /// Trained classifier checkpoint.
        #[arg(long)]
        classifier: PathBuf,

        /// Override the attack budget.
        #[arg(long)]
        epsilon: Option<f32>,

        /// Override the iteration count (iterative attack only).
        #[arg(long)]
        iterations: Option<usize>,

        /// How many test images to attack.
        #[arg(long)]
        slice: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        /// Directory for adversarial IDX output (grayscale data only;
        /// pixels are quantized to bytes).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Purify images with one named defense chain and report accuracy.
    Defend {
        #[arg(long)]
        config: PathBuf,

        #[arg(long)]
        classifier: PathBuf,

        /// Which defense chain from the config to apply.
        #[arg(long)]
        chain: String,

        /// IDX image file to defend (defaults to the clean test slice).
        #[arg(long)]
        images: Option<PathBuf>,

        /// IDX label file paired with --images.
        #[arg(long)]
        labels: Option<PathBuf>,

        #[arg(long)]
        slice: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        /// Override every dct-quant step's quality.
        #[arg(long)]
        quality: Option<u8>,

        /// Override every vae-patch step's patch size.
        #[arg(long)]
        patch: Option<usize>,

        /// Override every vae-patch step's stride.
        #[arg(long)]
        stride: Option<usize>,
    },

    /// Attack once per epsilon and score every defense column on the
    /// shared adversarial batch; writes CSV and markdown tables.
    Sweep {
        #[arg(long)]
        config: PathBuf,

        #[arg(long)]
        classifier: PathBuf,

        /// Replace the config's epsilon grid with a single value.
        #[arg(long)]
        epsilon: Option<f32>,

        #[arg(long)]
        iterations: Option<usize>,

        #[arg(long)]
        slice: Option<usize>,

        #[arg(long)]
        seed: Option<u64>,

        #[arg(long)]
        quality: Option<u8>,

        #[arg(long)]
        patch: Option<usize>,

        #[arg(long)]
        stride: Option<usize>,

        /// CSV output path; a markdown table lands next to it.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },

    /// Re-render a sweep CSV as a markdown table.
    Report {
        /// CSV produced by the sweep subcommand.
        #[arg(long = "in")]
        input: PathBuf,

        /// Markdown output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match cap_threads().and_then(|()| run(args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

/// Apply the ADVDEF_THREADS cap before any parallel work starts.
fn cap_threads() -> Result<()> {
    match std::env::var("ADVDEF_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "ADVDEF_THREADS must be a positive integer, got '{v}'"
                    ))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))
        }
        Err(_) => Ok(()),
    }
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::TrainClassifier { config, seed, out } => cmd_train_classifier(&config, seed, &out),
        Command::TrainVae {
            config,
            model,
            seed,
            out,
        } => cmd_train_vae(&config, model.as_deref(), seed, out.as_deref()),
        Command::Attack {
            config,
            classifier,
            epsilon,
            iterations,
            slice,
            seed,
            out,
        } => cmd_attack(
            &config,
            &classifier,
            epsilon,
            iterations,
            slice,
            seed,
            out.as_deref(),
        ),
        Command::Defend {
            config,
            classifier,
            chain,
            images,
            labels,
            slice,
            seed,
            quality,
            patch,
            stride,
        } => cmd_defend(
            &config,
            &classifier,
            &chain,
            images.as_deref(),
            labels.as_deref(),
            slice,
            seed,
            StepOverrides {
                quality,
                patch,
                stride,
            },
        ),
        Command::Sweep {
            config,
            classifier,
            epsilon,
            iterations,
            slice,
            seed,
            quality,
            patch,
            stride,
            out,
        } => cmd_sweep(
            &config,
            &classifier,
            epsilon,
            iterations,
            slice,
            seed,
            StepOverrides {
                quality,
                patch,
                stride,
            },
            &out,
        ),
        Command::Report { input, out } => cmd_report(&input, out.as_deref()),
    }
}

fn load_classifier_ckpt(path: &Path) -> Result<(ClassifierSpec, ParamSet, CheckpointMeta)> {
    let ckpt = load_checkpoint(path)?;
    match ckpt.meta.model.clone() {
        ModelDesc::Classifier(spec) => Ok((spec, ckpt.params, ckpt.meta)),
        ModelDesc::Vae(spec) => Err(Error::invalid(format!(
            "{} holds VAE '{}', not a classifier",
            path.display(),
            spec.name
        ))),
    }
}

fn load_vae_ckpt(path: &Path) -> Result<(VaeSpec, ParamSet)> {
    let ckpt = load_checkpoint(path)?;
    match ckpt.meta.model.clone() {
        ModelDesc::Vae(spec) => Ok((spec, ckpt.params)),
        ModelDesc::Classifier(spec) => Err(Error::invalid(format!(
            "{} holds classifier '{}', not a VAE",
            path.display(),
            spec.name
        ))),
    }
}

/// Load every VAE the config declares a checkpoint for. Chains that
/// reference a model without one will surface per-cell errors instead.
fn build_store(cfg: &Config, config_path: &Path) -> Result<ModelStore> {
    let mut store = ModelStore::new();
    let base = config_path.parent().unwrap_or(Path::new("."));
    for entry in &cfg.vae_models {
        let Some(ckpt_path) = &entry.checkpoint else {
            continue;
        };
        let mut path = PathBuf::from(ckpt_path);
        if path.is_relative() && !path.exists() {
            path = base.join(ckpt_path);
        }
        let (spec, params) = load_vae_ckpt(&path)?;
        log::info!("loaded VAE '{}' from {}", spec.name, path.display());
        store.insert(spec, params);
    }
    Ok(store)
}

struct StepOverrides {
    quality: Option<u8>,
    patch: Option<usize>,
    stride: Option<usize>,
}

impl StepOverrides {
    fn apply_step(&self, step: &mut TransformStep) {
        match step {
            TransformStep::DctQuant { quality } => {
                if let Some(q) = self.quality {
                    *quality = q;
                }
            }
            TransformStep::VaePatch { patch, stride, .. } => {
                if let Some(p) = self.patch {
                    *patch = p;
                }
                if let Some(s) = self.stride {
                    *stride = s;
                }
            }
            TransformStep::Ensemble { chains } => {
                for chain in chains {
                    self.apply(chain);
                }
            }
            _ => {}
        }
    }

    fn apply(&self, chain: &mut DefenseChain) {
        for step in &mut chain.steps {
            self.apply_step(step);
        }
    }
}

/// Test images and labels, truncated to the evaluation slice.
fn test_slice(cfg: &Config, slice: Option<usize>) -> Result<(Vec<Tensor>, Vec<usize>, Dataset)> {
    let n = slice
        .or_else(|| cfg.sweep.as_ref().map(|s| s.slice))
        .unwrap_or(1000);
    let full = cfg.dataset()?.load(Split::Test)?;
    let ds = full.take(n);
    if ds.is_empty() {
        return Err(Error::invalid("test slice is empty"));
    }
    let images = ds.images_vec(0, ds.len())?;
    let labels = ds.labels().to_vec();
    Ok((images, labels, ds))
}

fn cmd_train_classifier(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let spec = cfg.model()?.resolve()?;
    let data = cfg.dataset()?.load(Split::Train)?;
    if data.image_shape().to_vec() != spec.input_shape {
        return Err(Error::invalid(format!(
            "dataset images are {:?} but '{}' expects {:?}",
            data.image_shape(),
            spec.name,
            spec.input_shape
        )));
    }

    let mut train_cfg = TrainConfig::classifier(0);
    if let Some(section) = &cfg.train {
        train_cfg = section.apply(train_cfg);
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }

    log::info!(
        "training '{}' on {} images for {} epochs",
        spec.name,
        data.len(),
        train_cfg.epochs
    );
    let (params, report) = train_classifier(&spec, &data.batch_all()?, data.labels(), &train_cfg)?;
    print_report(&report);

    let meta = CheckpointMeta {
        model: ModelDesc::Classifier(spec),
        seed: train_cfg.seed,
        epochs: report.epoch_loss.len(),
        final_loss: report.epoch_loss.last().copied().unwrap_or(f64::INFINITY),
    };
    save_checkpoint(out, &Checkpoint::new(meta, params))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_train_vae(
    config: &Path,
    model: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let entry = match model {
        Some(name) => cfg.vae_model(name)?,
        None if cfg.vae_models.len() == 1 => &cfg.vae_models[0],
        None => {
            return Err(Error::invalid(format!(
                "config lists {} VAE models; pick one with --model",
                cfg.vae_models.len()
            )))
        }
    };
    let spec = entry.model.resolve()?;
    let out_path = match (out, &entry.checkpoint) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => PathBuf::from(format!("{}.ckpt", spec.name)),
    };

    let data = cfg.dataset()?.load(Split::Train)?;
    let batch = data.batch_all()?;
    let shape = data.image_shape();
    let whole_image = spec.input_shape == [shape[0], shape[1], shape[2]];
    let vae_data = if whole_image {
        VaeData::Images(&batch)
    } else if spec.input_shape[2] == shape[2]
        && spec.input_shape[0] <= shape[0]
        && spec.input_shape[1] <= shape[1]
    {
        VaeData::Patches {
            source: &batch,
            per_epoch: entry.patches_per_epoch.unwrap_or(data.len()),
        }
    } else {
        return Err(Error::invalid(format!(
            "VAE '{}' expects {:?} inputs; dataset images are {:?}",
            spec.name,
            spec.input_shape,
            shape
        )));
    };

    let mut train_cfg = TrainConfig::vae(0);
    let mut early_stop = None;
    if let Some(section) = &cfg.train {
        train_cfg = section.apply(train_cfg);
        early_stop = section.early_stop;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }

    log::info!(
        "training VAE '{}' ({}) for up to {} epochs",
        spec.name,
        if whole_image { "whole images" } else { "patches" },
        train_cfg.epochs
    );
    let (params, report) = train_vae(&spec, vae_data, &train_cfg, early_stop)?;
    print_report(&report);

    let meta = CheckpointMeta {
        model: ModelDesc::Vae(spec),
        seed: train_cfg.seed,
        epochs: report.epoch_loss.len(),
        final_loss: report.epoch_loss.last().copied().unwrap_or(f64::INFINITY),
    };
    save_checkpoint(&out_path, &Checkpoint::new(meta, params))?;
    println!("checkpoint written to {}", out_path.display());
    Ok(())
}

fn print_report(report: &TrainReport) {
    for (i, loss) in report.epoch_loss.iter().enumerate() {
        log::info!("epoch {:>3}: loss {loss:.6}", i + 1);
    }
    if report.stopped_early {
        log::info!("stopped early after {} epochs", report.epoch_loss.len());
    }
    println!(
        "trained {} epochs in {:.1}s, final metric {:.4}",
        report.epoch_loss.len(),
        report.wall_time_s,
        report.final_metric
    );
}

fn attack_config(
    cfg: &Config,
    epsilon: Option<f32>,
    iterations: Option<usize>,
) -> Result<AttackConfig> {
    let section = cfg.attack()?;
    let eps = epsilon.or(section.epsilon).ok_or_else(|| {
        Error::invalid("no epsilon: set attack.epsilon in the config or pass --epsilon")
    })?;
    let iters = iterations.unwrap_or(section.iterations);
    Ok(match section.kind {
        AttackKind::Fgsm => AttackConfig::fgsm(eps),
        AttackKind::Ifgsm => AttackConfig::ifgsm(eps, iters),
    })
}

fn cmd_attack(
    config: &Path,
    classifier: &Path,
    epsilon: Option<f32>,
    iterations: Option<usize>,
    slice: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (spec, params, _) = load_classifier_ckpt(classifier)?;
    let (images, labels, ds) = test_slice(&cfg, slice)?;
    let atk = attack_config(&cfg, epsilon, iterations)?;
    atk.validate(Some(spec.dataset))?;

    log::info!(
        "attacking {} images with {} at epsilon {}",
        images.len(),
        atk.kind.as_str(),
        atk.epsilon
    );
    let batch = attack_batch(&atk, &spec, &params, &images, &labels)?;
    let rng = Rng::new(seed.unwrap_or(0));
    let clean = top1_accuracy(&spec, &params, &images, &labels, None, &rng)?;
    let adv = top1_accuracy(&spec, &params, &batch.perturbed, &labels, None, &rng)?;
    println!(
        "clean accuracy {clean:.3}, adversarial accuracy {adv:.3}, mean relative L2 {:.3}",
        batch.mean_l2_rel()
    );
    if !batch.skipped.is_empty() {
        log::warn!("{} images skipped by the attack", batch.skipped.len());
    }

    if let Some(dir) = out {
        let [h, w, c] = ds.image_shape();
        if c != 1 {
            return Err(Error::invalid(
                "IDX export supports single-channel images only",
            ));
        }
        std::fs::create_dir_all(dir)?;
        let quantize = |t: &Tensor| -> Vec<u8> {
            t.data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        };
        let adv_images: Vec<Vec<u8>> = batch.perturbed.iter().map(&quantize).collect();
        let bytes: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
        write_idx_images(&dir.join("adversarial-images.idx"), &adv_images, h, w)?;
        write_idx_labels(&dir.join("adversarial-labels.idx"), &bytes)?;
        println!("adversarial IDX files written to {}", dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_defend(
    config: &Path,
    classifier: &Path,
    chain_name: &str,
    images_path: Option<&Path>,
    labels_path: Option<&Path>,
    slice: Option<usize>,
    seed: Option<u64>,
    overrides: StepOverrides,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (spec, params, _) = load_classifier_ckpt(classifier)?;
    let mut chain = cfg
        .defenses
        .iter()
        .find(|c| c.name == chain_name)
        .cloned()
        .ok_or_else(|| {
            Error::invalid(format!(
                "no defense chain named '{chain_name}' in the config"
            ))
        })?;
    overrides.apply(&mut chain);
    let store = build_store(&cfg, config)?;

    let (images, labels) = match (images_path, labels_path) {
        (Some(ip), Some(lp)) => {
            let ds = load_idx(ip, lp, Split::Test)?;
            let ds = slice.map_or(ds.clone(), |n| ds.take(n));
            (ds.images_vec(0, ds.len())?, ds.labels().to_vec())
        }
        (None, None) => {
            let (images, labels, _) = test_slice(&cfg, slice)?;
            (images, labels)
        }
        _ => {
            return Err(Error::invalid(
                "--images and --labels must be given together",
            ))
        }
    };

    let rng = Rng::new(seed.unwrap_or(0));
    let plain = top1_accuracy(&spec, &params, &images, &labels, None, &rng)?;
    let defended = top1_accuracy(&spec, &params, &images, &labels, Some((&chain, &store)), &rng)?;
    println!(
        "accuracy without defense {plain:.3}, with '{}' {defended:.3} ({} images)",
        chain.name,
        images.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &Path,
    classifier: &Path,
    epsilon: Option<f32>,
    iterations: Option<usize>,
    slice: Option<usize>,
    seed: Option<u64>,
    overrides: StepOverrides,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (spec, params, _) = load_classifier_ckpt(classifier)?;
    let section = cfg.sweep()?;
    let attack = cfg.attack()?;

    let epsilons = match epsilon {
        Some(e) => vec![e],
        None => section.epsilons.clone(),
    };
    let grid = SweepGrid {
        kind: attack.kind,
        iterations: iterations.unwrap_or(attack.iterations),
        epsilons,
    };
    let mut chains = cfg.defenses.clone();
    for chain in &mut chains {
        overrides.apply(chain);
    }
    let store = build_store(&cfg, config)?;
    let (images, labels, _) = test_slice(&cfg, slice)?;
    let sweep_seed = seed.unwrap_or(section.seed);

    log::info!(
        "sweeping {} epsilon values over {} images and {} defense columns",
        grid.epsilons.len(),
        images.len(),
        chains.len() + 1
    );
    let result = run_sweep(
        &spec, &params, &grid, &chains, &store, &images, &labels, sweep_seed,
    )?;

    for (row, eps) in result.rows.iter().zip(&grid.epsilons) {
        for (cell, col) in row.cells.iter().zip(&result.columns) {
            if let Some(err) = &cell.error {
                log::warn!("epsilon {eps} column '{col}': {err}");
            }
        }
    }

    emit_csv(&result, out)?;
    let md_path = out.with_extension("md");
    emit_markdown(&result, &md_path)?;
    print!("{}", markdown_string(&result)?);
    println!(
        "tables written to {} and {}",
        out.display(),
        md_path.display()
    );
    Ok(())
}

fn cmd_report(input: &Path, out: Option<&Path>) -> Result<()> {
    let result = parse_csv(input)?;
    match out {
        Some(path) => {
            emit_markdown(&result, path)?;
            println!("markdown written to {}", path.display());
        }
        None => print!("{}", markdown_string(&result)?),
    }
    Ok(())
}
