//! JSON experiment manifests. One document holds optional sections for
//! the dataset, the classifier, named VAE models, the attack, the
//! defense chains, the sweep grid, and training hyperparameters, so a
//! whole experiment is reproducible from a single file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::data::idx::load_idx;
use crate::data::synth::{synth_dataset, SynthKind};
use crate::data::{Dataset, Split};
use crate::defenses::DefenseChain;
use crate::error::{Error, Result};
use crate::models::train::{EarlyStop, TrainConfig};
use crate::models::{classifier_preset, vae_preset, ClassifierSpec, VaeSpec};

fn default_n() -> usize {
    2000
}
fn default_digit_side() -> usize {
    28
}
fn default_shape_side() -> usize {
    64
}
fn default_digit_classes() -> usize {
    10
}
fn default_shape_classes() -> usize {
    8
}
fn default_iterations() -> usize {
    10
}
fn default_slice() -> usize {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSection {
    Digits {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_digit_side")]
        height: usize,
        #[serde(default = "default_digit_side")]
        width: usize,
        #[serde(default = "default_digit_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Shapes {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_shape_side")]
        height: usize,
        #[serde(default = "default_shape_side")]
        width: usize,
        #[serde(default = "default_shape_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

impl DatasetSection {
    /// Materialize the dataset. Synthetic test splits draw from a
    /// seed stream disjoint from the train split's.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let split_seed = |seed: u64| match split {
            Split::Train => seed,
            Split::Test => seed ^ 0x7465_7374,
        };
        match self {
            DatasetSection::Digits {
                n,
                height,
                width,
                classes,
                seed,
            } => synth_dataset(
                SynthKind::Digits,
                *n,
                *height,
                *width,
                1,
                *classes,
                split_seed(*seed),
                split,
            ),
            DatasetSection::Shapes {
                n,
                height,
                width,
                classes,
                seed,
            } => synth_dataset(
                SynthKind::Shapes,
                *n,
                *height,
                *width,
                3,
                *classes,
                split_seed(*seed),
                split,
            ),
            DatasetSection::Idx { images, labels } => {
                load_idx(Path::new(images), Path::new(labels), split)
            }
        }
    }
}

/// A classifier given either as a preset name or a full architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Full(Box<ClassifierSpec>),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ClassifierSpec> {
        match self {
            ModelRef::Preset(name) => classifier_preset(name),
            ModelRef::Full(spec) => {
                spec.validate()?;
                Ok((**spec).clone())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VaeRef {
    Preset(String),
    Full(Box<VaeSpec>),
}

impl VaeRef {
    pub fn resolve(&self) -> Result<VaeSpec> {
        match self {
            VaeRef::Preset(name) => vae_preset(name),
            VaeRef::Full(spec) => {
                spec.validate()?;
                Ok((**spec).clone())
            }
        }
    }
}

/// A named VAE the defense chains can refer to, with where its trained
/// weights live and (for patch models) how many patches to sample per
/// training epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeModelSection {
    pub model: VaeRef,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub patches_per_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSection {
    pub kind: AttackKind,
    #[serde(default)]
    pub epsilon: Option<f32>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSection {
    pub epsilons: Vec<f32>,
    /// How many test images each row evaluates.
    #[serde(default = "default_slice")]
    pub slice: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Overrides applied on top of the built-in classifier or VAE recipe.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default)]
    pub optimizer: Option<crate::models::train::OptimKind>,
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl TrainSection {
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(o) = self.optimizer {
            base.optimizer = o;
        }
        if let Some(lr) = self.lr {
            base.lr = lr;
        }
        if let Some(e) = self.epochs {
            base.epochs = e;
        }
        if let Some(b) = self.batch_size {
            base.batch_size = b;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        base
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub model: Option<ModelRef>,
    #[serde(default)]
    pub vae_models: Vec<VaeModelSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub defenses: Vec<DefenseChain>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn dataset(&self) -> Result<&DatasetSection> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::invalid("config: missing 'dataset' section"))
    }

    pub fn model(&self) -> Result<&ModelRef> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::invalid("config: missing 'model' section"))
    }

    pub fn attack(&self) -> Result<&AttackSection> {
        self.attack
            .as_ref()
            .ok_or_else(|| Error::invalid("config: missing 'attack' section"))
    }

    pub fn sweep(&self) -> Result<&SweepSection> {
        self.sweep
            .as_ref()
            .ok_or_else(|| Error::invalid("config: missing 'sweep' section"))
    }

    /// The named VAE section for a defense chain's model reference.
    pub fn vae_model(&self, name: &str) -> Result<&VaeModelSection> {
        for section in &self.vae_models {
            if section.model.resolve()?.name == name {
                return Ok(section);
            }
        }
        Err(Error::invalid(format!(
            "config: no vae_models entry named '{name}'"
        )))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    Config::from_json(&fs::read_to_string(path)?)
}
