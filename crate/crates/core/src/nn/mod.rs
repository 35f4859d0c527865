//! Layer specifications, parameter storage, initialization, and the
//! batch-forward runner used by both classifiers and VAEs.

pub mod losses;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Momentum for the exponential moving average of batch-norm statistics.
pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// One layer of a sequential network. Shapes below are per image; the
/// runner adds the leading batch dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Stride-1 same-padded convolution, weight `[k, k, c_in, out]`.
    Conv2d { out_channels: usize, kernel: usize },
    /// Adjoint convolution, weight `[k, k, out, c_in]`.
    TConv2d { out_channels: usize, kernel: usize },
    /// Fully connected layer on flattened features.
    Dense { units: usize },
    MaxPool2x2,
    Upsample2x,
    BatchNorm,
    Dropout { rate: f32 },
    Flatten,
    /// Un-flatten back to a `[h, w, c]` image.
    Reshape { shape: Vec<usize> },
    Act(Activation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter tensors in deterministic insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::shape("ParamSet::set", e.tensor.shape(), tensor.shape()));
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Stable name prefix per layer; `None` for parameterless layers.
pub fn layer_prefixes(layers: &[LayerSpec]) -> Vec<Option<String>> {
    let (mut conv, mut tconv, mut dense, mut bn) = (0, 0, 0, 0);
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d { .. } => {
                conv += 1;
                Some(format!("conv{conv}"))
            }
            LayerSpec::TConv2d { .. } => {
                tconv += 1;
                Some(format!("tconv{tconv}"))
            }
            LayerSpec::Dense { .. } => {
                dense += 1;
                Some(format!("dense{dense}"))
            }
            LayerSpec::BatchNorm => {
                bn += 1;
                Some(format!("bn{bn}"))
            }
            _ => None,
        })
        .collect()
}

/// Per-image output shape of every layer, validating the whole chain.
pub fn trace_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| {
            Err(Error::invalid(format!(
                "layer {i} ({layer:?}): {msg} (input shape {shape:?})"
            )))
        };
        shape = match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
            }
            | LayerSpec::TConv2d {
                out_channels,
                kernel,
            } => {
                if shape.len() != 3 {
                    return bad("expects [h, w, c] input".into());
                }
                if kernel % 2 == 0 || *kernel == 0 {
                    return bad(format!("kernel {kernel} must be odd"));
                }
                if *out_channels == 0 {
                    return bad("out_channels must be >= 1".into());
                }
                vec![shape[0], shape[1], *out_channels]
            }
            LayerSpec::Dense { units } => {
                if shape.len() != 1 {
                    return bad("expects flattened input".into());
                }
                if *units == 0 {
                    return bad("units must be >= 1".into());
                }
                vec![*units]
            }
            LayerSpec::MaxPool2x2 => {
                if shape.len() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
                    return bad("expects [h, w, c] with even h and w".into());
                }
                vec![shape[0] / 2, shape[1] / 2, shape[2]]
            }
            LayerSpec::Upsample2x => {
                if shape.len() != 3 {
                    return bad("expects [h, w, c] input".into());
                }
                vec![shape[0] * 2, shape[1] * 2, shape[2]]
            }
            LayerSpec::BatchNorm => {
                if shape.len() != 3 {
                    return bad("expects [h, w, c] input".into());
                }
                shape
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("rate {rate} not in [0, 1)"));
                }
                shape
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Reshape { shape: target } => {
                let want: usize = target.iter().product();
                let have: usize = shape.iter().product();
                if want != have || target.is_empty() {
                    return bad(format!("cannot reshape to {target:?}"));
                }
                target.clone()
            }
            LayerSpec::Act(_) => shape,
        };
        out.push(shape.clone());
    }
    Ok(out)
}

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases, identity
/// batch-norm parameters with zero running mean and unit running variance.
/// `ns` prefixes every parameter name (e.g. "enc.") so several layer stacks
/// can share one `ParamSet`.
pub fn init_params_ns(
    layers: &[LayerSpec],
    input_shape: &[usize],
    ns: &str,
    params: &mut ParamSet,
    rng: &mut Rng,
) -> Result<()> {
    let shapes = trace_shapes(input_shape, layers)?;
    let prefixes = layer_prefixes(layers);
    for (i, layer) in layers.iter().enumerate() {
        let in_shape = if i == 0 { input_shape } else { &shapes[i - 1] };
        let Some(p) = &prefixes[i] else {
            continue;
        };
        let prefix = format!("{ns}{p}");
        let prefix = prefix.as_str();
        match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
            } => {
                let c_in = in_shape[2];
                let fan_in = kernel * kernel * c_in;
                let limit = (6.0 / fan_in as f32).sqrt();
                let w = Tensor::rand_uniform(
                    &[*kernel, *kernel, c_in, *out_channels],
                    -limit,
                    limit,
                    rng,
                );
                params.add(&format!("{prefix}.weight"), w, true)?;
                params.add(&format!("{prefix}.bias"), Tensor::zeros(&[*out_channels]), true)?;
            }
            LayerSpec::TConv2d {
                out_channels,
                kernel,
            } => {
                let c_in = in_shape[2];
                let fan_in = kernel * kernel * c_in;
                let limit = (6.0 / fan_in as f32).sqrt();
                let w = Tensor::rand_uniform(
                    &[*kernel, *kernel, *out_channels, c_in],
                    -limit,
                    limit,
                    rng,
                );
                params.add(&format!("{prefix}.weight"), w, true)?;
                params.add(&format!("{prefix}.bias"), Tensor::zeros(&[*out_channels]), true)?;
            }
            LayerSpec::Dense { units } => {
                let fan_in = in_shape[0];
                let limit = (6.0 / fan_in as f32).sqrt();
                let w = Tensor::rand_uniform(&[fan_in, *units], -limit, limit, rng);
                params.add(&format!("{prefix}.weight"), w, true)?;
                params.add(&format!("{prefix}.bias"), Tensor::zeros(&[*units]), true)?;
            }
            LayerSpec::BatchNorm => {
                let c = in_shape[2];
                params.add(&format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), true)?;
                params.add(&format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
                params.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
                params.add(&format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), false)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// [`init_params_ns`] with an empty namespace into a fresh set.
pub fn init_params(
    layers: &[LayerSpec],
    input_shape: &[usize],
    rng: &mut Rng,
) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    init_params_ns(layers, input_shape, "", &mut params, rng)?;
    Ok(params)
}

/// Batch statistics observed by one batch-norm layer during a forward pass.
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub struct ForwardOut {
    pub output: Var,
    /// Tape vars of every parameter leaf, for gradient lookup after backward.
    pub param_vars: Vec<(String, Var)>,
    /// Batch statistics to fold into running stats (train mode only).
    pub bn_updates: Vec<BnUpdate>,
}

/// Run a layer stack on a `[batch, ...]` input already on the tape. `ns`
/// must match the namespace the parameters were initialized under.
pub fn run_layers_ns(
    tape: &mut Tape,
    layers: &[LayerSpec],
    params: &ParamSet,
    input: Var,
    mode: Mode,
    mut rng: Option<&mut Rng>,
    ns: &str,
) -> Result<ForwardOut> {
    let prefixes = layer_prefixes(layers);
    let train = mode == Mode::Train;
    let mut param_vars = Vec::new();
    let mut bn_updates = Vec::new();
    let mut x = input;

    let leaf = |tape: &mut Tape,
                    param_vars: &mut Vec<(String, Var)>,
                    name: String|
     -> Result<Var> {
        let v = tape.leaf(params.get(&name)?.clone(), train);
        param_vars.push((name, v));
        Ok(v)
    };

    for (i, layer) in layers.iter().enumerate() {
        let prefix = format!("{ns}{}", prefixes[i].as_deref().unwrap_or(""));
        let prefix = prefix.as_str();
        x = match layer {
            LayerSpec::Conv2d { .. } => {
                let w = leaf(tape, &mut param_vars, format!("{prefix}.weight"))?;
                let b = leaf(tape, &mut param_vars, format!("{prefix}.bias"))?;
                tape.conv2d(x, w, Some(b))?
            }
            LayerSpec::TConv2d { .. } => {
                let w = leaf(tape, &mut param_vars, format!("{prefix}.weight"))?;
                let b = leaf(tape, &mut param_vars, format!("{prefix}.bias"))?;
                tape.tconv2d(x, w, Some(b))?
            }
            LayerSpec::Dense { .. } => {
                let w = leaf(tape, &mut param_vars, format!("{prefix}.weight"))?;
                let b = leaf(tape, &mut param_vars, format!("{prefix}.bias"))?;
                let mm = tape.matmul(x, w)?;
                tape.add_row_vec(mm, b)?
            }
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(x)?,
            LayerSpec::Upsample2x => tape.upsample2x(x)?,
            LayerSpec::BatchNorm => {
                let gamma = leaf(tape, &mut param_vars, format!("{prefix}.gamma"))?;
                let beta = leaf(tape, &mut param_vars, format!("{prefix}.beta"))?;
                if train {
                    let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                    bn_updates.push(BnUpdate {
                        prefix: prefix.to_string(),
                        mean,
                        var,
                    });
                    y
                } else {
                    let mean = params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                    let var = params.get(&format!("{prefix}.running_var"))?.data().to_vec();
                    tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)?
                }
            }
            LayerSpec::Dropout { rate } => {
                if train {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("dropout in train mode needs an rng"))?;
                    tape.dropout(x, *rate, rng)?
                } else {
                    x
                }
            }
            LayerSpec::Flatten => {
                let shape = tape.value(x).shape();
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, vec![batch, rest])?
            }
            LayerSpec::Reshape { shape } => {
                let batch = tape.value(x).shape()[0];
                let mut target = vec![batch];
                target.extend_from_slice(shape);
                tape.reshape(x, target)?
            }
            LayerSpec::Act(a) => match a {
                Activation::Relu => tape.relu(x),
                Activation::Sigmoid => tape.sigmoid(x),
                Activation::Tanh => tape.tanh(x),
            },
        };
    }
    Ok(ForwardOut {
        output: x,
        param_vars,
        bn_updates,
    })
}

/// [`run_layers_ns`] with an empty namespace.
pub fn run_layers(
    tape: &mut Tape,
    layers: &[LayerSpec],
    params: &ParamSet,
    input: Var,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<ForwardOut> {
    run_layers_ns(tape, layers, params, input, mode, rng, "")
}

/// Fold observed batch statistics into the stored running statistics.
pub fn commit_bn_updates(
    params: &mut ParamSet,
    updates: &[BnUpdate],
    momentum: f32,
) -> Result<()> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            let mut t = params.get(&name)?.clone();
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            params.set(&name, t)?;
        }
    }
    Ok(())
}
