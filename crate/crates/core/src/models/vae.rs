//! VAE encode/sample/decode, the closed-form Gaussian KL, and the
//! β-weighted loss, both on-tape (training) and as plain tensor functions
//! (defense-time reconstruction).

use crate::error::{Error, Result};
use crate::models::{check_batch_shape, ReconKind, VaeSpec};
use crate::nn::{losses::PROB_EPS, run_layers_ns, BnUpdate, Mode, ParamSet};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything the training loop needs from one VAE forward pass.
pub struct VaeForward {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
    pub param_vars: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Encoder + reparameterized sample + decoder on the tape.
/// `x` is a `[batch, h, w, c]` leaf already on the tape.
pub fn vae_forward(
    tape: &mut Tape,
    spec: &VaeSpec,
    params: &ParamSet,
    x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<VaeForward> {
    let batch = tape.value(x).shape()[0];
    let enc = run_layers_ns(tape, &spec.encoder, params, x, mode, Some(rng), "enc.")?;
    let d = spec.latent;
    let mu = tape.slice_last_dim(enc.output, 0, d)?;
    let logvar = tape.slice_last_dim(enc.output, d, d)?;

    // z = mu + sigma .* eps, with eps ~ N(0,1) clamped to the noise range.
    let half = tape.mul_scalar(logvar, 0.5);
    let sigma = tape.exp(half);
    let (lo, hi) = spec.noise_clip;
    let eps = tape.constant(Tensor::gaussian(rng, &[batch, d], Some(lo), Some(hi))?);
    let scaled = tape.mul(sigma, eps)?;
    let z = tape.add(mu, scaled)?;

    let dec = run_layers_ns(tape, &spec.decoder, params, z, mode, Some(rng), "dec.")?;
    let mut param_vars = enc.param_vars;
    param_vars.extend(dec.param_vars);
    let mut bn_updates = enc.bn_updates;
    bn_updates.extend(dec.bn_updates);
    Ok(VaeForward {
        mu,
        logvar,
        z,
        recon: dec.output,
        param_vars,
        bn_updates,
    })
}

pub struct VaeLossParts {
    pub loss: Var,
    /// Reconstruction term: per-image sum, averaged over the batch.
    pub recon: Var,
    /// KL term: per-image sum over latent dims, averaged over the batch.
    pub kl: Var,
}

/// loss = recon + beta * kl.
///
/// The mse-kind reconstruction is 0.5 * ||x - x'||^2 per image (the Gaussian
/// negative log-likelihood with its additive constant dropped); the bce kind
/// is the per-pixel binary cross-entropy summed per image.
pub fn vae_loss_tape(
    tape: &mut Tape,
    spec: &VaeSpec,
    fwd: &VaeForward,
    x: Var,
) -> Result<VaeLossParts> {
    let batch = tape.value(x).shape()[0] as f32;
    let recon = match spec.recon {
        ReconKind::Mse => {
            let d = tape.sub(fwd.recon, x)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum_all(sq);
            tape.mul_scalar(s, 0.5 / batch)
        }
        ReconKind::Bce => {
            let p = tape.clip(fwd.recon, PROB_EPS, 1.0 - PROB_EPS)?;
            let log_p = tape.log(p);
            let pos = tape.mul(x, log_p)?;
            let q = tape.rsub_scalar(p, 1.0);
            let log_q = tape.log(q);
            let xm = tape.rsub_scalar(x, 1.0);
            let neg = tape.mul(xm, log_q)?;
            let both = tape.add(pos, neg)?;
            let s = tape.sum_all(both);
            tape.mul_scalar(s, -1.0 / batch)
        }
    };
    // 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) per image, batch-averaged.
    let mu2 = tape.mul(fwd.mu, fwd.mu)?;
    let var = tape.exp(fwd.logvar);
    let t1 = tape.add(mu2, var)?;
    let t2 = tape.add_scalar(t1, -1.0);
    let t3 = tape.sub(t2, fwd.logvar)?;
    let ks = tape.sum_all(t3);
    let kl = tape.mul_scalar(ks, 0.5 / batch);

    let weighted = tape.mul_scalar(kl, spec.beta);
    let loss = tape.add(recon, weighted)?;
    Ok(VaeLossParts { loss, recon, kl })
}

/// Latent mean and standard deviation for an image batch, eval mode.
pub fn vae_encode(spec: &VaeSpec, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
    check_batch_shape(&spec.input_shape, x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let enc = run_layers_ns(&mut tape, &spec.encoder, params, xv, Mode::Eval, None, "enc.")?;
    let d = spec.latent;
    let mu = tape.slice_last_dim(enc.output, 0, d)?;
    let logvar = tape.slice_last_dim(enc.output, d, d)?;
    let sigma = tape.value(logvar).map(|lv| (0.5 * lv).exp());
    Ok((tape.value(mu).clone(), sigma))
}

/// z = mu + sigma .* clip(N(0,1), lo, hi)
pub fn vae_sample(
    mu: &Tensor,
    sigma: &Tensor,
    rng: &mut Rng,
    clip: (f32, f32),
) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape("vae_sample", mu.shape(), sigma.shape()));
    }
    let eps = Tensor::gaussian(rng, mu.shape(), Some(clip.0), Some(clip.1))?;
    let scaled = sigma.zip(&eps, |s, e| s * e)?;
    mu.zip(&scaled, |m, se| m + se)
}

/// Decode a `[batch, d]` latent batch to images, eval mode.
pub fn vae_decode(spec: &VaeSpec, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 || z.shape()[1] != spec.latent {
        return Err(Error::shape("vae_decode", &[0, spec.latent], z.shape()));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone(), false);
    let dec = run_layers_ns(&mut tape, &spec.decoder, params, zv, Mode::Eval, None, "dec.")?;
    Ok(tape.value(dec.output).clone())
}

/// decode(sample(encode(x))): the whole-image purification primitive.
pub fn vae_reconstruct(
    spec: &VaeSpec,
    params: &ParamSet,
    x: &Tensor,
    rng: &mut Rng,
    clip: (f32, f32),
) -> Result<Tensor> {
    let (mu, sigma) = vae_encode(spec, params, x)?;
    let z = vae_sample(&mu, &sigma, rng, clip)?;
    vae_decode(spec, params, &z)
}

/// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)):
/// 0.5 * sum(mu_i^2 + sigma_i^2 - 1 - ln sigma_i^2).
pub fn kl_gaussian(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape("kl_gaussian", mu.shape(), sigma.shape()));
    }
    let mut total = 0.0f64;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        if s <= 0.0 {
            return Err(Error::Domain {
                op: "kl_gaussian".into(),
                detail: format!("sigma must be positive, got {s}"),
            });
        }
        let (m, s) = (m as f64, s as f64);
        total += m * m + s * s - 1.0 - (s * s).ln();
    }
    Ok(0.5 * total)
}

/// Evaluate loss components on a batch without training (eval mode).
pub fn vae_loss(
    spec: &VaeSpec,
    params: &ParamSet,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    check_batch_shape(&spec.input_shape, x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let fwd = vae_forward(&mut tape, spec, params, xv, Mode::Eval, rng)?;
    let parts = vae_loss_tape(&mut tape, spec, &fwd, xv)?;
    Ok((
        tape.value(parts.loss).data()[0] as f64,
        tape.value(parts.recon).data()[0] as f64,
        tape.value(parts.kl).data()[0] as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::vae_preset;

    fn tiny_spec() -> VaeSpec {
        use crate::nn::{Activation, LayerSpec::*};
        VaeSpec {
            name: "tiny".into(),
            input_shape: vec![4, 4, 1],
            encoder: vec![
                Flatten,
                Dense { units: 8 },
                Act(Activation::Relu),
                Dense { units: 6 },
            ],
            latent: 3,
            decoder: vec![
                Dense { units: 16 },
                Act(Activation::Sigmoid),
                Reshape { shape: vec![4, 4, 1] },
            ],
            beta: 0.5,
            noise_clip: (-5.0, 5.0),
            recon: ReconKind::Mse,
        }
    }

    #[test]
    fn sigma_is_positive_for_random_inputs() {
        let spec = tiny_spec();
        let mut rng = Rng::new(1);
        let params = spec.init(&mut rng).unwrap();
        for seed in 0..5 {
            let x = Tensor::rand_uniform(&[2, 4, 4, 1], 0.0, 1.0, &mut Rng::new(seed));
            let (_, sigma) = vae_encode(&spec, &params, &x).unwrap();
            assert!(sigma.data().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn zero_final_encoder_layer_gives_standard_normal_posterior() {
        let spec = tiny_spec();
        let mut rng = Rng::new(2);
        let mut params = spec.init(&mut rng).unwrap();
        params
            .set("enc.dense2.weight", Tensor::zeros(&[8, 6]))
            .unwrap();
        params.set("enc.dense2.bias", Tensor::zeros(&[6])).unwrap();
        let x = Tensor::rand_uniform(&[3, 4, 4, 1], 0.0, 1.0, &mut rng);
        let (mu, sigma) = vae_encode(&spec, &params, &x).unwrap();
        assert!(mu.data().iter().all(|&m| m == 0.0));
        assert!(sigma.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn sample_with_degenerate_clip_is_mean() {
        let mut rng = Rng::new(3);
        let mu = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let sigma = Tensor::full(&[2, 3], 0.7);
        let z = vae_sample(&mu, &sigma, &mut rng, (0.0, 0.0)).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn sample_with_zero_sigma_is_mean() {
        let mut rng = Rng::new(4);
        let mu = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let sigma = Tensor::zeros(&[2, 3]);
        let z = vae_sample(&mu, &sigma, &mut rng, (-5.0, 5.0)).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn reparameterization_gradient_wrt_mean_is_one() {
        let spec = tiny_spec();
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::from_vec(vec![0.3, -0.2]), true);
        let logvar = tape.constant(Tensor::from_vec(vec![0.1, 0.4]));
        let half = tape.mul_scalar(logvar, 0.5);
        let sigma = tape.exp(half);
        let mut rng = Rng::new(5);
        let eps = tape.constant(
            Tensor::gaussian(&mut rng, &[2], Some(spec.noise_clip.0), Some(spec.noise_clip.1))
                .unwrap(),
        );
        let scaled = tape.mul(sigma, eps).unwrap();
        let z = tape.add(mu, scaled).unwrap();
        let s = tape.sum_all(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn decode_is_deterministic_and_bounded() {
        let spec = tiny_spec();
        let mut rng = Rng::new(6);
        let params = spec.init(&mut rng).unwrap();
        let z = Tensor::rand_uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let a = vae_decode(&spec, &params, &z).unwrap();
        let b = vae_decode(&spec, &params, &z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 4, 4, 1]);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }

    #[test]
    fn decoder_output_shapes_match_inputs_for_patch_presets() {
        for (name, side) in [
            ("patch-vae-16", 16usize),
            ("patch-vae-32", 32),
            ("patch-vae-64", 64),
        ] {
            let spec = vae_preset(name).unwrap();
            let mut rng = Rng::new(7);
            let params = spec.init(&mut rng).unwrap();
            let z = Tensor::rand_uniform(&[1, spec.latent], -1.0, 1.0, &mut rng);
            let out = vae_decode(&spec, &params, &z).unwrap();
            assert_eq!(out.shape(), &[1, side, side, 3], "{name}");
        }
    }

    #[test]
    fn kl_closed_form_fixed_points() {
        let mu0 = Tensor::from_vec(vec![0.0]);
        let sig1 = Tensor::from_vec(vec![1.0]);
        assert_eq!(kl_gaussian(&mu0, &sig1).unwrap(), 0.0);
        let mu1 = Tensor::from_vec(vec![1.0]);
        assert!((kl_gaussian(&mu1, &sig1).unwrap() - 0.5).abs() < 1e-12);
        let bad = Tensor::from_vec(vec![0.0]);
        assert!(kl_gaussian(&mu0, &bad).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_inputs() {
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let mu = Tensor::rand_uniform(&[6], -3.0, 3.0, &mut rng);
            let sigma = Tensor::rand_uniform(&[6], 0.05, 4.0, &mut rng);
            assert!(kl_gaussian(&mu, &sigma).unwrap() >= 0.0);
        }
    }

    #[test]
    fn beta_zero_reduces_loss_to_reconstruction() {
        let mut spec = tiny_spec();
        spec.beta = 0.0;
        let mut rng = Rng::new(9);
        let params = spec.init(&mut rng).unwrap();
        let x = Tensor::rand_uniform(&[2, 4, 4, 1], 0.0, 1.0, &mut rng);
        let (loss, recon, _kl) = vae_loss(&spec, &params, &x, &mut Rng::new(10)).unwrap();
        assert!((loss - recon).abs() < 1e-9);
    }

    #[test]
    fn whole_loss_gradient_passes_fd_with_deterministic_noise() {
        // Noise clip [0,0] removes sampling stochasticity so finite
        // differences see a deterministic function.
        let mut spec = tiny_spec();
        spec.noise_clip = (0.0, 0.0);
        let mut rng = Rng::new(11);
        let params = spec.init(&mut rng).unwrap();
        let x = Tensor::rand_uniform(&[2, 4, 4, 1], 0.1, 0.9, &mut rng);

        let eval = |spec: &VaeSpec, params: &ParamSet, x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let mut r = Rng::new(99);
            let fwd = vae_forward(&mut tape, spec, params, xv, Mode::Train, &mut r).unwrap();
            let parts = vae_loss_tape(&mut tape, spec, &fwd, xv).unwrap();
            tape.value(parts.loss).data()[0] as f64
        };

        // Analytic gradient of the first encoder dense weight.
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut r = Rng::new(99);
        let fwd = vae_forward(&mut tape, &spec, &params, xv, Mode::Train, &mut r).unwrap();
        let parts = vae_loss_tape(&mut tape, &spec, &fwd, xv).unwrap();
        let grads = tape.backward(parts.loss).unwrap();
        let target = "enc.dense1.weight";
        let var = fwd
            .param_vars
            .iter()
            .find(|(n, _)| n == target)
            .map(|(_, v)| *v)
            .unwrap();
        let analytic = grads.get(var).unwrap().clone();

        let w0 = params.get(target).unwrap().clone();
        let f = |probe: &Tensor| {
            let mut p2 = spec.init(&mut Rng::new(11)).unwrap();
            // Rebuild the same params, then swap in the probed weight.
            for (name, t) in params.iter() {
                p2.set(name, t.clone()).unwrap();
            }
            p2.set(target, probe.clone()).unwrap();
            Ok(eval(&spec, &p2, &x))
        };
        crate::gradcheck::verify(f, &w0, &analytic, crate::gradcheck::DEFAULT_H, 2e-3).unwrap();
    }
}
