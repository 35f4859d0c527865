//! Finite-difference verification of tape gradients.
//!
//! Central differences with a default step of 1e-3, compared against the
//! analytic gradient by vector-norm relative error with a pass bar of 1e-3.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_H: f32 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    /// ||analytic - numeric||2 / max(||analytic||2 + ||numeric||2, 1e-12)
    pub rel_err: f64,
    pub max_abs_diff: f64,
}

/// Central-difference gradient of a scalar function evaluated elementwise.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("step size {h} must be positive")));
    }
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = ((plus - minus) / (2.0 * h as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

pub fn compare_gradients(analytic: &Tensor, numeric: &Tensor) -> Result<GradReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "compare_gradients",
            analytic.shape(),
            numeric.shape(),
        ));
    }
    let mut diff_sq = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let d = (a - n) as f64;
        diff_sq += d * d;
        max_abs = max_abs.max(d.abs());
    }
    let denom = (analytic.l2_norm() + numeric.l2_norm()).max(1e-12);
    Ok(GradReport {
        rel_err: diff_sq.sqrt() / denom,
        max_abs_diff: max_abs,
    })
}

/// Run the finite-difference check and fail if the relative error exceeds
/// `tol`.
pub fn verify<F>(f: F, x: &Tensor, analytic: &Tensor, h: f32, tol: f64) -> Result<GradReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let numeric = fd_gradient(f, x, h)?;
    let report = compare_gradients(analytic, &numeric)?;
    if !report.rel_err.is_finite() || report.rel_err > tol {
        return Err(Error::Domain {
            op: "gradcheck".into(),
            detail: format!(
                "relative error {:.3e} exceeds tolerance {tol:.1e}",
                report.rel_err
            ),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::tape::{Tape, Var};

    /// Check analytic vs numeric gradients of `build` with respect to every
    /// input tensor, one at a time.
    fn check_multi(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
        let grads = tape.backward(loss).unwrap();

        for (j, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[j]).unwrap().clone();
            let f = |probe: &Tensor| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, inp)| t.leaf(if k == j { probe.clone() } else { inp.clone() }, true))
                    .collect();
                let l = build(&mut t, &vs);
                Ok(t.value(l).data()[0] as f64)
            };
            let report = verify(f, x, &analytic, DEFAULT_H, DEFAULT_TOL)
                .unwrap_or_else(|e| panic!("input {j}: {e}"));
            assert!(report.rel_err < DEFAULT_TOL);
        }
    }

    fn rand_t(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, rng)
    }

    #[test]
    fn unary_chain() {
        let mut rng = Rng::new(101);
        // Positive inputs keep log in-domain.
        let x = rand_t(&mut rng, &[3, 4], 0.5, 2.0);
        let r = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let lg = t.log(vs[0]);
                let sg = t.sigmoid(lg);
                let th = t.tanh(sg);
                let ex = t.exp(th);
                let ng = t.neg(ex);
                let rr = t.constant(r.clone());
                let p = t.mul(ng, rr).unwrap();
                t.sum_all(p)
            },
            &[x],
        );
    }

    #[test]
    fn relu_and_clip_away_from_kinks() {
        let mut rng = Rng::new(102);
        // Keep samples clear of the relu kink at 0 and clip edges at +-0.8.
        let x = Tensor::new(
            vec![24],
            (0..24)
                .map(|_| {
                    let v = rng.uniform_in(0.05, 0.7);
                    if rng.uniform() < 0.5 {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap();
        let mut prng = Rng::new(103);
        let r = rand_t(&mut prng, &[24], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let c = t.clip(vs[0], -0.8, 0.8).unwrap();
                let rl = t.relu(c);
                let rr = t.constant(r.clone());
                let p = t.mul(rl, rr).unwrap();
                t.sum_all(p)
            },
            &[x],
        );
    }

    #[test]
    fn binary_elementwise() {
        let mut rng = Rng::new(104);
        let a = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
        // Denominators bounded away from zero.
        let b = rand_t(&mut rng, &[4, 3], 0.5, 1.5);
        let r = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let prod = t.mul(vs[0], vs[1]).unwrap();
                let sum = t.add(vs[0], vs[1]).unwrap();
                let diff = t.sub(prod, sum).unwrap();
                let q = t.div(diff, vs[1]).unwrap();
                let sc = t.mul_scalar(q, 1.5);
                let sa = t.add_scalar(sc, 0.25);
                let rs = t.rsub_scalar(sa, 2.0);
                let rr = t.constant(r.clone());
                let p = t.mul(rs, rr).unwrap();
                t.sum_all(p)
            },
            &[a, b],
        );
    }

    #[test]
    fn dense_layer() {
        let mut rng = Rng::new(105);
        let x = rand_t(&mut rng, &[3, 5], -1.0, 1.0);
        let w = rand_t(&mut rng, &[5, 4], -0.5, 0.5);
        let b = rand_t(&mut rng, &[4], -0.5, 0.5);
        let r = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let mm = t.matmul(vs[0], vs[1]).unwrap();
                let y = t.add_row_vec(mm, vs[2]).unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(y, rr).unwrap();
                t.sum_all(p)
            },
            &[x, w, b],
        );
    }

    #[test]
    fn conv2d_all_parents() {
        let mut rng = Rng::new(106);
        let x = rand_t(&mut rng, &[2, 4, 5, 3], -1.0, 1.0);
        let w = rand_t(&mut rng, &[3, 3, 3, 2], -0.3, 0.3);
        let b = rand_t(&mut rng, &[2], -0.2, 0.2);
        let r = rand_t(&mut rng, &[2, 4, 5, 2], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let y = t.conv2d(vs[0], vs[1], Some(vs[2])).unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(y, rr).unwrap();
                t.sum_all(p)
            },
            &[x, w, b],
        );
    }

    #[test]
    fn tconv2d_all_parents() {
        let mut rng = Rng::new(107);
        let x = rand_t(&mut rng, &[2, 4, 4, 2], -1.0, 1.0);
        // Transposed layout: [kh, kw, c_out, c_in].
        let w = rand_t(&mut rng, &[3, 3, 3, 2], -0.3, 0.3);
        let b = rand_t(&mut rng, &[3], -0.2, 0.2);
        let r = rand_t(&mut rng, &[2, 4, 4, 3], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let y = t.tconv2d(vs[0], vs[1], Some(vs[2])).unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(y, rr).unwrap();
                t.sum_all(p)
            },
            &[x, w, b],
        );
    }

    #[test]
    fn tconv2d_is_adjoint_of_conv2d() {
        // <conv(x), u> == <x, tconv(u)> when both share the weight tensor
        // (transposed layout) and no bias.
        let mut rng = Rng::new(108);
        let x = rand_t(&mut rng, &[1, 5, 5, 2], -1.0, 1.0);
        let u = rand_t(&mut rng, &[1, 5, 5, 3], -1.0, 1.0);
        let w = rand_t(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, None).unwrap();
        let lhs: f64 = t
            .value(y)
            .data()
            .iter()
            .zip(u.data())
            .map(|(&a, &b)| (a * b) as f64)
            .sum();

        let uv = t.constant(u);
        let v = t.tconv2d(uv, wv, None).unwrap();
        let rhs: f64 = t
            .value(v)
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a * b) as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_and_upsample() {
        let mut rng = Rng::new(109);
        // Uniform random values make 2x2 ties vanishingly unlikely.
        let x = rand_t(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
        let r = rand_t(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let p = t.maxpool2x2(vs[0]).unwrap();
                let u = t.upsample2x(p).unwrap();
                let rr = t.constant(r.clone());
                let m = t.mul(u, rr).unwrap();
                t.sum_all(m)
            },
            &[x],
        );
    }

    #[test]
    fn reshape_slice_mean() {
        let mut rng = Rng::new(110);
        let x = rand_t(&mut rng, &[2, 6], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let r = t.reshape(vs[0], vec![3, 4]).unwrap();
                let s = t.slice_last_dim(r, 1, 2).unwrap();
                t.mean_all(s)
            },
            &[x],
        );
    }

    #[test]
    fn softmax_cross_entropy_logits() {
        let mut rng = Rng::new(111);
        let logits = rand_t(&mut rng, &[4, 6], -2.0, 2.0);
        let labels = vec![0usize, 3, 5, 2];
        check_multi(
            &|t, vs| t.softmax_cross_entropy(vs[0], &labels).unwrap(),
            &[logits],
        );
    }

    #[test]
    fn batch_norm_train_all_parents() {
        let mut rng = Rng::new(112);
        let x = rand_t(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        let gamma = rand_t(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_t(&mut rng, &[2], -0.5, 0.5);
        let r = rand_t(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let (y, _, _) = t.batch_norm_train(vs[0], vs[1], vs[2], 1e-5).unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(y, rr).unwrap();
                t.sum_all(p)
            },
            &[x, gamma, beta],
        );
    }

    #[test]
    fn batch_norm_eval_all_parents() {
        let mut rng = Rng::new(113);
        let x = rand_t(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        let gamma = rand_t(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_t(&mut rng, &[2], -0.5, 0.5);
        let running_mean = vec![0.1f32, -0.2];
        let running_var = vec![0.8f32, 1.3];
        let r = rand_t(&mut rng, &[2, 3, 3, 2], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                let y = t
                    .batch_norm_eval(vs[0], vs[1], vs[2], &running_mean, &running_var, 1e-5)
                    .unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(y, rr).unwrap();
                t.sum_all(p)
            },
            &[x, gamma, beta],
        );
    }

    #[test]
    fn dropout_with_fixed_mask() {
        let mut rng = Rng::new(114);
        let x = rand_t(&mut rng, &[5, 5], -1.0, 1.0);
        let r = rand_t(&mut rng, &[5, 5], -1.0, 1.0);
        // Reseeding inside the closure pins the mask across FD evaluations.
        check_multi(
            &|t, vs| {
                let mut drng = Rng::new(42);
                let d = t.dropout(vs[0], 0.4, &mut drng).unwrap();
                let rr = t.constant(r.clone());
                let p = t.mul(d, rr).unwrap();
                t.sum_all(p)
            },
            &[x],
        );
    }

    #[test]
    fn gaussian_kl_style_composite() {
        let mut rng = Rng::new(115);
        let mu = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        let logvar = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        check_multi(
            &|t, vs| {
                // 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
                let mu2 = t.mul(vs[0], vs[0]).unwrap();
                let var = t.exp(vs[1]);
                let s1 = t.add(mu2, var).unwrap();
                let s2 = t.add_scalar(s1, -1.0);
                let s3 = t.sub(s2, vs[1]).unwrap();
                let total = t.sum_all(s3);
                t.mul_scalar(total, 0.5)
            },
            &[mu, logvar],
        );
    }

    #[test]
    fn rejects_bad_step_and_shapes() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(fd_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(compare_gradients(&a, &b).is_err());
    }
}
