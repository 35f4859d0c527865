//! Loss builders. Each records its computation on the tape so gradients
//! flow back through the model.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};

/// Numerical floor used when clamping probabilities before a log.
pub const PROB_EPS: f32 = 1e-7;

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean squared error over all elements.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Mean binary cross-entropy over all elements. Predictions are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]` so endpoints stay finite; targets must lie in
/// `[0, 1]`.
pub fn bce(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    {
        let t = tape.value(target);
        if t.min() < 0.0 || t.max() > 1.0 {
            return Err(Error::Domain {
                op: "bce".into(),
                detail: format!("targets must lie in [0, 1], got [{}, {}]", t.min(), t.max()),
            });
        }
    }
    let p = tape.clip(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p);
    let pos = tape.mul(target, log_p)?;
    let one_minus_p = tape.rsub_scalar(p, 1.0);
    let log_q = tape.log(one_minus_p);
    let one_minus_t = tape.rsub_scalar(target, 1.0);
    let neg = tape.mul(one_minus_t, log_q)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean_all(total);
    Ok(tape.neg(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn mse_of_constant_offset() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::full(&[3, 4], 0.75), true);
        let y = t.constant(Tensor::full(&[3, 4], 0.25));
        let l = mse(&mut t, p, y).unwrap();
        assert!((t.value(l).data()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::full(&[8], 0.5), true);
        let y = t.constant(Tensor::full(&[8], 0.5));
        let l = bce(&mut t, p, y).unwrap();
        assert!((t.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_is_finite_at_endpoints() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![0.0, 1.0, 0.0, 1.0]), true);
        let y = t.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0]));
        let l = bce(&mut t, p, y).unwrap();
        assert!(t.value(l).data()[0].is_finite());
        let g = t.backward(l).unwrap();
        assert!(g.get(p).unwrap().is_finite());
    }

    #[test]
    fn bce_rejects_targets_outside_unit_interval() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::full(&[2], 0.5), true);
        let y = t.constant(Tensor::from_vec(vec![0.5, 1.5]));
        assert!(bce(&mut t, p, y).is_err());
    }

    #[test]
    fn cross_entropy_matches_manual_softmax() {
        let mut t = Tape::new();
        let logits = t.leaf(
            Tensor::new(vec![2, 3], vec![0.2, -0.4, 1.1, 2.0, 0.0, -1.0]).unwrap(),
            true,
        );
        let l = cross_entropy(&mut t, logits, &[2, 0]).unwrap();
        let rows = [[0.2f64, -0.4, 1.1], [2.0, 0.0, -1.0]];
        let mut want = 0.0;
        for (row, y) in rows.iter().zip([2usize, 0]) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        want /= 2.0;
        assert!((t.value(l).data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn bce_gradient_passes_fd_check() {
        let mut rng = Rng::new(55);
        let pred = Tensor::rand_uniform(&[3, 5], 0.1, 0.9, &mut rng);
        let target = Tensor::rand_uniform(&[3, 5], 0.0, 1.0, &mut rng);
        let build = |probe: &Tensor| {
            let mut t = Tape::new();
            let p = t.leaf(probe.clone(), true);
            let y = t.constant(target.clone());
            let l = bce(&mut t, p, y).unwrap();
            Ok(t.value(l).data()[0] as f64)
        };
        let mut t = Tape::new();
        let p = t.leaf(pred.clone(), true);
        let y = t.constant(target.clone());
        let l = bce(&mut t, p, y).unwrap();
        let g = t.backward(l).unwrap();
        crate::gradcheck::verify(
            build,
            &pred,
            g.get(p).unwrap(),
            crate::gradcheck::DEFAULT_H,
            crate::gradcheck::DEFAULT_TOL,
        )
        .unwrap();
    }
}
