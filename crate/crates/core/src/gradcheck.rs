//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by the checks in this crate.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Comparison of one parameter tensor's analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub grad_norm: f64,
}

/// Relative error between two gradient vectors, robust to all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks `loss(params)` against central differences with step `step`.
///
/// `loss` builds a scalar on the supplied tape from leaves registered for
/// each parameter (in order).
pub fn check_gradients<F>(params: &[Tensor], step: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
        let out = loss(&tape, &leaves)?;
        let grads = out.backward()?;
        leaves.iter().map(|v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p)).collect();
        Ok(loss(&tape, &leaves)?.item())
    };

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let max_abs_err = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        report.push(ParamCheck {
            index: pi,
            rel_err: relative_error(a.data(), &numeric),
            max_abs_err,
            grad_norm: a.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_ok(report: &[ParamCheck]) {
        for c in report {
            assert!(c.rel_err <= 1e-4, "param {} rel err {:.3e}", c.index, c.rel_err);
        }
    }

    /// Every differentiable op, three random inputs each.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let a = rand_tensor(&mut rng, &[2, 3, 4]);
            let b = rand_tensor(&mut rng, &[2, 3, 4]);
            let row = rand_tensor(&mut rng, &[4]);
            let w = rand_tensor(&mut rng, &[3, 4, 5]);
            let m = rand_tensor(&mut rng, &[4, 3]);
            let pos = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(0.5..2.0));
            let s = rand_tensor(&mut rng, &[6]);
            let params = vec![a, b, row.clone(), row, w, m, pos, s];
            let report = check_gradients(&params, DEFAULT_STEP, |_, v| {
                let (a, b, r, g, w, m, pos, s) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
                let x = a.mul(&b).add(&a.sub(&b).scale(0.3)).div(&pos);
                let x = x.add_row(&r).mul_row(&g).swish().add_scalar(0.1);
                let y = x.tokenwise_matmul(&w); // [2,3,5]
                let z = a.reshape(&[6, 4]).matmul(&m); // [6,3]
                let zz = z.scale_rows(&s).reshape(&[2, 3, 3]);
                let att = zz.bmm(&b, false).bmm(&a, true); // [2,3,3]
                let ln = b.layer_norm(&r, &g, 1e-5);
                let cat = Var::concat(&[y, ln.slice(2, 1, 2)], 2); // [2,3,7]
                let perm = cat.permute(&[1, 0, 2]).sum_axis(1); // [3,7]
                let sm = perm.softmax().mul(&perm).sum();
                let lse = att.logsumexp().square().sum();
                let sig = z.sigmoid().sum();
                let msk: Vec<bool> = (0..18).map(|i| i % 3 != 1).collect();
                let ms = z.masked_softmax(&msk).mul(&z).sum();
                let idx = Rc::new(vec![0, 5, 5, 11, 17]);
                let gat = z.gather(Rc::clone(&idx), &[5]);
                let sc = gat.scatter_add(idx, &[6, 3]).mul(&z).sum();
                let bce = att.reshape(&[18]).bce_with_logits(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
                Ok(sm.add(&lse.scale(0.01)).add(&sig).add(&ms).add(&sc).add(&bce).add(&x.mean_axis(0).mean()))
            })
            .unwrap();
            assert_ok(&report);
        }
    }

    #[test]
    fn retokenize_gradient_is_all_ones() {
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 + 1.0);
        let report = check_gradients(std::slice::from_ref(&x), DEFAULT_STEP, |_, v| Ok(v[0].reshape(&[1, 8]).sum())).unwrap();
        assert_ok(&report);
        let tape = Tape::new();
        let leaf = tape.leaf(&x);
        let g = leaf.reshape(&[1, 8]).sum().backward().unwrap().get(&leaf).unwrap();
        assert_eq!(g, Tensor::full(&[2, 4], 1.0));
    }
}
