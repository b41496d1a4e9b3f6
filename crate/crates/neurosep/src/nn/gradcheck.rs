//! Central finite-difference verification of analytic gradients.
//!
//! `grad_check` compares the tape's backward pass against a two-sided
//! difference quotient for every scalar in the given parameters. The
//! relative error uses a denominator floor of `1e-3 * max|grad|`: large
//! gradients are checked to the stated relative tolerance, negligible ones
//! to a proportional absolute tolerance (their pure relative error is
//! dominated by f64 cancellation noise in the difference quotient).

use crate::nn::params::{Binder, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub checked_scalars: usize,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {} at {}[{:?}] (checked {} scalars)",
            self.max_rel_err,
            self.worst_param,
            self.worst_index,
            self.checked_scalars
        );
    }
}

/// Checks d(forward)/d(param) for every scalar of every parameter in `ids`.
///
/// `forward` must be a deterministic function of the store contents (run
/// your model in eval mode). `h` is the absolute probe step.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    forward: F,
) -> GradCheckReport
where
    F: Fn(&Tape, &Binder) -> Var,
{
    // Analytic pass.
    let analytic = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let out = forward(&tape, &binder);
        assert_eq!((out.rows(), out.cols()), (1, 1), "forward must be scalar");
        let grads = tape.backward(out);
        binder.collect(&grads)
    };

    let grad_scale = ids
        .iter()
        .filter_map(|id| analytic.grads.get(id))
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * grad_scale).max(1e-12);

    let eval = |store: &ParamStore| -> f64 {
        let tape = Tape::inference();
        let binder = Binder::new(&tape, store);
        let out = forward(&tape, &binder);
        tape.scalar(out)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        checked_scalars: 0,
    };
    for &id in ids {
        let (rows, cols) = store.value(id).dim();
        let zero = ndarray::Array2::zeros((rows, cols));
        let a_grad = analytic.grads.get(&id).unwrap_or(&zero);
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(id)[[i, j]];
                store.value_mut(id)[[i, j]] = orig + h;
                let f_plus = eval(store);
                store.value_mut(id)[[i, j]] = orig - h;
                let f_minus = eval(store);
                store.value_mut(id)[[i, j]] = orig;

                let fd = (f_plus - f_minus) / (2.0 * h);
                let a = a_grad[[i, j]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                report.checked_scalars += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = (i, j);
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_correct_and_broken_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(&mut store, "t.lin", 3, 2, &mut rng);
        let x = ndarray::Array2::from_shape_fn((4, 3), |(i, j)| 0.1 * (i as f64 - j as f64) + 0.2);
        let ids: Vec<ParamId> = store.ids().collect();

        let x2 = x.clone();
        let report = grad_check(&mut store, &ids, 1e-5, move |tape, bind| {
            let xv = tape.leaf(x2.clone());
            let y = lin.apply(bind, xv);
            tape.sum_all(tape.mul(y, y))
        });
        assert!(report.checked_scalars >= 8);
        report.assert_below(1e-6);
    }
}
