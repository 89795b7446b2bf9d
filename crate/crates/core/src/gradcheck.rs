//! Central finite-difference oracle for the autograd tape.

use crate::autograd::{Tape, Var};
use crate::error::{EvoError, Result};
use crate::model::batch::TokenBatch;
use crate::model::Model;
use crate::objectives::total_loss;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `backward()` against central differences for a scalar function
/// of one tensor and returns the largest relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant: every coordinate of every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(EvoError::contract("finite-difference step must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(*a, numeric));
        }
    }
    Ok(worst)
}

/// Worst probe of a model-level check.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub worst: f64,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Directional probes evaluated.
    pub probes: usize,
}

/// Checks the gradient of `total_loss` against central differences along
/// `directions` random unit directions inside every trainable tensor.
///
/// Per-coordinate differences of a whole-model loss bottom out at roundoff
/// (about `eps·L/h`), which swamps coordinates whose true gradient is tiny.
/// A directional derivative `g·d` has the magnitude of the tensor's whole
/// gradient, so the comparison measures the backward pass instead of noise.
pub fn finite_diff_check_model(
    model: &Model,
    batch: &TokenBatch,
    alpha: f64,
    h: f64,
    directions: usize,
    rng: &mut Rng,
) -> Result<ModelGradCheck> {
    if h <= 0.0 {
        return Err(EvoError::contract("finite-difference step must be positive"));
    }
    let loss_of = |m: &Model| -> Result<f64> {
        let mut fwd = m.forward(batch)?;
        Ok(total_loss(&mut fwd, &batch.targets, alpha)?.1.total)
    };
    let mut fwd = model.forward(batch)?;
    let (loss, _) = total_loss(&mut fwd, &batch.targets, alpha)?;
    let vars = std::mem::take(&mut fwd.param_vars);
    let grads = fwd.tape.backward(loss)?;

    let mut work = model.clone();
    let mut report = ModelGradCheck {
        worst: 0.0,
        param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if !model.params().is_trainable(id) {
            continue;
        }
        let orig = model.params().tensor(id).data().to_vec();
        let g = grads.wrt(vars[id.0]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; orig.len()]);
        for _ in 0..directions {
            let mut d = rng.normal_vec(orig.len(), 0.0, 1.0);
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.iter_mut().for_each(|x| *x /= norm);
            let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let shifted = |sign: f64| -> Vec<f64> { orig.iter().zip(&d).map(|(o, x)| o + sign * h * x).collect() };
            work.params_mut().assign(id, &shifted(1.0))?;
            let plus = loss_of(&work)?;
            work.params_mut().assign(id, &shifted(-1.0))?;
            let minus = loss_of(&work)?;
            work.params_mut().assign(id, &orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.probes += 1;
            if err > report.worst {
                report = ModelGradCheck {
                    worst: err,
                    param: name.clone(),
                    analytic,
                    numeric,
                    probes: report.probes,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = Rng::new(3, 0);
        let x = Tensor::new([3, 4], rng.normal_vec(12, 0.0, 1.0)).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn half_square_norm() {
        let mut rng = Rng::new(4, 0);
        let x = Tensor::new([5], rng.normal_vec(5, 0.0, 1.0)).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros([2]);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
