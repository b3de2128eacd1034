//! Central-difference gradient checking.
//!
//! The whole point of a hand-rolled autodiff core is that this file can
//! hold it to account. `gradcheck` evaluates a scalar-valued graph
//! function at `x`, gets the analytic gradient from `backward`, then
//! perturbs every coordinate of `x` by ±step and compares.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Builds a scalar graph value from leaf variables.
pub type GraphFn<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks `f`'s gradient with respect to every tensor in `inputs`.
/// Returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates of all inputs. Non-finite values anywhere fail loudly,
/// naming the input and coordinate.
pub fn gradcheck_multi(f: GraphFn, inputs: &[Tensor], step: f64) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        if g.numel(out) != 1 {
            return Err(Error::invalid("gradcheck: function must produce a scalar"));
        }
        Ok(g.value(out)[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.numel(out) != 1 {
        return Err(Error::invalid("gradcheck: function must produce a scalar"));
    }
    if !g.value(out)[0].is_finite() {
        return Err(Error::NonFinite("gradcheck: function value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.numel(v)]))
        .collect();
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, v) in grads.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck: analytic gradient, input {ti} coordinate {i}")));
            }
        }
    }

    // Numeric pass, one coordinate at a time.
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.iter().map(|t| t.clone()).collect();
    for ti in 0..probe.len() {
        for i in 0..probe[ti].numel() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let f_plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - step;
            let f_minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck: perturbed value, input {ti} coordinate {i}")));
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`gradcheck_multi`].
pub fn gradcheck(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, input: &Tensor, step: f64) -> Result<f64> {
    gradcheck_multi(&|g, vars| f(g, vars[0]), &[input.clone()], step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_float_noise() {
        let x = Tensor::new(&[4], vec![0.5, -1.25, 2.0, 0.125]).unwrap();
        let err = gradcheck(
            &|g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn batch_norm_gradcheck_all_inputs() {
        // 2 images, 2 channels, 2x2.
        let x = Tensor::new(
            &[2, 2, 2, 2],
            vec![
                0.3, -1.2, 0.7, 0.1, 1.5, -0.4, 0.9, -0.8, -0.2, 0.6, -1.1, 0.4, 0.2, 1.3, -0.5, 0.8,
            ],
        )
        .unwrap();
        let gamma = Tensor::new(&[2], vec![1.2, 0.8]).unwrap();
        let beta = Tensor::new(&[2], vec![0.1, -0.3]).unwrap();
        let err = gradcheck_multi(
            &|g, vars| {
                let y = g.batch_norm_train(vars[0], vars[1], vars[2], 1e-5)?;
                // A non-uniform weighting so the reduction is not blind
                // to per-element sign errors.
                let w: Vec<f64> = (0..16).map(|i| 0.1 * (i as f64) - 0.7).collect();
                let wv = g.constant(&[2, 2, 2, 2], w)?;
                let prod = g.mul(y, wv)?;
                Ok(g.sum_all(prod))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let x = Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap();
        let err = gradcheck(
            &|g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{}", err);
    }
}
