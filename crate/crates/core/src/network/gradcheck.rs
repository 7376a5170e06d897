use rand_distr::{Distribution, StandardNormal};

use super::is_frozen_by_design;
use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{rng_from, tag};

/// A scalar loss over a parameter set.
pub trait Objective<T: Real>: Sync {
    /// Returns the loss and, when `grads` is given, accumulates `dL/dθ`
    /// into it. `grads` is shape-congruent with `params` and zeroed.
    fn evaluate(&self, params: &ParamSet<T>, grads: Option<&mut Gradients<T>>) -> Result<T>;
}

/// Loss and exact reverse-mode gradients for every tensor of `p`.
pub fn backward<T: Real>(p: &ParamSet<T>, objective: &dyn Objective<T>) -> Result<(T, Gradients<T>)> {
    let mut g = p.zeros_like();
    let loss = objective.evaluate(p, Some(&mut g))?;
    if !loss.is_finite() {
        return Err(Error::Numeric { tensor: "loss".into() });
    }
    if let Some(name) = g.first_non_finite() {
        return Err(Error::Numeric { tensor: name.to_string() });
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Random unit directions sampled inside each tensor.
    pub directions_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, directions_per_tensor: 3, seed: 0 }
    }
}

/// Compare analytic gradients from `objective` against central differences
/// `(L(θ+εu) − L(θ−εu)) / 2ε` of `reference`, the same loss evaluated in
/// `f64`. Each probe `u` is a random unit vector supported on one tensor.
/// Returns the largest `|analytic − numeric| / max(|numeric|, ‖g‖, 1e-8)`,
/// where `‖g‖` is the norm of the tensor's analytic gradient. A random probe
/// is nearly orthogonal to `g` in high dimension, and dividing by the tiny
/// projection alone would report rounding noise as error.
///
/// Tensors that are frozen by design carry no gradient and are skipped.
pub fn grad_check<T: Real>(p: &ParamSet<T>, objective: &dyn Objective<T>, reference: &dyn Objective<f64>, cfg: &GradCheckConfig) -> Result<f64> {
    let (_, g) = backward(p, objective)?;
    let base = p.cast::<f64>();
    let mut rng = rng_from(cfg.seed, &[tag("gradcheck")]);
    let mut worst = 0.0f64;
    for (ti, t) in base.tensors.iter().enumerate() {
        if is_frozen_by_design(&t.name) {
            continue;
        }
        let g_norm = g.tensors[ti].data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        for _ in 0..cfg.directions_per_tensor {
            let mut u: Vec<f64> = (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= n);
            let analytic: f64 = g.tensors[ti].data.iter().zip(&u).map(|(a, b)| a.as_f64() * b).sum();
            let mut plus = base.clone();
            let mut minus = base.clone();
            for (i, ui) in u.iter().enumerate() {
                plus.tensors[ti].data[i] += cfg.eps * ui;
                minus.tensors[ti].data[i] -= cfg.eps * ui;
            }
            let numeric = (reference.evaluate(&plus, None)? - reference.evaluate(&minus, None)?) / (2.0 * cfg.eps);
            let rel = (analytic - numeric).abs() / numeric.abs().max(g_norm).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// `L(θ) = ½‖θ‖²`, whose gradient is `θ`.
pub struct Quadratic;

impl<T: Real> Objective<T> for Quadratic {
    fn evaluate(&self, params: &ParamSet<T>, grads: Option<&mut Gradients<T>>) -> Result<T> {
        let loss = params.tensors.iter().flat_map(|t| t.data.iter()).fold(T::zero(), |acc, &v| acc + v * v) * T::lit(0.5);
        if let Some(g) = grads {
            g.add_scaled(T::one(), params);
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Group, Tensor};

    fn params(seed: u64) -> ParamSet<f64> {
        let mut rng = rng_from(seed, &[]);
        let mut p = ParamSet::new();
        for (i, n) in [5usize, 12].iter().enumerate() {
            let mut t = Tensor::zeros(format!("t{i}"), vec![*n], Group::PostPooling);
            t.data.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            p.push(t);
        }
        p
    }

    #[test]
    fn quadratic_gradient_is_theta() {
        let p = params(1);
        let (loss, g) = backward(&p, &Quadratic).unwrap();
        assert_eq!(g, p);
        let expect: f64 = p.tensors.iter().flat_map(|t| &t.data).map(|v| v * v).sum::<f64>() / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn quadratic_passes_finite_differences() {
        let p = params(2);
        let err = grad_check(&p, &Quadratic, &Quadratic, &GradCheckConfig { eps: 1e-5, ..Default::default() }).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    struct Broken;
    impl Objective<f64> for Broken {
        fn evaluate(&self, params: &ParamSet<f64>, grads: Option<&mut Gradients<f64>>) -> Result<f64> {
            if let Some(g) = grads {
                g.tensors[1].data[0] = f64::NAN;
            }
            Ok(params.tensors[0].data[0])
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let err = backward(&params(3), &Broken).unwrap_err();
        assert!(matches!(err, Error::Numeric { tensor } if tensor == "t1"));
    }
}
