//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ops::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// A scalar function of a fixed parameter list.
pub trait Objective {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// Evaluates the loss. With `grad` set, parameter gradients are reset
    /// and filled with the analytic gradient.
    fn evaluate(&mut self, grad: bool) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_coords: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares analytic gradients of `objective` with `(f(θ+h) − f(θ−h)) / 2h`.
/// A parameter passes when its largest relative error is strictly below
/// `tol`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &mut O,
    cfg: &CheckConfig,
) -> Result<GradReport> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        )));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::Config(format!("tolerance must be >= 0, got {}", cfg.tol)));
    }
    let loss = objective.evaluate(true)?;
    let analytic: Vec<(String, Tensor)> = objective
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if cfg.max_coords == 0 || cfg.max_coords >= n {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let original = objective.params()[pi].value.data()[c];
            objective.params_mut()[pi].value.data_mut()[c] = original + cfg.step;
            let plus = objective.evaluate(false);
            objective.params_mut()[pi].value.data_mut()[c] = original - cfg.step;
            let minus = objective.evaluate(false);
            objective.params_mut()[pi].value.data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let err = relative_error(grad.data()[c], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        checks.push(ParamCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: worst,
            passed: worst < cfg.tol,
        });
    }
    Ok(GradReport {
        loss,
        params: checks,
    })
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let plus = f(&probe);
        probe.data_mut()[i] = v - h;
        let minus = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ‖θ‖²
    struct Quadratic {
        theta: Param,
        wrong_grad: bool,
    }

    impl Objective for Quadratic {
        fn params(&self) -> Vec<&Param> {
            vec![&self.theta]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.theta]
        }
        fn evaluate(&mut self, grad: bool) -> Result<f64> {
            let v = self.theta.value.data();
            if grad {
                let scale = if self.wrong_grad { 3.0 } else { 2.0 };
                let g: Vec<f64> = v.iter().map(|x| scale * x).collect();
                self.theta.grad.data_mut().copy_from_slice(&g);
            }
            Ok(v.iter().map(|x| x * x).sum())
        }
    }

    fn quadratic(values: Vec<f64>, wrong_grad: bool) -> Quadratic {
        let n = values.len();
        Quadratic {
            theta: Param::new("theta", Tensor::from_vec(&[n], values).unwrap()),
            wrong_grad,
        }
    }

    #[test]
    fn quadratic_at_one() {
        let mut q = quadratic(vec![1.0], false);
        let report = finite_diff_check(&mut q, &CheckConfig::default()).unwrap();
        assert_eq!(q.theta.grad.data()[0], 2.0);
        assert!(report.params[0].max_rel_err < 1e-10);
        assert!(report.passed());
        // parameters are restored
        assert_eq!(q.theta.value.data()[0], 1.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut q = quadratic(vec![1.0, -2.0, 0.5], false);
        q.wrong_grad = true;
        let report = finite_diff_check(&mut q, &CheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let mut q = quadratic(vec![1.0], false);
        let cfg = CheckConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(!finite_diff_check(&mut q, &cfg).unwrap().passed());
    }

    #[test]
    fn zero_step_is_config_error() {
        let mut q = quadratic(vec![1.0], false);
        let cfg = CheckConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(matches!(finite_diff_check(&mut q, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn coordinate_sampling() {
        let mut q = quadratic((0..50).map(|i| i as f64 * 0.1).collect(), false);
        let cfg = CheckConfig {
            max_coords: 7,
            ..Default::default()
        };
        let a = finite_diff_check(&mut q, &cfg).unwrap();
        let b = finite_diff_check(&mut q, &cfg).unwrap();
        assert_eq!(a.params[0].coords, 7);
        assert_eq!(a, b);
    }
}
