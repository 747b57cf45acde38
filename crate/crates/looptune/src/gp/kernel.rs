use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::fastmath::exp as fastexp;
use crate::{Error, Result};

/// Stationary kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
    Matern52,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::SquaredExponential => "se",
            KernelKind::Matern52 => "matern52",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "se" => Ok(KernelKind::SquaredExponential),
            "matern52" => Ok(KernelKind::Matern52),
            other => Err(Error::Parse(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// A kernel with one lengthscale per input dimension and a signal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec { kind, signal_variance, lengthscales };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "signal variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("lengthscales must be positive and finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Squared scaled distance between two points.
    fn r2(&self, a: DVectorView<f64>, b: DVectorView<f64>) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.lengthscales.len() {
            let t = (a[d] - b[d]) / self.lengthscales[d];
            acc += t * t;
        }
        acc
    }

    pub fn eval(&self, a: DVectorView<f64>, b: DVectorView<f64>) -> f64 {
        let r2 = self.r2(a, b);
        match self.kind {
            KernelKind::SquaredExponential => self.signal_variance * fastexp(-0.5 * r2),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let s = 5.0_f64.sqrt() * r;
                self.signal_variance * (1.0 + s + s * s / 3.0) * fastexp(-s)
            }
        }
    }

    /// Kernel value at zero distance.
    pub fn eval_self(&self) -> f64 {
        self.signal_variance
    }

    /// Gram matrix of the row-point set `x` (n x d).
    pub fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval(x.row(i).transpose().as_view(), x.row(j).transpose().as_view());
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Cross-covariance between row-point sets `a` (n x d) and `b` (m x d).
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(a.nrows(), b.nrows());
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                k[(i, j)] =
                    self.eval(a.row(i).transpose().as_view(), b.row(j).transpose().as_view());
            }
        }
        k
    }

    /// Partial derivatives of `k(a, b)` with respect to the log-space
    /// hyperparameters, ordered `[log signal_variance, log l_1, ...]`.
    pub fn grad_log_params(&self, a: DVectorView<f64>, b: DVectorView<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), 1 + self.lengthscales.len());
        let r2 = self.r2(a, b);
        match self.kind {
            KernelKind::SquaredExponential => {
                let k = self.signal_variance * fastexp(-0.5 * r2);
                out[0] = k;
                for d in 0..self.lengthscales.len() {
                    let t = (a[d] - b[d]) / self.lengthscales[d];
                    out[d + 1] = k * t * t;
                }
            }
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                let s = 5.0_f64.sqrt() * r;
                let e = fastexp(-s);
                let k = self.signal_variance * (1.0 + s + s * s / 3.0) * e;
                out[0] = k;
                // dk/d(log l_d) = sv * (5/3)(1 + s) e^(-s) * t_d^2
                let common = self.signal_variance * (5.0 / 3.0) * (1.0 + s) * e;
                for d in 0..self.lengthscales.len() {
                    let t = (a[d] - b[d]) / self.lengthscales[d];
                    out[d + 1] = common * t * t;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    #[test]
    fn se_kernel_matches_closed_form() {
        let k = KernelSpec::new(KernelKind::SquaredExponential, 2.0, vec![0.5, 1.0]).unwrap();
        let a = v(&[0.0, 0.0]);
        let b = v(&[0.5, 1.0]);
        // r2 = 1 + 1 = 2
        assert_abs_diff_eq!(k.eval(a.as_view(), b.as_view()), 2.0 * (-1.0_f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(k.eval(a.as_view(), a.as_view()), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn matern52_matches_closed_form() {
        let k = KernelSpec::new(KernelKind::Matern52, 1.5, vec![2.0]).unwrap();
        let a = v(&[0.0]);
        let b = v(&[1.0]);
        let s = 5.0_f64.sqrt() * 0.5;
        let expect = 1.5 * (1.0 + s + s * s / 3.0) * (-s).exp();
        assert_abs_diff_eq!(k.eval(a.as_view(), b.as_view()), expect, epsilon = 1e-14);
    }

    #[test]
    fn kernels_decay_with_distance_and_stay_positive() {
        for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
            let k = KernelSpec::new(kind, 1.0, vec![1.0]).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..20 {
                let b = v(&[i as f64 * 0.5]);
                let val = k.eval(v(&[0.0]).as_view(), b.as_view());
                assert!(val > 0.0 && val <= prev);
                prev = val;
            }
        }
    }

    #[test]
    fn log_param_gradients_match_finite_differences() {
        for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
            let base = KernelSpec::new(kind, 1.7, vec![0.8, 1.3]).unwrap();
            let a = v(&[0.1, -0.4]);
            let b = v(&[0.9, 0.6]);
            let mut grad = vec![0.0; 3];
            base.grad_log_params(a.as_view(), b.as_view(), &mut grad);

            let h = 1e-6_f64;
            let eval_with = |sv: f64, ls: &[f64]| {
                KernelSpec::new(kind, sv, ls.to_vec()).unwrap().eval(a.as_view(), b.as_view())
            };
            let fd_sv = (eval_with(base.signal_variance * (h).exp(), &base.lengthscales)
                - eval_with(base.signal_variance * (-h).exp(), &base.lengthscales))
                / (2.0 * h);
            assert_abs_diff_eq!(grad[0], fd_sv, epsilon = 1e-6);
            for d in 0..2 {
                let mut up = base.lengthscales.clone();
                let mut dn = base.lengthscales.clone();
                up[d] *= h.exp();
                dn[d] *= (-h).exp();
                let fd = (eval_with(base.signal_variance, &up)
                    - eval_with(base.signal_variance, &dn))
                    / (2.0 * h);
                assert_abs_diff_eq!(grad[d + 1], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn validation_rejects_degenerate_specs() {
        assert!(KernelSpec::new(KernelKind::SquaredExponential, 0.0, vec![1.0]).is_err());
        assert!(KernelSpec::new(KernelKind::SquaredExponential, 1.0, vec![]).is_err());
        assert!(KernelSpec::new(KernelKind::Matern52, 1.0, vec![1.0, -2.0]).is_err());
    }
}
