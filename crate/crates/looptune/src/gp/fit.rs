//! Hyperparameter fitting by evidence maximization.
//!
//! Multi-start gradient ascent on the log marginal likelihood, with the
//! kernel parameters optimized in log space inside box bounds. The gradient
//! uses the standard trace identity
//! `dL/dpsi = 0.5 tr((alpha alpha^T - K_y^{-1}) dK/dpsi)`.
//!
//! Several outputs observed at the same inputs can be fit jointly to one
//! kernel by maximizing their summed evidence. When the outputs also share a
//! noise level they share the Gram factorization, so the joint fit costs
//! little more than a single-output one.

use nalgebra::DMatrix;

use super::kernel::{KernelKind, KernelSpec};
use super::linalg;
use super::posterior::GpDataset;
use crate::lowdisc::R2Sequence;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Number of optimization starts, including the data-driven heuristic.
    pub restarts: usize,
    /// Gradient-ascent steps per start.
    pub steps: usize,
    pub learning_rate: f64,
    pub lengthscale_bounds: (f64, f64),
    pub signal_variance_bounds: (f64, f64),
    /// When set, fit on an evenly strided subset of at most this many rows.
    pub max_rows: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 8,
            steps: 60,
            learning_rate: 0.08,
            lengthscale_bounds: (1e-3, 1e3),
            signal_variance_bounds: (1e-6, 1e4),
            max_rows: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub kernel: KernelSpec,
    pub log_marginal: f64,
    /// False when no gradient step improved on the best initialization, in
    /// which case that initialization is returned unchanged.
    pub improved: bool,
}

/// Log marginal likelihood of `data` under `kernel`, with the constant prior
/// mean fit to the training targets.
pub fn log_marginal(data: &GpDataset, kernel: &KernelSpec) -> Result<f64> {
    let (lml, _) = lml_and_grad(data, kernel, false)?;
    Ok(lml)
}

/// Returns the log marginal likelihood and, when `with_grad`, its gradient
/// with respect to `[log signal_variance, log l_1, ..., log l_d]`.
fn lml_and_grad(data: &GpDataset, kernel: &KernelSpec, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let prior_mean = data.targets.mean();
    let gram = kernel.gram(&data.inputs);
    let chol = linalg::factor(&gram, data.noise_var, kernel.signal_variance)?;

    let mut alpha: Vec<f64> = (0..n).map(|i| data.targets[i] - prior_mean).collect();
    linalg::solve_lower(&chol.l, &mut alpha);
    let log_det: f64 = 2.0 * (0..n).map(|i| chol.l[(i, i)].ln()).sum::<f64>();
    let quad: f64 = alpha.iter().map(|v| v * v).sum();
    linalg::solve_lower_transpose(&chol.l, &mut alpha);

    let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !with_grad {
        return Ok((lml, Vec::new()));
    }

    // Explicit K_y^{-1} via triangular solves on the identity.
    let mut kinv = DMatrix::identity(n, n);
    for j in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| kinv[(i, j)]).collect();
        linalg::solve_lower(&chol.l, &mut col);
        linalg::solve_lower_transpose(&chol.l, &mut col);
        for i in 0..n {
            kinv[(i, j)] = col[i];
        }
    }

    let p = 1 + kernel.dim();
    let mut grad = vec![0.0; p];
    let mut dk = vec![0.0; p];
    for i in 0..n {
        for j in 0..=i {
            kernel.grad_log_params(
                data.inputs.row(i).transpose().as_view(),
                data.inputs.row(j).transpose().as_view(),
                &mut dk,
            );
            let w = (alpha[i] * alpha[j] - kinv[(i, j)]) * if i == j { 0.5 } else { 1.0 };
            for q in 0..p {
                grad[q] += w * dk[q];
            }
        }
    }
    Ok((lml, grad))
}

/// Summed log marginal likelihood of several outputs under one kernel and,
/// when `with_grad`, its gradient. Outputs sharing a noise level reuse one
/// factorization and one `K_y^{-1}`; otherwise the independent terms are
/// accumulated dataset by dataset.
fn lml_and_grad_shared(
    datasets: &[GpDataset],
    kernel: &KernelSpec,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let uniform_noise =
        datasets.windows(2).all(|w| w[0].noise_var == w[1].noise_var);
    if datasets.len() == 1 || !uniform_noise {
        let mut lml = 0.0;
        let mut grad = vec![0.0; 1 + kernel.dim()];
        for data in datasets {
            let (l, g) = lml_and_grad(data, kernel, with_grad)?;
            lml += l;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        return Ok((lml, if with_grad { grad } else { Vec::new() }));
    }

    let n = datasets[0].len();
    let d_count = datasets.len() as f64;
    let gram = kernel.gram(&datasets[0].inputs);
    let chol = linalg::factor(&gram, datasets[0].noise_var, kernel.signal_variance)?;
    let log_det: f64 = 2.0 * (0..n).map(|i| chol.l[(i, i)].ln()).sum::<f64>();

    let mut alphas = Vec::with_capacity(datasets.len());
    let mut quad_total = 0.0;
    for data in datasets {
        let prior_mean = data.targets.mean();
        let mut alpha: Vec<f64> = (0..n).map(|i| data.targets[i] - prior_mean).collect();
        linalg::solve_lower(&chol.l, &mut alpha);
        quad_total += alpha.iter().map(|v| v * v).sum::<f64>();
        linalg::solve_lower_transpose(&chol.l, &mut alpha);
        alphas.push(alpha);
    }
    let lml = -0.5 * quad_total
        - d_count * (0.5 * log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln());
    if !with_grad {
        return Ok((lml, Vec::new()));
    }

    let mut kinv = DMatrix::identity(n, n);
    for j in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| kinv[(i, j)]).collect();
        linalg::solve_lower(&chol.l, &mut col);
        linalg::solve_lower_transpose(&chol.l, &mut col);
        for i in 0..n {
            kinv[(i, j)] = col[i];
        }
    }

    let inputs = &datasets[0].inputs;
    let p = 1 + kernel.dim();
    let mut grad = vec![0.0; p];
    let mut dk = vec![0.0; p];
    for i in 0..n {
        for j in 0..=i {
            kernel.grad_log_params(
                inputs.row(i).transpose().as_view(),
                inputs.row(j).transpose().as_view(),
                &mut dk,
            );
            let cross: f64 = alphas.iter().map(|a| a[i] * a[j]).sum();
            let w = (cross - d_count * kinv[(i, j)]) * if i == j { 0.5 } else { 1.0 };
            for q in 0..p {
                grad[q] += w * dk[q];
            }
        }
    }
    Ok((lml, grad))
}

/// Evenly strided row subset used to cap the fitting cost on large sets.
fn subsample(data: &GpDataset, cap: usize) -> GpDataset {
    let n = data.len();
    if n <= cap {
        return data.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    let mut inputs = DMatrix::zeros(cap, data.dim());
    let mut targets = nalgebra::DVector::zeros(cap);
    for (r, &i) in idx.iter().enumerate() {
        inputs.row_mut(r).copy_from(&data.inputs.row(i).into_owned());
        targets[r] = data.targets[i];
    }
    GpDataset { inputs, targets, noise_var: data.noise_var }
}

/// Fit kernel hyperparameters to `data` by maximizing the log marginal
/// likelihood from several deterministic starts.
pub fn fit_hyperparameters(data: &GpDataset, kind: KernelKind, cfg: &FitConfig) -> Result<FitReport> {
    fit_hyperparameters_shared(std::slice::from_ref(data), kind, cfg)
}

/// Fit one kernel jointly to several outputs observed at identical inputs by
/// maximizing their summed log marginal likelihood. The reported evidence is
/// that sum.
pub fn fit_hyperparameters_shared(
    datasets: &[GpDataset],
    kind: KernelKind,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if datasets.is_empty() {
        return Err(Error::invalid("joint fit needs at least one output"));
    }
    if cfg.restarts == 0 {
        return Err(Error::invalid("fit needs at least one restart"));
    }
    if datasets.windows(2).any(|w| w[0].inputs != w[1].inputs) {
        return Err(Error::invalid("joint fit requires identical inputs for every output"));
    }
    let datasets: Vec<GpDataset> = match cfg.max_rows {
        Some(cap) if cap > 0 => datasets.iter().map(|data| subsample(data, cap)).collect(),
        _ => datasets.to_vec(),
    };
    let d = datasets[0].dim();

    // Data-driven heuristic start: lengthscale from the input spread per
    // dimension, signal variance from the target variance averaged over the
    // outputs.
    let mut ls0 = vec![0.0; d];
    for j in 0..d {
        let col = datasets[0].inputs.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        ls0[j] = var.sqrt().max(1e-2);
    }
    let mut yvar = 0.0;
    for data in &datasets {
        let ymean = data.targets.mean();
        yvar += data.targets.iter().map(|v| (v - ymean) * (v - ymean)).sum::<f64>()
            / data.len() as f64;
    }
    let sv0 = (yvar / datasets.len() as f64).max(1e-6);

    let clamp = |psi: &mut [f64]| {
        let (sl, sh) = cfg.signal_variance_bounds;
        psi[0] = psi[0].clamp(sl.ln(), sh.ln());
        let (ll, lh) = cfg.lengthscale_bounds;
        for v in &mut psi[1..] {
            *v = v.clamp(ll.ln(), lh.ln());
        }
    };
    let to_kernel = |psi: &[f64]| -> KernelSpec {
        KernelSpec {
            kind,
            signal_variance: psi[0].exp(),
            lengthscales: psi[1..].iter().map(|v| v.exp()).collect(),
        }
    };

    let mut base = Vec::with_capacity(d + 1);
    base.push(sv0.ln());
    base.extend(ls0.iter().map(|l| l.ln()));
    clamp(&mut base);

    let mut starts = vec![base.clone()];
    let mut seq = R2Sequence::new(d + 1, &R2Sequence::shift_from_seed(d + 1, 0x6f17));
    for _ in 1..cfg.restarts {
        let u = seq.next_point();
        let mut psi = base.clone();
        for (p, ui) in psi.iter_mut().zip(u) {
            *p += (2.0 * ui - 1.0) * std::f64::consts::LN_10;
        }
        clamp(&mut psi);
        starts.push(psi);
    }

    let mut best_psi = base.clone();
    let mut best_lml = f64::NEG_INFINITY;
    let mut best_from_step = false;

    for start in &starts {
        if let Ok((lml, _)) = lml_and_grad_shared(&datasets, &to_kernel(start), false) {
            if lml > best_lml {
                best_lml = lml;
                best_psi = start.clone();
                best_from_step = false;
            }
        }

        let mut psi = start.clone();
        let mut m = vec![0.0; d + 1];
        let mut v = vec![0.0; d + 1];
        for step in 1..=cfg.steps {
            let (lml, grad) = match lml_and_grad_shared(&datasets, &to_kernel(&psi), true) {
                Ok(r) => r,
                Err(_) => break,
            };
            if lml > best_lml {
                best_lml = lml;
                best_psi = psi.clone();
                best_from_step = step > 1;
            }
            let b1 = 0.9_f64;
            let b2 = 0.999_f64;
            for q in 0..=d {
                m[q] = b1 * m[q] + (1.0 - b1) * grad[q];
                v[q] = b2 * v[q] + (1.0 - b2) * grad[q] * grad[q];
                let mh = m[q] / (1.0 - b1.powi(step as i32));
                let vh = v[q] / (1.0 - b2.powi(step as i32));
                psi[q] += cfg.learning_rate * mh / (vh.sqrt() + 1e-8);
            }
            clamp(&mut psi);
        }
        // Score the final iterate as well.
        if let Ok((lml, _)) = lml_and_grad_shared(&datasets, &to_kernel(&psi), false) {
            if lml > best_lml {
                best_lml = lml;
                best_psi = psi.clone();
                best_from_step = true;
            }
        }
    }

    if !best_lml.is_finite() {
        return Err(Error::numerical(
            "log marginal likelihood was not finite at any start".to_string(),
        ));
    }
    Ok(FitReport { kernel: to_kernel(&best_psi), log_marginal: best_lml, improved: best_from_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn line_dataset(n: usize, f: impl Fn(f64) -> f64, noise: f64) -> GpDataset {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64 * 4.0 - 2.0).collect();
        let inputs = DMatrix::from_iterator(n, 1, xs.iter().copied());
        let targets = DVector::from_iterator(n, xs.iter().map(|&x| f(x)));
        GpDataset::new(inputs, targets, noise).unwrap()
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let data = line_dataset(14, |x| (1.7 * x).sin(), 0.01);
        for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
            let k = KernelSpec::new(kind, 0.9, vec![0.6]).unwrap();
            let (_, grad) = lml_and_grad(&data, &k, true).unwrap();

            let h = 1e-6_f64;
            let lml_at = |sv: f64, l: f64| {
                log_marginal(&data, &KernelSpec::new(kind, sv, vec![l]).unwrap()).unwrap()
            };
            let fd_sv = (lml_at(0.9 * h.exp(), 0.6) - lml_at(0.9 * (-h).exp(), 0.6)) / (2.0 * h);
            let fd_l = (lml_at(0.9, 0.6 * h.exp()) - lml_at(0.9, 0.6 * (-h).exp())) / (2.0 * h);
            assert_abs_diff_eq!(grad[0], fd_sv, epsilon = 1e-4 * (1.0 + fd_sv.abs()));
            assert_abs_diff_eq!(grad[1], fd_l, epsilon = 1e-4 * (1.0 + fd_l.abs()));
        }
    }

    #[test]
    fn fit_beats_every_initialization() {
        let data = line_dataset(20, |x| (2.0 * x).sin() + 0.3 * x, 0.005);
        let cfg = FitConfig { restarts: 4, steps: 30, ..FitConfig::default() };
        let report = fit_hyperparameters(&data, KernelKind::SquaredExponential, &cfg).unwrap();
        // The heuristic start is one of the scored initializations, so the
        // reported optimum can never fall below its evidence.
        let heuristic = KernelSpec::new(
            KernelKind::SquaredExponential,
            {
                let m = data.targets.mean();
                data.targets.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / data.len() as f64
            },
            vec![{
                let c = data.inputs.column(0);
                let m = c.mean();
                (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64).sqrt()
            }],
        )
        .unwrap();
        assert!(report.log_marginal >= log_marginal(&data, &heuristic).unwrap() - 1e-9);
        assert!(report.improved);
    }

    #[test]
    fn fit_recovers_the_scale_of_a_smooth_function() {
        // A slowly varying target should not be explained with a tiny
        // lengthscale, and a rapidly oscillating one should not get a huge
        // lengthscale.
        let slow = line_dataset(24, |x| 0.5 * x, 1e-4);
        let fast = line_dataset(24, |x| (8.0 * x).sin(), 1e-4);
        let cfg = FitConfig { restarts: 4, steps: 40, ..FitConfig::default() };
        let k_slow = fit_hyperparameters(&slow, KernelKind::SquaredExponential, &cfg).unwrap();
        let k_fast = fit_hyperparameters(&fast, KernelKind::SquaredExponential, &cfg).unwrap();
        assert!(k_slow.kernel.lengthscales[0] > k_fast.kernel.lengthscales[0]);
        assert!(k_fast.kernel.lengthscales[0] < 0.5);
    }

    #[test]
    fn bounds_are_respected() {
        let data = line_dataset(12, |x| x * x, 0.01);
        let cfg = FitConfig {
            restarts: 3,
            steps: 25,
            lengthscale_bounds: (0.5, 2.0),
            signal_variance_bounds: (0.1, 5.0),
            ..FitConfig::default()
        };
        let report = fit_hyperparameters(&data, KernelKind::Matern52, &cfg).unwrap();
        assert!((0.5..=2.0).contains(&report.kernel.lengthscales[0]));
        assert!((0.1..=5.0).contains(&report.kernel.signal_variance));
    }

    #[test]
    fn subsampling_caps_the_fit_set() {
        let data = line_dataset(50, |x| x.sin(), 0.01);
        let sub = subsample(&data, 10);
        assert_eq!(sub.len(), 10);
        // Strided, so first row kept and spacing roughly even.
        assert_abs_diff_eq!(sub.inputs[(0, 0)], data.inputs[(0, 0)], epsilon = 1e-12);
        let cfg = FitConfig { restarts: 2, steps: 10, max_rows: Some(10), ..FitConfig::default() };
        assert!(fit_hyperparameters(&data, KernelKind::SquaredExponential, &cfg).is_ok());
    }

    #[test]
    fn fitting_is_deterministic() {
        let data = line_dataset(16, |x| (3.0 * x).cos(), 0.01);
        let cfg = FitConfig { restarts: 3, steps: 20, ..FitConfig::default() };
        let a = fit_hyperparameters(&data, KernelKind::SquaredExponential, &cfg).unwrap();
        let b = fit_hyperparameters(&data, KernelKind::SquaredExponential, &cfg).unwrap();
        assert_eq!(a.kernel, b.kernel);
        assert_eq!(a.log_marginal.to_bits(), b.log_marginal.to_bits());
    }

    #[test]
    fn pooled_evidence_is_the_sum_of_per_output_evidence() {
        let k = KernelSpec::new(KernelKind::SquaredExponential, 0.8, vec![0.7]).unwrap();
        // Equal noise exercises the shared-factor path, mixed noise the
        // dataset-by-dataset fallback. Both must reduce to plain sums.
        for noises in [(0.01, 0.01), (0.01, 0.0004)] {
            let a = line_dataset(15, |x| (1.3 * x).sin(), noises.0);
            let b = line_dataset(15, |x| x * x - 1.0, noises.1);
            let (la, ga) = lml_and_grad(&a, &k, true).unwrap();
            let (lb, gb) = lml_and_grad(&b, &k, true).unwrap();
            let (joint, gj) = lml_and_grad_shared(&[a, b], &k, true).unwrap();
            assert_abs_diff_eq!(joint, la + lb, epsilon = 1e-9 * (1.0 + joint.abs()));
            for q in 0..gj.len() {
                let want = ga[q] + gb[q];
                assert_abs_diff_eq!(gj[q], want, epsilon = 1e-8 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn pooled_gradient_matches_finite_differences() {
        let a = line_dataset(13, |x| (2.1 * x).sin(), 0.01);
        let b = line_dataset(13, |x| 0.4 * x.cos(), 0.01);
        let k = KernelSpec::new(KernelKind::SquaredExponential, 0.9, vec![0.6]).unwrap();
        let (_, grad) = lml_and_grad_shared(&[a.clone(), b.clone()], &k, true).unwrap();

        let h = 1e-6_f64;
        let lml_at = |sv: f64, l: f64| {
            let kk = KernelSpec::new(KernelKind::SquaredExponential, sv, vec![l]).unwrap();
            lml_and_grad_shared(&[a.clone(), b.clone()], &kk, false).unwrap().0
        };
        let fd_sv = (lml_at(0.9 * h.exp(), 0.6) - lml_at(0.9 * (-h).exp(), 0.6)) / (2.0 * h);
        let fd_l = (lml_at(0.9, 0.6 * h.exp()) - lml_at(0.9, 0.6 * (-h).exp())) / (2.0 * h);
        assert_abs_diff_eq!(grad[0], fd_sv, epsilon = 1e-4 * (1.0 + fd_sv.abs()));
        assert_abs_diff_eq!(grad[1], fd_l, epsilon = 1e-4 * (1.0 + fd_l.abs()));
    }

    #[test]
    fn joint_fit_returns_one_kernel_for_all_outputs() {
        let a = line_dataset(18, |x| (2.0 * x).sin(), 0.005);
        let b = line_dataset(18, |x| (2.0 * x).cos() + 0.2 * x, 0.005);
        let cfg = FitConfig { restarts: 3, steps: 25, ..FitConfig::default() };
        let sets = vec![a, b];
        let report =
            fit_hyperparameters_shared(&sets, KernelKind::SquaredExponential, &cfg).unwrap();
        // The reported evidence is the summed evidence at the returned kernel
        // and can never fall below the summed evidence of the heuristic start.
        let (at_kernel, _) = lml_and_grad_shared(&sets, &report.kernel, false).unwrap();
        assert_abs_diff_eq!(report.log_marginal, at_kernel, epsilon = 1e-9);
        let heuristic = KernelSpec::new(
            KernelKind::SquaredExponential,
            sets.iter()
                .map(|s| {
                    let m = s.targets.mean();
                    s.targets.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s.len() as f64
                })
                .sum::<f64>()
                / sets.len() as f64,
            vec![{
                let c = sets[0].inputs.column(0);
                let m = c.mean();
                (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64).sqrt()
            }],
        )
        .unwrap();
        let (at_start, _) = lml_and_grad_shared(&sets, &heuristic, false).unwrap();
        assert!(report.log_marginal >= at_start - 1e-9);

        let again =
            fit_hyperparameters_shared(&sets, KernelKind::SquaredExponential, &cfg).unwrap();
        assert_eq!(report.kernel, again.kernel);
    }

    #[test]
    fn joint_fit_rejects_mismatched_inputs() {
        let a = line_dataset(12, |x| x.sin(), 0.01);
        let b = line_dataset(14, |x| x.cos(), 0.01);
        let cfg = FitConfig::default();
        assert!(fit_hyperparameters_shared(&[a, b], KernelKind::SquaredExponential, &cfg).is_err());
        assert!(fit_hyperparameters_shared(&[], KernelKind::SquaredExponential, &cfg).is_err());
    }
}
