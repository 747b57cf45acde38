//! Independent multi-output GP over a shared input set.
//!
//! Each output dimension gets its own posterior, fit on targets standardized
//! to zero mean and unit variance. The wrapper tracks, per output, the
//! running ingredients of the confidence multiplier: a norm bound taken as
//! twice the largest absolute standardized target seen, the standardized
//! noise scale, and the accumulated information gain.
//!
//! Outputs that share a kernel and a standardized noise level have identical
//! lifted Gram matrices, so their posteriors share one Cholesky factor: the
//! first such output factors it and the rest adopt it. Posterior means and
//! radii are unchanged by the sharing; only the redundant factorizations,
//! factor extensions, and variance solves are skipped.

use nalgebra::{DMatrix, DVector};

use super::calibration::{calibration_beta, per_output_confidence, CalibrationConfig};
use super::kernel::KernelSpec;
use super::posterior::{GpDataset, GpPosterior, PriorMean};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OutputCalibration {
    pub out_mean: f64,
    pub out_std: f64,
    /// Norm bound in standardized units.
    pub rkhs_bound: f64,
    /// Noise standard deviation in standardized units.
    pub noise_scale: f64,
    pub info_gain: f64,
}

#[derive(Debug, Clone)]
pub struct MultiOutputGp {
    posteriors: Vec<GpPosterior>,
    calib: Vec<OutputCalibration>,
    /// Joint per-prediction failure probability, split across outputs.
    delta: f64,
    /// Factor-sharing map: `groups[i]` is the index of the output whose
    /// Cholesky factor output `i` uses; leaders satisfy `groups[i] == i` and
    /// always precede their adopters.
    groups: Vec<usize>,
}

const STD_FLOOR: f64 = 1e-8;

impl MultiOutputGp {
    /// Condition one posterior per target column on the shared inputs.
    ///
    /// `noise_vars` are observation-noise variances in natural units, one
    /// per output.
    pub fn condition(
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        kernels: &[KernelSpec],
        noise_vars: &[f64],
        delta: f64,
    ) -> Result<Self> {
        let m = targets.ncols();
        if m == 0 || inputs.nrows() == 0 {
            return Err(Error::invalid("conditioning needs rows and at least one output"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::invalid(format!(
                "input rows {} do not match target rows {}",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if kernels.len() != m || noise_vars.len() != m {
            return Err(Error::invalid(format!(
                "expected {m} kernels and noise variances, got {} and {}",
                kernels.len(),
                noise_vars.len()
            )));
        }
        per_output_confidence(delta, m)?;

        let n = inputs.nrows();
        let mut posteriors: Vec<GpPosterior> = Vec::with_capacity(m);
        let mut calib = Vec::with_capacity(m);
        let mut groups = Vec::with_capacity(m);
        for i in 0..m {
            let col = targets.column(i);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt().max(STD_FLOOR);

            let y = DVector::from_iterator(n, col.iter().map(|v| (v - mean) / std));
            let max_abs = y.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
            let noise_std_units = noise_vars[i] / (std * std);
            let data = GpDataset::new(inputs.clone(), y, noise_std_units)?;
            let leader = (0..i).find(|&j| {
                groups[j] == j
                    && posteriors[j].kernel() == &kernels[i]
                    && posteriors[j].noise_var() == noise_std_units
            });
            let post = match leader {
                Some(j) => {
                    GpPosterior::condition_adopting(&data, PriorMean::FitToData, &posteriors[j])?
                }
                None => GpPosterior::condition(&data, &kernels[i], PriorMean::FitToData)?,
            };
            groups.push(leader.unwrap_or(i));
            let info = post.initial_information_gain();
            calib.push(OutputCalibration {
                out_mean: mean,
                out_std: std,
                rkhs_bound: 2.0 * max_abs,
                noise_scale: noise_std_units.sqrt(),
                info_gain: info,
            });
            posteriors.push(post);
        }
        Ok(MultiOutputGp { posteriors, calib, delta, groups })
    }

    /// Absorb new rows into every output, updating norm bounds and
    /// information gains.
    pub fn append(&mut self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
        if targets.ncols() != self.outputs() {
            return Err(Error::invalid(format!(
                "appended targets have {} columns, expected {}",
                targets.ncols(),
                self.outputs()
            )));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::invalid("append needs matching input and target rows"));
        }
        let mut increments = vec![0.0; self.outputs()];
        for i in 0..self.outputs() {
            let c = &mut self.calib[i];
            let y = DVector::from_iterator(
                inputs.nrows(),
                targets.column(i).iter().map(|v| (v - c.out_mean) / c.out_std),
            );
            let max_abs = y.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
            c.rkhs_bound = c.rkhs_bound.max(2.0 * max_abs);
            let lead = self.groups[i];
            increments[i] = if lead == i {
                self.posteriors[i].append_rows(inputs, &y)?
            } else {
                // The leader has already extended the shared factor; the
                // information gain does not depend on the targets, so the
                // leader's increment carries over.
                let (head, tail) = self.posteriors.split_at_mut(i);
                tail[0].append_rows_adopting(inputs, &y, &head[lead])?;
                increments[lead]
            };
            self.calib[i].info_gain += increments[i];
        }
        Ok(())
    }

    /// Posterior mean and calibrated error radius per output, both in
    /// natural units.
    pub fn predict_vector(&self, query: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = self.outputs();
        let dp = per_output_confidence(self.delta, m)?;
        let mut mean = DVector::zeros(m);
        let mut eps = DVector::zeros(m);
        for i in 0..m {
            let (ms, vs) = self.posteriors[i].predict(query)?;
            let c = &self.calib[i];
            let beta = calibration_beta(&CalibrationConfig {
                rkhs_bound: c.rkhs_bound,
                noise_scale: c.noise_scale,
                info_gain: c.info_gain,
                confidence: dp,
            })?;
            mean[i] = c.out_mean + c.out_std * ms;
            eps[i] = beta * vs.sqrt() * c.out_std;
        }
        Ok((mean, eps))
    }

    /// Calibrated error radii for a batch of query rows, natural units, one
    /// row per query and one column per output. Shares one triangular solve
    /// per output across the whole batch.
    pub fn eps_batch(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.outputs();
        let dp = per_output_confidence(self.delta, m)?;
        let mut eps = DMatrix::zeros(queries.nrows(), m);
        // Standardized variances depend only on the factor, so each group
        // solves once.
        let mut vars_by_leader: Vec<Option<Vec<f64>>> = vec![None; m];
        for i in 0..m {
            let c = &self.calib[i];
            let beta = calibration_beta(&CalibrationConfig {
                rkhs_bound: c.rkhs_bound,
                noise_scale: c.noise_scale,
                info_gain: c.info_gain,
                confidence: dp,
            })?;
            let lead = self.groups[i];
            if vars_by_leader[lead].is_none() {
                vars_by_leader[lead] = Some(self.posteriors[lead].variances_batch(queries)?);
            }
            let vars = vars_by_leader[lead].as_ref().expect("filled above");
            for (j, v) in vars.iter().enumerate() {
                eps[(j, i)] = beta * v.sqrt() * c.out_std;
            }
        }
        Ok(eps)
    }

    /// Mean-only prediction into a caller buffer, natural units.
    pub fn predict_mean_into(&self, query: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.outputs());
        for i in 0..self.outputs() {
            let c = &self.calib[i];
            out[i] = c.out_mean + c.out_std * self.posteriors[i].mean_only(query);
        }
    }

    pub fn outputs(&self) -> usize {
        self.posteriors.len()
    }

    pub fn len(&self) -> usize {
        self.posteriors.first().map_or(0, |p| p.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.posteriors.first().map_or(0, |p| p.dim())
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Replace the data-driven norm bound of one output. For targets whose
    /// norm in the kernel's function space is known by construction; the
    /// bound is in standardized target units.
    pub fn set_rkhs_bound(&mut self, output: usize, bound: f64) -> Result<()> {
        if output >= self.outputs() {
            return Err(Error::invalid(format!(
                "output {output} out of range for {} outputs",
                self.outputs()
            )));
        }
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::invalid(format!("norm bound must be finite and >= 0, got {bound}")));
        }
        self.calib[output].rkhs_bound = bound;
        Ok(())
    }

    pub fn posterior(&self, output: usize) -> &GpPosterior {
        &self.posteriors[output]
    }

    /// Factor-sharing map: entry `i` names the output whose Cholesky factor
    /// output `i` uses; `groups[i] == i` marks a leader.
    pub fn factor_groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn calibration(&self, output: usize) -> &OutputCalibration {
        &self.calib[output]
    }

    pub fn kernels(&self) -> Vec<KernelSpec> {
        self.posteriors.iter().map(|p| p.kernel().clone()).collect()
    }
}
