use nalgebra::{DMatrix, DVector};

use super::kernel::{KernelKind, KernelSpec};
use super::linalg::{self, JitteredChol};
use crate::fastmath::exp as fastexp;
use crate::{Error, Result};

/// Training data for one scalar output: inputs as rows, one target per row,
/// and a homoscedastic observation-noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub noise_var: f64,
}

impl GpDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>, noise_var: f64) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::invalid("dataset needs at least one row and one column"));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::invalid(format!(
                "row count mismatch: {} inputs vs {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {noise_var}")));
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(GpDataset { inputs, targets, noise_var })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Choice of constant prior mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorMean {
    /// Use the mean of the training targets.
    FitToData,
    Constant(f64),
}

/// Exact GP posterior over one scalar output.
///
/// Holds the training set, the jittered Cholesky factor of the noisy Gram
/// matrix, and the weight vector `alpha = K_y^{-1} (y - m)`. A copy of the
/// inputs pre-divided by the lengthscales is kept so that mean-only
/// predictions run as a single fused loop.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: KernelSpec,
    prior_mean: f64,
    noise_var: f64,
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    l: DMatrix<f64>,
    jitter: f64,
    alpha: DVector<f64>,
    scaled_inputs: Vec<f64>,
    alpha_sig: Vec<f64>,
}

const MAX_FAST_DIM: usize = 16;

impl GpPosterior {
    /// Condition the prior given by `kernel` on `data`.
    pub fn condition(data: &GpDataset, kernel: &KernelSpec, prior: PriorMean) -> Result<Self> {
        kernel.validate()?;
        if kernel.dim() != data.dim() {
            return Err(Error::invalid(format!(
                "kernel dimension {} does not match data dimension {}",
                kernel.dim(),
                data.dim()
            )));
        }
        if data.dim() > MAX_FAST_DIM {
            return Err(Error::invalid(format!(
                "input dimension {} exceeds the supported maximum {MAX_FAST_DIM}",
                data.dim()
            )));
        }
        let prior_mean = match prior {
            PriorMean::FitToData => data.targets.mean(),
            PriorMean::Constant(c) => c,
        };
        let gram = kernel.gram(&data.inputs);
        let chol = linalg::factor(&gram, data.noise_var, kernel.signal_variance)?;

        let mut post = GpPosterior {
            kernel: kernel.clone(),
            prior_mean,
            noise_var: data.noise_var,
            inputs: data.inputs.clone(),
            targets: data.targets.clone(),
            l: chol.l,
            jitter: chol.jitter,
            alpha: DVector::zeros(data.len()),
            scaled_inputs: Vec::new(),
            alpha_sig: Vec::new(),
        };
        post.refresh_weights();
        Ok(post)
    }

    /// Condition on `data` reusing the factor of a posterior that was built
    /// from the same inputs, kernel, and noise. The lifted Gram matrix is
    /// identical in that case, so the Cholesky is cloned instead of
    /// recomputed and only the weight vector is solved fresh.
    pub(crate) fn condition_adopting(
        data: &GpDataset,
        prior: PriorMean,
        donor: &GpPosterior,
    ) -> Result<Self> {
        if donor.len() != data.len() || donor.dim() != data.dim() {
            return Err(Error::invalid("factor donor does not match the dataset shape"));
        }
        if donor.noise_var != data.noise_var {
            return Err(Error::invalid("factor donor has a different noise variance"));
        }
        let prior_mean = match prior {
            PriorMean::FitToData => data.targets.mean(),
            PriorMean::Constant(c) => c,
        };
        let mut post = GpPosterior {
            kernel: donor.kernel.clone(),
            prior_mean,
            noise_var: data.noise_var,
            inputs: data.inputs.clone(),
            targets: data.targets.clone(),
            l: donor.l.clone(),
            jitter: donor.jitter,
            alpha: DVector::zeros(data.len()),
            scaled_inputs: Vec::new(),
            alpha_sig: Vec::new(),
        };
        post.refresh_weights();
        Ok(post)
    }

    /// Absorb rows whose factor extension a twin posterior has already
    /// computed: clone the twin's factor and re-solve the weights. The twin
    /// must hold the same inputs, kernel, and noise, already extended by
    /// exactly these rows.
    pub(crate) fn append_rows_adopting(
        &mut self,
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
        donor: &GpPosterior,
    ) -> Result<()> {
        if inputs.nrows() != targets.len() || inputs.nrows() == 0 {
            return Err(Error::invalid("append needs matching, nonempty inputs and targets"));
        }
        if donor.len() != self.len() + inputs.nrows() {
            return Err(Error::invalid("factor donor has not absorbed these rows"));
        }
        if donor.kernel != self.kernel || donor.noise_var != self.noise_var {
            return Err(Error::invalid("factor donor models a different covariance"));
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("appended rows contain non-finite values"));
        }
        self.l = donor.l.clone();
        self.jitter = donor.jitter;

        let m = inputs.nrows();
        let old_n = self.inputs.nrows();
        let mut grown = DMatrix::zeros(old_n + m, self.inputs.ncols());
        grown.view_mut((0, 0), (old_n, self.inputs.ncols())).copy_from(&self.inputs);
        grown.view_mut((old_n, 0), (m, inputs.ncols())).copy_from(inputs);
        self.inputs = grown;
        self.targets = DVector::from_iterator(
            old_n + m,
            self.targets.iter().copied().chain(targets.iter().copied()),
        );
        self.refresh_weights();
        Ok(())
    }

    fn refresh_weights(&mut self) {
        let n = self.targets.len();
        let mut a: Vec<f64> = (0..n).map(|i| self.targets[i] - self.prior_mean).collect();
        linalg::solve_lower(&self.l, &mut a);
        linalg::solve_lower_transpose(&self.l, &mut a);
        self.alpha = DVector::from_vec(a);

        let d = self.inputs.ncols();
        self.scaled_inputs.clear();
        self.scaled_inputs.reserve(n * d);
        for i in 0..n {
            for j in 0..d {
                self.scaled_inputs.push(self.inputs[(i, j)] / self.kernel.lengthscales[j]);
            }
        }
        self.alpha_sig = (0..n).map(|i| self.alpha[i] * self.kernel.signal_variance).collect();
    }

    /// Append observation rows without refactoring from scratch.
    ///
    /// Returns this batch's information-gain increment
    /// `0.5 log det(I + sigma_eff^{-2} S)` where `S` is the posterior
    /// covariance of the new points under the model before the append.
    pub fn append_rows(&mut self, inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<f64> {
        if inputs.ncols() != self.inputs.ncols() {
            return Err(Error::invalid(format!(
                "appended rows have dimension {}, expected {}",
                inputs.ncols(),
                self.inputs.ncols()
            )));
        }
        if inputs.nrows() != targets.len() || inputs.nrows() == 0 {
            return Err(Error::invalid("append needs matching, nonempty inputs and targets"));
        }
        if inputs.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("appended rows contain non-finite values"));
        }

        let cross = self.kernel.cross(&self.inputs, inputs);
        let block = self.kernel.gram(inputs);
        let mut chol = JitteredChol { l: std::mem::take(&mut self.l), jitter: self.jitter };
        let logdet_lifted = linalg::append(&mut chol, &cross, &block, self.noise_var)?;
        self.l = chol.l;

        let m = inputs.nrows();
        let old_n = self.inputs.nrows();
        let mut grown = DMatrix::zeros(old_n + m, self.inputs.ncols());
        grown.view_mut((0, 0), (old_n, self.inputs.ncols())).copy_from(&self.inputs);
        grown.view_mut((old_n, 0), (m, inputs.ncols())).copy_from(inputs);
        self.inputs = grown;
        self.targets = DVector::from_iterator(
            old_n + m,
            self.targets.iter().copied().chain(targets.iter().copied()),
        );
        self.refresh_weights();

        let sigma_eff = self.noise_var + self.jitter;
        Ok(0.5 * (logdet_lifted - m as f64 * sigma_eff.ln()))
    }

    /// Information content of the initial batch, on the same scale as the
    /// increments returned by [`GpPosterior::append_rows`].
    pub fn initial_information_gain(&self) -> f64 {
        let n = self.len() as f64;
        let logdet: f64 = 2.0 * (0..self.len()).map(|i| self.l[(i, i)].ln()).sum::<f64>();
        let sigma_eff = self.noise_var + self.jitter;
        0.5 * (logdet - n * sigma_eff.ln())
    }

    /// Posterior mean and variance at one query point.
    pub fn predict(&self, query: &DVector<f64>) -> Result<(f64, f64)> {
        if query.len() != self.inputs.ncols() {
            return Err(Error::invalid(format!(
                "query dimension {} does not match training dimension {}",
                query.len(),
                self.inputs.ncols()
            )));
        }
        let n = self.len();
        let mut k = vec![0.0; n];
        for i in 0..n {
            k[i] = self.kernel.eval(self.inputs.row(i).transpose().as_view(), query.as_view());
        }
        let mean = self.prior_mean + k.iter().zip(self.alpha.iter()).map(|(a, b)| a * b).sum::<f64>();

        linalg::solve_lower(&self.l, &mut k);
        let prior_var = self.kernel.eval_self();
        let var = (prior_var - k.iter().map(|v| v * v).sum::<f64>()).max(0.0);
        Ok((mean, var))
    }

    /// Posterior mean only, skipping the variance solve. The hot path of
    /// surrogate rollouts; no allocation, single pass over the training set.
    pub fn mean_only(&self, query: &[f64]) -> f64 {
        let d = self.inputs.ncols();
        debug_assert_eq!(query.len(), d);
        let mut q = [0.0_f64; MAX_FAST_DIM];
        for j in 0..d {
            q[j] = query[j] / self.kernel.lengthscales[j];
        }

        let n = self.len();
        let mut acc = 0.0;
        match self.kernel.kind {
            KernelKind::SquaredExponential => {
                for i in 0..n {
                    let row = &self.scaled_inputs[i * d..(i + 1) * d];
                    let mut r2 = 0.0;
                    for j in 0..d {
                        let t = row[j] - q[j];
                        r2 += t * t;
                    }
                    acc += self.alpha_sig[i] * fastexp(-0.5 * r2);
                }
            }
            KernelKind::Matern52 => {
                for i in 0..n {
                    let row = &self.scaled_inputs[i * d..(i + 1) * d];
                    let mut r2 = 0.0;
                    for j in 0..d {
                        let t = row[j] - q[j];
                        r2 += t * t;
                    }
                    let s = (5.0 * r2).sqrt();
                    acc += self.alpha_sig[i] * (1.0 + s + s * s / 3.0) * fastexp(-s);
                }
            }
        }
        self.prior_mean + acc
    }

    /// Posterior variances for a batch of query rows, sharing one blocked
    /// triangular solve across the whole batch.
    pub fn variances_batch(&self, queries: &DMatrix<f64>) -> Result<Vec<f64>> {
        if queries.ncols() != self.inputs.ncols() {
            return Err(Error::invalid(format!(
                "query dimension {} does not match training dimension {}",
                queries.ncols(),
                self.inputs.ncols()
            )));
        }
        let mut cross = self.kernel.cross(&self.inputs, queries);
        linalg::solve_lower_multi(&self.l, &mut cross);
        let prior_var = self.kernel.eval_self();
        Ok((0..queries.nrows())
            .map(|j| {
                let col = cross.column(j);
                (prior_var - col.dot(&col)).max(0.0)
            })
            .collect())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Jitter that was added to the Gram diagonal, in absolute units.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Training inputs pre-divided by the lengthscales, row-major. Fuel for
    /// callers that factor the kernel across fixed query dimensions.
    pub(crate) fn scaled_inputs(&self) -> &[f64] {
        &self.scaled_inputs
    }

    /// Weight vector already multiplied by the signal variance, aligned with
    /// [`GpPosterior::scaled_inputs`].
    pub(crate) fn alpha_sig(&self) -> &[f64] {
        &self.alpha_sig
    }

    pub fn training_targets(&self) -> &DVector<f64> {
        &self.targets
    }
}
