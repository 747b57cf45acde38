//! Episode-cost surrogate built on a learned closed-loop dynamics model.
//!
//! One step of the controlled plant is treated as an unknown map from
//! (state, controller weights) to (successor state, applied input), and an
//! independent GP is fit per output on the pooled transition set. Episode
//! cost is predicted by rolling the posterior mean forward and summing the
//! known stage costs. Because the stage costs are exact, the only modeling
//! error lives in the dynamics; the calibrated per-step radii propagate
//! through the rollout into an explicit deviation bound, and from there into
//! a bound on the cost error.
//!
//! Model inputs are the four state dimensions plus the five controller
//! weights in log10, each whitened by statistics frozen at training time.
//! Outputs stay in natural units; standardization happens inside the
//! multi-output GP.

use nalgebra::{DMatrix, DVector};

use crate::closed_loop::{Task, TransitionRow, TransitionSet};
use crate::fastmath::exp as fastexp;
use crate::gp::{fit_hyperparameters_shared, FitConfig, KernelKind, KernelSpec, MultiOutputGp};
use crate::lowdisc::R2Sequence;
use crate::mpc::ParamVector;
use crate::plant::State;
use crate::{Error, Result};

/// Four state dimensions plus five controller weights in log10.
pub const FEATURE_DIM: usize = 9;
/// Successor state plus the applied input.
pub const OUTPUT_DIM: usize = 5;

/// Smallest Lipschitz constant the estimator will report.
pub const LIPSCHITZ_FLOOR: f64 = 1e-6;
/// Safety factor applied to the sampled slope maximum.
const LIPSCHITZ_INFLATION: f64 = 1.5;

/// Squared scaled distance beyond which a squared-exponential contribution
/// underflows against any realistic accumulator and the row can be skipped.
const PRUNE_R2: f64 = 400.0;

fn raw_features(state: &State, theta_log: &[f64; 5]) -> [f64; FEATURE_DIM] {
    [
        state.pos,
        state.vel,
        state.angle,
        state.angular_vel,
        theta_log[0],
        theta_log[1],
        theta_log[2],
        theta_log[3],
        theta_log[4],
    ]
}

fn row_outputs(row: &TransitionRow) -> [f64; OUTPUT_DIM] {
    [
        row.next_state.pos,
        row.next_state.vel,
        row.next_state.angle,
        row.next_state.angular_vel,
        row.input,
    ]
}

/// Per-dimension affine whitening of model inputs, frozen when the model is
/// (re)built so that incremental appends stay consistent with the factor.
#[derive(Debug, Clone)]
pub struct FeatureScaler {
    mean: [f64; FEATURE_DIM],
    std: [f64; FEATURE_DIM],
}

const SCALE_FLOOR: f64 = 1e-8;

impl FeatureScaler {
    fn from_raw(raw: &DMatrix<f64>) -> Self {
        let n = raw.nrows() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [1.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            let col = raw.column(d);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[d] = m;
            std[d] = var.sqrt().max(SCALE_FLOOR);
        }
        FeatureScaler { mean, std }
    }

    fn apply(&self, raw: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            out[d] = (raw[d] - self.mean[d]) / self.std[d];
        }
        out
    }

    fn apply_matrix(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for d in 0..FEATURE_DIM {
            let mut col = out.column_mut(d);
            for v in col.iter_mut() {
                *v = (*v - self.mean[d]) / self.std[d];
            }
        }
        out
    }

    /// Pass-through scaler; model inputs stay in raw feature units.
    fn identity() -> Self {
        FeatureScaler { mean: [0.0; FEATURE_DIM], std: [1.0; FEATURE_DIM] }
    }
}

/// Axis-aligned box over the model's raw inputs: natural state units in the
/// first four dimensions, log10 controller weights in the rest.
#[derive(Debug, Clone)]
pub struct InputRegion {
    pub lower: [f64; FEATURE_DIM],
    pub upper: [f64; FEATURE_DIM],
}

impl InputRegion {
    pub fn validate(&self) -> Result<()> {
        for d in 0..FEATURE_DIM {
            if !(self.lower[d].is_finite() && self.upper[d].is_finite()) {
                return Err(Error::invalid("input region must be bounded"));
            }
            if self.lower[d] > self.upper[d] {
                return Err(Error::invalid(format!("input region disordered in dimension {d}")));
            }
        }
        if self.extents().iter().all(|w| *w <= 0.0) {
            return Err(Error::invalid("input region is a single point"));
        }
        Ok(())
    }

    /// Smallest box containing every transition's predecessor and successor
    /// state together with its controller weights, or `None` when empty.
    pub fn from_transitions(rows: &[TransitionRow]) -> Option<Self> {
        let mut it = rows.iter();
        let first = it.next()?;
        let mut lower = raw_features(&first.state, &first.theta.to_log10());
        let mut upper = lower;
        let mut absorb = |p: [f64; FEATURE_DIM]| {
            for d in 0..FEATURE_DIM {
                lower[d] = lower[d].min(p[d]);
                upper[d] = upper[d].max(p[d]);
            }
        };
        absorb(raw_features(&first.next_state, &first.theta.to_log10()));
        for r in it {
            let tl = r.theta.to_log10();
            absorb(raw_features(&r.state, &tl));
            absorb(raw_features(&r.next_state, &tl));
        }
        Some(InputRegion { lower, upper })
    }

    /// Grow the box by `fraction` of its half-width on each side.
    pub fn inflated(&self, fraction: f64) -> Self {
        let mut out = self.clone();
        for d in 0..FEATURE_DIM {
            let pad = 0.5 * (self.upper[d] - self.lower[d]) * fraction;
            out.lower[d] -= pad;
            out.upper[d] += pad;
        }
        out
    }

    fn extents(&self) -> [f64; FEATURE_DIM] {
        let mut w = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            w[d] = self.upper[d] - self.lower[d];
        }
        w
    }
}

/// Learned one-step model of the closed loop, together with the Lipschitz
/// constant of its mean used when propagating error bounds.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    gp: MultiOutputGp,
    scaler: FeatureScaler,
    lipschitz: f64,
}

impl DynamicsModel {
    fn features(&self, state: &State, theta_log: &[f64; 5]) -> [f64; FEATURE_DIM] {
        self.scaler.apply(&raw_features(state, theta_log))
    }

    /// Posterior mean and calibrated error radius per output, natural units.
    pub fn predict(
        &self,
        state: &State,
        theta: &ParamVector,
    ) -> Result<([f64; OUTPUT_DIM], [f64; OUTPUT_DIM])> {
        let feats = self.features(state, &theta.to_log10());
        let q = DVector::from_row_slice(&feats);
        let (mean, eps) = self.gp.predict_vector(&q)?;
        let mut m = [0.0; OUTPUT_DIM];
        let mut e = [0.0; OUTPUT_DIM];
        for i in 0..OUTPUT_DIM {
            m[i] = mean[i];
            e[i] = eps[i];
        }
        Ok((m, e))
    }

    /// Mean prediction at a raw input point, natural units, no allocation.
    pub fn predict_mean_raw(&self, raw: &[f64; FEATURE_DIM], out: &mut [f64; OUTPUT_DIM]) {
        let feats = self.scaler.apply(raw);
        self.gp.predict_mean_into(&feats, out);
    }

    /// Factor the kernel for one controller: the weight part of every
    /// training row's distance is fixed, so each row reduces to a scalar
    /// weight times a four-dimensional kernel in the state. Rows whose
    /// weight underflows to zero are dropped up front. When every output
    /// shares one squared-exponential kernel, the distances and exponentials
    /// are also shared, so each row costs one kernel evaluation for all
    /// outputs together.
    pub fn candidate(&self, theta: &ParamVector) -> CandidateEvaluator<'_> {
        let theta_log = theta.to_log10();
        let raw = raw_features(&State::origin(), &theta_log);
        let feats = self.scaler.apply(&raw);

        let kernel0 = self.gp.posterior(0).kernel();
        let uniform = kernel0.kind == KernelKind::SquaredExponential
            && (1..self.gp.outputs()).all(|o| self.gp.posterior(o).kernel() == kernel0);
        if uniform {
            let post = self.gp.posterior(0);
            let mut q_theta = [0.0; 5];
            for d in 4..FEATURE_DIM {
                q_theta[d - 4] = feats[d] / kernel0.lengthscales[d];
            }
            let scaled = post.scaled_inputs();
            let mut theta_weights = Vec::new();
            let mut rows = Vec::new();
            let mut kept = Vec::new();
            for i in 0..post.len() {
                let row = &scaled[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
                let mut r2 = 0.0;
                for d in 4..FEATURE_DIM {
                    let t = row[d] - q_theta[d - 4];
                    r2 += t * t;
                }
                if r2 <= PRUNE_R2 {
                    theta_weights.push(fastexp(-0.5 * r2));
                    rows.extend_from_slice(&row[0..4]);
                    kept.push(i);
                }
            }
            let m = self.gp.outputs();
            let mut alphas = vec![0.0; kept.len() * m];
            let mut prior_mean = [0.0; OUTPUT_DIM];
            let mut out_mean = [0.0; OUTPUT_DIM];
            let mut out_std = [0.0; OUTPUT_DIM];
            for o in 0..m {
                let p = self.gp.posterior(o);
                let alpha_sig = p.alpha_sig();
                for (k, &i) in kept.iter().enumerate() {
                    alphas[k * m + o] = alpha_sig[i];
                }
                let calib = self.gp.calibration(o);
                prior_mean[o] = p.prior_mean();
                out_mean[o] = calib.out_mean;
                out_std[o] = calib.out_std;
            }
            let mut inv_len = [0.0; 4];
            let mut offset = [0.0; 4];
            for d in 0..4 {
                inv_len[d] = 1.0 / (self.scaler.std[d] * kernel0.lengthscales[d]);
                offset[d] = self.scaler.mean[d];
            }
            return CandidateEvaluator {
                model: self,
                theta_log,
                eval: CandidateKind::Pooled {
                    theta_weights,
                    rows,
                    alphas,
                    inv_len,
                    offset,
                    prior_mean,
                    out_mean,
                    out_std,
                },
            };
        }

        let mut outputs = Vec::with_capacity(self.gp.outputs());
        for o in 0..self.gp.outputs() {
            let post = self.gp.posterior(o);
            let kernel = post.kernel();
            let mut q_theta = [0.0; 5];
            for d in 4..FEATURE_DIM {
                q_theta[d - 4] = feats[d] / kernel.lengthscales[d];
            }
            let slice = match kernel.kind {
                KernelKind::SquaredExponential => {
                    let scaled = post.scaled_inputs();
                    let alpha_sig = post.alpha_sig();
                    let n = post.len();
                    let mut weights = Vec::new();
                    let mut rows = Vec::new();
                    for i in 0..n {
                        let row = &scaled[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
                        let mut r2 = 0.0;
                        for d in 4..FEATURE_DIM {
                            let t = row[d] - q_theta[d - 4];
                            r2 += t * t;
                        }
                        if r2 <= PRUNE_R2 {
                            weights.push(alpha_sig[i] * fastexp(-0.5 * r2));
                            rows.extend_from_slice(&row[0..4]);
                        }
                    }
                    OutputEval::Factored { weights, rows }
                }
                KernelKind::Matern52 => OutputEval::Generic,
            };
            let calib = self.gp.calibration(o);
            let mut inv_len = [0.0; 4];
            for d in 0..4 {
                inv_len[d] = 1.0 / (self.scaler.std[d] * kernel.lengthscales[d]);
            }
            outputs.push(OutputChannel {
                eval: slice,
                inv_len,
                offset: {
                    let mut off = [0.0; 4];
                    for d in 0..4 {
                        off[d] = self.scaler.mean[d];
                    }
                    off
                },
                prior_mean: post.prior_mean(),
                out_mean: calib.out_mean,
                out_std: calib.out_std,
            });
        }
        CandidateEvaluator { model: self, theta_log, eval: CandidateKind::PerOutput(outputs) }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn training_rows(&self) -> usize {
        self.gp.len()
    }

    /// Per-step joint failure probability of the calibrated radii.
    pub fn step_delta(&self) -> f64 {
        self.gp.delta()
    }

    pub fn gp(&self) -> &MultiOutputGp {
        &self.gp
    }
}

enum OutputEval {
    /// Squared-exponential fast path: per-row weight plus the state part of
    /// the scaled training inputs, contiguous.
    Factored { weights: Vec<f64>, rows: Vec<f64> },
    /// Fall back to the full per-point mean.
    Generic,
}

struct OutputChannel {
    eval: OutputEval,
    /// Combined whitening and lengthscale division for the state dims.
    inv_len: [f64; 4],
    offset: [f64; 4],
    prior_mean: f64,
    out_mean: f64,
    out_std: f64,
}

enum CandidateKind {
    /// Every output shares one squared-exponential kernel, so one distance
    /// and one exponential per row feed all outputs. The per-output solve
    /// weights are interleaved row-major: `alphas[i * m + o]`.
    Pooled {
        /// Controller part of each surviving row's kernel value.
        theta_weights: Vec<f64>,
        /// State part of the surviving scaled training rows, contiguous.
        rows: Vec<f64>,
        alphas: Vec<f64>,
        /// Combined whitening and lengthscale division for the state dims.
        inv_len: [f64; 4],
        offset: [f64; 4],
        prior_mean: [f64; OUTPUT_DIM],
        out_mean: [f64; OUTPUT_DIM],
        out_std: [f64; OUTPUT_DIM],
    },
    PerOutput(Vec<OutputChannel>),
}

/// Mean evaluator specialized to one controller, reused across rollout steps
/// and acquisition candidates.
pub struct CandidateEvaluator<'m> {
    model: &'m DynamicsModel,
    theta_log: [f64; 5],
    eval: CandidateKind,
}

impl CandidateEvaluator<'_> {
    /// Posterior mean of all outputs at `state`, natural units.
    pub fn mean_into(&self, state: &State, out: &mut [f64; OUTPUT_DIM]) {
        let xs = [state.pos, state.vel, state.angle, state.angular_vel];
        match &self.eval {
            CandidateKind::Pooled {
                theta_weights,
                rows,
                alphas,
                inv_len,
                offset,
                prior_mean,
                out_mean,
                out_std,
            } => {
                let m = OUTPUT_DIM;
                let mut q = [0.0; 4];
                for d in 0..4 {
                    q[d] = (xs[d] - offset[d]) * inv_len[d];
                }
                let mut acc = [0.0; OUTPUT_DIM];
                for (i, w) in theta_weights.iter().enumerate() {
                    let row = &rows[i * 4..i * 4 + 4];
                    let mut r2 = 0.0;
                    for d in 0..4 {
                        let t = row[d] - q[d];
                        r2 += t * t;
                    }
                    let s = w * fastexp(-0.5 * r2);
                    let a = &alphas[i * m..(i + 1) * m];
                    for o in 0..m {
                        acc[o] += s * a[o];
                    }
                }
                for o in 0..m {
                    out[o] = out_mean[o] + out_std[o] * (prior_mean[o] + acc[o]);
                }
            }
            CandidateKind::PerOutput(outputs) => {
                for (o, ch) in outputs.iter().enumerate() {
                    match &ch.eval {
                        OutputEval::Factored { weights, rows } => {
                            let mut q = [0.0; 4];
                            for d in 0..4 {
                                q[d] = (xs[d] - ch.offset[d]) * ch.inv_len[d];
                            }
                            let mut acc = 0.0;
                            for (i, w) in weights.iter().enumerate() {
                                let row = &rows[i * 4..i * 4 + 4];
                                let mut r2 = 0.0;
                                for d in 0..4 {
                                    let t = row[d] - q[d];
                                    r2 += t * t;
                                }
                                acc += w * fastexp(-0.5 * r2);
                            }
                            out[o] = ch.out_mean + ch.out_std * (ch.prior_mean + acc);
                        }
                        OutputEval::Generic => {
                            let feats = self.model.features(state, &self.theta_log);
                            out[o] = ch.out_mean
                                + ch.out_std * self.model.gp.posterior(o).mean_only(&feats);
                        }
                    }
                }
            }
        }
    }
}

/// One predicted step: the successor state and the input the controller is
/// predicted to apply at the step's predecessor.
#[derive(Debug, Clone, Copy)]
pub struct PredictedStep {
    pub state: State,
    pub input: f64,
}

/// Open-loop prediction of a closed-loop episode under one controller.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub theta: ParamVector,
    pub initial: State,
    pub steps: Vec<PredictedStep>,
    /// Euclidean norm of the calibrated per-output radii at each point the
    /// mean recursion visited.
    pub eps_norms: Vec<f64>,
    /// Propagated bound on the deviation between the mean recursion and the
    /// true closed loop, one entry per step.
    pub nu: Vec<f64>,
}

/// Deviation recursion: the first step inherits the model radius at the true
/// initial state; each later radius is evaluated at a predicted point, so it
/// also pays for the drift accumulated so far, scaled by the model mean's
/// Lipschitz constant.
pub fn propagate_deviation(eps_norms: &[f64], lipschitz: f64) -> Vec<f64> {
    let mut nu = Vec::with_capacity(eps_norms.len());
    let mut prev = 0.0;
    for (k, eps) in eps_norms.iter().enumerate() {
        let v = if k == 0 { *eps } else { eps + lipschitz * prev };
        nu.push(v);
        prev = v;
    }
    nu
}

/// Roll the posterior mean forward `horizon` steps from `x0` and propagate
/// the calibrated radii into per-step deviation bounds.
pub fn rollout_mean(
    model: &DynamicsModel,
    x0: &State,
    theta: &ParamVector,
    horizon: usize,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::invalid("rollout horizon must be at least one step"));
    }
    let theta_log = theta.to_log10();
    let cand = model.candidate(theta);

    let mut queries = DMatrix::zeros(horizon, FEATURE_DIM);
    let mut steps = Vec::with_capacity(horizon);
    let mut out = [0.0; OUTPUT_DIM];
    let mut x = *x0;
    for k in 0..horizon {
        let feats = model.features(&x, &theta_log);
        for d in 0..FEATURE_DIM {
            queries[(k, d)] = feats[d];
        }
        cand.mean_into(&x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "rollout prediction became non-finite at step {k}"
            )));
        }
        let next = State::new(out[0], out[1], out[2], out[3]);
        steps.push(PredictedStep { state: next, input: out[4] });
        x = next;
    }

    // Radii for all visited points in one batched pass per output.
    let eps = model.gp.eps_batch(&queries)?;
    let eps_norms: Vec<f64> =
        (0..horizon).map(|k| eps.row(k).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let nu = propagate_deviation(&eps_norms, model.lipschitz);

    Ok(Rollout { theta: *theta, initial: *x0, steps, eps_norms, nu })
}

/// Predicted episode cost only, skipping the variance solves: the
/// acquisition hot path.
pub fn rollout_cost(
    model: &DynamicsModel,
    x0: &State,
    theta: &ParamVector,
    horizon: usize,
    task: &Task,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("rollout horizon must be at least one step"));
    }
    let cand = model.candidate(theta);
    let mut out = [0.0; OUTPUT_DIM];
    let mut x = *x0;
    let mut total = 0.0;
    for k in 0..horizon {
        cand.mean_into(&x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "rollout prediction became non-finite at step {k}"
            )));
        }
        let next = State::new(out[0], out[1], out[2], out[3]);
        total += task.stage_cost(&next, out[4]);
        x = next;
    }
    Ok(total)
}

/// Sum of the known stage costs along a predicted rollout.
pub fn surrogate_cost(rollout: &Rollout, task: &Task) -> f64 {
    rollout.steps.iter().map(|s| task.stage_cost(&s.state, s.input)).sum()
}

/// Bound on |predicted cost - true cost|: each step's deviation bound, paid
/// at the stage cost's Lipschitz constant.
pub fn cost_bound(rollout: &Rollout, stage_lipschitz: f64) -> f64 {
    stage_lipschitz * rollout.nu.iter().sum::<f64>()
}

/// Estimate the Lipschitz constant of the model mean over `region` from
/// sampled secant slopes: all pairs among `samples` space-filling base
/// points, plus one short axis probe per point and non-degenerate dimension.
/// The maximum ratio is inflated by 1.5 and floored at 1e-6.
pub fn estimate_gp_lipschitz(
    model: &DynamicsModel,
    region: &InputRegion,
    samples: usize,
) -> Result<f64> {
    region.validate()?;
    if samples < 2 {
        return Err(Error::invalid("lipschitz estimation needs at least two sample points"));
    }
    let extents = region.extents();

    let mut seq = R2Sequence::new(FEATURE_DIM, &R2Sequence::shift_from_seed(FEATURE_DIM, 0x11c9));
    let mut points: Vec<[f64; FEATURE_DIM]> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u = seq.next_point();
        let mut p = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            p[d] = region.lower[d] + u[d] * extents[d];
        }
        points.push(p);
    }

    let mut means: Vec<[f64; OUTPUT_DIM]> = Vec::with_capacity(samples);
    let mut buf = [0.0; OUTPUT_DIM];
    for p in &points {
        model.predict_mean_raw(p, &mut buf);
        means.push(buf);
    }

    let mut best = 0.0_f64;
    let dist = |a: &[f64; FEATURE_DIM], b: &[f64; FEATURE_DIM]| -> f64 {
        (0..FEATURE_DIM).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum::<f64>().sqrt()
    };
    let gain = |a: &[f64; OUTPUT_DIM], b: &[f64; OUTPUT_DIM]| -> f64 {
        (0..OUTPUT_DIM).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum::<f64>().sqrt()
    };

    for i in 0..samples {
        for j in (i + 1)..samples {
            let h = dist(&points[i], &points[j]);
            if h > 0.0 {
                best = best.max(gain(&means[i], &means[j]) / h);
            }
        }
    }

    // Short axis probes capture local slopes the pair distances average out.
    for (p, base) in points.iter().zip(&means) {
        for d in 0..FEATURE_DIM {
            if extents[d] <= 0.0 {
                continue;
            }
            let h = 1e-3 * extents[d];
            let mut q = *p;
            q[d] = if q[d] + h <= region.upper[d] { q[d] + h } else { q[d] - h };
            let step = (q[d] - p[d]).abs();
            model.predict_mean_raw(&q, &mut buf);
            best = best.max(gain(base, &buf) / step);
        }
    }

    if !best.is_finite() {
        return Err(Error::numerical("lipschitz estimate was not finite".to_string()));
    }
    Ok((LIPSCHITZ_INFLATION * best).max(LIPSCHITZ_FLOOR))
}

/// Training policy for the dynamics model.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub kernel: KernelKind,
    /// Per-step joint failure probability of the calibrated radii, shared
    /// across the five outputs.
    pub step_delta: f64,
    /// Observation-noise variances of the five outputs, natural units. The
    /// input output is deterministic given the state, so its slot is usually
    /// zero; the state outputs carry the plant's process-noise variances.
    pub noise_vars: [f64; OUTPUT_DIM],
    pub fit: FitConfig,
    /// Base points used by the Lipschitz estimate.
    pub lipschitz_samples: usize,
    /// Refits requested once the transition set has more rows than this are
    /// skipped; appends still recondition the posterior on every call.
    pub refit_row_cap: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            kernel: KernelKind::SquaredExponential,
            step_delta: 0.05 / 25.0,
            noise_vars: [0.0; OUTPUT_DIM],
            fit: FitConfig { restarts: 2, steps: 30, max_rows: Some(100), ..FitConfig::default() },
            lipschitz_samples: 12,
            refit_row_cap: 1500,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_delta > 0.0 && self.step_delta < 1.0) {
            return Err(Error::invalid(format!(
                "per-step confidence must lie in (0, 1), got {}",
                self.step_delta
            )));
        }
        if self.noise_vars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("noise variances must be finite and nonnegative"));
        }
        if self.lipschitz_samples < 2 {
            return Err(Error::invalid("lipschitz estimation needs at least two sample points"));
        }
        Ok(())
    }
}

/// Maintains the dynamics model across optimization iterations: appends new
/// transitions incrementally and refits hyperparameters only when asked.
#[derive(Debug)]
pub struct DynamicsTrainer {
    config: TrainerConfig,
    kernels: Option<Vec<KernelSpec>>,
    model: Option<DynamicsModel>,
    rows_absorbed: usize,
}

impl DynamicsTrainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        Ok(DynamicsTrainer { config, kernels: None, model: None, rows_absorbed: 0 })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> Option<&DynamicsModel> {
        self.model.as_ref()
    }

    /// Bring the model up to date with `data`.
    ///
    /// With `refit_hypers` false the kernels and the input whitening stay
    /// frozen and only the new rows are folded in, which keeps the cost at
    /// O(n^2 m). With it true (and the row cap not exceeded) everything is
    /// rebuilt: whitening, kernels, conditioning. The Lipschitz constant is
    /// re-estimated on every call.
    pub fn train(&mut self, data: &TransitionSet, refit_hypers: bool) -> Result<&DynamicsModel> {
        let rows = data.rows();
        if rows.is_empty() {
            return Err(Error::invalid("training needs at least one transition"));
        }
        if rows.len() < self.rows_absorbed {
            return Err(Error::invalid(format!(
                "transition set shrank from {} to {} rows; the trainer only appends",
                self.rows_absorbed,
                rows.len()
            )));
        }
        let want_refit = refit_hypers && rows.len() <= self.config.refit_row_cap;

        if self.model.is_some() && !want_refit {
            let fresh = &rows[self.rows_absorbed..];
            if !fresh.is_empty() {
                let (raw, targets) = build_matrices(fresh);
                let model = self.model.as_mut().expect("model present");
                let feats = model.scaler.apply_matrix(&raw);
                if model.gp.append(&feats, &targets).is_err() {
                    // Near-duplicate rows can sink the incremental Schur
                    // block below the factor's jitter; rebuild with the same
                    // kernels and a fresh jitter ladder.
                    self.rebuild(rows)?;
                } else {
                    self.rows_absorbed = rows.len();
                }
            }
        } else {
            if want_refit || self.kernels.is_none() {
                self.kernels = None;
            }
            self.rebuild(rows)?;
        }

        let model = self.model.as_mut().expect("model present");
        let region = InputRegion::from_transitions(rows)
            .expect("nonempty transition set")
            .inflated(0.2);
        // A single repeated transition gives a zero-volume box; fall back to
        // the floor rather than failing the whole iteration.
        model.lipschitz = match estimate_gp_lipschitz(
            &*model,
            &region,
            self.config.lipschitz_samples,
        ) {
            Ok(l) => l,
            Err(Error::InvalidArgument(_)) => LIPSCHITZ_FLOOR,
            Err(e) => return Err(e),
        };
        Ok(self.model.as_ref().expect("model present"))
    }

    fn rebuild(&mut self, rows: &[TransitionRow]) -> Result<()> {
        let (raw, targets) = build_matrices(rows);
        let scaler = FeatureScaler::from_raw(&raw);
        let feats = scaler.apply_matrix(&raw);

        let kernels = match &self.kernels {
            Some(k) => k.clone(),
            None => {
                // One kernel is fit jointly across the outputs, on targets
                // standardized the same way conditioning will standardize
                // them. Standardization puts the outputs on a common scale,
                // and a shared kernel lets equal-noise outputs share one
                // Gram factor downstream.
                let mut sets = Vec::with_capacity(OUTPUT_DIM);
                for o in 0..OUTPUT_DIM {
                    let col = targets.column(o);
                    let mean = col.mean();
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / rows.len() as f64;
                    let std = var.sqrt().max(SCALE_FLOOR);
                    let y = DVector::from_iterator(rows.len(), col.iter().map(|v| (v - mean) / std));
                    let noise_std_units = self.config.noise_vars[o] / (std * std);
                    sets.push(crate::gp::GpDataset::new(feats.clone(), y, noise_std_units)?);
                }
                let report = fit_hyperparameters_shared(&sets, self.config.kernel, &self.config.fit)?;
                vec![report.kernel; OUTPUT_DIM]
            }
        };

        let gp = MultiOutputGp::condition(
            &feats,
            &targets,
            &kernels,
            &self.config.noise_vars,
            self.config.step_delta,
        )?;
        self.kernels = Some(kernels);
        self.model = Some(DynamicsModel { gp, scaler, lipschitz: LIPSCHITZ_FLOOR });
        self.rows_absorbed = rows.len();
        Ok(())
    }
}

/// Build a model directly from caller-supplied kernels, skipping both the
/// evidence fit and the input whitening: kernels and noise variances are
/// interpreted in raw feature units. When `rkhs_bounds` is given its entries
/// replace the data-driven norm bounds; they are in natural target units and
/// are rescaled internally. Intended for targets constructed inside a known
/// function space, where the exact norm is available.
pub fn model_from_kernels(
    data: &TransitionSet,
    kernels: &[KernelSpec],
    noise_vars: &[f64; OUTPUT_DIM],
    step_delta: f64,
    rkhs_bounds: Option<&[f64; OUTPUT_DIM]>,
    lipschitz: f64,
) -> Result<DynamicsModel> {
    let rows = data.rows();
    if rows.is_empty() {
        return Err(Error::invalid("model construction needs at least one transition"));
    }
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(Error::invalid(format!(
            "lipschitz constant must be finite and >= 0, got {lipschitz}"
        )));
    }
    let (raw, targets) = build_matrices(rows);
    let mut gp = MultiOutputGp::condition(&raw, &targets, kernels, noise_vars, step_delta)?;
    if let Some(bounds) = rkhs_bounds {
        for (o, b) in bounds.iter().enumerate() {
            let std = gp.calibration(o).out_std;
            gp.set_rkhs_bound(o, b / std)?;
        }
    }
    Ok(DynamicsModel { gp, scaler: FeatureScaler::identity(), lipschitz })
}

fn build_matrices(rows: &[TransitionRow]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut raw = DMatrix::zeros(n, FEATURE_DIM);
    let mut targets = DMatrix::zeros(n, OUTPUT_DIM);
    for (i, r) in rows.iter().enumerate() {
        let f = raw_features(&r.state, &r.theta.to_log10());
        let z = row_outputs(r);
        for d in 0..FEATURE_DIM {
            raw[(i, d)] = f[d];
        }
        for d in 0..OUTPUT_DIM {
            targets[(i, d)] = z[d];
        }
    }
    (raw, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_loop::{
        closed_loop_cost, extract_transitions, initial_state, run_episode, task_one, ZBox,
    };
    use crate::mpc::OcpConfig;
    use crate::plant::PlantConfig;
    use approx::assert_abs_diff_eq;

    fn noise_free_plant() -> PlantConfig {
        PlantConfig { noise_cov_diag: [0.0; 4], ..PlantConfig::default() }
    }

    fn episode_transitions(theta: &ParamVector, steps: usize) -> (TransitionSet, f64) {
        let traj = run_episode(
            &noise_free_plant(),
            &OcpConfig::default(),
            theta,
            &initial_state(),
            steps,
            7,
        )
        .unwrap();
        let cost = closed_loop_cost(&traj, &task_one());
        let mut set = TransitionSet::new();
        set.extend_from(&extract_transitions(&traj));
        (set, cost)
    }

    /// Synthetic transitions from a known linear map x+ = A x, u = c' x,
    /// with the controller weights held at their nominal values.
    fn linear_transitions(n: usize, a: &[[f64; 4]; 4], c: &[f64; 4]) -> TransitionSet {
        let theta = ParamVector::nominal();
        let mut seq = R2Sequence::new(4, &R2Sequence::shift_from_seed(4, 99));
        let mut set = TransitionSet::new();
        for _ in 0..n {
            let u = seq.next_point();
            let x = [
                2.0 * u[0] - 1.0,
                2.0 * u[1] - 1.0,
                2.0 * u[2] - 1.0,
                2.0 * u[3] - 1.0,
            ];
            let mut nx = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    nx[i] += a[i][j] * x[j];
                }
            }
            let input = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum::<f64>();
            set.push(TransitionRow {
                state: State::new(x[0], x[1], x[2], x[3]),
                theta,
                next_state: State::new(nx[0], nx[1], nx[2], nx[3]),
                input,
            });
        }
        set
    }

    fn stable_map() -> ([[f64; 4]; 4], [f64; 4]) {
        (
            [
                [0.8, 0.1, 0.0, 0.0],
                [-0.1, 0.7, 0.1, 0.0],
                [0.0, 0.0, 0.75, 0.1],
                [0.05, 0.0, -0.1, 0.8],
            ],
            [0.3, -0.2, 0.5, 0.1],
        )
    }

    #[test]
    fn trained_model_reproduces_its_own_transitions() {
        let (set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        assert_eq!(model.training_rows(), 25);
        assert_eq!(model.gp().dim(), FEATURE_DIM);

        let mut worst = 0.0_f64;
        for r in set.rows() {
            let (mean, _) = model.predict(&r.state, &r.theta).unwrap();
            let z = super::row_outputs(r);
            for d in 0..OUTPUT_DIM {
                worst = worst.max((mean[d] - z[d]).abs());
            }
        }
        assert!(worst <= 1e-4, "worst training-point deviation {worst}");
    }

    #[test]
    fn two_episodes_stack_into_one_training_set() {
        let (mut set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let theta2 = ParamVector::new([2.0, 1.0, 3.0, 1.0, 0.5]).unwrap();
        let (set2, _) = episode_transitions(&theta2, 25);
        set.extend_from(set2.rows());

        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        assert_eq!(model.training_rows(), 50);
        assert_eq!(model.gp().outputs(), OUTPUT_DIM);
    }

    #[test]
    fn incremental_training_matches_row_count_and_stays_finite() {
        let (mut set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        trainer.train(&set, true).unwrap();

        let theta2 = ParamVector::new([0.5, 1.0, 2.0, 1.0, 1.5]).unwrap();
        let (set2, _) = episode_transitions(&theta2, 25);
        set.extend_from(set2.rows());
        let model = trainer.train(&set, false).unwrap();
        assert_eq!(model.training_rows(), 50);
        let (mean, eps) = model.predict(&initial_state(), &theta2).unwrap();
        assert!(mean.iter().all(|v| v.is_finite()));
        assert!(eps.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn single_step_rollout_is_the_base_case() {
        let (set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        let roll = rollout_mean(model, &initial_state(), &ParamVector::nominal(), 1).unwrap();
        assert_eq!(roll.steps.len(), 1);
        assert_eq!(roll.nu.len(), 1);
        assert_eq!(roll.nu[0], roll.eps_norms[0]);
    }

    #[test]
    fn rollout_tracks_a_known_linear_system() {
        let (a, c) = stable_map();
        let set = linear_transitions(250, &a, &c);
        let mut cfg = TrainerConfig::default();
        cfg.fit.max_rows = Some(120);
        let mut trainer = DynamicsTrainer::new(cfg).unwrap();
        let model = trainer.train(&set, true).unwrap();

        let x0 = State::new(0.4, -0.3, 0.5, 0.2);
        let horizon = 10;
        let roll = rollout_mean(model, &x0, &ParamVector::nominal(), horizon).unwrap();

        // Exact iteration of the linear map.
        let mut x = [x0.pos, x0.vel, x0.angle, x0.angular_vel];
        let mut worst = 0.0_f64;
        for k in 0..horizon {
            let mut nx = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    nx[i] += a[i][j] * x[j];
                }
            }
            let u = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum::<f64>();
            let p = roll.steps[k];
            worst = worst
                .max((p.state.pos - nx[0]).abs())
                .max((p.state.vel - nx[1]).abs())
                .max((p.state.angle - nx[2]).abs())
                .max((p.state.angular_vel - nx[3]).abs())
                .max((p.input - u).abs());
            x = nx;
        }
        assert!(worst <= 1e-2, "worst rollout deviation {worst}");

        // The cost-error bound covers the observed cost error. Stage
        // Lipschitz from a box wide enough for both trajectories.
        let task = task_one();
        let region = ZBox { lower: [-2.0; 5], upper: [2.0; 5] };
        let l_stage = crate::closed_loop::estimate_stage_lipschitz(&task, &region).unwrap();
        let j_hat = surrogate_cost(&roll, &task);
        let chi = cost_bound(&roll, l_stage);
        let mut x = [x0.pos, x0.vel, x0.angle, x0.angular_vel];
        let mut j_true = 0.0;
        for _ in 0..horizon {
            let mut nx = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    nx[i] += a[i][j] * x[j];
                }
            }
            let u = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum::<f64>();
            j_true += task.stage_cost(&State::new(nx[0], nx[1], nx[2], nx[3]), u);
            x = nx;
        }
        assert!(
            (j_hat - j_true).abs() <= chi,
            "cost error {} exceeded bound {chi}",
            (j_hat - j_true).abs()
        );
    }

    #[test]
    fn fast_cost_agrees_with_full_rollout() {
        let (set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        let task = task_one();
        let roll = rollout_mean(model, &initial_state(), &ParamVector::nominal(), 25).unwrap();
        let fast =
            rollout_cost(model, &initial_state(), &ParamVector::nominal(), 25, &task).unwrap();
        assert_abs_diff_eq!(fast, surrogate_cost(&roll, &task), epsilon = 1e-9);
    }

    #[test]
    fn surrogate_cost_is_consistent_on_the_trained_episode() {
        // Trained on exactly the evaluated controller's episode, the mean
        // recursion follows the recorded chain and the predicted cost lands
        // on the true one.
        let theta = ParamVector::nominal();
        let (set, j_true) = episode_transitions(&theta, 25);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        let roll = rollout_mean(model, &initial_state(), &theta, 25).unwrap();
        let j_hat = surrogate_cost(&roll, &task_one());
        assert!(
            (j_hat - j_true).abs() <= 1e-3 * j_true.max(1.0),
            "predicted {j_hat} vs true {j_true}"
        );
    }

    #[test]
    fn deviation_recursion_and_cost_bound_match_hand_values() {
        let nu = propagate_deviation(&[0.1, 0.3], 2.0);
        assert_abs_diff_eq!(nu[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(nu[1], 0.5, epsilon = 1e-15);

        // With the deviations given directly, the bound is the stage
        // Lipschitz constant times their sum.
        let roll = Rollout {
            theta: ParamVector::nominal(),
            initial: State::origin(),
            steps: vec![
                PredictedStep { state: State::origin(), input: 0.0 },
                PredictedStep { state: State::origin(), input: 0.0 },
            ],
            eps_norms: vec![0.1, 0.3],
            nu: vec![0.1, 0.3],
            };
        assert_abs_diff_eq!(cost_bound(&roll, 2.0), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn deviation_bounds_are_nondecreasing_for_expanding_models() {
        let nu = propagate_deviation(&[0.2, 0.2, 0.2, 0.2], 1.3);
        for w in nu.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn lipschitz_estimate_brackets_a_linear_map() {
        let (a, c) = stable_map();
        let set = linear_transitions(300, &a, &c);
        let mut cfg = TrainerConfig::default();
        cfg.fit.max_rows = Some(120);
        let mut trainer = DynamicsTrainer::new(cfg).unwrap();
        let model = trainer.train(&set, true).unwrap();

        // Spectral norms of the full 5 x 4 map (four successor rows plus the
        // input row).
        let mut full = nalgebra::DMatrix::zeros(5, 4);
        for i in 0..4 {
            for j in 0..4 {
                full[(i, j)] = a[i][j];
            }
        }
        for j in 0..4 {
            full[(4, j)] = c[j];
        }
        let svd = full.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();

        let mut lower = [-1.0; FEATURE_DIM];
        let mut upper = [1.0; FEATURE_DIM];
        for d in 4..FEATURE_DIM {
            lower[d] = 0.0;
            upper[d] = 0.0;
        }
        let region = InputRegion { lower, upper };
        let est = estimate_gp_lipschitz(model, &region, 16).unwrap();
        assert!(
            est >= smin && est <= LIPSCHITZ_INFLATION * smax + 0.3,
            "estimate {est} outside [{smin}, {}]",
            LIPSCHITZ_INFLATION * smax + 0.3
        );
    }

    #[test]
    fn flat_model_hits_the_lipschitz_floor() {
        // Identical targets center to zero, so the posterior mean is
        // constant and every sampled slope vanishes.
        let theta = ParamVector::nominal();
        let mut set = TransitionSet::new();
        let mut seq = R2Sequence::new(4, &R2Sequence::shift_from_seed(4, 5));
        for _ in 0..30 {
            let u = seq.next_point();
            set.push(TransitionRow {
                state: State::new(u[0], u[1], u[2], u[3]),
                theta,
                next_state: State::new(0.3, 0.3, 0.3, 0.3),
                input: 1.0,
            });
        }
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        assert_eq!(model.lipschitz(), LIPSCHITZ_FLOOR);
    }

    #[test]
    fn degenerate_region_is_rejected() {
        let (set, _) = episode_transitions(&ParamVector::nominal(), 10);
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();
        let region = InputRegion { lower: [0.5; FEATURE_DIM], upper: [0.5; FEATURE_DIM] };
        let err = estimate_gp_lipschitz(model, &region, 8).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn candidate_evaluator_matches_the_slow_prediction_path() {
        let (mut set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let theta2 = ParamVector::new([3.0, 0.5, 8.0, 0.2, 1.0]).unwrap();
        let (set2, _) = episode_transitions(&theta2, 25);
        set.extend_from(set2.rows());
        let mut trainer = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let model = trainer.train(&set, true).unwrap();

        // Probe controllers both near and far from the training data; far
        // ones exercise the pruning.
        for theta in [
            ParamVector::nominal(),
            theta2,
            ParamVector::new([90.0, 90.0, 90.0, 90.0, 90.0]).unwrap(),
            ParamVector::new([0.02, 50.0, 0.02, 50.0, 0.02]).unwrap(),
        ] {
            let cand = model.candidate(&theta);
            for s in [
                initial_state(),
                State::new(0.3, -0.5, 0.1, 0.4),
                State::new(-1.0, 1.0, -0.3, -1.0),
            ] {
                let mut fast = [0.0; OUTPUT_DIM];
                cand.mean_into(&s, &mut fast);
                let (slow, _) = model.predict(&s, &theta).unwrap();
                for d in 0..OUTPUT_DIM {
                    assert_abs_diff_eq!(fast[d], slow[d], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (set, _) = episode_transitions(&ParamVector::nominal(), 25);
        let mut t1 = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let m1 = t1.train(&set, true).unwrap();
        let mut t2 = DynamicsTrainer::new(TrainerConfig::default()).unwrap();
        let m2 = t2.train(&set, true).unwrap();
        assert_eq!(m1.lipschitz().to_bits(), m2.lipschitz().to_bits());
        let (a, _) = m1.predict(&initial_state(), &ParamVector::nominal()).unwrap();
        let (b, _) = m2.predict(&initial_state(), &ParamVector::nominal()).unwrap();
        for d in 0..OUTPUT_DIM {
            assert_eq!(a[d].to_bits(), b[d].to_bits());
        }
    }

    #[test]
    fn pinned_kernel_model_interpolates_and_honors_given_norm_bounds() {
        let (a, c) = stable_map();
        let set = linear_transitions(40, &a, &c);
        let kernels: Vec<KernelSpec> = (0..OUTPUT_DIM)
            .map(|_| {
                KernelSpec::new(KernelKind::SquaredExponential, 1.0, vec![2.0; FEATURE_DIM])
                    .unwrap()
            })
            .collect();
        let model =
            model_from_kernels(&set, &kernels, &[1e-8; OUTPUT_DIM], 0.01, None, 0.5).unwrap();
        assert_abs_diff_eq!(model.lipschitz(), 0.5, epsilon = 0.0);

        // Near-noiseless conditioning reproduces the training targets.
        let row = &set.rows()[0];
        let (mean, _) = model.predict(&row.state, &row.theta).unwrap();
        let want = row_outputs(row);
        for d in 0..OUTPUT_DIM {
            assert_abs_diff_eq!(mean[d], want[d], epsilon = 1e-5);
        }

        // A larger norm bound widens every calibrated radius.
        let wide = model_from_kernels(
            &set,
            &kernels,
            &[1e-8; OUTPUT_DIM],
            0.01,
            Some(&[50.0; OUTPUT_DIM]),
            0.5,
        )
        .unwrap();
        let probe = State::new(0.9, -0.9, 0.9, -0.9);
        let (_, eps_base) = model.predict(&probe, &row.theta).unwrap();
        let (_, eps_wide) = wide.predict(&probe, &row.theta).unwrap();
        for d in 0..OUTPUT_DIM {
            assert!(eps_wide[d] > eps_base[d]);
        }
    }

    #[test]
    fn distinct_output_kernels_keep_the_evaluator_exact() {
        // Per-output lengthscales rule out the pooled evaluator, so this
        // pins the unshared path against the full prediction.
        let (a, c) = stable_map();
        let set = linear_transitions(40, &a, &c);
        let kernels: Vec<KernelSpec> = (0..OUTPUT_DIM)
            .map(|o| {
                KernelSpec::new(
                    KernelKind::SquaredExponential,
                    1.0,
                    vec![2.0 + 0.3 * o as f64; FEATURE_DIM],
                )
                .unwrap()
            })
            .collect();
        let model =
            model_from_kernels(&set, &kernels, &[1e-8; OUTPUT_DIM], 0.01, None, 0.5).unwrap();
        let theta = set.rows()[0].theta;
        let cand = model.candidate(&theta);
        for s in [initial_state(), State::new(0.4, -0.2, 0.3, -0.6)] {
            let mut fast = [0.0; OUTPUT_DIM];
            cand.mean_into(&s, &mut fast);
            let (slow, _) = model.predict(&s, &theta).unwrap();
            for d in 0..OUTPUT_DIM {
                assert_abs_diff_eq!(fast[d], slow[d], epsilon = 1e-10);
            }
        }
    }
}
