//! The three optimization loops.
//!
//! All methods share the evaluation protocol: one controller per iteration,
//! one episode per evaluation, the first iteration always spending its
//! budget on the nominal controller. They differ in what they learn from
//! the outcomes. The blackbox loop fits a GP directly on the
//! parameters-to-cost map; the multi-task loop couples the cost GPs of all
//! tasks through a learned 2x2 task covariance; the hierarchical loop
//! learns the closed-loop dynamics from raw transitions and scores
//! candidate controllers by rolling that model forward, which lets it share
//! every transition across tasks without task labels.
//!
//! Episode noise streams are seeded per (task, seed, iteration) and carry no
//! method tag, so competing methods face identical disturbance sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::closed_loop::{
    closed_loop_cost, estimate_stage_lipschitz, extract_transitions, run_episode, Task,
    Trajectory, TransitionSet, ZBox,
};
use crate::fastmath::exp as fastexp;
use crate::gp::{
    fit_hyperparameters, FitConfig, GpDataset, GpPosterior, KernelKind, PriorMean,
};
use crate::lowdisc::R2Sequence;
use crate::mpc::{OcpConfig, ParamVector};
use crate::plant::{PlantConfig, State};
use crate::seeding::{derive_seed, hash_tag};
use crate::surrogate::{
    cost_bound, rollout_cost, rollout_mean, surrogate_cost, DynamicsTrainer, TrainerConfig,
};
use crate::{Error, Result};

const DIM: usize = 5;

/// Which optimizer produced a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodKind {
    Blackbox,
    Multitask,
    Hierarchical,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Blackbox => "blackbox",
            MethodKind::Multitask => "multitask",
            MethodKind::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blackbox" => Ok(MethodKind::Blackbox),
            "multitask" => Ok(MethodKind::Multitask),
            "hierarchical" => Ok(MethodKind::Hierarchical),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

/// Scoring rule the acquisition optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionKind {
    /// Posterior mean minus beta standard deviations of the cost GP.
    LowerConfidenceBound,
    /// Negated expected improvement of the cost GP.
    ExpectedImprovement,
    /// Predicted cost from the dynamics-model rollout.
    MeanCost,
    /// Predicted cost minus its error bound; the pessimism-free variant.
    TheoryLcb,
}

impl AcquisitionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AcquisitionKind::LowerConfidenceBound => "lcb",
            AcquisitionKind::ExpectedImprovement => "ei",
            AcquisitionKind::MeanCost => "mean",
            AcquisitionKind::TheoryLcb => "theory-lcb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lcb" => Ok(AcquisitionKind::LowerConfidenceBound),
            "ei" => Ok(AcquisitionKind::ExpectedImprovement),
            "mean" => Ok(AcquisitionKind::MeanCost),
            "theory-lcb" => Ok(AcquisitionKind::TheoryLcb),
            other => Err(Error::invalid(format!("unknown acquisition '{other}'"))),
        }
    }
}

/// Shared optimizer settings.
#[derive(Debug, Clone)]
pub struct BoConfig {
    /// Iterations per task.
    pub budget: usize,
    pub acquisition: AcquisitionKind,
    /// Confidence multiplier of the lower-confidence-bound rule.
    pub beta: f64,
    /// Space-filling probes per acquisition optimization.
    pub restarts: usize,
    /// Coordinate-refinement steps after the probes.
    pub local_steps: usize,
    /// Observation-noise variance of the cost GPs, in standardized cost
    /// units.
    pub cost_noise_var: f64,
    pub kernel: KernelKind,
    /// Hyperparameter fit budget of the cost GPs.
    pub fit: FitConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            budget: 50,
            acquisition: AcquisitionKind::LowerConfidenceBound,
            beta: 2.0,
            restarts: 64,
            local_steps: 110,
            cost_noise_var: 1e-4,
            kernel: KernelKind::SquaredExponential,
            fit: FitConfig {
                restarts: 2,
                steps: 30,
                lengthscale_bounds: (0.05, 20.0),
                signal_variance_bounds: (1e-2, 1e2),
                ..FitConfig::default()
            },
        }
    }
}

impl BoConfig {
    pub fn validate_for(&self, method: MethodKind) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("optimization budget must be at least one iteration"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("acquisition needs at least one probe"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.cost_noise_var > 0.0 && self.cost_noise_var.is_finite()) {
            return Err(Error::invalid("cost-observation noise variance must be positive"));
        }
        let ok = match method {
            MethodKind::Blackbox => matches!(
                self.acquisition,
                AcquisitionKind::LowerConfidenceBound | AcquisitionKind::ExpectedImprovement
            ),
            MethodKind::Multitask => {
                matches!(self.acquisition, AcquisitionKind::ExpectedImprovement)
            }
            MethodKind::Hierarchical => {
                matches!(self.acquisition, AcquisitionKind::MeanCost | AcquisitionKind::TheoryLcb)
            }
        };
        if !ok {
            return Err(Error::invalid(format!(
                "acquisition '{}' is not available for method '{}'",
                self.acquisition.name(),
                method.name()
            )));
        }
        Ok(())
    }
}

/// Lower confidence bound of a cost posterior, for minimization.
pub fn lcb(mean: f64, variance: f64, beta: f64) -> f64 {
    mean - beta * variance.max(0.0).sqrt()
}

fn normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * fastexp(-0.5 * z * z)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `best`, for minimization. Collapses to the
/// hinge `max(best - mean, 0)` when the posterior is degenerate.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    if sd == 0.0 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    sd * (z * normal_cdf(z) + normal_pdf(z))
}

/// Strict preference between evaluated candidates: smaller value wins, and
/// exact ties go to the lexicographically smaller point in log space.
fn better(value: f64, theta: &[f64; DIM], best_value: f64, best_theta: &[f64; DIM]) -> bool {
    if value < best_value {
        return true;
    }
    if value > best_value {
        return false;
    }
    for d in 0..DIM {
        if theta[d] < best_theta[d] {
            return true;
        }
        if theta[d] > best_theta[d] {
            return false;
        }
    }
    false
}

/// Result of one acquisition optimization, in log10 parameter space.
#[derive(Debug, Clone, Copy)]
pub struct AcqOutcome {
    pub theta_log: [f64; DIM],
    pub value: f64,
    /// Every finite evaluation returned the same value; the winner is then
    /// just the lexicographic minimum.
    pub flat: bool,
    pub evaluations: usize,
}

/// Minimize an acquisition over the log10 parameter box: caller-supplied
/// warm starts and space-filling probes (rotated by the rng so repeated
/// calls explore differently), followed by coordinate refinement around the
/// incumbent with a step that halves after every sweep without progress.
/// Warm starts carry the previous round's solution into the next one, so
/// successive calls keep polishing the same basin unless a probe finds a
/// better one. Candidates where the acquisition is non-finite are skipped;
/// if every candidate fails the optimization reports a numerical failure.
pub fn optimize_acquisition<F: FnMut(&[f64; DIM]) -> f64>(
    mut acq: F,
    restarts: usize,
    local_steps: usize,
    warm_starts: &[[f64; DIM]],
    rng: &mut ChaCha12Rng,
) -> Result<AcqOutcome> {
    if restarts == 0 {
        return Err(Error::invalid("acquisition needs at least one probe"));
    }
    let (lo, hi) = ParamVector::log10_bounds();
    let width = hi - lo;

    let shift: Vec<f64> = (0..DIM).map(|_| rng.random::<f64>()).collect();
    let mut seq = R2Sequence::new(DIM, &shift);

    let mut best: Option<([f64; DIM], f64)> = None;
    let mut lo_val = f64::INFINITY;
    let mut hi_val = f64::NEG_INFINITY;
    let mut finite = 0usize;
    let mut evaluations = 0usize;

    let consider = |point: &[f64; DIM],
                        value: f64,
                        best: &mut Option<([f64; DIM], f64)>,
                        lo_val: &mut f64,
                        hi_val: &mut f64,
                        finite: &mut usize| {
        if !value.is_finite() {
            return;
        }
        *finite += 1;
        *lo_val = lo_val.min(value);
        *hi_val = hi_val.max(value);
        match best {
            None => *best = Some((*point, value)),
            Some((bt, bv)) => {
                if better(value, point, *bv, bt) {
                    *best = Some((*point, value));
                }
            }
        }
    };

    for start in warm_starts {
        let mut p = *start;
        for v in &mut p {
            *v = v.clamp(lo, hi);
        }
        let v = acq(&p);
        evaluations += 1;
        consider(&p, v, &mut best, &mut lo_val, &mut hi_val, &mut finite);
    }

    for _ in 0..restarts {
        let u = seq.next_point();
        let mut p = [0.0; DIM];
        for d in 0..DIM {
            p[d] = lo + u[d] * width;
        }
        let v = acq(&p);
        evaluations += 1;
        consider(&p, v, &mut best, &mut lo_val, &mut hi_val, &mut finite);
    }

    let (mut cur, mut cur_val) = best.ok_or_else(|| {
        Error::numerical(format!("all {evaluations} acquisition candidates were non-finite"))
    })?;

    // Coordinate descent around the incumbent. An accepted move keeps
    // walking in the same direction at the same scale, so one sweep can
    // cross the box; the step halves after a sweep without progress.
    let mut h = 0.25 * width;
    let h_floor = 1e-4 * width;
    let mut moved_in_sweep = false;
    for step in 0..local_steps {
        let d = step % DIM;
        if d == 0 && step > 0 {
            if !moved_in_sweep {
                h *= 0.5;
                if h < h_floor {
                    break;
                }
            }
            moved_in_sweep = false;
        }
        'dirs: for dir in [1.0, -1.0] {
            let mut p = cur;
            p[d] = (cur[d] + dir * h).clamp(lo, hi);
            if p[d] == cur[d] {
                continue;
            }
            let v = acq(&p);
            evaluations += 1;
            consider(&p, v, &mut best, &mut lo_val, &mut hi_val, &mut finite);
            if v.is_finite() && v < cur_val {
                cur = p;
                cur_val = v;
                moved_in_sweep = true;
                for _ in 0..8 {
                    let mut q = cur;
                    q[d] = (cur[d] + dir * h).clamp(lo, hi);
                    if q[d] == cur[d] {
                        break;
                    }
                    let vq = acq(&q);
                    evaluations += 1;
                    consider(&q, vq, &mut best, &mut lo_val, &mut hi_val, &mut finite);
                    if vq.is_finite() && vq < cur_val {
                        cur = q;
                        cur_val = vq;
                    } else {
                        break;
                    }
                }
                break 'dirs;
            }
        }
    }

    let (theta_log, value) = best.expect("at least one finite evaluation");
    Ok(AcqOutcome { theta_log, value, flat: finite >= 2 && lo_val == hi_val, evaluations })
}

/// Outcome of one episode-level evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    /// Present for successful plant episodes; synthetic oracles may omit it.
    pub trajectory: Option<Trajectory>,
    pub aborted: bool,
    pub episode_seed: u64,
}

/// Source of episode costs. The runner below evaluates the real plant; tests
/// substitute synthetic functions.
pub trait CostOracle {
    fn evaluate(
        &self,
        task_idx: usize,
        seed_idx: u64,
        iter: usize,
        theta: &ParamVector,
    ) -> Result<Evaluation>;
    /// Root of all derived random streams.
    fn base_seed(&self) -> u64;
    fn tasks(&self) -> &[Task];
    /// Steps per episode, which is also the surrogate rollout horizon.
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> State;
}

/// Cost returned for an aborted episode.
pub const ABORT_COST: f64 = 1e6;

/// Evaluates controllers on the simulated plant.
///
/// Episode seeds depend on (task, seed index, iteration) but not on the
/// optimizer, so every method sees the same noise when it evaluates the same
/// iteration slot.
#[derive(Debug, Clone)]
pub struct EpisodeRunner {
    pub plant: PlantConfig,
    pub ocp: OcpConfig,
    pub x0: State,
    pub steps: usize,
    pub tasks: Vec<Task>,
    pub master_seed: u64,
}

impl EpisodeRunner {
    pub fn episode_seed(&self, task_idx: usize, seed_idx: u64, iter: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[hash_tag("episode"), task_idx as u64, seed_idx, iter as u64],
        )
    }

    /// Checksum over the episode seeds of one (task, seed) unit, logged so
    /// stream alignment across methods can be audited after the fact.
    pub fn stream_checksum(&self, task_idx: usize, seed_idx: u64, iters: usize) -> u64 {
        let mut acc = hash_tag("noise-stream");
        for iter in 1..=iters {
            acc = crate::seeding::splitmix64(
                acc ^ self.episode_seed(task_idx, seed_idx, iter),
            );
        }
        acc
    }
}

impl CostOracle for EpisodeRunner {
    fn evaluate(
        &self,
        task_idx: usize,
        seed_idx: u64,
        iter: usize,
        theta: &ParamVector,
    ) -> Result<Evaluation> {
        let task = &self.tasks[task_idx];
        let seed = self.episode_seed(task_idx, seed_idx, iter);
        match run_episode(&self.plant, &self.ocp, theta, &self.x0, self.steps, seed) {
            Ok(traj) => {
                let cost = closed_loop_cost(&traj, task);
                Ok(Evaluation { cost, trajectory: Some(traj), aborted: false, episode_seed: seed })
            }
            Err(Error::EpisodeAborted { .. }) => {
                Ok(Evaluation { cost: ABORT_COST, trajectory: None, aborted: true, episode_seed: seed })
            }
            Err(e) => Err(e),
        }
    }

    fn base_seed(&self) -> u64 {
        self.master_seed
    }

    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn horizon(&self) -> usize {
        self.steps
    }

    fn initial_state(&self) -> State {
        self.x0
    }
}

/// One evaluated iteration.
#[derive(Debug, Clone)]
pub struct BoRecord {
    /// Task-relative iteration, starting at 1.
    pub t: usize,
    pub theta: ParamVector,
    pub cost: f64,
    pub best_so_far: f64,
    pub cumulative: f64,
    pub aborted: bool,
    pub episode_seed: u64,
    /// Rollout cost prediction, hierarchical method only.
    pub surrogate_cost: Option<f64>,
    /// Cost-error bound around the prediction, hierarchical method only.
    pub bound: Option<f64>,
}

/// Evaluations of one (method, task, seed) unit in iteration order.
#[derive(Debug, Clone)]
pub struct BoHistory {
    pub method: MethodKind,
    pub task_label: String,
    pub seed_index: u64,
    pub records: Vec<BoRecord>,
}

fn acquisition_rng(base: u64, method: MethodKind, task_idx: usize, seed_idx: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(
        base,
        &[hash_tag("acquisition"), hash_tag(method.name()), task_idx as u64, seed_idx],
    ))
}

/// GP over log10 controller weights to episode cost, inputs and targets
/// standardized against the observation set.
struct CostGp {
    post: GpPosterior,
    x_mean: [f64; DIM],
    x_std: [f64; DIM],
    y_mean: f64,
    y_std: f64,
}

const STD_FLOOR: f64 = 1e-8;

impl CostGp {
    fn fit(
        thetas_log: &[[f64; DIM]],
        costs: &[f64],
        noise_var_std: f64,
        kind: KernelKind,
        fit: &FitConfig,
    ) -> Result<CostGp> {
        let n = thetas_log.len();
        if n == 0 || n != costs.len() {
            return Err(Error::invalid("cost GP needs matching, nonempty observations"));
        }
        let mut x_mean = [0.0; DIM];
        let mut x_std = [1.0; DIM];
        for d in 0..DIM {
            let m = thetas_log.iter().map(|t| t[d]).sum::<f64>() / n as f64;
            let v = thetas_log.iter().map(|t| (t[d] - m) * (t[d] - m)).sum::<f64>() / n as f64;
            x_mean[d] = m;
            x_std[d] = v.sqrt().max(STD_FLOOR);
        }
        let y_mean = costs.iter().sum::<f64>() / n as f64;
        let y_var = costs.iter().map(|c| (c - y_mean) * (c - y_mean)).sum::<f64>() / n as f64;
        let y_std = y_var.sqrt().max(STD_FLOOR);

        let mut inputs = nalgebra::DMatrix::zeros(n, DIM);
        for (i, t) in thetas_log.iter().enumerate() {
            for d in 0..DIM {
                inputs[(i, d)] = (t[d] - x_mean[d]) / x_std[d];
            }
        }
        let targets =
            nalgebra::DVector::from_iterator(n, costs.iter().map(|c| (c - y_mean) / y_std));
        let data = GpDataset::new(inputs, targets, noise_var_std)?;
        let report = fit_hyperparameters(&data, kind, fit)?;
        let post = GpPosterior::condition(&data, &report.kernel, PriorMean::FitToData)?;
        Ok(CostGp { post, x_mean, x_std, y_mean, y_std })
    }

    /// Mean and variance in natural cost units.
    fn predict(&self, theta_log: &[f64; DIM]) -> (f64, f64) {
        let mut q = [0.0; DIM];
        for d in 0..DIM {
            q[d] = (theta_log[d] - self.x_mean[d]) / self.x_std[d];
        }
        let qv = nalgebra::DVector::from_row_slice(&q);
        match self.post.predict(&qv) {
            Ok((m, v)) => (self.y_mean + self.y_std * m, v * self.y_std * self.y_std),
            Err(_) => (f64::NAN, f64::NAN),
        }
    }
}

/// Plain GP optimization of one task from cost observations alone.
pub fn run_blackbox(
    cfg: &BoConfig,
    oracle: &dyn CostOracle,
    task_idx: usize,
    seed_idx: u64,
) -> Result<BoHistory> {
    cfg.validate_for(MethodKind::Blackbox)?;
    check_task(oracle, task_idx)?;
    let mut rng = acquisition_rng(oracle.base_seed(), MethodKind::Blackbox, task_idx, seed_idx);

    let mut obs_theta: Vec<[f64; DIM]> = Vec::with_capacity(cfg.budget);
    let mut obs_cost: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut records = Vec::with_capacity(cfg.budget);
    let mut best = f64::INFINITY;
    let mut cumulative = 0.0;

    for t in 1..=cfg.budget {
        let theta = if t == 1 {
            ParamVector::nominal()
        } else {
            let gp =
                CostGp::fit(&obs_theta, &obs_cost, cfg.cost_noise_var, cfg.kernel, &cfg.fit)?;
            let inc_idx = obs_cost
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("at least one observation after the first iteration");
            let incumbent = obs_cost[inc_idx];
            let warm = [obs_theta[inc_idx]];
            let out = match cfg.acquisition {
                AcquisitionKind::LowerConfidenceBound => optimize_acquisition(
                    |p| {
                        let (m, v) = gp.predict(p);
                        lcb(m, v, cfg.beta)
                    },
                    cfg.restarts,
                    cfg.local_steps,
                    &warm,
                    &mut rng,
                )?,
                AcquisitionKind::ExpectedImprovement => optimize_acquisition(
                    |p| {
                        let (m, v) = gp.predict(p);
                        -expected_improvement(m, v, incumbent)
                    },
                    cfg.restarts,
                    cfg.local_steps,
                    &warm,
                    &mut rng,
                )?,
                _ => unreachable!("validated above"),
            };
            ParamVector::from_log10(out.theta_log)?
        };

        let ev = oracle.evaluate(task_idx, seed_idx, t, &theta)?;
        obs_theta.push(theta.to_log10());
        obs_cost.push(ev.cost);
        best = best.min(ev.cost);
        cumulative += ev.cost;
        records.push(BoRecord {
            t,
            theta,
            cost: ev.cost,
            best_so_far: best,
            cumulative,
            aborted: ev.aborted,
            episode_seed: ev.episode_seed,
            surrogate_cost: None,
            bound: None,
        });
    }

    Ok(BoHistory {
        method: MethodKind::Blackbox,
        task_label: oracle.tasks()[task_idx].label.clone(),
        seed_index: seed_idx,
        records,
    })
}

fn check_task(oracle: &dyn CostOracle, task_idx: usize) -> Result<()> {
    if task_idx >= oracle.tasks().len() {
        return Err(Error::invalid(format!(
            "task index {task_idx} out of range for {} tasks",
            oracle.tasks().len()
        )));
    }
    Ok(())
}

/// Intrinsic-coregionalization GP: a shared kernel over standardized log10
/// weights times a learned 2x2 task covariance B = L L^T, observations from
/// all tasks pooled.
pub(crate) struct IcmGp {
    lengthscales: [f64; DIM],
    b: [[f64; 2]; 2],
    inputs: Vec<[f64; DIM]>,
    task_ids: Vec<usize>,
    l: nalgebra::DMatrix<f64>,
    alpha: Vec<f64>,
    x_mean: [f64; DIM],
    x_std: [f64; DIM],
    y_mean: f64,
    y_std: f64,
}

/// Raw ICM parameters: log lengthscales plus the task-covariance Cholesky
/// factor [[e^a, 0], [b21, e^c]].
#[derive(Debug, Clone, Copy)]
struct IcmParams {
    log_len: [f64; DIM],
    a: f64,
    b21: f64,
    c: f64,
}

const ICM_NPARAMS: usize = DIM + 3;

impl IcmParams {
    fn b_matrix(&self) -> [[f64; 2]; 2] {
        let ea = self.a.exp();
        let ec = self.c.exp();
        [[ea * ea, ea * self.b21], [ea * self.b21, self.b21 * self.b21 + ec * ec]]
    }

    fn db_matrix(&self, p: usize) -> [[f64; 2]; 2] {
        let ea = self.a.exp();
        let ec = self.c.exp();
        match p {
            0 => [[2.0 * ea * ea, ea * self.b21], [ea * self.b21, 0.0]],
            1 => [[0.0, ea], [ea, 2.0 * self.b21]],
            2 => [[0.0, 0.0], [0.0, 2.0 * ec * ec]],
            _ => unreachable!(),
        }
    }

    fn to_vec(self) -> [f64; ICM_NPARAMS] {
        let mut v = [0.0; ICM_NPARAMS];
        v[..DIM].copy_from_slice(&self.log_len);
        v[DIM] = self.a;
        v[DIM + 1] = self.b21;
        v[DIM + 2] = self.c;
        v
    }

    fn from_vec(v: &[f64; ICM_NPARAMS]) -> Self {
        let mut log_len = [0.0; DIM];
        log_len.copy_from_slice(&v[..DIM]);
        IcmParams { log_len, a: v[DIM], b21: v[DIM + 1], c: v[DIM + 2] }
    }

    fn clamp(v: &mut [f64; ICM_NPARAMS]) {
        for q in v.iter_mut().take(DIM) {
            *q = q.clamp((0.05_f64).ln(), (20.0_f64).ln());
        }
        v[DIM] = v[DIM].clamp(-3.0, 2.5);
        v[DIM + 1] = v[DIM + 1].clamp(-10.0, 10.0);
        v[DIM + 2] = v[DIM + 2].clamp(-3.0, 2.5);
    }
}

fn icm_theta_kernel(a: &[f64; DIM], b: &[f64; DIM], log_len: &[f64; DIM]) -> f64 {
    let mut r2 = 0.0;
    for d in 0..DIM {
        let t = (a[d] - b[d]) / log_len[d].exp();
        r2 += t * t;
    }
    fastexp(-0.5 * r2)
}

fn icm_lml_and_grad(
    inputs: &[[f64; DIM]],
    task_ids: &[usize],
    y: &[f64],
    noise_var: f64,
    params: &IcmParams,
    want_grad: bool,
) -> Result<(f64, [f64; ICM_NPARAMS])> {
    let n = inputs.len();
    let b = params.b_matrix();

    let mut gram = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = icm_theta_kernel(&inputs[i], &inputs[j], &params.log_len)
                * b[task_ids[i]][task_ids[j]];
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    // The jitter ladder scales with the largest task variance.
    let sig = b[0][0].max(b[1][1]);
    let chol = crate::gp::linalg::factor(&gram, noise_var, sig)?;

    let mut alpha = y.to_vec();
    crate::gp::linalg::solve_lower(&chol.l, &mut alpha);
    crate::gp::linalg::solve_lower_transpose(&chol.l, &mut alpha);

    let logdet: f64 = 2.0 * (0..n).map(|i| chol.l[(i, i)].ln()).sum::<f64>();
    let fit_term: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * fit_term - 0.5 * logdet
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !want_grad {
        return Ok((lml, [0.0; ICM_NPARAMS]));
    }

    // Explicit inverse for the trace term; observation counts stay small.
    let mut kinv = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        crate::gp::linalg::solve_lower(&chol.l, &mut e);
        crate::gp::linalg::solve_lower_transpose(&chol.l, &mut e);
        for i in 0..n {
            kinv[(i, j)] = e[i];
        }
    }

    let mut grad = [0.0; ICM_NPARAMS];
    let lens: Vec<f64> = params.log_len.iter().map(|v| v.exp()).collect();
    let db: [[[f64; 2]; 2]; 3] =
        [params.db_matrix(0), params.db_matrix(1), params.db_matrix(2)];
    for i in 0..n {
        for j in 0..=i {
            let w = if i == j { 0.5 } else { 1.0 };
            let factor = (alpha[i] * alpha[j] - kinv[(i, j)]) * w;
            let ktheta = icm_theta_kernel(&inputs[i], &inputs[j], &params.log_len);
            let bij = b[task_ids[i]][task_ids[j]];
            for d in 0..DIM {
                let t = (inputs[i][d] - inputs[j][d]) / lens[d];
                // d k / d log(len_d) = k * t^2
                grad[d] += factor * bij * ktheta * t * t;
            }
            for p in 0..3 {
                grad[DIM + p] += factor * ktheta * db[p][task_ids[i]][task_ids[j]];
            }
        }
    }
    // The half-weight pair loop covers the symmetric sum once; double it.
    for g in grad.iter_mut() {
        *g *= 2.0 * 0.5;
    }
    Ok((lml, grad))
}

impl IcmGp {
    /// Fit lengthscales and task covariance by marginal likelihood and
    /// condition on all observations.
    pub(crate) fn fit(
        thetas_log: &[[f64; DIM]],
        task_ids: &[usize],
        costs: &[f64],
        noise_var_std: f64,
        fit: &FitConfig,
    ) -> Result<IcmGp> {
        let n = thetas_log.len();
        if n == 0 || n != task_ids.len() || n != costs.len() {
            return Err(Error::invalid("multi-task GP needs matching, nonempty observations"));
        }
        if task_ids.iter().any(|t| *t >= 2) {
            return Err(Error::invalid("the task covariance is 2x2; task ids must be 0 or 1"));
        }

        let mut x_mean = [0.0; DIM];
        let mut x_std = [1.0; DIM];
        for d in 0..DIM {
            let m = thetas_log.iter().map(|t| t[d]).sum::<f64>() / n as f64;
            let v = thetas_log.iter().map(|t| (t[d] - m) * (t[d] - m)).sum::<f64>() / n as f64;
            x_mean[d] = m;
            x_std[d] = v.sqrt().max(STD_FLOOR);
        }
        let y_mean = costs.iter().sum::<f64>() / n as f64;
        let y_var = costs.iter().map(|c| (c - y_mean) * (c - y_mean)).sum::<f64>() / n as f64;
        let y_std = y_var.sqrt().max(STD_FLOOR);

        let inputs: Vec<[f64; DIM]> = thetas_log
            .iter()
            .map(|t| {
                let mut p = [0.0; DIM];
                for d in 0..DIM {
                    p[d] = (t[d] - x_mean[d]) / x_std[d];
                }
                p
            })
            .collect();
        let y: Vec<f64> = costs.iter().map(|c| (c - y_mean) / y_std).collect();

        // Start near unit lengthscales with strongly correlated tasks.
        let base = IcmParams {
            log_len: [0.0; DIM],
            a: 0.0,
            b21: 0.8,
            c: 0.5 * (0.36_f64).ln(),
        }
        .to_vec();

        let mut starts = vec![base];
        let mut seq = R2Sequence::new(ICM_NPARAMS, &R2Sequence::shift_from_seed(ICM_NPARAMS, 0x371));
        for _ in 1..fit.restarts.max(1) {
            let u = seq.next_point();
            let mut v = base;
            for (q, ui) in v.iter_mut().zip(u) {
                *q += 2.0 * ui - 1.0;
            }
            IcmParams::clamp(&mut v);
            starts.push(v);
        }

        let mut best_v = base;
        let mut best_lml = f64::NEG_INFINITY;
        for start in &starts {
            if let Ok((lml, _)) =
                icm_lml_and_grad(&inputs, task_ids, &y, noise_var_std, &IcmParams::from_vec(start), false)
            {
                if lml > best_lml {
                    best_lml = lml;
                    best_v = *start;
                }
            }
            let mut v = *start;
            let mut m = [0.0; ICM_NPARAMS];
            let mut s = [0.0; ICM_NPARAMS];
            for step in 1..=fit.steps {
                let (lml, grad) = match icm_lml_and_grad(
                    &inputs,
                    task_ids,
                    &y,
                    noise_var_std,
                    &IcmParams::from_vec(&v),
                    true,
                ) {
                    Ok(r) => r,
                    Err(_) => break,
                };
                if lml > best_lml {
                    best_lml = lml;
                    best_v = v;
                }
                let b1 = 0.9_f64;
                let b2 = 0.999_f64;
                for q in 0..ICM_NPARAMS {
                    m[q] = b1 * m[q] + (1.0 - b1) * grad[q];
                    s[q] = b2 * s[q] + (1.0 - b2) * grad[q] * grad[q];
                    let mh = m[q] / (1.0 - b1.powi(step as i32));
                    let sh = s[q] / (1.0 - b2.powi(step as i32));
                    v[q] += fit.learning_rate * mh / (sh.sqrt() + 1e-8);
                }
                IcmParams::clamp(&mut v);
            }
            if let Ok((lml, _)) =
                icm_lml_and_grad(&inputs, task_ids, &y, noise_var_std, &IcmParams::from_vec(&v), false)
            {
                if lml > best_lml {
                    best_lml = lml;
                    best_v = v;
                }
            }
        }
        if !best_lml.is_finite() {
            return Err(Error::numerical(
                "multi-task evidence was not finite at any start".to_string(),
            ));
        }

        let params = IcmParams::from_vec(&best_v);
        IcmGp::condition(inputs, task_ids.to_vec(), y, noise_var_std, &params, x_mean, x_std, y_mean, y_std)
    }

    #[allow(clippy::too_many_arguments)]
    fn condition(
        inputs: Vec<[f64; DIM]>,
        task_ids: Vec<usize>,
        y: Vec<f64>,
        noise_var: f64,
        params: &IcmParams,
        x_mean: [f64; DIM],
        x_std: [f64; DIM],
        y_mean: f64,
        y_std: f64,
    ) -> Result<IcmGp> {
        let n = inputs.len();
        let b = params.b_matrix();
        // The factorized construction keeps B positive semidefinite; guard
        // the invariant anyway since downstream variances rely on it.
        let tr = b[0][0] + b[1][1];
        let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
        let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        if min_eig < -1e-10 {
            return Err(Error::numerical(format!(
                "task covariance lost positive semidefiniteness (min eigenvalue {min_eig:.3e})"
            )));
        }

        let mut gram = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = icm_theta_kernel(&inputs[i], &inputs[j], &params.log_len)
                    * b[task_ids[i]][task_ids[j]];
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }
        let sig = b[0][0].max(b[1][1]);
        let chol = crate::gp::linalg::factor(&gram, noise_var, sig)?;
        let mut alpha = y.clone();
        crate::gp::linalg::solve_lower(&chol.l, &mut alpha);
        crate::gp::linalg::solve_lower_transpose(&chol.l, &mut alpha);

        let mut lengthscales = [0.0; DIM];
        for d in 0..DIM {
            lengthscales[d] = params.log_len[d].exp();
        }
        Ok(IcmGp {
            lengthscales,
            b,
            inputs,
            task_ids,
            l: chol.l,
            alpha,
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    /// Mean and variance of one task's cost at `theta_log`, natural units.
    pub(crate) fn predict(&self, theta_log: &[f64; DIM], task: usize) -> (f64, f64) {
        let mut q = [0.0; DIM];
        for d in 0..DIM {
            q[d] = (theta_log[d] - self.x_mean[d]) / self.x_std[d];
        }
        let mut log_len = [0.0; DIM];
        for d in 0..DIM {
            log_len[d] = self.lengthscales[d].ln();
        }
        let n = self.inputs.len();
        let mut k = vec![0.0; n];
        for i in 0..n {
            k[i] = icm_theta_kernel(&self.inputs[i], &q, &log_len) * self.b[task][self.task_ids[i]];
        }
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        crate::gp::linalg::solve_lower(&self.l, &mut k);
        let var = (self.b[task][task] - k.iter().map(|v| v * v).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_std * mean, var * self.y_std * self.y_std)
    }

    /// Correlation implied by the learned task covariance.
    #[cfg(test)]
    pub(crate) fn task_correlation(&self) -> f64 {
        self.b[0][1] / (self.b[0][0] * self.b[1][1]).sqrt().max(1e-300)
    }
}

/// Sequential multi-task optimization: tasks run one after the other, each
/// iteration refitting one coupled GP on the pooled observations of all
/// tasks and maximizing expected improvement on the active task.
pub fn run_multitask(
    cfg: &BoConfig,
    oracle: &dyn CostOracle,
    seed_idx: u64,
) -> Result<Vec<BoHistory>> {
    cfg.validate_for(MethodKind::Multitask)?;
    let n_tasks = oracle.tasks().len();
    if n_tasks == 0 || n_tasks > 2 {
        return Err(Error::invalid(format!(
            "the multi-task method supports one or two tasks, got {n_tasks}"
        )));
    }

    let mut obs_theta: Vec<[f64; DIM]> = Vec::new();
    let mut obs_task: Vec<usize> = Vec::new();
    let mut obs_cost: Vec<f64> = Vec::new();
    let mut histories = Vec::with_capacity(n_tasks);

    for task_idx in 0..n_tasks {
        let mut rng =
            acquisition_rng(oracle.base_seed(), MethodKind::Multitask, task_idx, seed_idx);
        let mut records = Vec::with_capacity(cfg.budget);
        let mut best = f64::INFINITY;
        let mut cumulative = 0.0;

        for t in 1..=cfg.budget {
            let theta = if t == 1 {
                ParamVector::nominal()
            } else {
                let gp = IcmGp::fit(&obs_theta, &obs_task, &obs_cost, cfg.cost_noise_var, &cfg.fit)?;
                let mut incumbent = f64::INFINITY;
                let mut warm: Vec<[f64; DIM]> = Vec::new();
                for ((th, ti), c) in obs_theta.iter().zip(&obs_task).zip(&obs_cost) {
                    if *ti == task_idx && *c < incumbent {
                        incumbent = *c;
                        warm = vec![*th];
                    }
                }
                let out = optimize_acquisition(
                    |p| {
                        let (m, v) = gp.predict(p, task_idx);
                        -expected_improvement(m, v, incumbent)
                    },
                    cfg.restarts,
                    cfg.local_steps,
                    &warm,
                    &mut rng,
                )?;
                ParamVector::from_log10(out.theta_log)?
            };

            let ev = oracle.evaluate(task_idx, seed_idx, t, &theta)?;
            obs_theta.push(theta.to_log10());
            obs_task.push(task_idx);
            obs_cost.push(ev.cost);
            best = best.min(ev.cost);
            cumulative += ev.cost;
            records.push(BoRecord {
                t,
                theta,
                cost: ev.cost,
                best_so_far: best,
                cumulative,
                aborted: ev.aborted,
                episode_seed: ev.episode_seed,
                surrogate_cost: None,
                bound: None,
            });
        }

        histories.push(BoHistory {
            method: MethodKind::Multitask,
            task_label: oracle.tasks()[task_idx].label.clone(),
            seed_index: seed_idx,
            records,
        });
    }
    Ok(histories)
}

/// Settings specific to the hierarchical method.
#[derive(Debug, Clone)]
pub struct HierarchicalConfig {
    pub trainer: TrainerConfig,
    /// Task-relative iterations after which the dynamics hyperparameters are
    /// refit; every other iteration appends incrementally.
    pub refit_schedule: Vec<usize>,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig {
            trainer: TrainerConfig::default(),
            refit_schedule: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

/// Per-iteration bound diagnostics of the hierarchical method.
#[derive(Debug, Clone)]
pub struct BoundsRow {
    pub task_label: String,
    pub t: usize,
    pub theta: ParamVector,
    /// Rollout cost prediction from the pre-episode model.
    pub surrogate_cost: Option<f64>,
    /// Error bound around the prediction.
    pub bound: Option<f64>,
    pub observed_cost: f64,
    /// Whether |prediction - observation| stayed within the bound; absent
    /// when there was no model yet or the episode aborted.
    pub held: Option<bool>,
}

/// Everything the hierarchical run produces beyond the histories.
#[derive(Debug)]
pub struct HierarchicalOutcome {
    pub histories: Vec<BoHistory>,
    pub transitions: TransitionSet,
    pub bounds: Vec<BoundsRow>,
}

/// Hierarchical optimization: learn the closed-loop dynamics from pooled
/// transitions, score candidates by rolling the model forward through the
/// known stage costs, and carry the model across tasks.
pub fn run_hierarchical(
    cfg: &BoConfig,
    hier: &HierarchicalConfig,
    oracle: &dyn CostOracle,
    seed_idx: u64,
) -> Result<HierarchicalOutcome> {
    cfg.validate_for(MethodKind::Hierarchical)?;
    let n_tasks = oracle.tasks().len();
    if n_tasks == 0 {
        return Err(Error::invalid("hierarchical optimization needs at least one task"));
    }
    let horizon = oracle.horizon();
    let x0 = oracle.initial_state();

    let mut trainer = DynamicsTrainer::new(hier.trainer.clone())?;
    let mut transitions = TransitionSet::new();
    let mut histories = Vec::with_capacity(n_tasks);
    let mut bounds = Vec::new();

    for task_idx in 0..n_tasks {
        let task = oracle.tasks()[task_idx].clone();
        let mut rng =
            acquisition_rng(oracle.base_seed(), MethodKind::Hierarchical, task_idx, seed_idx);
        let mut records = Vec::with_capacity(cfg.budget);
        let mut best = f64::INFINITY;
        let mut cumulative = 0.0;
        // Warm starts for the acquisition: the previous round's solution,
        // since the surrogate changes only slightly per episode, and the
        // best controller observed on this task so far.
        let mut prev_log: Option<[f64; DIM]> = None;
        let mut inc_log: Option<[f64; DIM]> = None;

        for t in 1..=cfg.budget {
            let theta = if t == 1 || trainer.model().is_none() {
                // Before any model exists (first iteration, or every episode
                // so far aborted) the only sensible sample is the shared
                // initial controller.
                ParamVector::nominal()
            } else {
                let mut warm: Vec<[f64; DIM]> = Vec::new();
                warm.extend(prev_log);
                if inc_log != prev_log {
                    warm.extend(inc_log);
                }
                let model = trainer.model().expect("checked above");
                let out = match cfg.acquisition {
                    AcquisitionKind::MeanCost => optimize_acquisition(
                        |p| match ParamVector::from_log10(*p) {
                            Ok(th) => rollout_cost(model, &x0, &th, horizon, &task)
                                .unwrap_or(f64::INFINITY),
                            Err(_) => f64::INFINITY,
                        },
                        cfg.restarts,
                        cfg.local_steps,
                        &warm,
                        &mut rng,
                    )?,
                    AcquisitionKind::TheoryLcb => {
                        let stage_l = stage_lipschitz_for(&task, &transitions)?;
                        optimize_acquisition(
                            |p| match ParamVector::from_log10(*p) {
                                Ok(th) => match rollout_mean(model, &x0, &th, horizon) {
                                    Ok(roll) => {
                                        surrogate_cost(&roll, &task)
                                            - cost_bound(&roll, stage_l)
                                    }
                                    Err(_) => f64::INFINITY,
                                },
                                Err(_) => f64::INFINITY,
                            },
                            cfg.restarts,
                            cfg.local_steps,
                            &warm,
                            &mut rng,
                        )?
                    }
                    _ => unreachable!("validated above"),
                };
                ParamVector::from_log10(out.theta_log)?
            };

            // Bound diagnostics at the selected controller, from the model
            // as it stood before this episode.
            let mut j_hat = None;
            let mut chi = None;
            if let Some(model) = trainer.model() {
                if let Ok(roll) = rollout_mean(model, &x0, &theta, horizon) {
                    let stage_l = stage_lipschitz_for(&task, &transitions)?;
                    j_hat = Some(surrogate_cost(&roll, &task));
                    chi = Some(cost_bound(&roll, stage_l));
                }
            }

            let ev = oracle.evaluate(task_idx, seed_idx, t, &theta)?;
            if !ev.aborted {
                match &ev.trajectory {
                    Some(traj) => transitions.extend_from(&extract_transitions(traj)),
                    None => {
                        return Err(Error::invalid(
                            "hierarchical optimization needs trajectories from its oracle",
                        ))
                    }
                }
            }
            if !transitions.is_empty() {
                trainer.train(&transitions, hier.refit_schedule.contains(&t))?;
            }

            prev_log = Some(theta.to_log10());
            if ev.cost < best {
                inc_log = prev_log;
            }
            best = best.min(ev.cost);
            cumulative += ev.cost;
            let held = match (j_hat, chi) {
                (Some(j), Some(c)) if !ev.aborted => Some((j - ev.cost).abs() <= c),
                _ => None,
            };
            bounds.push(BoundsRow {
                task_label: task.label.clone(),
                t,
                theta,
                surrogate_cost: j_hat,
                bound: chi,
                observed_cost: ev.cost,
                held,
            });
            records.push(BoRecord {
                t,
                theta,
                cost: ev.cost,
                best_so_far: best,
                cumulative,
                aborted: ev.aborted,
                episode_seed: ev.episode_seed,
                surrogate_cost: j_hat,
                bound: chi,
            });
        }

        histories.push(BoHistory {
            method: MethodKind::Hierarchical,
            task_label: task.label.clone(),
            seed_index: seed_idx,
            records,
        });
    }

    Ok(HierarchicalOutcome { histories, transitions, bounds })
}

/// Stage-cost Lipschitz constant over the observed output region, inflated
/// by twenty percent.
fn stage_lipschitz_for(task: &Task, transitions: &TransitionSet) -> Result<f64> {
    let zbox = ZBox::from_transitions(transitions.rows())
        .ok_or_else(|| Error::invalid("no transitions to bound the output region"))?;
    estimate_stage_lipschitz(task, &zbox.inflated(0.2))
}

/// Simple and cumulative regret series of one history.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretSeries {
    /// Best observed cost so far minus the reference optimum.
    pub simple: Vec<f64>,
    /// Running sum of raw episode costs.
    pub cumulative: Vec<f64>,
}

pub fn regret_accounting(history: &BoHistory, reference: f64) -> RegretSeries {
    let mut simple = Vec::with_capacity(history.records.len());
    let mut cumulative = Vec::with_capacity(history.records.len());
    let mut running = 0.0;
    for r in &history.records {
        simple.push(r.best_so_far - reference);
        running += r.cost;
        cumulative.push(running);
    }
    RegretSeries { simple, cumulative }
}
