//! Receding-horizon control of the cart-pole.
//!
//! The policy solves a finite-horizon optimal control problem at every step:
//! minimize the summed stage cost plus a terminal cost over the input
//! sequence, subject to the discrete plant model. The solver is single
//! shooting with reverse-mode (adjoint) gradients through the RK4 step
//! chain, a projected input box, and a monotone backtracking line search
//! whose trial step uses the Barzilai-Borwein spectral length. Everything is
//! deterministic: cold starts begin from the zero input sequence.
//!
//! Stage cost weights are the tuning parameters: four diagonal entries of
//! the state weight and one input weight, all searched in log space inside a
//! fixed positive box.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::plant::{rk4_step, rk4_step_jacobians, Input, PlantConfig, State};
use crate::{Error, Result};

/// Admissible range for every stage-cost weight.
pub const THETA_BOUNDS: (f64, f64) = (0.01, 100.0);

/// The five tunable stage-cost weights: `Q = diag(v[0..4])`, `R = v[4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector([f64; 5]);

impl ParamVector {
    pub fn new(values: [f64; 5]) -> Result<Self> {
        let (lo, hi) = THETA_BOUNDS;
        for (i, &v) in values.iter().enumerate() {
            if !(v >= lo && v <= hi) {
                return Err(Error::invalid(format!(
                    "weight {i} = {v} outside the admissible range [{lo}, {hi}]"
                )));
            }
        }
        Ok(ParamVector(values))
    }

    /// All weights one: the shared starting point of every optimizer.
    pub fn nominal() -> Self {
        ParamVector([1.0; 5])
    }

    pub fn values(&self) -> &[f64; 5] {
        &self.0
    }

    pub fn q_diag(&self) -> Vector4<f64> {
        Vector4::new(self.0[0], self.0[1], self.0[2], self.0[3])
    }

    pub fn r(&self) -> f64 {
        self.0[4]
    }

    pub fn to_log10(&self) -> [f64; 5] {
        self.0.map(f64::log10)
    }

    pub fn from_log10(log: [f64; 5]) -> Result<Self> {
        ParamVector::new(log.map(|v| 10f64.powf(v)))
    }

    /// Search box in log10 coordinates.
    pub fn log10_bounds() -> (f64, f64) {
        (THETA_BOUNDS.0.log10(), THETA_BOUNDS.1.log10())
    }
}

/// Horizon, constraint and solver settings of the optimal control problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    /// Hard symmetric input bound, enforced by projection.
    pub input_limit: f64,
    /// Soft state box, enforced by a quadratic penalty.
    pub state_lower: [f64; 4],
    pub state_upper: [f64; 4],
    pub state_penalty_weight: f64,
    /// Multiplier on the terminal cost `x_N^T Q x_N`.
    pub terminal_weight: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the projected gradient
    /// step.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_line_search: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            horizon: 20,
            input_limit: 10.0,
            state_lower: [-2.4, -10.0, -1.57, -10.0],
            state_upper: [2.4, 10.0, 1.57, 10.0],
            state_penalty_weight: 1e3,
            terminal_weight: 10.0,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_line_search: 40,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(self.input_limit > 0.0) {
            return Err(Error::invalid("input limit must be positive"));
        }
        for i in 0..4 {
            if !(self.state_lower[i] < self.state_upper[i]) {
                return Err(Error::invalid(format!("state bounds disordered in dimension {i}")));
            }
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient tolerance must be positive"));
        }
        if !(self.state_penalty_weight >= 0.0 && self.terminal_weight >= 0.0) {
            return Err(Error::invalid("penalty weights must be nonnegative"));
        }
        if self.max_iterations == 0 || self.max_line_search == 0 {
            return Err(Error::invalid("iteration limits must be at least 1"));
        }
        if !(0.0 < self.armijo_c && self.armijo_c < 1.0)
            || !(0.0 < self.backtrack_factor && self.backtrack_factor < 1.0)
        {
            return Err(Error::invalid("line-search constants must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Result of one OCP solve.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub inputs: Vec<f64>,
    /// Predicted states after each input, `x_1..x_N`.
    pub states: Vec<State>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// One line of the optional solver trace.
#[derive(Debug, Clone, Copy)]
pub struct SolveTrace {
    pub iteration: usize,
    pub objective: f64,
    pub step_norm: f64,
}

/// Quadratic stage cost with diagonal state weight.
pub fn stage_cost(x: &State, u: Input, theta: &ParamVector) -> f64 {
    let q = theta.q_diag();
    let v = x.as_vector();
    let mut acc = theta.r() * u.0 * u.0;
    for i in 0..4 {
        acc += q[i] * v[i] * v[i];
    }
    acc
}

fn penalty(cfg: &OcpConfig, x: &Vector4<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        let over = (x[i] - cfg.state_upper[i]).max(0.0);
        let under = (cfg.state_lower[i] - x[i]).max(0.0);
        acc += over * over + under * under;
    }
    cfg.state_penalty_weight * acc
}

fn penalty_grad(cfg: &OcpConfig, x: &Vector4<f64>) -> Vector4<f64> {
    let mut g = Vector4::zeros();
    for i in 0..4 {
        let over = (x[i] - cfg.state_upper[i]).max(0.0);
        let under = (cfg.state_lower[i] - x[i]).max(0.0);
        g[i] = 2.0 * cfg.state_penalty_weight * (over - under);
    }
    g
}

/// Shooting objective: rolls the model out under `inputs` and accumulates
/// stage costs, soft state penalties and the terminal cost.
pub fn shooting_objective(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x0: &State,
    theta: &ParamVector,
    inputs: &[f64],
) -> (f64, Vec<State>) {
    let q = theta.q_diag();
    let mut states = Vec::with_capacity(inputs.len());
    let mut x = *x0;
    let mut total = 0.0;
    for &u in inputs {
        total += stage_cost(&x, Input(u), theta);
        x = rk4_step(plant, &x, Input(u));
        states.push(x);
        total += penalty(cfg, &x.as_vector());
    }
    let xn = x.as_vector();
    for i in 0..4 {
        total += cfg.terminal_weight * q[i] * xn[i] * xn[i];
    }
    (total, states)
}

/// Gradient of the shooting objective with respect to the input sequence,
/// computed by one backward (adjoint) sweep over the step chain.
pub fn shooting_gradient(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x0: &State,
    theta: &ParamVector,
    inputs: &[f64],
    states: &[State],
) -> Vec<f64> {
    let n = inputs.len();
    debug_assert_eq!(states.len(), n);
    let q = theta.q_diag();
    let r = theta.r();

    // Costate at the terminal state.
    let xn = states[n - 1].as_vector();
    let mut lambda = Vector4::zeros();
    for i in 0..4 {
        lambda[i] = 2.0 * cfg.terminal_weight * q[i] * xn[i];
    }
    lambda += penalty_grad(cfg, &xn);

    let mut grad = vec![0.0; n];
    for i in (0..n).rev() {
        let xi = if i == 0 { *x0 } else { states[i - 1] };
        let (ax, bu) = rk4_step_jacobians(plant, &xi, Input(inputs[i]));
        grad[i] = 2.0 * r * inputs[i] + bu.dot(&lambda);
        let mut next = ax.transpose() * lambda;
        if i > 0 {
            let v = xi.as_vector();
            for j in 0..4 {
                next[j] += 2.0 * q[j] * v[j];
            }
            next += penalty_grad(cfg, &v);
        }
        lambda = next;
    }
    grad
}

fn project(cfg: &OcpConfig, u: &mut [f64]) {
    for v in u {
        *v = v.clamp(-cfg.input_limit, cfg.input_limit);
    }
}

/// Solve the OCP from `x_k`, optionally warm-started.
pub fn solve_ocp(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x_k: &State,
    theta: &ParamVector,
    warm_start: Option<&[f64]>,
) -> Result<OcpSolution> {
    solve_ocp_impl(cfg, plant, x_k, theta, warm_start, &mut None)
}

/// As [`solve_ocp`], additionally recording one trace entry per accepted
/// iteration.
pub fn solve_ocp_traced(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x_k: &State,
    theta: &ParamVector,
    warm_start: Option<&[f64]>,
    trace: &mut Vec<SolveTrace>,
) -> Result<OcpSolution> {
    let mut sink = Some(trace);
    solve_ocp_impl(cfg, plant, x_k, theta, warm_start, &mut sink)
}

fn solve_ocp_impl(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x_k: &State,
    theta: &ParamVector,
    warm_start: Option<&[f64]>,
    trace: &mut Option<&mut Vec<SolveTrace>>,
) -> Result<OcpSolution> {
    cfg.validate()?;
    plant.validate()?;
    if !x_k.is_finite() {
        return Err(Error::invalid("initial state is not finite"));
    }
    if let Some(w) = warm_start {
        if w.len() != cfg.horizon {
            return Err(Error::invalid(format!(
                "warm start has {} inputs, horizon is {}",
                w.len(),
                cfg.horizon
            )));
        }
    }

    let mut u: Vec<f64> = match warm_start {
        Some(w) => w.to_vec(),
        None => vec![0.0; cfg.horizon],
    };
    project(cfg, &mut u);

    let (mut objective, mut states) = shooting_objective(cfg, plant, x_k, theta, &u);
    if !objective.is_finite() {
        return Err(Error::numerical(format!(
            "objective not finite at the start point (value {objective})"
        )));
    }

    let mut grad = shooting_gradient(cfg, plant, x_k, theta, &u, &states);
    let mut prev_u: Option<Vec<f64>> = None;
    let mut prev_grad: Option<Vec<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iterations {
        // Projected-gradient step with unit length; its size measures
        // stationarity under the input box.
        let mut station = 0.0_f64;
        for i in 0..u.len() {
            let moved = (u[i] - grad[i]).clamp(-cfg.input_limit, cfg.input_limit);
            station = station.max((moved - u[i]).abs());
        }
        if station <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        // Barzilai-Borwein trial step, falling back to a conservative
        // gradient-scaled guess on the first iteration.
        let gnorm_inf = grad.iter().fold(0.0_f64, |a, &g| a.max(g.abs()));
        let mut alpha = match (&prev_u, &prev_grad) {
            (Some(pu), Some(pg)) => {
                let mut ss = 0.0;
                let mut sy = 0.0;
                for i in 0..u.len() {
                    let s = u[i] - pu[i];
                    let y = grad[i] - pg[i];
                    ss += s * s;
                    sy += s * y;
                }
                if sy > 0.0 {
                    (ss / sy).clamp(1e-8, 1e3)
                } else {
                    1.0 / (1.0 + gnorm_inf)
                }
            }
            _ => 1.0 / (1.0 + gnorm_inf),
        };

        let mut accepted = false;
        for _ in 0..cfg.max_line_search {
            let mut trial: Vec<f64> = (0..u.len()).map(|i| u[i] - alpha * grad[i]).collect();
            project(cfg, &mut trial);
            let (trial_obj, trial_states) = shooting_objective(cfg, plant, x_k, theta, &trial);
            if !trial_obj.is_finite() {
                return Err(Error::numerical(format!(
                    "objective not finite during line search at iteration {iter} (step {alpha:.3e})"
                )));
            }
            let directional: f64 =
                (0..u.len()).map(|i| grad[i] * (trial[i] - u[i])).sum();
            if trial_obj <= objective + cfg.armijo_c * directional {
                prev_u = Some(std::mem::take(&mut u));
                prev_grad = Some(std::mem::take(&mut grad));
                u = trial;
                objective = trial_obj;
                states = trial_states;
                grad = shooting_gradient(cfg, plant, x_k, theta, &u, &states);
                accepted = true;
                if let Some(sink) = trace.as_deref_mut() {
                    sink.push(SolveTrace { iteration: iter, objective, step_norm: alpha });
                }
                break;
            }
            alpha *= cfg.backtrack_factor;
        }
        iterations = iter + 1;
        if !accepted {
            // No decrease found at any step length: numerically stationary.
            break;
        }
    }

    if states.is_empty() {
        let (_, s) = shooting_objective(cfg, plant, x_k, theta, &u);
        states = s;
    }
    Ok(OcpSolution { inputs: u, states, objective, converged, iterations })
}

/// Warm-start store for one closed-loop run. Holds the previous solution
/// already shifted by one step.
#[derive(Debug, Clone, Default)]
pub struct WarmStartCache {
    shifted: Option<Vec<f64>>,
}

impl WarmStartCache {
    pub fn new() -> Self {
        WarmStartCache { shifted: None }
    }

    pub fn clear(&mut self) {
        self.shifted = None;
    }
}

/// One step of the control policy: solve the OCP (warm-started when the
/// cache holds a previous solution) and return the first input.
pub fn policy(
    cfg: &OcpConfig,
    plant: &PlantConfig,
    x_k: &State,
    theta: &ParamVector,
    cache: &mut WarmStartCache,
) -> Result<Input> {
    let solution = solve_ocp(cfg, plant, x_k, theta, cache.shifted.as_deref())?;
    let mut shifted = solution.inputs.clone();
    if shifted.len() > 1 {
        shifted.remove(0);
        let last = *shifted.last().expect("horizon is at least 1");
        shifted.push(last);
    }
    cache.shifted = Some(shifted);
    Ok(Input(solution.inputs[0].clamp(-cfg.input_limit, cfg.input_limit)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix4, Vector4};

    fn plant() -> PlantConfig {
        PlantConfig::default()
    }

    #[test]
    fn stage_cost_evaluates_the_quadratic_form() {
        let theta = ParamVector::new([2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = State::new(1.0, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(stage_cost(&x, Input(2.0), &theta), 38.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            stage_cost(&State::origin(), Input(0.0), &ParamVector::nominal()),
            0.0
        );
        let unit = State::new(1.0, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(stage_cost(&unit, Input(0.0), &ParamVector::nominal()), 1.0);
    }

    #[test]
    fn theta_outside_the_box_is_rejected() {
        assert!(ParamVector::new([0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(ParamVector::new([1.0, 1.0, 1.0, 1.0, 101.0]).is_err());
        assert!(ParamVector::new([0.01, 100.0, 1.0, 1.0, 1.0]).is_ok());
    }

    #[test]
    fn log10_round_trip() {
        let theta = ParamVector::new([0.05, 2.0, 30.0, 1.0, 0.5]).unwrap();
        let back = ParamVector::from_log10(theta.to_log10()).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(back.values()[i], theta.values()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let cfg = OcpConfig { horizon: 8, ..OcpConfig::default() };
        let p = plant();
        let x0 = State::new(0.3, -0.2, 0.25, 0.4);
        let theta = ParamVector::new([2.0, 0.5, 7.0, 0.2, 0.8]).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();

        let (_, states) = shooting_objective(&cfg, &p, &x0, &theta, &u);
        let grad = shooting_gradient(&cfg, &p, &x0, &theta, &u, &states);

        let h = 1e-6;
        for i in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            let (fu, _) = shooting_objective(&cfg, &p, &x0, &theta, &up);
            let (fd, _) = shooting_objective(&cfg, &p, &x0, &theta, &dn);
            let fdg = (fu - fd) / (2.0 * h);
            let rel = (grad[i] - fdg).abs() / fdg.abs().max(1e-8);
            assert!(rel < 1e-5, "input {i}: adjoint {} vs fd {fdg} (rel {rel})", grad[i]);
        }
    }

    #[test]
    fn gradient_check_holds_with_active_state_penalties() {
        // Push the trajectory outside the soft box so the penalty branch is
        // exercised too.
        let cfg = OcpConfig {
            horizon: 6,
            state_upper: [0.2, 0.3, 0.2, 0.5],
            state_lower: [-0.2, -0.3, -0.2, -0.5],
            ..OcpConfig::default()
        };
        let p = plant();
        let x0 = State::new(0.1, 0.2, 0.15, -0.1);
        let theta = ParamVector::nominal();
        let u: Vec<f64> = vec![4.0, -2.0, 3.0, 1.0, -3.0, 2.0];

        let (_, states) = shooting_objective(&cfg, &p, &x0, &theta, &u);
        let grad = shooting_gradient(&cfg, &p, &x0, &theta, &u, &states);
        let h = 1e-6;
        for i in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += h;
            dn[i] -= h;
            let (fu, _) = shooting_objective(&cfg, &p, &x0, &theta, &up);
            let (fd, _) = shooting_objective(&cfg, &p, &x0, &theta, &dn);
            let fdg = (fu - fd) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fdg, epsilon = 1e-4 * (1.0 + fdg.abs()));
        }
    }

    #[test]
    fn origin_is_already_optimal() {
        let cfg = OcpConfig::default();
        let sol = solve_ocp(&cfg, &plant(), &State::origin(), &ParamVector::nominal(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.objective.abs() < 1e-9);
        assert!(sol.inputs.iter().all(|u| u.abs() < 1e-6));
    }

    #[test]
    fn solutions_satisfy_the_model_recursion_and_input_bounds() {
        let cfg = OcpConfig::default();
        let p = plant();
        let x0 = State::new(0.0, 0.0, 0.3, 0.0);
        let theta = ParamVector::new([5.0, 0.1, 5.0, 0.1, 0.1]).unwrap();
        let sol = solve_ocp(&cfg, &p, &x0, &theta, None).unwrap();

        let mut x = x0;
        for (i, &u) in sol.inputs.iter().enumerate() {
            assert!(u.abs() <= cfg.input_limit + 1e-12);
            x = rk4_step(&p, &x, Input(u));
            let diff = (x.as_vector() - sol.states[i].as_vector()).norm();
            assert!(diff == 0.0, "state {i} deviates from the recursion by {diff}");
        }
    }

    #[test]
    fn warm_start_never_degrades_the_objective() {
        let cfg = OcpConfig::default();
        let p = plant();
        let x0 = State::new(0.1, 0.0, 0.25, -0.1);
        let theta = ParamVector::nominal();
        let cold = solve_ocp(&cfg, &p, &x0, &theta, None).unwrap();
        let warm = solve_ocp(&cfg, &p, &x0, &theta, Some(&cold.inputs)).unwrap();
        assert!(warm.objective <= cold.objective + cfg.gradient_tolerance);
    }

    #[test]
    fn scaling_theta_leaves_the_optimizer_unchanged() {
        let cfg = OcpConfig {
            input_limit: 1e6,
            state_penalty_weight: 0.0,
            gradient_tolerance: 1e-9,
            max_iterations: 600,
            ..OcpConfig::default()
        };
        let p = plant();
        let x0 = State::new(0.05, 0.0, 0.1, 0.0);
        let a = ParamVector::new([1.0, 0.5, 3.0, 0.2, 0.4]).unwrap();
        let b = ParamVector::new([5.0, 2.5, 15.0, 1.0, 2.0]).unwrap();
        let sa = solve_ocp(&cfg, &p, &x0, &a, None).unwrap();
        let sb = solve_ocp(&cfg, &p, &x0, &b, None).unwrap();
        for i in 0..cfg.horizon {
            assert_abs_diff_eq!(sa.inputs[i], sb.inputs[i], epsilon = 1e-4);
        }
        assert_abs_diff_eq!(sb.objective, 5.0 * sa.objective, epsilon = 1e-5 * sb.objective.abs());
    }

    #[test]
    fn first_input_matches_finite_horizon_lqr_on_the_linearization() {
        // Linearize the discrete step at the origin by central differences,
        // run the backward Riccati recursion with the same horizon and
        // terminal weight, and compare first inputs for a small state.
        let cfg = OcpConfig {
            input_limit: 1e6,
            state_penalty_weight: 0.0,
            gradient_tolerance: 1e-10,
            max_iterations: 2000,
            ..OcpConfig::default()
        };
        let p = plant();
        let h = 1e-6;
        let mut a = Matrix4::zeros();
        for j in 0..4 {
            let mut up = Vector4::zeros();
            let mut dn = Vector4::zeros();
            up[j] += h;
            dn[j] -= h;
            let fu = rk4_step(&p, &State::from_vector(&up), Input(0.0)).as_vector();
            let fd = rk4_step(&p, &State::from_vector(&dn), Input(0.0)).as_vector();
            a.set_column(j, &((fu - fd) / (2.0 * h)));
        }
        let fu = rk4_step(&p, &State::origin(), Input(h)).as_vector();
        let fd = rk4_step(&p, &State::origin(), Input(-h)).as_vector();
        let b: Vector4<f64> = (fu - fd) / (2.0 * h);

        let q: Matrix4<f64> = Matrix4::identity();
        let r = 1.0;
        let mut pmat: Matrix4<f64> = 10.0 * q;
        let mut k0 = nalgebra::RowVector4::<f64>::zeros();
        for _ in 0..cfg.horizon {
            let rb = r + (pmat * b).dot(&b);
            let k = (b.transpose() * (pmat * a)) / rb;
            pmat = q + a.transpose() * pmat * (a - b * k);
            k0 = k;
        }

        let x0 = State::new(0.01, 0.0, 0.02, 0.0);
        let u_lqr = -(k0 * x0.as_vector())[(0, 0)];
        let sol = solve_ocp(&cfg, &p, &x0, &ParamVector::nominal(), None).unwrap();
        let rel = (sol.inputs[0] - u_lqr).abs() / u_lqr.abs();
        assert!(rel < 0.05, "mpc {} vs lqr {u_lqr} (rel {rel})", sol.inputs[0]);
    }

    #[test]
    fn policy_stabilizes_the_pole_from_a_lean() {
        let cfg = OcpConfig::default();
        let p = plant();
        let theta = ParamVector::nominal();
        let mut cache = WarmStartCache::new();
        let mut x = State::new(0.0, 0.0, 0.2, 0.0);
        for _ in 0..25 {
            let u = policy(&cfg, &p, &x, &theta, &mut cache).unwrap();
            x = rk4_step(&p, &x, u);
        }
        assert!(x.angle.abs() < 0.05, "terminal angle {}", x.angle);
        assert!(x.pos.abs() < 1.0, "terminal position {}", x.pos);
    }

    #[test]
    fn policy_is_deterministic_given_the_cache_state() {
        let cfg = OcpConfig::default();
        let p = plant();
        let theta = ParamVector::nominal();
        let x = State::new(0.05, 0.1, 0.15, -0.2);

        let mut c1 = WarmStartCache::new();
        let mut c2 = WarmStartCache::new();
        let u1 = policy(&cfg, &p, &x, &theta, &mut c1).unwrap();
        let u2 = policy(&cfg, &p, &x, &theta, &mut c2).unwrap();
        assert_eq!(u1, u2);

        // Same cache contents, same next answer.
        let next = State::new(0.06, 0.05, 0.1, -0.1);
        let mut c3 = c1.clone();
        assert_eq!(
            policy(&cfg, &p, &next, &theta, &mut c1).unwrap(),
            policy(&cfg, &p, &next, &theta, &mut c3).unwrap()
        );
    }

    #[test]
    fn invalid_configs_and_states_are_rejected() {
        let mut cfg = OcpConfig::default();
        cfg.horizon = 0;
        assert!(solve_ocp(&cfg, &plant(), &State::origin(), &ParamVector::nominal(), None).is_err());

        let cfg = OcpConfig::default();
        let bad = State::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(
            solve_ocp(&cfg, &plant(), &bad, &ParamVector::nominal(), None),
            Err(Error::InvalidArgument(_))
        ));
        let short = vec![0.0; 3];
        assert!(solve_ocp(&cfg, &plant(), &State::origin(), &ParamVector::nominal(), Some(&short))
            .is_err());
    }
}
