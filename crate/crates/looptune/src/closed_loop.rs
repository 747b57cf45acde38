//! Closed-loop episodes and their evaluation.
//!
//! An episode runs the plant for K steps under the MPC policy with fixed
//! weights, optionally with process noise. Episodes are scored by a task: a
//! fixed diagonal evaluation cost that is deliberately separate from the
//! weights the controller itself uses. Each episode also yields K training
//! rows for the dynamics surrogate, one per step, mapping the current state
//! and controller weights to the successor state and applied input.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::mpc::{policy, OcpConfig, ParamVector, WarmStartCache};
use crate::plant::{step_noisy, PlantConfig, State};
use crate::{Error, Result};

/// Evaluation cost weights: `Q_cl = diag(q_weights)`, `R_cl = r_weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub label: String,
    pub q_weights: [f64; 4],
    pub r_weight: f64,
}

impl Task {
    pub fn new(label: impl Into<String>, q_weights: [f64; 4], r_weight: f64) -> Result<Self> {
        if q_weights.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("evaluation state weights must be nonnegative"));
        }
        if !(r_weight > 0.0 && r_weight.is_finite()) {
            return Err(Error::invalid("evaluation input weight must be positive"));
        }
        Ok(Task { label: label.into(), q_weights, r_weight })
    }

    /// Stage cost of one successor-state / input pair.
    pub fn stage_cost(&self, state: &State, input: f64) -> f64 {
        let v = state.as_vector();
        let mut acc = self.r_weight * input * input;
        for i in 0..4 {
            acc += self.q_weights[i] * v[i] * v[i];
        }
        acc
    }
}

/// One executed control step: the applied input and the state it led to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub input: f64,
    pub state: State,
}

/// A complete K-step episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: State,
    pub theta: ParamVector,
    pub seed: u64,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal_state(&self) -> State {
        self.steps.last().map_or(self.initial, |s| s.state)
    }
}

/// One dynamics-training row: (state, weights) observed to produce
/// (successor state, applied input).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRow {
    pub state: State,
    pub theta: ParamVector,
    pub next_state: State,
    pub input: f64,
}

/// Accumulated transitions across episodes. Deliberately carries no task
/// information: the same rows serve every evaluation cost.
#[derive(Debug, Clone, Default)]
pub struct TransitionSet {
    rows: Vec<TransitionRow>,
}

impl TransitionSet {
    pub fn new() -> Self {
        TransitionSet { rows: Vec::new() }
    }

    pub fn push(&mut self, row: TransitionRow) {
        self.rows.push(row);
    }

    pub fn extend_from(&mut self, rows: &[TransitionRow]) {
        self.rows.extend_from_slice(rows);
    }

    pub fn rows(&self) -> &[TransitionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Run one K-step closed-loop episode.
///
/// The policy solves an OCP at each step from a fresh warm-start cache;
/// process noise is drawn from a stream seeded with `seed`, so the episode
/// is bit-reproducible from its arguments.
pub fn run_episode(
    plant_cfg: &PlantConfig,
    ocp_cfg: &OcpConfig,
    theta: &ParamVector,
    x0: &State,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cache = WarmStartCache::new();
    let mut traj =
        Trajectory { initial: *x0, theta: *theta, seed, steps: Vec::with_capacity(steps) };

    let mut x = *x0;
    for k in 0..steps {
        let u = policy(ocp_cfg, plant_cfg, &x, theta, &mut cache).map_err(|e| {
            Error::EpisodeAborted { step: k, reason: e.to_string() }
        })?;
        x = step_noisy(plant_cfg, &x, u, &mut rng);
        if !x.is_finite() {
            return Err(Error::EpisodeAborted {
                step: k,
                reason: "state became non-finite".to_string(),
            });
        }
        traj.steps.push(TrajectoryStep { input: u.0, state: x });
    }
    Ok(traj)
}

/// Total task cost of an episode: the stage cost summed over all
/// (successor state, input) pairs.
pub fn closed_loop_cost(traj: &Trajectory, task: &Task) -> f64 {
    traj.steps.iter().map(|s| task.stage_cost(&s.state, s.input)).sum()
}

/// The K training rows contributed by one episode.
pub fn extract_transitions(traj: &Trajectory) -> Vec<TransitionRow> {
    let mut rows = Vec::with_capacity(traj.len());
    let mut x = traj.initial;
    for step in &traj.steps {
        rows.push(TransitionRow {
            state: x,
            theta: traj.theta,
            next_state: step.state,
            input: step.input,
        });
        x = step.state;
    }
    rows
}

/// Axis-aligned box in the 5-dimensional (state, input) output space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZBox {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

impl ZBox {
    pub fn validate(&self) -> Result<()> {
        for i in 0..5 {
            if !(self.lower[i].is_finite() && self.upper[i].is_finite()) {
                return Err(Error::invalid("output-space box must be bounded"));
            }
            if self.lower[i] > self.upper[i] {
                return Err(Error::invalid(format!("box disordered in dimension {i}")));
            }
        }
        Ok(())
    }

    /// Smallest box containing every observed (successor state, input) pair,
    /// or `None` for an empty set.
    pub fn from_transitions(rows: &[TransitionRow]) -> Option<Self> {
        let mut it = rows.iter();
        let first = it.next()?;
        let z = |r: &TransitionRow| -> [f64; 5] {
            let v = r.next_state.as_vector();
            [v[0], v[1], v[2], v[3], r.input]
        };
        let mut lower = z(first);
        let mut upper = lower;
        for r in it {
            let p = z(r);
            for i in 0..5 {
                lower[i] = lower[i].min(p[i]);
                upper[i] = upper[i].max(p[i]);
            }
        }
        Some(ZBox { lower, upper })
    }

    /// Grow the box by `fraction` of its half-width on each side.
    pub fn inflated(&self, fraction: f64) -> Self {
        let mut out = *self;
        for i in 0..5 {
            let pad = 0.5 * (self.upper[i] - self.lower[i]) * fraction;
            out.lower[i] -= pad;
            out.upper[i] += pad;
        }
        out
    }
}

/// Lipschitz constant of the task's stage cost over `region`: the quadratic's
/// gradient norm is maximized at a corner of the box.
pub fn estimate_stage_lipschitz(task: &Task, region: &ZBox) -> Result<f64> {
    region.validate()?;
    let w = [task.q_weights[0], task.q_weights[1], task.q_weights[2], task.q_weights[3], task.r_weight];
    let mut best = 0.0_f64;
    for mask in 0..32u32 {
        let mut norm2 = 0.0;
        for i in 0..5 {
            let zi = if mask & (1 << i) != 0 { region.upper[i] } else { region.lower[i] };
            let g = w[i] * zi;
            norm2 += g * g;
        }
        best = best.max(norm2);
    }
    Ok(2.0 * best.sqrt())
}

/// Convenience wrapper: deterministic episode (no noise stream consumed
/// beyond the seed-aligned draws) followed by cost evaluation.
pub fn episode_cost(
    plant_cfg: &PlantConfig,
    ocp_cfg: &OcpConfig,
    theta: &ParamVector,
    x0: &State,
    steps: usize,
    seed: u64,
    task: &Task,
) -> Result<f64> {
    Ok(closed_loop_cost(&run_episode(plant_cfg, ocp_cfg, theta, x0, steps, seed)?, task))
}

/// The two evaluation tasks of the study.
pub fn task_one() -> Task {
    Task::new("task1", [5.0, 0.1, 5.0, 0.1], 0.1).expect("valid weights")
}

pub fn task_two() -> Task {
    Task::new("task2", [4.0, 0.2, 4.0, 0.2], 0.2).expect("valid weights")
}

/// Shared initial state of all experiments: pole leaning 0.2 rad.
pub fn initial_state() -> State {
    State::new(0.0, 0.0, 0.2, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn setup() -> (PlantConfig, OcpConfig) {
        (PlantConfig::default(), OcpConfig::default())
    }

    #[test]
    fn zero_steps_gives_an_empty_trajectory() {
        let (p, o) = setup();
        let traj =
            run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 0, 7).unwrap();
        assert!(traj.is_empty());
        assert_eq!(traj.terminal_state(), initial_state());
        assert_eq!(closed_loop_cost(&traj, &task_one()), 0.0);
        assert!(extract_transitions(&traj).is_empty());
    }

    #[test]
    fn episodes_are_bit_reproducible() {
        let (mut p, o) = setup();
        p = p.with_noise_std(0.01);
        let theta = ParamVector::nominal();
        let a = run_episode(&p, &o, &theta, &initial_state(), 10, 42).unwrap();
        let b = run_episode(&p, &o, &theta, &initial_state(), 10, 42).unwrap();
        assert_eq!(a, b);
        let c = run_episode(&p, &o, &theta, &initial_state(), 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_free_episode_stabilizes_the_pole() {
        let (p, o) = setup();
        let traj =
            run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 25, 0).unwrap();
        let terminal = traj.terminal_state();
        assert!(terminal.angle.abs() < 0.05, "terminal angle {}", terminal.angle);
        assert!(terminal.pos.abs() < 1.0, "terminal position {}", terminal.pos);
    }

    #[test]
    fn cost_matches_hand_computed_single_step() {
        let traj = Trajectory {
            initial: initial_state(),
            theta: ParamVector::nominal(),
            seed: 0,
            steps: vec![TrajectoryStep { input: 1.0, state: State::new(1.0, 0.0, 0.0, 0.0) }],
        };
        assert_abs_diff_eq!(closed_loop_cost(&traj, &task_one()), 5.1, epsilon = 1e-12);
    }

    #[test]
    fn cost_matches_a_straight_loop_reference() {
        let (p, o) = setup();
        let theta = ParamVector::new([2.0, 0.5, 8.0, 0.3, 0.05]).unwrap();
        let traj = run_episode(&p, &o, &theta, &initial_state(), 12, 3).unwrap();
        let task = task_two();
        let mut reference = 0.0;
        for s in &traj.steps {
            let v = s.state.as_vector();
            reference += 4.0 * v[0] * v[0]
                + 0.2 * v[1] * v[1]
                + 4.0 * v[2] * v[2]
                + 0.2 * v[3] * v[3]
                + 0.2 * s.input * s.input;
        }
        assert_abs_diff_eq!(closed_loop_cost(&traj, &task), reference, epsilon = 1e-12);
    }

    #[test]
    fn cost_is_additive_over_sub_trajectories() {
        let (p, o) = setup();
        let traj =
            run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 15, 9).unwrap();
        let task = task_one();
        let total = closed_loop_cost(&traj, &task);
        for j in 0..=15 {
            let head = Trajectory {
                initial: traj.initial,
                theta: traj.theta,
                seed: traj.seed,
                steps: traj.steps[..j].to_vec(),
            };
            let tail = Trajectory {
                initial: if j == 0 { traj.initial } else { traj.steps[j - 1].state },
                theta: traj.theta,
                seed: traj.seed,
                steps: traj.steps[j..].to_vec(),
            };
            assert_abs_diff_eq!(
                closed_loop_cost(&head, &task) + closed_loop_cost(&tail, &task),
                total,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn transitions_chain_through_the_trajectory() {
        let (p, o) = setup();
        let traj =
            run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 8, 1).unwrap();
        let rows = extract_transitions(&traj);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].state, traj.initial);
        for w in rows.windows(2) {
            assert_eq!(w[1].state, w[0].next_state);
        }
        // Idempotent.
        assert_eq!(extract_transitions(&traj), rows);
        // Single-step episode gives exactly one row.
        let one = run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 1, 1).unwrap();
        assert_eq!(extract_transitions(&one).len(), 1);
    }

    #[test]
    fn stage_lipschitz_matches_corner_analysis() {
        let unit = Task::new("unit", [1.0; 4], 1.0).unwrap();
        let origin = ZBox { lower: [0.0; 5], upper: [0.0; 5] };
        assert_eq!(estimate_stage_lipschitz(&unit, &origin).unwrap(), 0.0);

        let cube = ZBox { lower: [-1.0; 5], upper: [1.0; 5] };
        assert_abs_diff_eq!(
            estimate_stage_lipschitz(&unit, &cube).unwrap(),
            2.0 * 5.0_f64.sqrt(),
            epsilon = 1e-12
        );

        // Homogeneity: scaling the box scales the constant.
        let scaled = ZBox { lower: [-3.0; 5], upper: [3.0; 5] };
        assert_abs_diff_eq!(
            estimate_stage_lipschitz(&unit, &scaled).unwrap(),
            3.0 * 2.0 * 5.0_f64.sqrt(),
            epsilon = 1e-12
        );

        let unbounded = ZBox { lower: [f64::NEG_INFINITY; 5], upper: [0.0; 5] };
        assert!(estimate_stage_lipschitz(&unit, &unbounded).is_err());
    }

    #[test]
    fn zbox_from_transitions_bounds_all_rows() {
        let (p, o) = setup();
        let traj =
            run_episode(&p, &o, &ParamVector::nominal(), &initial_state(), 10, 5).unwrap();
        let rows = extract_transitions(&traj);
        let zbox = ZBox::from_transitions(&rows).unwrap();
        for r in &rows {
            let v = r.next_state.as_vector();
            let z = [v[0], v[1], v[2], v[3], r.input];
            for i in 0..5 {
                assert!(z[i] >= zbox.lower[i] && z[i] <= zbox.upper[i]);
            }
        }
        let grown = zbox.inflated(0.2);
        for i in 0..5 {
            assert!(grown.lower[i] <= zbox.lower[i]);
            assert!(grown.upper[i] >= zbox.upper[i]);
        }
        assert!(ZBox::from_transitions(&[]).is_none());
    }

    #[test]
    fn task_validation_rejects_bad_weights() {
        assert!(Task::new("bad", [-1.0, 0.0, 0.0, 0.0], 1.0).is_err());
        assert!(Task::new("bad", [1.0; 4], 0.0).is_err());
        assert!(Task::new("ok", [0.0; 4], 0.5).is_ok());
    }
}
