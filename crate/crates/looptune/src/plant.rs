//! Cart-pole simulation.
//!
//! A cart of mass `cart_mass` runs on a frictionless track; a uniform pole
//! of mass `pole_mass` and half-length `pole_half_length` is hinged to it
//! without friction. The state is (cart position, cart velocity, pole angle,
//! pole angular velocity) with the angle measured from the upright position,
//! so the origin is the unstable equilibrium the controller has to hold.
//!
//! Continuous dynamics follow the classic uniform-rod derivation:
//!
//! ```text
//! a    = (F + m_p l w^2 sin(phi)) / (m_c + m_p)
//! dd_phi = (g sin(phi) - cos(phi) a) / (l (4/3 - m_p cos^2(phi)/(m_c+m_p)))
//! dd_p   = a - m_p l dd_phi cos(phi) / (m_c + m_p)
//! ```
//!
//! Discretization is classical Runge-Kutta 4 with the force held constant
//! over the step. Process noise, when enabled, is additive Gaussian on the
//! post-integration state with a diagonal covariance.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cart-pole state. Angle is measured from upright, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub pos: f64,
    pub vel: f64,
    pub angle: f64,
    pub angular_vel: f64,
}

impl State {
    pub fn new(pos: f64, vel: f64, angle: f64, angular_vel: f64) -> Self {
        State { pos, vel, angle, angular_vel }
    }

    pub fn origin() -> Self {
        State::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.pos, self.vel, self.angle, self.angular_vel)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        State::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|v| v.is_finite())
    }
}

/// Force applied to the cart, in newtons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Input(pub f64);

/// Physical constants, step size and process-noise covariance diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length; the center of mass sits here.
    pub pole_half_length: f64,
    pub gravity: f64,
    /// Step size of the zero-order-hold discretization, in seconds.
    pub dt: f64,
    /// Diagonal of the process-noise covariance (variances, not stds).
    pub noise_cov_diag: [f64; 4],
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.81,
            dt: 0.05,
            noise_cov_diag: [0.0; 4],
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cart_mass > 0.0 && self.pole_mass > 0.0 && self.pole_half_length > 0.0) {
            return Err(Error::invalid("masses and pole length must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.noise_cov_diag.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("noise covariance diagonal must be nonnegative"));
        }
        Ok(())
    }

    pub fn with_noise_std(mut self, std: f64) -> Self {
        self.noise_cov_diag = [std * std; 4];
        self
    }
}

/// Time derivative of the state under force `u`.
pub fn continuous_dynamics(cfg: &PlantConfig, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
    let (s, c) = x[2].sin_cos();
    let total = cfg.cart_mass + cfg.pole_mass;
    let l = cfg.pole_half_length;
    let w = x[3];

    let a = (u + cfg.pole_mass * l * w * w * s) / total;
    let denom = l * (4.0 / 3.0 - cfg.pole_mass * c * c / total);
    let dd_angle = (cfg.gravity * s - c * a) / denom;
    let dd_pos = a - cfg.pole_mass * l * dd_angle * c / total;

    Vector4::new(x[1], dd_pos, x[3], dd_angle)
}

/// Jacobians of [`continuous_dynamics`] with respect to state and input.
pub fn dynamics_jacobians(
    cfg: &PlantConfig,
    x: &Vector4<f64>,
    u: f64,
) -> (Matrix4<f64>, Vector4<f64>) {
    let (s, c) = x[2].sin_cos();
    let total = cfg.cart_mass + cfg.pole_mass;
    let l = cfg.pole_half_length;
    let w = x[3];
    let ml = cfg.pole_mass * l;

    let a = (u + ml * w * w * s) / total;
    let da_dangle = ml * w * w * c / total;
    let da_dw = 2.0 * ml * w * s / total;
    let da_du = 1.0 / total;

    let denom = l * (4.0 / 3.0 - cfg.pole_mass * c * c / total);
    let ddenom_dangle = 2.0 * l * cfg.pole_mass * c * s / total;

    let num = cfg.gravity * s - c * a;
    let dnum_dangle = cfg.gravity * c + s * a - c * da_dangle;

    let dd_angle = num / denom;
    let ddang_dangle = (dnum_dangle * denom - num * ddenom_dangle) / (denom * denom);
    let ddang_dw = -c * da_dw / denom;
    let ddang_du = -c * da_du / denom;

    let ddpos_dangle = da_dangle - ml / total * (ddang_dangle * c - dd_angle * s);
    let ddpos_dw = da_dw - ml / total * c * ddang_dw;
    let ddpos_du = da_du - ml / total * c * ddang_du;

    let mut jx = Matrix4::zeros();
    jx[(0, 1)] = 1.0;
    jx[(1, 2)] = ddpos_dangle;
    jx[(1, 3)] = ddpos_dw;
    jx[(2, 3)] = 1.0;
    jx[(3, 2)] = ddang_dangle;
    jx[(3, 3)] = ddang_dw;

    let ju = Vector4::new(0.0, ddpos_du, 0.0, ddang_du);
    (jx, ju)
}

/// One classical RK4 step of an autonomous vector field `f`.
pub fn rk4_vec4(
    f: impl Fn(&Vector4<f64>) -> Vector4<f64>,
    x: &Vector4<f64>,
    dt: f64,
) -> Vector4<f64> {
    let k1 = f(x);
    let k2 = f(&(x + 0.5 * dt * k1));
    let k3 = f(&(x + 0.5 * dt * k2));
    let k4 = f(&(x + dt * k3));
    x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Deterministic discrete step: RK4 with `u` held constant over `dt`.
pub fn rk4_step(cfg: &PlantConfig, x: &State, u: Input) -> State {
    let next = rk4_vec4(|v| continuous_dynamics(cfg, v, u.0), &x.as_vector(), cfg.dt);
    State::from_vector(&next)
}

/// Jacobians of the discrete step map with respect to state and input,
/// obtained by differentiating through the four RK4 stages.
pub fn rk4_step_jacobians(cfg: &PlantConfig, x: &State, u: Input) -> (Matrix4<f64>, Vector4<f64>) {
    let dt = cfg.dt;
    let x0 = x.as_vector();

    let k1 = continuous_dynamics(cfg, &x0, u.0);
    let x1 = x0 + 0.5 * dt * k1;
    let k2 = continuous_dynamics(cfg, &x1, u.0);
    let x2 = x0 + 0.5 * dt * k2;
    let k3 = continuous_dynamics(cfg, &x2, u.0);
    let x3 = x0 + dt * k3;

    let (j1x, j1u) = dynamics_jacobians(cfg, &x0, u.0);
    let (j2x, j2u) = dynamics_jacobians(cfg, &x1, u.0);
    let (j3x, j3u) = dynamics_jacobians(cfg, &x2, u.0);
    let (j4x, j4u) = dynamics_jacobians(cfg, &x3, u.0);

    let eye = Matrix4::identity();

    // Stage sensitivities: D_i = d k_i / d x0, E_i = d k_i / d u.
    let d1 = j1x;
    let e1 = j1u;
    let d2 = j2x * (eye + 0.5 * dt * d1);
    let e2 = j2u + j2x * (0.5 * dt * e1);
    let d3 = j3x * (eye + 0.5 * dt * d2);
    let e3 = j3u + j3x * (0.5 * dt * e2);
    let d4 = j4x * (eye + dt * d3);
    let e4 = j4u + j4x * (dt * e3);

    let ax = eye + dt / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4);
    let bu = dt / 6.0 * (e1 + 2.0 * e2 + 2.0 * e3 + e4);
    (ax, bu)
}

/// Discrete step with additive Gaussian process noise drawn from `rng`.
///
/// Four standard normal draws are consumed on every call, including when the
/// covariance is zero, so noise streams stay aligned across profiles.
pub fn step_noisy<R: Rng>(cfg: &PlantConfig, x: &State, u: Input, rng: &mut R) -> State {
    let mut next = rk4_step(cfg, x, u).as_vector();
    for (i, &var) in cfg.noise_cov_diag.iter().enumerate() {
        let n: f64 = rng.sample(StandardNormal);
        next[i] += var.sqrt() * n;
    }
    State::from_vector(&next)
}

/// Total mechanical energy, with potential measured from the pivot height.
///
/// Conserved by the continuous dynamics when no force acts, which makes it a
/// sharp integration-accuracy probe.
pub fn energy(cfg: &PlantConfig, x: &State) -> f64 {
    let total = cfg.cart_mass + cfg.pole_mass;
    let l = cfg.pole_half_length;
    let c = x.angle.cos();
    0.5 * total * x.vel * x.vel
        + cfg.pole_mass * l * x.vel * x.angular_vel * c
        + 2.0 / 3.0 * cfg.pole_mass * l * l * x.angular_vel * x.angular_vel
        + cfg.pole_mass * cfg.gravity * l * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> PlantConfig {
        PlantConfig::default()
    }

    #[test]
    fn upright_and_hanging_equilibria_are_fixed_points() {
        let c = cfg();
        let upright = Vector4::zeros();
        assert_eq!(continuous_dynamics(&c, &upright, 0.0), Vector4::zeros());

        let hanging = Vector4::new(0.0, 0.0, std::f64::consts::PI, 0.0);
        let dx = continuous_dynamics(&c, &hanging, 0.0);
        assert_abs_diff_eq!(dx.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gravity_tips_the_pole_away_from_upright() {
        let c = cfg();
        let leaning = Vector4::new(0.0, 0.0, 0.1, 0.0);
        let dx = continuous_dynamics(&c, &leaning, 0.0);
        assert!(dx[3] > 0.0, "angular acceleration should grow the lean");
    }

    #[test]
    fn rk4_matches_truncated_taylor_series_on_exponential_decay() {
        // For dx/dt = -x one RK4 step reproduces the Taylor polynomial of
        // exp(-dt) through fourth order exactly.
        let dt = 0.1;
        let x0 = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let next = rk4_vec4(|x| -x, &x0, dt);
        let expected = 1.0 - dt + dt * dt / 2.0 - dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
        assert_abs_diff_eq!(next[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn rk4_shows_fourth_order_convergence() {
        let c = cfg();
        let x0 = Vector4::new(0.1, 0.0, 0.4, -0.2);
        let u = 1.5;
        let horizon = 0.1;

        let integrate = |steps: usize| {
            let h = horizon / steps as f64;
            let mut x = x0;
            for _ in 0..steps {
                x = rk4_vec4(|v| continuous_dynamics(&c, v, u), &x, h);
            }
            x
        };

        let reference = integrate(1000);
        let err_coarse = (integrate(1) - reference).norm();
        let err_fine = (integrate(2) - reference).norm();
        let ratio = err_coarse / err_fine;
        assert!((10.0..24.0).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn energy_is_conserved_on_unforced_swing() {
        let c = cfg();
        let mut x = State::new(0.0, 0.0, 0.3, 0.0);
        let e0 = energy(&c, &x);
        for _ in 0..25 {
            x = rk4_step(&c, &x, Input(0.0));
        }
        let drift = (energy(&c, &x) - e0).abs();
        assert!(drift <= 1e-4, "energy drift {drift}");
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let c = cfg();
        let x = Vector4::new(0.2, -0.1, 0.3, 0.5);
        let u = 2.0;
        let (jx, ju) = dynamics_jacobians(&c, &x, u);

        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let col = (continuous_dynamics(&c, &xp, u) - continuous_dynamics(&c, &xm, u)) / (2.0 * h);
            for i in 0..4 {
                assert_abs_diff_eq!(jx[(i, j)], col[i], epsilon = 1e-6);
            }
        }
        let fu = (continuous_dynamics(&c, &x, u + h) - continuous_dynamics(&c, &x, u - h)) / (2.0 * h);
        for i in 0..4 {
            assert_abs_diff_eq!(ju[i], fu[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        let c = cfg();
        let x = State::new(0.2, -0.1, 0.3, 0.5);
        let u = Input(2.0);
        let (ax, bu) = rk4_step_jacobians(&c, &x, u);

        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.as_vector();
            let mut xm = x.as_vector();
            xp[j] += h;
            xm[j] -= h;
            let fp = rk4_step(&c, &State::from_vector(&xp), u).as_vector();
            let fm = rk4_step(&c, &State::from_vector(&xm), u).as_vector();
            let col = (fp - fm) / (2.0 * h);
            for i in 0..4 {
                assert_relative_eq!(ax[(i, j)], col[i], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
        let fp = rk4_step(&c, &x, Input(u.0 + h)).as_vector();
        let fm = rk4_step(&c, &x, Input(u.0 - h)).as_vector();
        let col = (fp - fm) / (2.0 * h);
        for i in 0..4 {
            assert_relative_eq!(bu[i], col[i], epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn noise_stream_is_reproducible_and_unbiased() {
        let c = cfg().with_noise_std(0.01);
        let x = State::new(0.0, 0.0, 0.1, 0.0);

        let mut r1 = ChaCha12Rng::seed_from_u64(99);
        let mut r2 = ChaCha12Rng::seed_from_u64(99);
        assert_eq!(step_noisy(&c, &x, Input(0.5), &mut r1), step_noisy(&c, &x, Input(0.5), &mut r2));

        // Sample mean of the added noise should vanish at the 3-sigma level.
        let n = 100_000;
        let clean = rk4_step(&c, &x, Input(0.5)).as_vector();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut sum = Vector4::zeros();
        for _ in 0..n {
            sum += step_noisy(&c, &x, Input(0.5), &mut rng).as_vector() - clean;
        }
        let mean = sum / n as f64;
        let bound = 3.0 * 0.01 / (n as f64).sqrt();
        for i in 0..4 {
            assert!(mean[i].abs() < bound, "component {i} biased: {}", mean[i]);
        }
    }

    #[test]
    fn zero_covariance_reduces_to_deterministic_step() {
        let c = cfg();
        let x = State::new(0.1, 0.2, -0.1, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(step_noisy(&c, &x, Input(1.0), &mut rng), rk4_step(&c, &x, Input(1.0)));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = cfg();
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.noise_cov_diag[2] = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.pole_mass = -0.1;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
