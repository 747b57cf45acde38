//! Closed-loop controller tuning with Gaussian process surrogates.
//!
//! The crate tunes the cost weights of a model predictive controller on a
//! simulated cart-pole by Bayesian optimization. Three optimizers are
//! provided: a blackbox GP over the parameter-to-cost map, a multi-task
//! variant with a learned inter-task covariance, and a hierarchical method
//! that models the parameter-dependent closed-loop dynamics and predicts
//! episode cost by rolling the dynamics model forward.
//!
//! Module layout mirrors the data flow: [`plant`] simulates the cart-pole,
//! [`mpc`] solves the receding-horizon control problem, [`closed_loop`] runs
//! full episodes and collects transitions, [`gp`] provides the regression
//! machinery, [`surrogate`] turns a transition set into a cost predictor with
//! calibrated error bounds, and [`bo`] holds the three optimization loops.

pub mod bo;
pub mod closed_loop;
mod error;
mod fastmath;
pub mod gp;
mod lowdisc;
pub mod mpc;
pub mod plant;
pub mod seeding;
pub mod surrogate;

pub use error::{Error, Result};
