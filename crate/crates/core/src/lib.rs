//! Target tracking with controlled sensing on a grid.
//!
//! A target moves over an N×N grid by a Markov kernel until it exits. Each step a
//! controller switches on a subset of cell sensors, earning `r` when the target is in a
//! sensed cell and paying `c` per sensor. After `t_max + 1` consecutive misses a safe
//! action senses everything at cost `D`.
//!
//! The crate provides:
//!
//! - [`kernel`]: the motion kernel and the randomized neighborhood generator.
//! - [`track`]: the fully observed Track-MDP surrogate and its posterior.
//! - [`belief`]: belief filtering, the Q_MDP policy and its upper bound.
//! - [`solvers`]: exact policy solving, tabular Q-learning and a factored actor-critic.
//! - [`estimator`]: MAP position estimates from Q-differences and from the posterior.
//! - [`eval`]: episode simulation, AIHTR and Hamming accuracy, metrics CSV.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod artifact;
pub mod belief;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod eval;
pub mod grid;
pub mod kernel;
pub mod seeds;
pub mod solvers;
pub mod sweep;
pub mod track;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{CellId, CellSet, Grid, Observation, RewardParams, SensingAction, TargetState};
pub use kernel::{make_experiment_kernel, GeneratorSpec, TransitionKernel};
pub use track::{Prediction, TrackState};
