//! Posterior value distributions for tabular Bayesian reinforcement learning.
//!
//! The value of a policy is a random variable when the transition function is
//! uncertain. This crate computes its distribution three ways: by brute-force
//! posterior sampling ([`oracle`]), by iterating the value-distributional
//! Bellman operator ([`bellman`]), and by stochastic quantile regression
//! ([`eqr`]).

pub mod agent;
pub mod bellman;
pub mod envs;
pub mod eqr;
pub mod experiment;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod posterior;
pub mod quantdist;
pub mod rng;

pub use error::{Error, Result};
