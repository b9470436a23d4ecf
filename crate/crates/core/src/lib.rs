//! Trajectory optimization by expectation-maximization.
//!
//! The pipeline fits a time-varying linear-Gaussian model of the plant and of
//! an exponentiated cost observation, smooths the latent states given those
//! observations, and improves a time-varying linear-Gaussian policy by
//! maximizing the expected complete-data log-likelihood one timestep at a
//! time.
//!
//! Everything numeric is generic over [`Real`]; the `*64` / `*32` aliases
//! below name the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline_lqr;
pub mod cost;
pub mod dynamics_fit;
pub mod em_core;
pub mod error;
pub mod linalg;
pub mod policy;
pub mod scalar;
pub mod simulator;
pub mod smoother;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type QuadraticCost64 = cost::QuadraticCost<f64>;
pub type QuadraticCost32 = cost::QuadraticCost<f32>;
pub type PolicyParams64 = policy::PolicyParams<f64>;
pub type PolicyParams32 = policy::PolicyParams<f32>;
pub type PolicyStep64 = policy::PolicyStep<f64>;
pub type PolicyStep32 = policy::PolicyStep<f32>;
pub type EpisodeData64 = dynamics_fit::EpisodeData<f64>;
pub type EpisodeData32 = dynamics_fit::EpisodeData<f32>;
pub type LtvModel64 = dynamics_fit::LtvModel<f64>;
pub type LtvModel32 = dynamics_fit::LtvModel<f32>;
pub type SmoothedPosterior64 = smoother::SmoothedPosterior<f64>;
pub type SmoothedPosterior32 = smoother::SmoothedPosterior<f32>;
pub type SurrogateQuadratic64 = em_core::SurrogateQuadratic<f64>;
pub type SurrogateQuadratic32 = em_core::SurrogateQuadratic<f32>;
pub type PlantConfig64 = simulator::PlantConfig<f64>;
pub type PlantConfig32 = simulator::PlantConfig<f32>;
