//! Stochastic model-predictive control of constrained linear systems over
//! unreliable sensor and control channels.
//!
//! A smart sensor runs a Kalman filter and transmits its filtered state
//! over an erasure channel; a remote estimator fills the gaps; the
//! controller periodically solves a convex QP over affine saturated
//! received-innovation feedback policies (with optional conditional-drift
//! stability rows) and ships commands through a second erasure channel to
//! a buffered actuator. The crate provides the pieces and a Monte-Carlo
//! harness that reproduces the closed-loop performance studies.
//!
//! Modules follow the signal path:
//!
//! - [`model`]: plant/cost description, assumption checks, the
//!   orthogonal/Schur split, reachability and stacked dynamics.
//! - [`channels`]: Bernoulli and Gilbert-Elliott dropout models plus
//!   seeded, splittable random streams.
//! - [`filtering`]: the sensor-side Kalman filter and the stacked
//!   innovation representation.
//! - [`estimation`]: the controller-side estimator under dropouts.
//! - [`policy`]: the policy class, saturators, the actuator protocol and
//!   the constructive fallback policy.
//! - [`synthesis`]: offline moment estimation and the per-instant QP.
//! - [`qpsolver`]: a dense ADMM solver with equilibration and polishing.
//! - [`simulation`]: the closed-loop Monte-Carlo harness and sweeps.

pub mod channels;
pub mod estimation;
pub mod filtering;
pub mod model;
pub mod policy;
pub mod qpsolver;
pub mod simulation;
pub mod synthesis;
