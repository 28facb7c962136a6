//! Decentralized multi-agent path finding with transformer-based
//! communication, value-based tie-breaking, and episodic intrinsic rewards.
//!
//! The crate is organized around the pipeline of a single environment step:
//! [`world`] holds the gridworld and joint-move semantics, [`obs`] builds
//! per-agent partial observations, [`policy`] runs the shared network
//! (backed by the minimal autodiff engine in [`numerics`]), [`tiebreak`]
//! resolves anticipated inter-agent conflicts before execution, and
//! [`explore`] produces episodic intrinsic rewards. [`expert`] provides
//! classical planners for imitation targets and ground truth, [`train`] the
//! PPO + imitation trainer, and [`metrics`] the evaluation harness.

pub mod error;
pub mod expert;
pub mod explore;
pub mod metrics;
pub mod numerics;
pub mod obs;
pub mod par;
pub mod policy;
pub mod tiebreak;
pub mod train;
pub mod world;
