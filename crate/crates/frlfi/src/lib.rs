//! Deterministic simulator and experiment harness for studying transient
//! bit-flip faults in federated reinforcement learning navigation.
//!
//! The crate is organized around the lifecycle of a fault campaign:
//!
//! - [`fxp`] — fixed-point Q(1,i,f) numerics; the substrate every bit flip
//!   acts on.
//! - [`gridworld`] — the 10×10 maze MDP and success-rate accounting.
//! - [`policy`] — the quantized MLP policy with flat parameter access.
//! - [`fedtrain`] — per-agent TD training plus the server's smoothing-average
//!   aggregation.
//! - [`faultinj`] — Bernoulli-per-bit flip injection with scheduling and an
//!   audit log.
//! - [`guard`] — reward-drop detection with server checkpointing, and
//!   range-based anomaly screening at inference.
//! - [`harness`] — campaign sweeps, statistics, and CSV/SVG reporting.
//!
//! Core numerics are generic over the float scalar (see [`Real`]); the
//! concrete aliases below fix `f64` for the simulator proper.

pub mod faultinj;
pub mod fedtrain;
pub mod fxp;
pub mod gridworld;
pub mod guard;
pub mod harness;
pub mod policy;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar bound for the real-valued side of the simulator. Blanket-implemented
/// for anything float-like; in practice `f32` and `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + std::fmt::Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + std::fmt::Debug + Send + Sync + 'static {}

/// The scalar the simulator runs on.
pub type Scalar = f64;

/// Concrete policy type used by training, injection, and the harness.
pub type Policy = policy::MlpPolicy<Scalar>;
