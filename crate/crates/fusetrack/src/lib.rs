//! Tracking-by-detection multi-object tracking toolkit.
//!
//! The pipeline estimates 11-dimensional box states with a Kalman filter,
//! associates detections to tracks through a combination of the Mahalanobis
//! distance and a learned deep-feature distance, and manages track life
//! cycles with either heuristic policies or a learned initialization gate.
//! A built-in scenario simulator ([`simlab`]) provides ground-truth
//! trajectories, noisy detections, and identity-correlated features so the
//! whole system can be trained and evaluated at desk scale.
//!
//! Module map:
//! - [`types`] / [`linalg`]: domain types, angle arithmetic, small dense
//!   solves shared by everything else.
//! - [`filter`]: Kalman predict/update and data-driven noise estimation.
//! - [`assoc`]: distance matrices and gated greedy matching.
//! - [`nn`]: minimal trainable-function substrate (dense/conv/backprop/Adam).
//! - [`learned`]: the four trainable modules, their losses, and training.
//! - [`lifecycle`]: track creation and termination policies.
//! - [`tracker`]: the per-frame orchestration loop.
//! - [`metrics`]: CLEAR-MOT counting plus MOTA / MOTAR / AMOTA.
//! - [`simlab`]: synthetic scenario generation.
//! - [`io`]: the on-disk formats (detections, ground truth, tracks, configs,
//!   checkpoints, reports).

pub mod assoc;
pub mod filter;
pub mod io;
pub mod learned;
pub mod lifecycle;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod simlab;
pub mod tracker;
pub mod types;

mod error;

pub use error::{Error, Result};
