//! Weakly supervised anomaly-score regression over precomputed video clip
//! features.
//!
//! A video is a bag of 16-frame clips, each described by a precomputed
//! feature vector. Training sees only video-level normal/abnormal labels;
//! the model regresses a per-clip anomaly score in (0, 1). The score head is
//! a two-layer network (fully connected layer with ReLU and dropout, then a
//! one-unit sigmoid regression layer) trained with a dynamic top-k
//! multiple-instance loss plus a score-center penalty on normal videos.
//! Evaluation expands clip scores to frames and reports frame-level ROC AUC
//! and false-alarm rate.

pub mod cli;
pub mod error;
pub mod eval;
pub mod featio;
pub mod losses;
pub mod netcore;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
