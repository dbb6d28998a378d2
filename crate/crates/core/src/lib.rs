//! Attentive marked temporal point process for next-trip prediction.
//!
//! A user's trip history is embedded and encoded with causal self-attention;
//! the hidden state drives an asymmetric log-Laplace mixture over the gap to
//! the next trip, and the mixture parameters together with the state drive
//! an origin distribution and a low-rank OD matrix for the destination.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod entropy;
pub mod error;
pub mod eval;
mod init;
pub mod model;
pub mod od_head;
pub mod synth;
pub mod time_head;
pub mod train;

pub use ablation::Ablation;
pub use checkpoint::Checkpoint;
pub use data::{PaddedBatch, StationFeatures, Trip, TripRecord, UserSequence};
pub use error::{AmtppError, Result};
pub use model::{Amtpp, ModelConfig, NextTripPrediction};
pub use od_head::{OdMask, OdMatrix};
pub use time_head::{AllMixtureParams, LogNormalMixtureParams, TimeDistribution};
pub use train::{TrainConfig, TrainOutcome};
