//! Time-adaptive text classification at desk scale.
//!
//! The crate covers the whole pipeline: chronological splitting of a
//! timestamped corpus ([`corpus`]), a small reverse-mode autodiff core
//! ([`diffcore`]), post encoders ([`encoder`]), a bag-of-words topic VAE
//! ([`vae`]), the fused classifier with pseudo-labeling and joint training
//! ([`classify`], [`adapt`]) and the experiment harness ([`harness`]).

pub mod adapt;
pub mod classify;
pub mod corpus;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod rng;
pub mod vae;

pub use adapt::{Strategy, StrategyKind};
pub use classify::Classifier;
pub use corpus::{Corpus, Post, TimeSlices, Vocabulary};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, MetricsReport};
