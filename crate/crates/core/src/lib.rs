//! Sign-gesture recognition from hand-skeleton motion and camera images.
//!
//! The pipeline runs feature extraction ([`features`]), preprocessing
//! ([`preprocess`]), corpus handling ([`dataset`]), a two-branch fusion
//! network trained with RMSprop ([`network`]) and classification metrics
//! ([`evaluation`]).

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod network;
pub mod pipeline;
pub mod preprocess;

pub use error::{Error, Result};
