//! Sound event triage: a convolutional-recurrent event detector conditioned on
//! a per-class priority vector through feature-wise linear modulation, trained
//! once over Dirichlet-sampled class weightings so any priority can be chosen
//! at inference time.

pub mod backbone;
pub mod conditioning;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;
pub mod triage;

pub use error::{Error, Result};
