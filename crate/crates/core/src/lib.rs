//! Concept-bottleneck regression with dependability training and audits.
//!
//! The model is a composition `head(concepts(x))`: an encoder maps each frame
//! into an embedding space, cosine similarity against a fixed concept
//! dictionary yields per-frame concept scores, and a mean over the frame window
//! gives the concept vector that a small GELU head maps to targets.
//!
//! Fine-tuning adds four regularizers on top of the base RMSE loss: concept
//! consistency and stability (top-k restricted L1) and output consistency and
//! stability (mean absolute difference), with worst-case input perturbations
//! found by projected gradient ascent.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
