//! Sentence generation with a latent Gaussian state-space model and a
//! globally normalized linear-chain CRF observation model.
//!
//! Module map:
//! - [`compute`]: arrays, reverse-mode tape, Adam, checkpoint container
//! - [`corpus`]: vocabulary, encoding, synthetic HMM corpora
//! - [`crf`]: energy, partition function, exact conditionals and sampling
//! - [`dynamics`]: prior transitions, backward inference network, Gaussian KL
//! - [`training`]: ELBO, optimization loop, generation
//! - [`eval`]: Kneser-Ney judges and sample statistics

pub mod compute;
pub mod corpus;
pub mod crf;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod rng;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
