//! Contrastive subspace editing for vision-language models.
//!
//! The pipeline pairs each image with a forward-diffused copy, scores how
//! much every caption token's logit moves between the two, turns the moves
//! into robust per-token weights, and aggregates weighted hidden-state
//! differences into one editing vector per pair. The top right-singular
//! vectors of the stacked editing vectors span the hallucination subspace of
//! a layer; selected write matrices are then projected onto its orthogonal
//! complement, offline, so inference cost is unchanged.
//!
//! Modules:
//! - [`tensor_store`]: f32 tensors and the manifest + blob bundle format.
//! - [`perturbation`]: noise schedules, forward diffusion, contrastive pairs.
//! - [`toy_lvlm`]: a small traced vision-language transformer and fixtures.
//! - [`shift`]: logit shifts, robust z-scores and the weight schedule.
//! - [`subspace`]: editing vectors, thin SVD, hallucination subspaces.
//! - [`editor`]: null-space projection of model weights.
//! - [`metrics`]: CHAIR and POPE style scores.
//! - [`pipeline`]: stage functions and the end-to-end driver.

pub mod editor;
pub mod error;
pub mod metrics;
pub mod perturbation;
pub mod pipeline;
pub mod rng;
pub mod shift;
pub mod subspace;
pub mod tensor_store;
pub mod toy_lvlm;

pub use error::{Result, VceError};
