//! Variational inference for sparse dynamic factor models.
//!
//! The model links an n-variable panel with missing entries to `r` latent
//! AR factors entering with `p` lags. Each loading has a spike-and-slab
//! prior, and the posterior is approximated by a block mean-field density
//! fitted by coordinate ascent on the evidence lower bound.
//!
//! Typical use: build a [`Panel`], choose a [`PriorSpec`], call
//! [`validate`] and then [`fit::fit`].

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod elbo;
pub mod em;
pub mod error;
pub mod evaluate;
pub mod fit;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod simulate;
pub mod special;
pub mod study;
pub mod types;
pub mod vi_updates;

pub use error::{Error, Result};
pub use types::{
    validate, AvailabilityMask, ModelContext, ModelDims, Panel, PriorConfig, PriorSpec, RegressionPrior,
    SmoothedMoments, Standardization, VariationalState,
};
