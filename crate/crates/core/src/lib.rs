//! Joint modeling of individual shopping and mobility lifestyles.
//!
//! The crate is organized as a pipeline of independent stages:
//!
//! - [`ingest`] parses call and card-transaction logs into count matrices.
//! - [`lda`] is a collapsed-Gibbs topic model used for shopping behaviors and tower classes.
//! - [`geo`] triangulates tower sites, sizes POI crawl radii and derives tower classes.
//! - [`features`] turns visit counts into the user-by-class mobility matrix.
//! - [`cmf`] fits group-sparse collective matrix factorization and evaluates it.
//! - [`baselines`] holds the raw-count regression and classification baselines.
//! - [`synth`] generates planted data for every stage.
//! - [`pipeline`] wires the stages together with on-disk artifacts and manifests.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iteration otherwise. Results never depend on the
//! schedule.

pub mod baselines;
pub mod cmf;
pub mod error;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod lda;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
pub use sparse::{Index, SparseCountMatrix};
