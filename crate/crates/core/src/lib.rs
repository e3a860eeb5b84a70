//! Nearby-patch contrastive pretraining for patch-level tissue classification.
//!
//! Spatially adjacent patches of a slide are treated as extra positives in a
//! multi-positive contrastive objective. The crate covers the whole pipeline
//! at desk scale:
//!
//! - [`corpus`]: synthetic tiled slides, center/nearby group extraction,
//!   labeled patch extraction and the line-delimited manifest format.
//! - [`augment`]: stochastic two-view augmentation and the deterministic
//!   evaluation transform.
//! - [`batcher`]: multiviewed batch layout and the positive/negative index sets.
//! - [`losses`]: the naive multi-positive loss, the decoupled variant, their
//!   gradients and a literal reference implementation.
//! - [`model`]: a small strided conv encoder, projection head, linear
//!   classifier and checkpoint container.
//! - [`trainer`]: learning-rate scaling and schedule, SGD with momentum and
//!   the pretraining loop.
//! - [`lineval`]: label subsampling, stratified k-fold, linear probe training
//!   and classification metrics.

pub mod augment;
pub mod batcher;
pub mod corpus;
pub mod lineval;
pub mod losses;
pub mod model;
pub mod real;
pub mod seed;
pub mod trainer;
