//! Discriminant risk minimization for domain generalization without domain
//! labels, at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bayes;
pub mod datagen;
pub mod discriminant;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
