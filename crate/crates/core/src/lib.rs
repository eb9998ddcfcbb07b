//! Simulation and estimation of inter- and multigenerational mobility across
//! regions.
//!
//! The numeric kernels (moments, regression, latent recovery, Gini) are
//! generic over [`Real`], implemented for `f32` and `f64`. Population data and
//! the pipeline work in `f64`.

// `!(x > 0)` is used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod earnings;
pub mod error;
pub mod gatsby;
pub mod harness;
pub mod inference;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod mobility;
pub mod moments;
pub mod num;
pub mod pipeline;
pub mod record;
pub mod regression;
pub mod synthkit;

pub use error::{MobilabError, Result};
pub use num::Real;
pub use record::{Gender, Generation, LineageRecord, OutcomeKind, Outcomes, RegionId, Relative};

pub type LinearFitF64 = regression::LinearFit<f64>;
pub type LinearFitF32 = regression::LinearFit<f32>;
pub type LatentEstimateF64 = latent::LatentEstimate<f64>;
pub type LatentEstimateF32 = latent::LatentEstimate<f32>;
pub type PairMomentsF64 = moments::PairMoments<f64>;
pub type PairMomentsF32 = moments::PairMoments<f32>;
pub type InfluenceF64 = moments::Influence<f64>;
pub type InfluenceF32 = moments::Influence<f32>;
