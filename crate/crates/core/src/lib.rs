//! Two-stream spatio-temporal single object tracker.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the tracker, the model format and every oracle
//! tolerance assume.

pub mod backbone;
pub mod bbox;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod estimator;
pub mod fam;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod sequence;
pub mod tracker;

pub use bbox::BoundingBox;
pub use error::{Error, Result};
pub use grid::Grid;
pub use rng::Rng;
pub use scalar::Scalar;

pub type Grid64 = grid::Grid<f64>;
pub type ConvKernel64 = ops::ConvKernel<f64>;
pub type BackboneParams64 = backbone::BackboneParams<f64>;
pub type FamParams64 = fam::FamParams<f64>;
pub type ClassifierState64 = classifier::ClassifierState<f64>;
pub type IouHeadParams64 = estimator::IouHeadParams<f64>;
pub type Model64 = model::Model<f64>;
pub type Tracker64 = tracker::Tracker<f64>;
