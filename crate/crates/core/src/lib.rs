//! Structured landmark regression with a fully-connected Gaussian CRF.
//!
//! Each landmark gets a Gaussian unary prediction `(μ_i, Σ_i)`; every pair of
//! landmarks is coupled by a quadratic term whose expected offset comes from
//! a weak-perspective projection of a 3D deformable shape model. Given the
//! deformable parameters the joint over all landmarks is Gaussian, which
//! makes inference and the likelihood exact.
//!
//! Modules:
//! - [`model`]: 3D shape model, deformable parameters, expected offsets
//! - [`crf`]: energies, precision assembly, conditional Gaussian, NLL and gradients
//! - [`fitting`]: Levenberg-Marquardt fit of deformable parameters
//! - [`inference`]: alternating joint inference of landmarks and parameters
//! - [`training`]: learning of the pairwise structure matrices
//! - [`unary`]: heatmap moments and synthetic data generation
//! - [`eval`]: NME, CED, AUC and failure rate
//! - [`cli`]: command-line front end

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pairs;
pub mod training;
pub mod unary;

pub use crf::{ConditionalGaussian, NllGradients, PairOffsets, PairwiseSet, UnaryPrediction};
pub use error::{Error, Result};
pub use fitting::{fit_deform_params, FitDiagnostics, FitOptions};
pub use inference::{infer, InferOptions, InferTrace};
pub use model::{DeformParams, ShapeModel3D};
pub use training::{train_crf, TrainOptions, TrainReport, TrainSample};
