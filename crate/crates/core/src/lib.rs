//! Effect estimation when the confounder is a known function of the pre-outcome variables.
//!
//! The conditional effect of `do(t = t*)` given a confounder value `h2` is estimated by moving
//! `t*` along the gradient flow of `|h(t) - h2|^2` to a surrogate `t'` on the level set
//! `h(t') = h2` and evaluating a fitted outcome model there. Around that core sit analytic
//! simulation models, kernel ridge / logistic lasso outcome models, error-bound and support
//! diagnostics, a synthetic GWAS generator and a sweep harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! precision for the common types.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod causal_models;
pub mod confounders;
pub mod data_model;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod gwas_sim;
pub mod harness;
mod linalg;
pub mod regression;
pub mod scalar;
pub mod surrogate_flow;

pub use causal_models::{ModelFamily, ModelSpec};
pub use confounders::FunctionalConfounder;
pub use data_model::{Dataset, InterventionQuery, RngSeed};
pub use error::{EfcError, Result};
pub use estimators::{EffectEstimate, Method};
pub use regression::{KernelRidge, LogisticLasso, OutcomeModel, Predictor};
pub use scalar::Scalar;
pub use surrogate_flow::{FlowConfig, FlowStatus, SurrogateResult, SurrogateSolver};

pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Query64 = InterventionQuery<f64>;
pub type Query32 = InterventionQuery<f32>;
pub type Confounder64 = FunctionalConfounder<f64>;
pub type Confounder32 = FunctionalConfounder<f32>;
pub type ModelSpec64 = ModelSpec<f64>;
pub type ModelSpec32 = ModelSpec<f32>;
pub type FlowConfig64 = FlowConfig<f64>;
pub type FlowConfig32 = FlowConfig<f32>;
pub type OutcomeModel64 = OutcomeModel<f64>;
pub type OutcomeModel32 = OutcomeModel<f32>;
