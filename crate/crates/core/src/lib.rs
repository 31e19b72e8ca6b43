//! Rate-distortion estimation from samples.
//!
//! Upper bounds on `R(D)` are computed by optimizing a discrete reproduction
//! measure `nu` against a source `mu`, either by Blahut-Arimoto reweighting on
//! a fixed support ([`ba`]), by Wasserstein gradient descent over atom
//! locations ([`wgd`]), or by both. [`eot`] provides the entropic optimal
//! transport route and [`sources`] synthetic sources with known answers.

pub mod ba;
pub mod distortion;
pub mod eot;
pub mod error;
pub mod measures;
pub mod ratefn;
pub mod sources;
pub mod wgd;

pub use ba::{ba_solve, BaRun, ConditionalKernel};
pub use distortion::{CostMatrix, DistortionKind, DistortionSpec};
pub use eot::{eot_cost, sinkhorn_solve, wgd_gradient_eot, SinkhornPotentials};
pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, RngSeed};
pub use ratefn::{
    rate_functional_eval, rd_point_from_nu, wgd_gradient_ba, ParticleGradient, RDPoint, RunMeta,
};
pub use sources::{AnalyticRDSegment, ConvolvedSourceSpec};
pub use wgd::{hybrid_run, initial_measure, wgd_run, LossKind, StepSchedule, WgdConfig, WgdRun};
