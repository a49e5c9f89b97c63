//! Particle solvers for mixed Nash equilibria of two-player zero-sum games on
//! compact strategy spaces.
//!
//! A mixed strategy is a [`WeightedEnsemble`]: particles on a [`Manifold`]
//! with simplex weights. The [`dynamics`] module evolves both players'
//! ensembles with descent-ascent, Langevin, Wasserstein-Fisher-Rao or mirror
//! descent updates, and [`metrics`] measures the Nikaido-Isoda error of the
//! result, exactly where a closed form exists.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

pub mod bench;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod games;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod metrics;
pub mod rng;
pub mod scalar;

pub use dynamics::{
    iwgf_step, lda_step, md_step, run, wfr_step, Algo, Checkpoint, CheckpointRow, DynamicsConfig,
    InitRegion, NiValues, StepRule, UpdateOrder,
};
pub use ensemble::{normalize_weights, AveragingConfig, AveragingMode};
pub use error::{Error, Result};
pub use games::{GameConfig, Player, PolyParams, PolyVariant};
pub use linalg::DenseMatrix;
pub use metrics::{
    matrix_game_solve, ni_estimate, ni_exact, ni_exact_bilinear, ni_exact_finite, required_beta,
    required_beta_from_volume, tv_distance, GibbsConfig, NiEstimatorConfig, NiEvaluator,
};
pub use scalar::Scalar;

pub type Manifold = manifold::Manifold<f64>;
pub type Point = manifold::Point<f64>;
pub type Game = games::Game<f64>;
pub type WeightedEnsemble = ensemble::WeightedEnsemble<f64>;
pub type AveragedMeasure = ensemble::AveragedMeasure<f64>;
pub type RunRecord = dynamics::RunRecord<f64>;
pub type GibbsGrid = metrics::GibbsGrid<f64>;

pub type ManifoldF32 = manifold::Manifold<f32>;
pub type GameF32 = games::Game<f32>;
pub type WeightedEnsembleF32 = ensemble::WeightedEnsemble<f32>;
