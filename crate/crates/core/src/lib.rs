//! Spatio-temporal Gaussian process modeling for mobile low-cost sensor
//! networks, with an ordered-conditional (Vecchia-type) likelihood
//! approximation.
//!
//! The observation model is hierarchical: a latent space-time field with
//! an exponential metric covariance, a nugget for micro-scale noise, and
//! a per-sensor random offset that marginalizes to an extra within-sensor
//! covariance `gamma`. The crate provides:
//!
//! - dataset ingestion, projection and preprocessing ([`data`]);
//! - dense covariance assembly and seeded simulation ([`covariance`]);
//! - six observation orderings ([`ordering`]) and conditioning-set
//!   construction under three distances and two sensor policies
//!   ([`neighbors`]);
//! - the approximate likelihood, its sparse precision factor, and exact
//!   dense oracles ([`vecchia`]);
//! - configuration quality metrics: divergence from the true model,
//!   exact information, and the sandwich information of the approximate
//!   score ([`metrics`]);
//! - maximum-likelihood fitting with profiled mean coefficients
//!   ([`estimate`]) and kriging prediction ([`predict`]).
//!
//! With the default `parallel` feature the dense assemblies, conditional
//! terms and prediction loops run on rayon; without it the same code runs
//! sequentially. Reductions are fixed-order in both modes, so results are
//! bit-identical across thread counts.

pub mod covariance;
pub mod data;
pub mod error;
pub mod estimate;
pub mod instrument;
pub mod metrics;
pub mod neighbors;
pub mod ordering;
mod par;
pub mod predict;
pub mod traj;
pub mod vecchia;

pub use covariance::{build_sigma, kernel, simulate, CovarianceMatrix, CovarianceParams, SimulationMode};
pub use data::{
    load_observations, preprocess, project_lonlat, save_observations, ColumnSchema, Dataset,
    ObservationRecord, PredictionPoint,
};
pub use error::{Error, Result};
pub use estimate::{fit, profile_beta, FitConfig, FitResult, ModelKind};
pub use metrics::{
    are, exact_fisher, godambe, kl_divergence, AreAggregate, AreResult, CovParam,
    InformationMatrices,
};
pub use neighbors::{
    build_conditioning_sets, default_kappa_grid, distance, estimate_kappa, ConditioningPolicy,
    ConditioningSets, DistanceSpec, KappaConfig,
};
pub use ordering::{
    order_by, order_maxmin, order_middleout, order_random, order_sensor, order_spatial,
    order_temporal, OrderingKind, Permutation,
};
pub use par::mode as execution_mode;
pub use predict::{grid_points, predict_exact, predict_vecchia, GridSpec, PredictionResult};
pub use traj::TrajectoryConfig;
pub use vecchia::{
    conditional_terms, exact_loglik, implied_covariance, vecchia_factor, vecchia_loglik,
    VecchiaFactor, VecchiaGeometry,
};

/// Default size cap for dense desk-scale operations (exact likelihood,
/// implied covariance, information matrices, exact prediction).
pub const DEFAULT_DESK_LIMIT: usize = 4000;
