//! Expected surprisal of a word under particle-filter resampling.
//!
//! A particle filter tracks a distribution over syntactic structures with a
//! finite particle set. When an ambiguous region adds no information, each
//! word only triggers a multinomial resample, and the expected surprisal of
//! a later disambiguating word creeps upward. This crate computes that
//! trajectory three ways:
//!
//! * [`dynamics`]: seeded, thread-count independent Monte Carlo;
//! * [`oracle`]: exact propagation through the Markov chain on particle-count
//!   compositions, for small N and K;
//! * [`approximations`]: the second-order (Jensen gap) and linear-diffusion
//!   closed forms for the per-step increase.
//!
//! [`experiments`] assembles these into trajectory, digging-in and fit
//! studies and [`io`] writes their records.

pub mod approximations;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod oracle;
pub mod stats;

pub use approximations::{
    coefficient_of_variation_sq, fixation_time, linear_diffusion_delta, second_order_delta,
    ApproximationKind, DeltaPrediction,
};
pub use dynamics::{
    estimate_expected_surprisal, resample_step, run_ensemble, sample_initial,
    simulate_trajectory, trial_rng, with_worker_threads, EnsembleOptions, EnsembleSummary,
    ParticleState, StartMode, StepSummary, TrajectoryStats,
};
pub use error::{Error, Result};
pub use model::{
    asymptotic_expected_surprisal, bayes_posterior, kl_cost, kl_divergence, marginal_word_prob,
    surprisal, ModelSpec, Weights,
};
pub use oracle::{
    build_chain, exact_absorption_time, exact_expected_surprisal, exact_surprisal_delta,
    CompositionChain,
};
