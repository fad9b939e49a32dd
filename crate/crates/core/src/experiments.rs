//! Trajectory, digging-in and fit studies over grids of conditions.
//!
//! A study runs one ensemble per (context, likelihood, particle count)
//! condition and flattens it into [`ConditionRecord`]s, one per step.
//! Records come out in config order (contexts, then likelihoods, then
//! particle counts, then steps) regardless of how the work was scheduled.

use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximations::ApproximationKind;
use crate::dynamics::{run_ensemble, trial_rng, EnsembleOptions, EnsembleSummary, StartMode, TrajectoryStats};
use crate::error::{Error, Result};
use crate::io::float_repr;
use crate::model::{ModelSpec, Weights};
use crate::oracle::{build_chain_with_budget, exact_ensemble, DEFAULT_STATE_BUDGET};
use crate::stats::{pearson, spearman};

/// A named prior over structures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Context {
    pub name: String,
    pub prior: Vec<f64>,
}

impl Context {
    pub fn new(name: impl Into<String>, prior: Vec<f64>) -> Self {
        Context {
            name: name.into(),
            prior,
        }
    }
}

/// How a condition's expectations are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    MonteCarlo,
    /// Exact chain propagation; fails if the chain exceeds the state budget.
    Exact,
    /// Exact when the chain fits the state budget, Monte Carlo otherwise.
    Auto,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::MonteCarlo => "monte_carlo",
            Backend::Exact => "exact",
            Backend::Auto => "auto",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monte_carlo" | "mc" => Ok(Backend::MonteCarlo),
            "exact" => Ok(Backend::Exact),
            "auto" => Ok(Backend::Auto),
            _ => Err(Error::InvalidArgument(format!("unknown backend `{s}`"))),
        }
    }
}

fn default_budget() -> usize {
    DEFAULT_STATE_BUDGET
}

/// A grid of conditions: every context × likelihood × particle count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub q_likelihoods: Vec<Vec<f64>>,
    pub contexts: Vec<Context>,
    pub particle_counts: Vec<u64>,
    /// Last resampling step recorded.
    pub steps: usize,
    pub trials: u64,
    pub seed: u64,
    #[serde(default)]
    pub start_mode: StartMode,
    #[serde(default)]
    pub allow_parse_failure: bool,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_budget")]
    pub state_budget: usize,
}

pub const AMB: &str = "AMB";
pub const UNAMB: &str = "UNAMB";

fn garden_path_contexts() -> Vec<Context> {
    vec![Context::new(AMB, vec![0.8, 0.2]), Context::new(UNAMB, vec![0.2, 0.8])]
}

const GRID_Q1: [f64; 5] = [0.004, 0.02, 0.1, 0.25, 0.5];
const GRID_Q2: f64 = 0.5;

fn grid_likelihoods() -> Vec<Vec<f64>> {
    GRID_Q1.iter().map(|&q1| vec![q1, GRID_Q2]).collect()
}

impl ExperimentConfig {
    /// Two contexts, Q = (0.004, 0.5), 25 particles, 60 steps.
    pub fn trajectories(trials: u64) -> Self {
        ExperimentConfig {
            q_likelihoods: vec![vec![0.004, 0.5]],
            contexts: garden_path_contexts(),
            particle_counts: vec![25],
            steps: 60,
            trials,
            seed: 7,
            start_mode: StartMode::Empirical,
            allow_parse_failure: false,
            backend: Backend::MonteCarlo,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    /// Q₁ × N grid for the approximation study, steps 0 through 5 so that
    /// the per-step increases ΔS(0)..ΔS(4) are all observed.
    pub fn approximation_grid(trials: u64) -> Self {
        ExperimentConfig {
            q_likelihoods: grid_likelihoods(),
            contexts: garden_path_contexts(),
            particle_counts: vec![5, 10, 25, 50, 100],
            steps: 5,
            trials,
            seed: 7,
            start_mode: StartMode::Empirical,
            allow_parse_failure: false,
            backend: Backend::MonteCarlo,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_likelihoods.is_empty() {
            return Err(Error::config("q_likelihoods", "grid is empty"));
        }
        if self.contexts.is_empty() {
            return Err(Error::config("contexts", "grid is empty"));
        }
        if self.particle_counts.is_empty() {
            return Err(Error::config("particle_counts", "grid is empty"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be ≥ 1"));
        }
        for (i, &n) in self.particle_counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::config(format!("particle_counts[{i}]"), "must be ≥ 1"));
            }
            if self.particle_counts[..i].contains(&n) {
                return Err(Error::config(format!("particle_counts[{i}]"), "duplicate value"));
            }
        }
        for (i, ctx) in self.contexts.iter().enumerate() {
            if self.contexts[..i].iter().any(|c| c.name == ctx.name) {
                return Err(Error::config(format!("contexts[{i}].name"), "duplicate name"));
            }
            Weights::new(ctx.prior.clone())
                .map_err(|e| Error::config(format!("contexts[{i}].prior"), e.to_string()))?;
        }
        for (j, q) in self.q_likelihoods.iter().enumerate() {
            let key = likelihood_key(q);
            if self.q_likelihoods[..j].iter().any(|o| likelihood_key(o) == key) {
                return Err(Error::config(
                    format!("q_likelihoods[{j}]"),
                    "(q1, q2) duplicates an earlier entry",
                ));
            }
            for ctx in &self.contexts {
                self.spec(ctx, q)
                    .map_err(|e| Error::config(format!("q_likelihoods[{j}]"), e.to_string()))?;
            }
        }
        Ok(())
    }

    fn spec(&self, ctx: &Context, q: &[f64]) -> Result<ModelSpec> {
        if self.allow_parse_failure {
            ModelSpec::allowing_parse_failure(ctx.prior.clone(), q.to_vec())
        } else {
            ModelSpec::new(ctx.prior.clone(), q.to_vec())
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if is_json(path) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// (Q₁, Q₂) for the record keys; Q₂ is NaN when there is a single structure.
fn likelihood_key(q: &[f64]) -> (f64, f64) {
    (q[0], q.get(1).copied().unwrap_or(f64::NAN))
}

/// One step of one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub experiment: String,
    pub context: String,
    #[serde(with = "float_repr")]
    pub q1: f64,
    #[serde(with = "float_repr")]
    pub q2: f64,
    pub n: u64,
    pub step: usize,
    #[serde(with = "float_repr")]
    pub mean_surprisal: f64,
    #[serde(with = "float_repr")]
    pub stdev: f64,
    #[serde(with = "float_repr")]
    pub stderr: f64,
    #[serde(with = "float_repr")]
    pub absorbed_fraction: f64,
    #[serde(with = "float_repr")]
    pub failed_fraction: f64,
    /// 0 for exact values.
    pub trials: u64,
    /// Cumulative second-order curve from the step-0 mean.
    #[serde(with = "float_repr::option")]
    pub pred_second_order: Option<f64>,
    /// Constant step-0 linear-diffusion slope from the step-0 mean.
    #[serde(with = "float_repr::option")]
    pub pred_linear_diffusion: Option<f64>,
}

impl ConditionRecord {
    pub fn prediction(&self, kind: ApproximationKind) -> Option<f64> {
        match kind {
            ApproximationKind::SecondOrder => self.pred_second_order,
            ApproximationKind::LinearDiffusion => self.pred_linear_diffusion,
        }
    }

    /// Rebuilds the step statistics this record was made from.
    pub fn stats(&self) -> TrajectoryStats {
        TrajectoryStats {
            step: self.step,
            mean_surprisal: self.mean_surprisal,
            stdev_surprisal: self.stdev,
            stderr: self.stderr,
            absorbed_fraction: self.absorbed_fraction,
            failed_fraction: self.failed_fraction,
            trials: self.trials,
            finite: None,
        }
    }

    fn same_condition(&self, other: &ConditionRecord) -> bool {
        self.experiment == other.experiment
            && self.context == other.context
            && self.q1.to_bits() == other.q1.to_bits()
            && self.q2.to_bits() == other.q2.to_bits()
            && self.n == other.n
    }
}

/// Runs one condition on the requested backend.
#[allow(clippy::too_many_arguments)]
pub fn run_condition(
    spec: &ModelSpec,
    n: u64,
    steps: usize,
    trials: u64,
    seed: u64,
    start: StartMode,
    backend: Backend,
    state_budget: usize,
) -> Result<EnsembleSummary> {
    let exact = |chain| exact_ensemble(&chain, spec, steps, start);
    match backend {
        Backend::MonteCarlo => run_ensemble(spec, n, steps, trials, seed, EnsembleOptions { start }),
        Backend::Exact => exact(build_chain_with_budget(spec, n, state_budget)?),
        Backend::Auto => match build_chain_with_budget(spec, n, state_budget) {
            Ok(chain) => exact(chain),
            Err(Error::StateBudgetExceeded { .. }) => {
                run_ensemble(spec, n, steps, trials, seed, EnsembleOptions { start })
            }
            Err(e) => Err(e),
        },
    }
}

/// Seed of condition number `index` in a grid, drawn from the master seed.
pub fn condition_seed(master: u64, index: u64) -> u64 {
    trial_rng(master, index).next_u64()
}

/// Flattens an ensemble into records and attaches the approximation curves.
pub fn condition_records(
    experiment: &str,
    context: &str,
    q: &[f64],
    summary: &EnsembleSummary,
) -> Vec<ConditionRecord> {
    let (q1, q2) = likelihood_key(q);
    let two_n = 2.0 * summary.n as f64;
    let base = summary.steps[0].stats.mean_surprisal;
    let slope = summary.steps[0].mean_diffusion_ratio / two_n;
    let mut cumulative = base;
    summary
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let record = ConditionRecord {
                experiment: experiment.to_string(),
                context: context.to_string(),
                q1,
                q2,
                n: summary.n,
                step: s.stats.step,
                mean_surprisal: s.stats.mean_surprisal,
                stdev: s.stats.stdev_surprisal,
                stderr: s.stats.stderr,
                absorbed_fraction: s.stats.absorbed_fraction,
                failed_fraction: s.stats.failed_fraction,
                trials: s.stats.trials,
                pred_second_order: Some(cumulative),
                pred_linear_diffusion: Some(base + t as f64 * slope),
            };
            cumulative += s.mean_cv_sq / two_n;
            record
        })
        .collect()
}

/// Runs every condition of the grid and returns one record per step.
pub fn run_trajectory_study(config: &ExperimentConfig, experiment: &str) -> Result<Vec<ConditionRecord>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for ctx in &config.contexts {
        for q in &config.q_likelihoods {
            for &n in &config.particle_counts {
                jobs.push((ctx, q, n));
            }
        }
    }
    let per_condition: Vec<Vec<ConditionRecord>> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(ctx, q, n))| {
            let spec = config.spec(ctx, q)?;
            let summary = run_condition(
                &spec,
                n,
                config.steps,
                config.trials,
                condition_seed(config.seed, index as u64),
                config.start_mode,
                config.backend,
                config.state_budget,
            )?;
            Ok(condition_records(experiment, &ctx.name, q, &summary))
        })
        .collect::<Result<_>>()?;
    Ok(per_condition.into_iter().flatten().collect())
}

/// A difference of expected surprisals with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectValue {
    pub step: usize,
    #[serde(with = "float_repr")]
    pub value: f64,
    #[serde(with = "float_repr")]
    pub stderr: f64,
}

/// E[S] in the ambiguous context minus E[S] in the control context.
pub fn garden_path_effect(amb: &TrajectoryStats, unamb: &TrajectoryStats) -> Result<EffectValue> {
    if amb.step != unamb.step {
        return Err(Error::StepMismatch {
            amb: amb.step,
            unamb: unamb.step,
        });
    }
    Ok(EffectValue {
        step: amb.step,
        value: amb.mean_surprisal - unamb.mean_surprisal,
        stderr: amb.stderr.hypot(unamb.stderr),
    })
}

/// Growth of the garden-path effect from the short to the long region.
pub fn digging_in_effect(gp_long: &EffectValue, gp_short: &EffectValue) -> Result<EffectValue> {
    if gp_long.step <= gp_short.step {
        return Err(Error::InvalidArgument(format!(
            "long region (step {}) must follow the short one (step {})",
            gp_long.step, gp_short.step
        )));
    }
    Ok(EffectValue {
        step: gp_long.step,
        value: gp_long.value - gp_short.value,
        stderr: gp_long.stderr.hypot(gp_short.stderr),
    })
}

fn default_short() -> usize {
    0
}

fn default_long() -> usize {
    2
}

fn default_amb() -> String {
    AMB.into()
}

fn default_unamb() -> String {
    UNAMB.into()
}

fn default_true() -> bool {
    true
}

/// Garden-path effects after a short and a long ambiguous region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiggingInConfig {
    pub grid: ExperimentConfig,
    #[serde(default = "default_short")]
    pub short_step: usize,
    #[serde(default = "default_long")]
    pub long_step: usize,
    #[serde(default = "default_amb")]
    pub amb_context: String,
    #[serde(default = "default_unamb")]
    pub unamb_context: String,
    /// Adds a row for the fully parallel limit (no resampling noise).
    #[serde(default = "default_true")]
    pub parallel_limit: bool,
}

impl DiggingInConfig {
    /// Q₂ = 0.5, Q₁ over the approximation grid, N ∈ {1, 2, 5, 25, 125},
    /// short = 0 and long = 2 resampling steps.
    pub fn standard(trials: u64) -> Self {
        DiggingInConfig {
            grid: ExperimentConfig {
                q_likelihoods: grid_likelihoods(),
                contexts: garden_path_contexts(),
                particle_counts: vec![1, 2, 5, 25, 125],
                steps: 2,
                trials,
                seed: 7,
                start_mode: StartMode::Empirical,
                allow_parse_failure: false,
                backend: Backend::Auto,
                state_budget: DEFAULT_STATE_BUDGET,
            },
            short_step: 0,
            long_step: 2,
            amb_context: AMB.into(),
            unamb_context: UNAMB.into(),
            parallel_limit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("grid.{field}"),
                message,
            },
            other => other,
        })?;
        if self.long_step <= self.short_step {
            return Err(Error::config("long_step", "must exceed short_step"));
        }
        if self.grid.steps < self.long_step {
            return Err(Error::config("grid.steps", "must be at least long_step"));
        }
        for (field, name) in [("amb_context", &self.amb_context), ("unamb_context", &self.unamb_context)] {
            if !self.grid.contexts.iter().any(|c| &c.name == name) {
                return Err(Error::config(field, format!("no context named `{name}`")));
            }
        }
        Ok(())
    }
}

/// One (likelihood, particle count) cell of the digging-in grid.
/// `n` is `None` for the fully parallel limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiggingInRecord {
    pub experiment: String,
    #[serde(with = "float_repr")]
    pub q1: f64,
    #[serde(with = "float_repr")]
    pub q2: f64,
    pub n: Option<u64>,
    pub short_step: usize,
    pub long_step: usize,
    #[serde(with = "float_repr")]
    pub gp_short: f64,
    #[serde(with = "float_repr")]
    pub gp_short_stderr: f64,
    #[serde(with = "float_repr")]
    pub gp_long: f64,
    #[serde(with = "float_repr")]
    pub gp_long_stderr: f64,
    #[serde(with = "float_repr")]
    pub digging_in: f64,
    #[serde(with = "float_repr")]
    pub digging_in_stderr: f64,
}

/// Output of [`run_digging_in_study`]: per-step trajectories and the
/// per-cell effects.
#[derive(Clone, Debug, PartialEq)]
pub struct DiggingInStudy {
    pub trajectories: Vec<ConditionRecord>,
    pub effects: Vec<DiggingInRecord>,
}

pub fn run_digging_in_study(config: &DiggingInConfig, experiment: &str) -> Result<DiggingInStudy> {
    config.validate()?;
    let trajectories = run_trajectory_study(&config.grid, experiment)?;
    let find = |ctx: &str, q: (f64, f64), n: u64, step: usize| -> Result<TrajectoryStats> {
        trajectories
            .iter()
            .find(|r| {
                r.context == ctx
                    && r.q1.to_bits() == q.0.to_bits()
                    && r.q2.to_bits() == q.1.to_bits()
                    && r.n == n
                    && r.step == step
            })
            .map(ConditionRecord::stats)
            .ok_or_else(|| Error::Internal(format!("missing record {ctx} n={n} step={step}")))
    };
    let mut effects = Vec::new();
    for q in &config.grid.q_likelihoods {
        let key = likelihood_key(q);
        let mut cell = |n: Option<u64>, short: EffectValue, long: EffectValue| -> Result<()> {
            let dig = digging_in_effect(&long, &short)?;
            effects.push(DiggingInRecord {
                experiment: experiment.to_string(),
                q1: key.0,
                q2: key.1,
                n,
                short_step: config.short_step,
                long_step: config.long_step,
                gp_short: short.value,
                gp_short_stderr: short.stderr,
                gp_long: long.value,
                gp_long_stderr: long.stderr,
                digging_in: dig.value,
                digging_in_stderr: dig.stderr,
            });
            Ok(())
        };
        for &n in &config.grid.particle_counts {
            let gp = |step| {
                garden_path_effect(
                    &find(&config.amb_context, key, n, step)?,
                    &find(&config.unamb_context, key, n, step)?,
                )
            };
            cell(Some(n), gp(config.short_step)?, gp(config.long_step)?)?;
        }
        if config.parallel_limit {
            let amb = context_spec(config, &config.amb_context, q)?;
            let unamb = context_spec(config, &config.unamb_context, q)?;
            let short = parallel_garden_path(&amb, &unamb, config.short_step)?;
            let long = parallel_garden_path(&amb, &unamb, config.long_step)?;
            cell(None, short, long)?;
        }
    }
    Ok(DiggingInStudy {
        trajectories,
        effects,
    })
}

fn context_spec(config: &DiggingInConfig, name: &str, q: &[f64]) -> Result<ModelSpec> {
    let ctx = config
        .grid
        .contexts
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::config("contexts", format!("no context named `{name}`")))?;
    config.grid.spec(ctx, q)
}

/// Garden-path effect when the exact distribution is carried without
/// sampling: resampling is the identity, so the surprisal never moves.
pub fn parallel_garden_path(amb: &ModelSpec, unamb: &ModelSpec, step: usize) -> Result<EffectValue> {
    let stats = |spec: &ModelSpec| -> Result<TrajectoryStats> {
        let m = crate::model::marginal_word_prob(spec, spec.prior())?;
        Ok(TrajectoryStats {
            step,
            mean_surprisal: crate::model::surprisal(m)?,
            stdev_surprisal: 0.0,
            stderr: 0.0,
            absorbed_fraction: 0.0,
            failed_fraction: 0.0,
            trials: 0,
            finite: None,
        })
    };
    garden_path_effect(&stats(amb)?, &stats(unamb)?)
}

/// One (true, predicted) per-step increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub kind: ApproximationKind,
    pub experiment: String,
    pub context: String,
    #[serde(with = "float_repr")]
    pub q1: f64,
    #[serde(with = "float_repr")]
    pub q2: f64,
    pub n: u64,
    /// ΔS(step) = E[S_{step+1}] − E[S_step].
    pub step: usize,
    #[serde(with = "float_repr")]
    pub true_delta: f64,
    #[serde(with = "float_repr")]
    pub predicted_delta: f64,
}

/// Agreement between true and approximated per-step increases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(with = "float_repr")]
    pub pearson_r2_second_order: f64,
    #[serde(with = "float_repr")]
    pub pearson_r2_linear_diffusion: f64,
    #[serde(with = "float_repr")]
    pub spearman_rho_second_order: f64,
    #[serde(with = "float_repr")]
    pub spearman_rho_linear_diffusion: f64,
    pub included_second_order: usize,
    pub included_linear_diffusion: usize,
    /// Points dropped because the true or predicted increase was not finite.
    pub excluded_points: usize,
    pub points: Vec<FitPoint>,
}

/// Pairs consecutive steps of every condition into true and predicted
/// increases and correlates them per approximation.
pub fn fit_deltas(records: &[ConditionRecord]) -> Result<FitReport> {
    let mut conditions: Vec<Vec<&ConditionRecord>> = Vec::new();
    for r in records {
        match conditions.iter_mut().find(|c| c[0].same_condition(r)) {
            Some(c) => c.push(r),
            None => conditions.push(vec![r]),
        }
    }
    let mut points = Vec::new();
    for cond in &mut conditions {
        cond.sort_by_key(|r| r.step);
        for pair in cond.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.step == a.step {
                return Err(Error::InvalidArgument(format!(
                    "duplicate step {} for {} n={}",
                    a.step, a.context, a.n
                )));
            }
            if b.step != a.step + 1 {
                continue;
            }
            for kind in [ApproximationKind::SecondOrder, ApproximationKind::LinearDiffusion] {
                if let (Some(pa), Some(pb)) = (a.prediction(kind), b.prediction(kind)) {
                    points.push(FitPoint {
                        kind,
                        experiment: a.experiment.clone(),
                        context: a.context.clone(),
                        q1: a.q1,
                        q2: a.q2,
                        n: a.n,
                        step: a.step,
                        true_delta: b.mean_surprisal - a.mean_surprisal,
                        predicted_delta: pb - pa,
                    });
                }
            }
        }
    }

    let finite = |p: &&FitPoint| p.true_delta.is_finite() && p.predicted_delta.is_finite();
    let correlate = |kind| -> Result<(f64, f64, usize)> {
        let (x, y): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.kind == kind)
            .filter(finite)
            .map(|p| (p.true_delta, p.predicted_delta))
            .unzip();
        if x.len() < 3 {
            return Err(Error::TooFewPoints { found: x.len() });
        }
        Ok((pearson(&x, &y).powi(2), spearman(&x, &y), x.len()))
    };
    let (r2_so, rho_so, n_so) = correlate(ApproximationKind::SecondOrder)?;
    let (r2_ld, rho_ld, n_ld) = correlate(ApproximationKind::LinearDiffusion)?;
    Ok(FitReport {
        pearson_r2_second_order: r2_so,
        pearson_r2_linear_diffusion: r2_ld,
        spearman_rho_second_order: rho_so,
        spearman_rho_linear_diffusion: rho_ld,
        included_second_order: n_so,
        included_linear_diffusion: n_ld,
        excluded_points: points.len() - n_so - n_ld,
        points,
    })
}

/// All studies of one run. Missing sections are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPlan {
    #[serde(default)]
    pub trajectories: Option<ExperimentConfig>,
    #[serde(default)]
    pub digging_in: Option<DiggingInConfig>,
    #[serde(default)]
    pub approximations: Option<ExperimentConfig>,
    /// Overrides the seed of every section when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl StudyPlan {
    /// Full-size trial counts: 5×10⁴ for trajectories and digging-in,
    /// 10⁶ for the approximation grid.
    pub fn full() -> Self {
        Self::with_trials(50_000, 1_000_000)
    }

    /// Desk-scale trial counts: 10⁴ and 10⁵.
    pub fn desk() -> Self {
        Self::with_trials(10_000, 100_000)
    }

    pub fn with_trials(trajectory_trials: u64, fit_trials: u64) -> Self {
        StudyPlan {
            trajectories: Some(ExperimentConfig::trajectories(trajectory_trials)),
            digging_in: Some(DiggingInConfig::standard(trajectory_trials)),
            approximations: Some(ExperimentConfig::approximation_grid(fit_trials)),
            seed: None,
        }
    }

    pub fn apply_seed(&mut self, seed: u64) {
        if let Some(c) = &mut self.trajectories {
            c.seed = seed;
        }
        if let Some(c) = &mut self.digging_in {
            c.grid.seed = seed;
        }
        if let Some(c) = &mut self.approximations {
            c.seed = seed;
        }
        self.seed = Some(seed);
    }

    pub fn validate(&self) -> Result<()> {
        let prefix = |section: &'static str| {
            move |e: Error| match e {
                Error::Config { field, message } => Error::Config {
                    field: format!("{section}.{field}"),
                    message,
                },
                other => other,
            }
        };
        if self.trajectories.is_none() && self.digging_in.is_none() && self.approximations.is_none() {
            return Err(Error::config("plan", "no study sections"));
        }
        if let Some(c) = &self.trajectories {
            c.validate().map_err(prefix("trajectories"))?;
        }
        if let Some(c) = &self.digging_in {
            c.validate().map_err(prefix("digging_in"))?;
        }
        if let Some(c) = &self.approximations {
            c.validate().map_err(prefix("approximations"))?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::finish(toml::from_str(text)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::finish(serde_json::from_str(text)?)
    }

    fn finish(mut plan: Self) -> Result<Self> {
        if let Some(seed) = plan.seed {
            plan.apply_seed(seed);
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if is_json(path) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Everything a [`StudyPlan`] produces.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StudyOutputs {
    pub trajectories: Option<Vec<ConditionRecord>>,
    pub digging_in: Option<DiggingInStudy>,
    pub approximations: Option<Vec<ConditionRecord>>,
    pub fit: Option<FitReport>,
}

pub fn run_study(plan: &StudyPlan) -> Result<StudyOutputs> {
    plan.validate()?;
    let mut out = StudyOutputs::default();
    if let Some(c) = &plan.trajectories {
        out.trajectories = Some(run_trajectory_study(c, "fig1")?);
    }
    if let Some(c) = &plan.digging_in {
        out.digging_in = Some(run_digging_in_study(c, "fig2")?);
    }
    if let Some(c) = &plan.approximations {
        let records = run_trajectory_study(c, "fig3")?;
        out.fit = Some(fit_deltas(&records)?);
        out.approximations = Some(records);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_chain, exact_expected_surprisal};
    use approx::assert_abs_diff_eq;

    fn small(backend: Backend) -> ExperimentConfig {
        ExperimentConfig {
            q_likelihoods: vec![vec![0.004, 0.5], vec![0.1, 0.5]],
            contexts: garden_path_contexts(),
            particle_counts: vec![3, 8],
            steps: 4,
            trials: 3000,
            seed: 11,
            start_mode: StartMode::Empirical,
            allow_parse_failure: false,
            backend,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    #[test]
    fn records_cover_the_grid_in_order() {
        let records = run_trajectory_study(&small(Backend::MonteCarlo), "t").unwrap();
        assert_eq!(records.len(), 2 * 2 * 2 * 5);
        assert_eq!(records[0].context, AMB);
        assert_eq!((records[0].q1, records[0].n, records[0].step), (0.004, 3, 0));
        assert_eq!((records[4].step, records[5].n), (4, 8));
        assert_eq!(records.last().unwrap().context, UNAMB);
        let mut keys: Vec<_> = records
            .iter()
            .map(|r| (r.context.clone(), r.q1.to_bits(), r.n, r.step))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), records.len());
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let mc = run_trajectory_study(&small(Backend::MonteCarlo), "t").unwrap();
        let exact = run_trajectory_study(&small(Backend::Exact), "t").unwrap();
        for (m, e) in mc.iter().zip(&exact) {
            assert_eq!(e.trials, 0);
            assert!((m.mean_surprisal - e.mean_surprisal).abs() <= 4.0 * m.stderr + 1e-12);
        }
    }

    #[test]
    fn predictions_start_at_the_step_zero_mean() {
        let records = run_trajectory_study(&small(Backend::Exact), "t").unwrap();
        for r in records.iter().filter(|r| r.step == 0) {
            assert_eq!(r.pred_second_order, Some(r.mean_surprisal));
            assert_eq!(r.pred_linear_diffusion, Some(r.mean_surprisal));
        }
        let c: Vec<_> = records.iter().take(5).collect();
        let slope = c[1].pred_linear_diffusion.unwrap() - c[0].pred_linear_diffusion.unwrap();
        let later = c[4].pred_linear_diffusion.unwrap() - c[3].pred_linear_diffusion.unwrap();
        assert_abs_diff_eq!(slope, later, epsilon = 1e-14);
        assert!(slope > 0.0);
    }

    #[test]
    fn degenerate_model_is_flat() {
        let config = ExperimentConfig {
            q_likelihoods: vec![vec![0.3]],
            contexts: vec![Context::new("only", vec![1.0])],
            particle_counts: vec![4],
            steps: 3,
            trials: 100,
            seed: 1,
            start_mode: StartMode::Empirical,
            allow_parse_failure: false,
            backend: Backend::MonteCarlo,
            state_budget: DEFAULT_STATE_BUDGET,
        };
        let records = run_trajectory_study(&config, "k1").unwrap();
        assert!(records[0].q2.is_nan());
        for r in &records {
            assert_abs_diff_eq!(r.mean_surprisal, -(0.3f64.ln()), epsilon = 1e-15);
            assert_eq!(r.pred_second_order, Some(records[0].mean_surprisal));
        }
    }

    #[test]
    fn exact_start_step_zero() {
        let mut config = small(Backend::MonteCarlo);
        config.start_mode = StartMode::Exact;
        let records = run_trajectory_study(&config, "t").unwrap();
        let unamb = records.iter().find(|r| r.context == UNAMB && r.step == 0).unwrap();
        assert_abs_diff_eq!(unamb.mean_surprisal, 0.914_292_729_211_482, epsilon = 1e-15);
    }

    #[test]
    fn garden_path_arithmetic() {
        let s = |step, mean, stderr| TrajectoryStats {
            step,
            mean_surprisal: mean,
            stdev_surprisal: 0.0,
            stderr,
            absorbed_fraction: 0.0,
            failed_fraction: 0.0,
            trials: 1,
            finite: None,
        };
        let gp = garden_path_effect(&s(0, 2.0, 0.3), &s(0, 0.5, 0.4)).unwrap();
        assert_abs_diff_eq!(gp.value, 1.5);
        assert_abs_diff_eq!(gp.stderr, 0.5, epsilon = 1e-15);
        assert_eq!(garden_path_effect(&s(1, 1.0, 0.0), &s(1, 1.0, 0.0)).unwrap().value, 0.0);
        assert!(matches!(
            garden_path_effect(&s(0, 1.0, 0.0), &s(2, 1.0, 0.0)),
            Err(Error::StepMismatch { amb: 0, unamb: 2 })
        ));
        let long = EffectValue { step: 2, value: 2.0, stderr: 0.0 };
        assert!(digging_in_effect(&gp, &long).is_err());
        assert_abs_diff_eq!(digging_in_effect(&long, &gp).unwrap().value, 0.5);
    }

    #[test]
    fn parallel_garden_path_is_prior_surprisal_difference() {
        let amb = ModelSpec::new(vec![0.8, 0.2], vec![0.004, 0.5]).unwrap();
        let unamb = ModelSpec::new(vec![0.2, 0.8], vec![0.004, 0.5]).unwrap();
        let gp = parallel_garden_path(&amb, &unamb, 0).unwrap();
        assert_abs_diff_eq!(gp.value, 1.356_793_696_723_192_7, epsilon = 1e-14);
    }

    #[test]
    fn digging_in_matches_oracle_sums() {
        let mut config = DiggingInConfig::standard(100);
        config.grid.q_likelihoods = vec![vec![0.004, 0.5]];
        config.grid.particle_counts = vec![1, 25];
        let study = run_digging_in_study(&config, "fig2").unwrap();
        assert_eq!(study.effects.len(), 3);
        let one = &study.effects[0];
        assert_eq!(one.n, Some(1));
        assert_eq!(one.digging_in, 0.0);
        let parallel = &study.effects[2];
        assert_eq!((parallel.n, parallel.digging_in), (None, 0.0));

        let spec = |p: Vec<f64>| ModelSpec::new(p, vec![0.004, 0.5]).unwrap();
        let (a, u) = (spec(vec![0.8, 0.2]), spec(vec![0.2, 0.8]));
        let ta = exact_expected_surprisal(&build_chain(&a, 25).unwrap(), &a, 2).unwrap();
        let tu = exact_expected_surprisal(&build_chain(&u, 25).unwrap(), &u, 2).unwrap();
        let want = (ta[2] - ta[0]) - (tu[2] - tu[0]);
        assert!(want > 0.0);
        assert_abs_diff_eq!(study.effects[1].digging_in, want, epsilon = 1e-12);
    }

    fn synthetic(preds: impl Fn(usize, f64) -> f64) -> Vec<ConditionRecord> {
        let mut out = Vec::new();
        for n in [2u64, 3] {
            let mut mean = 1.0;
            for step in 0..5 {
                out.push(ConditionRecord {
                    experiment: "s".into(),
                    context: "c".into(),
                    q1: 0.1,
                    q2: 0.5,
                    n,
                    step,
                    mean_surprisal: mean,
                    stdev: 0.0,
                    stderr: 0.0,
                    absorbed_fraction: 0.0,
                    failed_fraction: 0.0,
                    trials: 1,
                    pred_second_order: Some(preds(step, mean)),
                    pred_linear_diffusion: Some(preds(step, mean)),
                });
                mean += 1.0 / ((step + 1) as f64 * n as f64);
            }
        }
        out
    }

    #[test]
    fn perfect_predictions_fit_exactly() {
        let report = fit_deltas(&synthetic(|_, m| m)).unwrap();
        assert_abs_diff_eq!(report.pearson_r2_second_order, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.spearman_rho_linear_diffusion, 1.0, epsilon = 1e-12);
        assert_eq!(report.points.len(), 16);
        assert_eq!(report.excluded_points, 0);
    }

    #[test]
    fn reversed_predictions_anticorrelate() {
        let records = synthetic(|_, _| 0.0);
        // predicted increase shrinks as the true increase grows
        let mut records = records;
        for r in &mut records {
            let p: f64 = (0..r.step).map(|i| (i + 1) as f64 * r.n as f64).sum();
            r.pred_second_order = Some(p);
            r.pred_linear_diffusion = Some(p);
        }
        let report = fit_deltas(&records).unwrap();
        assert_abs_diff_eq!(report.spearman_rho_second_order, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_needs_three_points() {
        let records: Vec<_> = synthetic(|_, m| m).into_iter().take(3).collect();
        assert!(matches!(fit_deltas(&records), Err(Error::TooFewPoints { found: 2 })));
        let mut bad = synthetic(|_, m| m);
        bad[2].mean_surprisal = f64::INFINITY;
        let report = fit_deltas(&bad).unwrap();
        assert_eq!(report.excluded_points, 4);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = small(Backend::MonteCarlo);
        c.q_likelihoods.clear();
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "q_likelihoods"));
        let mut c = small(Backend::MonteCarlo);
        c.contexts[1].prior = vec![0.5, 0.6];
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "contexts[1].prior"));
        let mut c = small(Backend::MonteCarlo);
        c.q_likelihoods[1] = vec![0.1, 0.5, 0.2];
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "q_likelihoods[1]"));
        let mut c = small(Backend::MonteCarlo);
        c.trials = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let plan = StudyPlan::desk();
        let text = plan.to_toml_string().unwrap();
        assert_eq!(StudyPlan::from_toml_str(&text).unwrap(), plan);
        let err = StudyPlan::from_toml_str("[trajectories]\nq_likelihoods = []\n").unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");
    }

    #[test]
    fn plan_seed_overrides_sections() {
        let mut plan = StudyPlan::desk();
        plan.apply_seed(99);
        assert_eq!(plan.approximations.unwrap().seed, 99);
        assert_eq!(plan.digging_in.unwrap().grid.seed, 99);
    }
}
