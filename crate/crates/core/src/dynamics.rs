//! Multinomial resampling of a particle set and Monte Carlo estimates of the
//! expected surprisal trajectory.
//!
//! Under an uninformative ambiguous region the weight update is uniform, so
//! one cycle of the filter is a plain multinomial resample of the current
//! particle set. The critical word is scored against every step's state
//! without changing it.
//!
//! Each trial draws from its own counter-based ChaCha stream
//! `(seed, trial_index)`. Trials are grouped into fixed-size chunks and the
//! per-chunk accumulators are merged in chunk order, so results do not
//! depend on how many worker threads run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximations::{cv_sq_of, diffusion_ratio_of};
use crate::error::{Error, Result};
use crate::model::{marginal_of, surprisal_of, ModelSpec, Weights};
use crate::stats::Moments;

/// Trials per reduction chunk. Part of the reproducibility contract: changing
/// it changes the floating-point merge tree.
const CHUNK_TRIALS: u64 = 1024;

/// What step 0 of a trajectory is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Step 0 is the particle set drawn from the prior.
    #[default]
    Empirical,
    /// Step 0 is the exact prior; step i ≥ 1 is the particle set after i − 1 resamples.
    Exact,
}

impl StartMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StartMode::Empirical => "empirical",
            StartMode::Exact => "exact",
        }
    }

    /// Step index holding the first drawn particle set.
    pub fn first_particle_step(&self) -> usize {
        match self {
            StartMode::Empirical => 0,
            StartMode::Exact => 1,
        }
    }
}

impl std::str::FromStr for StartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(StartMode::Empirical),
            "exact" => Ok(StartMode::Exact),
            other => Err(Error::InvalidArgument(format!(
                "start mode must be `empirical` or `exact`, got `{other}`"
            ))),
        }
    }
}

/// Particle counts per structure.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParticleState {
    counts: Vec<u64>,
    n: u64,
}

impl ParticleState {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        let n = counts.iter().sum();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "a particle state needs at least one particle".into(),
            ));
        }
        Ok(ParticleState { counts, n })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn weights(&self) -> Weights {
        Weights::from_counts(&self.counts).expect("n ≥ 1")
    }

    /// All particles carry the same structure.
    pub fn is_absorbed(&self) -> bool {
        self.counts.contains(&self.n)
    }
}

fn binomial<R: Rng + ?Sized>(rng: &mut R, trials: u64, p: f64) -> u64 {
    if trials == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        trials
    } else {
        Binomial::new(trials, p)
            .expect("p in (0, 1)")
            .sample(rng)
    }
}

/// One multinomial draw of `n` items over `probs`, as conditional binomials.
fn multinomial_into<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64], out: &mut [u64]) {
    let k = probs.len();
    let mut tail = vec![0.0; k];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        acc += probs[j];
        tail[j] = acc;
    }
    let mut remaining = n;
    for j in 0..k {
        if j + 1 == k {
            out[j] = remaining;
            break;
        }
        let p = if tail[j] > 0.0 { probs[j] / tail[j] } else { 0.0 };
        let x = binomial(rng, remaining, p);
        out[j] = x;
        remaining -= x;
    }
}

/// Resample `counts` in place into `out`; conditional probabilities are
/// exact count ratios.
fn resample_into<R: Rng + ?Sized>(rng: &mut R, counts: &[u64], out: &mut [u64]) {
    let n: u64 = counts.iter().sum();
    if counts.contains(&n) {
        out.copy_from_slice(counts);
        return;
    }
    let mut source_left = n;
    let mut remaining = n;
    let k = counts.len();
    for j in 0..k {
        if j + 1 == k || remaining == 0 {
            out[j] = remaining;
            out[j + 1..].iter_mut().for_each(|c| *c = 0);
            break;
        }
        let p = counts[j] as f64 / source_left as f64;
        let x = binomial(rng, remaining, p);
        out[j] = x;
        remaining -= x;
        source_left -= counts[j];
    }
}

/// Draws the initial particle set from the prior.
pub fn sample_initial<R: Rng + ?Sized>(spec: &ModelSpec, n: u64, rng: &mut R) -> Result<ParticleState> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    let mut counts = vec![0; spec.k()];
    multinomial_into(rng, n, spec.prior().as_slice(), &mut counts);
    ParticleState::new(counts)
}

/// One resampling step: n draws with replacement from the empirical distribution.
pub fn resample_step<R: Rng + ?Sized>(state: &ParticleState, rng: &mut R) -> ParticleState {
    let mut next = vec![0; state.counts.len()];
    resample_into(rng, &state.counts, &mut next);
    ParticleState {
        counts: next,
        n: state.n,
    }
}

/// Independent stream for one trial of a seeded experiment.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Visits each step of one trajectory with its weights and absorption flag.
fn walk<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: u64,
    steps: usize,
    start: StartMode,
    rng: &mut R,
    mut visit: impl FnMut(usize, &[f64], bool),
) {
    let k = spec.k();
    let mut counts = vec![0u64; k];
    let mut next = vec![0u64; k];
    let mut weights = vec![0.0; k];
    let inv_n = 1.0 / n as f64;
    let mut first = 0;
    if start == StartMode::Exact {
        visit(0, spec.prior().as_slice(), spec.prior().is_point_mass());
        first = 1;
    }
    for step in first..=steps {
        if step == first {
            multinomial_into(rng, n, spec.prior().as_slice(), &mut counts);
        } else {
            resample_into(rng, &counts, &mut next);
            std::mem::swap(&mut counts, &mut next);
        }
        let mut absorbed = false;
        for (w, &c) in weights.iter_mut().zip(&counts) {
            *w = c as f64 * inv_n;
            absorbed |= c == n;
        }
        visit(step, &weights, absorbed);
    }
}

/// Surprisal of the word at each step of one sampled trajectory, steps 0..=steps.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: u64,
    steps: usize,
    start: StartMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(steps + 1);
    walk(spec, n, steps, start, rng, |_, w, _| {
        out.push(surprisal_of(marginal_of(spec.likelihood(), w)))
    });
    Ok(out)
}

/// Statistics of the finite surprisal values when some trials failed to parse.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSummary {
    pub mean: f64,
    pub stdev: f64,
    pub count: u64,
}

/// Per-step aggregate of the surprisal across trials.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    pub step: usize,
    pub mean_surprisal: f64,
    pub stdev_surprisal: f64,
    pub stderr: f64,
    pub absorbed_fraction: f64,
    pub failed_fraction: f64,
    /// Trials aggregated; 0 marks an exact (oracle) value.
    pub trials: u64,
    /// Present when some trial had infinite surprisal.
    pub finite: Option<FiniteSummary>,
}

impl TrajectoryStats {
    pub(crate) fn from_moments(step: usize, surprisal: &Moments, absorbed: u64) -> Self {
        let trials = surprisal.total();
        let failed = surprisal.infinite_count();
        let finite = (failed > 0).then(|| FiniteSummary {
            mean: surprisal.finite_mean(),
            stdev: surprisal.finite_stdev(),
            count: surprisal.finite_count(),
        });
        TrajectoryStats {
            step,
            mean_surprisal: surprisal.mean(),
            stdev_surprisal: if failed > 0 {
                f64::INFINITY
            } else {
                surprisal.finite_stdev()
            },
            stderr: surprisal.stderr(),
            absorbed_fraction: absorbed as f64 / trials as f64,
            failed_fraction: failed as f64 / trials as f64,
            trials,
            finite,
        }
    }
}

/// Everything the experiments need about one step of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub stats: TrajectoryStats,
    /// Average weight of each structure.
    pub mean_weights: Vec<f64>,
    pub weight_stderr: Vec<f64>,
    /// Average CV(Q)² over the step's particle sets.
    pub mean_cv_sq: f64,
    /// Average of `kl_cost / Σ(w−1)ln(1−w)` over the step's particle sets.
    pub mean_diffusion_ratio: f64,
}

/// Summary of a trajectory ensemble, Monte Carlo or exact.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSummary {
    pub n: u64,
    pub start: StartMode,
    pub steps: Vec<StepSummary>,
}

impl EnsembleSummary {
    pub fn trajectory(&self) -> Vec<TrajectoryStats> {
        self.steps.iter().map(|s| s.stats.clone()).collect()
    }
}

#[derive(Clone)]
struct StepAccumulator {
    surprisal: Moments,
    absorbed: u64,
    weights: Vec<Moments>,
    cv_sq: Moments,
    ratio: Moments,
}

impl StepAccumulator {
    fn new(k: usize) -> Self {
        StepAccumulator {
            surprisal: Moments::new(),
            absorbed: 0,
            weights: vec![Moments::new(); k],
            cv_sq: Moments::new(),
            ratio: Moments::new(),
        }
    }

    fn merge(&mut self, other: &StepAccumulator) {
        self.surprisal.merge(&other.surprisal);
        self.absorbed += other.absorbed;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.merge(b);
        }
        self.cv_sq.merge(&other.cv_sq);
        self.ratio.merge(&other.ratio);
    }
}

/// Options for [`run_ensemble`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnsembleOptions {
    pub start: StartMode,
}

/// Runs `trials` independent trajectories and aggregates every step.
pub fn run_ensemble(
    spec: &ModelSpec,
    n: u64,
    steps: usize,
    trials: u64,
    seed: u64,
    options: EnsembleOptions,
) -> Result<EnsembleSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be ≥ 1".into()));
    }
    let k = spec.k();
    let q = spec.likelihood();
    let chunks = trials.div_ceil(CHUNK_TRIALS);
    let partials: Vec<Vec<StepAccumulator>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![StepAccumulator::new(k); steps + 1];
            let lo = chunk * CHUNK_TRIALS;
            let hi = (lo + CHUNK_TRIALS).min(trials);
            for trial in lo..hi {
                let mut rng = trial_rng(seed, trial);
                walk(spec, n, steps, options.start, &mut rng, |step, w, absorbed| {
                    let a = &mut acc[step];
                    a.surprisal.push(surprisal_of(marginal_of(q, w)));
                    a.absorbed += absorbed as u64;
                    for (m, &x) in a.weights.iter_mut().zip(w) {
                        m.push(x);
                    }
                    a.cv_sq.push(cv_sq_of(q, w));
                    a.ratio.push(diffusion_ratio_of(q, w));
                });
            }
            acc
        })
        .collect();

    let mut total = vec![StepAccumulator::new(k); steps + 1];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }

    let mut out = Vec::with_capacity(steps + 1);
    for (step, acc) in total.iter().enumerate() {
        let failed = acc.surprisal.infinite_count();
        if failed > 0 && !spec.allow_parse_failure() {
            return Err(Error::ParseFailure {
                step,
                failed,
                trials,
            });
        }
        out.push(StepSummary {
            stats: TrajectoryStats::from_moments(step, &acc.surprisal, acc.absorbed),
            mean_weights: acc.weights.iter().map(Moments::mean).collect(),
            weight_stderr: acc.weights.iter().map(Moments::stderr).collect(),
            mean_cv_sq: acc.cv_sq.mean(),
            mean_diffusion_ratio: acc.ratio.mean(),
        });
    }
    Ok(EnsembleSummary {
        n,
        start: options.start,
        steps: out,
    })
}

/// Monte Carlo estimate of E[S] at steps 0..=steps, starting from a drawn particle set.
pub fn estimate_expected_surprisal(
    spec: &ModelSpec,
    n: u64,
    steps: usize,
    trials: u64,
    seed: u64,
) -> Result<Vec<TrajectoryStats>> {
    Ok(run_ensemble(spec, n, steps, trials, seed, EnsembleOptions::default())?.trajectory())
}

/// Runs `f` on a pool of `threads` workers (the global pool when `None`).
pub fn with_worker_threads<R, F>(threads: Option<usize>, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument("threads must be ≥ 1".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
