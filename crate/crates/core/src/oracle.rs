//! Exact resampling dynamics on the chain of particle-count compositions.
//!
//! With N particles and K structures the particle set is a composition of N
//! into K nonnegative parts. Multinomial resampling is a Markov chain on
//! these C(N+K−1, K−1) states, and pushing the state distribution through
//! it gives every expectation exactly.
//!
//! States are enumerated in colexicographic order: the last part is the
//! most significant key, ascending. For N = 2, K = 2 the order is
//! (2,0), (1,1), (0,2).

use crate::approximations::{cv_sq_of, diffusion_ratio_of};
use crate::dynamics::{EnsembleSummary, StartMode, StepSummary, TrajectoryStats};
use crate::error::{Error, Result};
use crate::model::{asymptotic_of, marginal_of, surprisal_of, ModelSpec};

pub const DEFAULT_STATE_BUDGET: usize = 200_000;
/// Chains up to this many states store a dense transition matrix.
pub const DENSE_STATE_LIMIT: usize = 2_000;
/// Iterate until the mass on non-absorbing states falls below this.
pub const ABSORPTION_TOLERANCE: f64 = 1e-12;

const MAX_ITERATIONS: usize = 50_000_000;

#[derive(Clone, Debug)]
enum Transition {
    Dense {
        dim: usize,
        data: Vec<f64>,
    },
    Sparse {
        row_ptr: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    },
}

/// The resampling Markov chain for fixed N and K.
#[derive(Clone, Debug)]
pub struct CompositionChain {
    n: u64,
    k: usize,
    states: Vec<u64>,
    initial: Vec<f64>,
    absorbing: Vec<Option<usize>>,
    transition: Transition,
    // stars[j][m] = C(m + j, j): compositions of m into j + 1 parts
    stars: Vec<Vec<u64>>,
}

/// C(n+k−1, k−1), the number of compositions of n into k parts.
pub fn composition_count(n: u64, k: usize) -> u128 {
    if k == 0 {
        return 0;
    }
    let (top, choose) = (n as u128 + k as u128 - 1, k as u128 - 1);
    let mut c: u128 = 1;
    for i in 0..choose {
        c = c.saturating_mul(top - i) / (i + 1);
    }
    c
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    t.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        t.push(acc);
    }
    t
}

fn ln_binomial_pmf(lnfact: &[f64], trials: u64, x: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return if x == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p >= 1.0 {
        return if x == trials { 0.0 } else { f64::NEG_INFINITY };
    }
    let (t, x_) = (trials as usize, x as usize);
    lnfact[t] - lnfact[x_] - lnfact[t - x_]
        + x as f64 * p.ln()
        + (trials - x) as f64 * (1.0 - p).ln()
}

fn enumerate_compositions(n: u64, k: usize) -> Vec<u64> {
    fn rec(part: usize, remaining: u64, current: &mut Vec<u64>, out: &mut Vec<u64>) {
        if part == 0 {
            current[0] = remaining;
            out.extend_from_slice(current);
            return;
        }
        for v in 0..=remaining {
            current[part] = v;
            rec(part - 1, remaining - v, current, out);
        }
    }
    let mut out = Vec::new();
    let mut current = vec![0; k];
    rec(k - 1, n, &mut current, &mut out);
    out
}

impl CompositionChain {
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        self.absorbing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.absorbing.is_empty()
    }

    pub fn state(&self, index: usize) -> &[u64] {
        &self.states[index * self.k..(index + 1) * self.k]
    }

    pub fn states(&self) -> impl Iterator<Item = &[u64]> {
        self.states.chunks_exact(self.k)
    }

    /// Empirical weights of a state.
    pub fn state_weights(&self, index: usize) -> Vec<f64> {
        let n = self.n as f64;
        self.state(index).iter().map(|&c| c as f64 / n).collect()
    }

    /// Distribution of the initial particle draw.
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.transition, Transition::Dense { .. })
    }

    /// The structure a state has collapsed onto, if any.
    pub fn absorbing_structure(&self, index: usize) -> Option<usize> {
        self.absorbing[index]
    }

    pub fn is_absorbing(&self, index: usize) -> bool {
        self.absorbing[index].is_some()
    }

    /// Position of `counts` in the state enumeration.
    pub fn index_of(&self, counts: &[u64]) -> Option<usize> {
        if counts.len() != self.k || counts.iter().sum::<u64>() != self.n {
            return None;
        }
        Some(self.rank(counts))
    }

    fn rank(&self, counts: &[u64]) -> usize {
        let mut rank = 0u64;
        let mut m = counts.iter().sum::<u64>();
        for j in (1..self.k).rev() {
            let t = counts[j];
            rank += self.stars[j][m as usize] - self.stars[j][(m - t) as usize];
            m -= t;
        }
        rank as usize
    }

    /// Nonzero entries of one transition row.
    pub fn row(&self, index: usize) -> Vec<(usize, f64)> {
        match &self.transition {
            Transition::Dense { dim, data } => data[index * dim..(index + 1) * dim]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(j, &p)| (j, p))
                .collect(),
            Transition::Sparse {
                row_ptr,
                cols,
                vals,
            } => (row_ptr[index]..row_ptr[index + 1])
                .map(|e| (cols[e], vals[e]))
                .collect(),
        }
    }

    /// One step of the chain applied to a state distribution.
    pub fn push_forward(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        match &self.transition {
            Transition::Dense { dim, data } => {
                for (s, &mass) in dist.iter().enumerate() {
                    if mass == 0.0 {
                        continue;
                    }
                    let row = &data[s * dim..(s + 1) * dim];
                    for (o, &p) in out.iter_mut().zip(row) {
                        *o += mass * p;
                    }
                }
            }
            Transition::Sparse {
                row_ptr,
                cols,
                vals,
            } => {
                for (s, &mass) in dist.iter().enumerate() {
                    if mass == 0.0 {
                        continue;
                    }
                    for e in row_ptr[s]..row_ptr[s + 1] {
                        out[cols[e]] += mass * vals[e];
                    }
                }
            }
        }
        out
    }

    /// State distributions at steps 0, 1, 2, … starting from the initial draw.
    pub fn evolve(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.evolve_from(self.initial.clone())
    }

    pub fn evolve_from(&self, start: Vec<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
        std::iter::successors(Some(start), move |d| Some(self.push_forward(d)))
    }

    /// Point mass on one state.
    pub fn point_distribution(&self, index: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.len()];
        d[index] = 1.0;
        d
    }

    /// Mass on non-absorbing states.
    pub fn transient_mass(&self, dist: &[f64]) -> f64 {
        dist.iter()
            .zip(&self.absorbing)
            .filter(|(_, a)| a.is_none())
            .map(|(&p, _)| p)
            .fold(0.0, |a, x| a + x)
    }

    /// Mass already absorbed into each structure.
    pub fn absorbed_mass(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (&p, a) in dist.iter().zip(&self.absorbing) {
            if let Some(t) = a {
                out[*t] += p;
            }
        }
        out
    }

    /// Expected particle fraction of each structure under `dist`.
    pub fn expected_weights(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        let n = self.n as f64;
        for (s, &p) in dist.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.state(s)) {
                *o += p * c as f64 / n;
            }
        }
        out
    }

    /// Iterates from `dist` until the transient mass drops below `tolerance`;
    /// returns the absorbed mass per structure and the leftover transient mass.
    pub fn absorption_from(&self, dist: Vec<f64>, tolerance: f64) -> Result<(Vec<f64>, f64)> {
        for d in self.evolve_from(dist).take(MAX_ITERATIONS) {
            let transient = self.transient_mass(&d);
            if transient < tolerance {
                return Ok((self.absorbed_mass(&d), transient));
            }
        }
        Err(Error::Internal("chain did not absorb".into()))
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if spec.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: spec.k(),
            });
        }
        Ok(())
    }

    fn per_state<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.len()).map(|s| f(&self.state_weights(s))).collect()
    }
}

/// Σ dist·values, with 0·∞ = 0 and p·∞ = ∞ for p > 0.
fn expectation(dist: &[f64], values: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &v) in dist.iter().zip(values) {
        if p > 0.0 {
            if v == f64::INFINITY {
                return f64::INFINITY;
            }
            total += p * v;
        }
    }
    total
}

/// Builds the chain under the default state budget.
pub fn build_chain(spec: &ModelSpec, n: u64) -> Result<CompositionChain> {
    build_chain_with_budget(spec, n, DEFAULT_STATE_BUDGET)
}

pub fn build_chain_with_budget(spec: &ModelSpec, n: u64, budget: usize) -> Result<CompositionChain> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    let k = spec.k();
    let count = composition_count(n, k);
    if count > budget as u128 {
        return Err(Error::StateBudgetExceeded {
            states: count,
            budget,
        });
    }
    let size = count as usize;
    let states = enumerate_compositions(n, k);
    debug_assert_eq!(states.len(), size * k);

    let mut stars = vec![vec![1u64; n as usize + 1]; k];
    for j in 1..k {
        for m in 1..=n as usize {
            stars[j][m] = stars[j - 1][m].saturating_add(stars[j][m - 1]);
        }
    }

    let absorbing = states
        .chunks_exact(k)
        .map(|c| c.iter().position(|&x| x == n))
        .collect();

    let mut chain = CompositionChain {
        n,
        k,
        states,
        initial: Vec::new(),
        absorbing,
        transition: Transition::Sparse {
            row_ptr: vec![],
            cols: vec![],
            vals: vec![],
        },
        stars,
    };

    let lnfact = ln_factorials(n);
    let prior = spec.prior().as_slice();
    chain.initial = {
        let mut d = vec![0.0; size];
        for (t, p) in multinomial_row(&chain, &lnfact, prior) {
            d[t] = p;
        }
        d
    };

    let dense = size <= DENSE_STATE_LIMIT;
    let mut data = if dense { vec![0.0; size * size] } else { Vec::new() };
    let (mut row_ptr, mut cols, mut vals) = (vec![0usize], Vec::new(), Vec::new());
    for s in 0..size {
        let entries: Vec<(usize, f64)> = if chain.absorbing[s].is_some() {
            vec![(s, 1.0)]
        } else {
            let w = chain.state_weights(s);
            let mut e = multinomial_row(&chain, &lnfact, &w);
            e.sort_by_key(|&(t, _)| t);
            e
        };
        if dense {
            for (t, p) in entries {
                data[s * size + t] = p;
            }
        } else {
            for (t, p) in entries {
                cols.push(t);
                vals.push(p);
            }
            row_ptr.push(cols.len());
        }
    }
    chain.transition = if dense {
        Transition::Dense { dim: size, data }
    } else {
        Transition::Sparse {
            row_ptr,
            cols,
            vals,
        }
    };
    Ok(chain)
}

/// Multinomial(n, probs) probabilities of every reachable composition,
/// skipping branches whose probability underflows.
fn multinomial_row(chain: &CompositionChain, lnfact: &[f64], probs: &[f64]) -> Vec<(usize, f64)> {
    let k = chain.k;
    let mut tail = vec![0.0; k];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        acc += probs[j];
        tail[j] = acc;
    }
    let mut out = Vec::new();
    let mut current = vec![0u64; k];

    #[allow(clippy::too_many_arguments)]
    fn rec(
        chain: &CompositionChain,
        lnfact: &[f64],
        probs: &[f64],
        tail: &[f64],
        part: usize,
        remaining: u64,
        log_p: f64,
        current: &mut Vec<u64>,
        out: &mut Vec<(usize, f64)>,
    ) {
        let k = probs.len();
        if part + 1 == k {
            if remaining > 0 && probs[part] <= 0.0 {
                return;
            }
            current[part] = remaining;
            let p = log_p.exp();
            if p > 0.0 {
                out.push((chain.rank(current), p));
            }
            return;
        }
        let cond = if tail[part] > 0.0 {
            (probs[part] / tail[part]).min(1.0)
        } else {
            0.0
        };
        for x in 0..=remaining {
            let lp = log_p + ln_binomial_pmf(lnfact, remaining, x, cond);
            if lp.exp() == 0.0 {
                continue;
            }
            current[part] = x;
            rec(chain, lnfact, probs, tail, part + 1, remaining - x, lp, current, out);
        }
    }

    rec(chain, lnfact, probs, &tail, 0, chain.n, 0.0, &mut current, &mut out);
    out
}

/// E[S] at steps 0..=steps, step 0 being the initial particle draw.
pub fn exact_expected_surprisal(chain: &CompositionChain, spec: &ModelSpec, steps: usize) -> Result<Vec<f64>> {
    chain.check_spec(spec)?;
    let q = spec.likelihood();
    let s = chain.per_state(|w| surprisal_of(marginal_of(q, w)));
    Ok(chain
        .evolve()
        .take(steps + 1)
        .map(|d| expectation(&d, &s))
        .collect())
}

/// ΔS(i) = E[S_{i+1}] − E[S_i].
pub fn exact_surprisal_delta(chain: &CompositionChain, spec: &ModelSpec, i: usize) -> Result<f64> {
    let traj = exact_expected_surprisal(chain, spec, i + 1)?;
    Ok(traj[i + 1] - traj[i])
}

/// E over step-i particle sets of Var(M_{i+1} | set) = Var_w(Q)/N.
pub fn expected_conditional_variance(chain: &CompositionChain, spec: &ModelSpec, i: usize) -> Result<f64> {
    chain.check_spec(spec)?;
    let q = spec.likelihood();
    let n = chain.n as f64;
    let var = chain.per_state(|w| {
        let m = marginal_of(q, w);
        q.iter().zip(w).map(|(qq, ww)| ww * (qq - m) * (qq - m)).sum::<f64>() / n
    });
    let d = chain
        .evolve()
        .nth(i)
        .expect("evolve is infinite");
    Ok(expectation(&d, &var))
}

/// Expected number of resampling steps until one structure holds every
/// particle, starting from the initial draw.
pub fn exact_absorption_time(chain: &CompositionChain) -> Result<f64> {
    let mut total = 0.0;
    let mut previous = f64::NAN;
    for d in chain.evolve().take(MAX_ITERATIONS) {
        let transient = chain.transient_mass(&d);
        if transient < 1e-15 {
            // geometric tail beyond the cutoff
            let ratio = transient / previous;
            if ratio.is_finite() && ratio > 0.0 && ratio < 1.0 {
                total += transient / (1.0 - ratio);
            }
            return Ok(total);
        }
        total += transient;
        previous = transient;
    }
    Err(Error::Internal("chain did not absorb".into()))
}

/// E[S after resampling forever | current state], from the exact absorption
/// probabilities of that state.
pub fn limit_expected_surprisal_from(chain: &CompositionChain, spec: &ModelSpec, state: usize) -> Result<f64> {
    chain.check_spec(spec)?;
    let (absorbed, _) = chain.absorption_from(chain.point_distribution(state), ABSORPTION_TOLERANCE)?;
    let s: Vec<f64> = spec.likelihood().iter().map(|&q| surprisal_of(q)).collect();
    Ok(expectation(&absorbed, &s))
}

/// Exact counterpart of [`crate::dynamics::run_ensemble`]: means are exact
/// expectations, spreads are exact standard deviations, `stderr` is 0 and
/// `trials` is 0.
pub fn exact_ensemble(
    chain: &CompositionChain,
    spec: &ModelSpec,
    steps: usize,
    start: StartMode,
) -> Result<EnsembleSummary> {
    chain.check_spec(spec)?;
    let q = spec.likelihood();
    let s = chain.per_state(|w| surprisal_of(marginal_of(q, w)));
    let cv = chain.per_state(|w| cv_sq_of(q, w));
    let ratio = chain.per_state(|w| diffusion_ratio_of(q, w));

    let summarize = |step: usize, d: &[f64]| -> StepSummary {
        let mean = expectation(d, &s);
        let stdev = if mean.is_finite() {
            let second: f64 = d.iter().zip(&s).map(|(p, v)| p * (v - mean) * (v - mean)).fold(0.0, |a, x| a + x);
            second.max(0.0).sqrt()
        } else {
            f64::INFINITY
        };
        let failed: f64 = d.iter().zip(&s).filter(|(_, v)| v.is_infinite()).map(|(p, _)| p).fold(0.0, |a, x| a + x);
        let absorbed = 1.0 - chain.transient_mass(d);
        StepSummary {
            stats: TrajectoryStats {
                step,
                mean_surprisal: mean,
                stdev_surprisal: stdev,
                stderr: 0.0,
                absorbed_fraction: absorbed.clamp(0.0, 1.0),
                failed_fraction: failed,
                trials: 0,
                finite: None,
            },
            mean_weights: chain.expected_weights(d),
            weight_stderr: vec![0.0; chain.k],
            mean_cv_sq: expectation(d, &cv),
            mean_diffusion_ratio: expectation(d, &ratio),
        }
    };

    let mut out = Vec::with_capacity(steps + 1);
    let mut first = 0;
    if start == StartMode::Exact {
        let prior = spec.prior().as_slice();
        let m = marginal_of(q, prior);
        out.push(StepSummary {
            stats: TrajectoryStats {
                step: 0,
                mean_surprisal: surprisal_of(m),
                stdev_surprisal: 0.0,
                stderr: 0.0,
                absorbed_fraction: if spec.prior().is_point_mass() { 1.0 } else { 0.0 },
                failed_fraction: if m == 0.0 { 1.0 } else { 0.0 },
                trials: 0,
                finite: None,
            },
            mean_weights: prior.to_vec(),
            weight_stderr: vec![0.0; chain.k],
            mean_cv_sq: cv_sq_of(q, prior),
            mean_diffusion_ratio: diffusion_ratio_of(q, prior),
        });
        first = 1;
    }
    for (offset, d) in chain.evolve().take(steps + 1 - first).enumerate() {
        out.push(summarize(first + offset, &d));
    }
    if !spec.allow_parse_failure() {
        if let Some(bad) = out.iter().find(|s| s.stats.failed_fraction > 0.0) {
            return Err(Error::ExactParseFailure {
                step: bad.stats.step,
                mass: bad.stats.failed_fraction,
            });
        }
    }
    Ok(EnsembleSummary {
        n: chain.n,
        start,
        steps: out,
    })
}

/// Σ_T w(T)·(−ln Q(w|T)) evaluated at the expected absorption masses, for
/// comparison with the asymptote.
pub fn exact_limit_surprisal(chain: &CompositionChain, spec: &ModelSpec) -> Result<f64> {
    chain.check_spec(spec)?;
    let (absorbed, _) = chain.absorption_from(chain.initial.clone(), ABSORPTION_TOLERANCE)?;
    Ok(asymptotic_of(spec.likelihood(), &absorbed))
}
