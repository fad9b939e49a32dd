//! Closed-form quantities of a single-word structural model.
//!
//! A [`ModelSpec`] fixes a prior over structures and the likelihood each
//! structure assigns to the critical word. Everything here is in nats.
//! Impossible words have surprisal `f64::INFINITY`, which is a value and
//! not an error, so infinite costs propagate through aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum tolerance a probability vector must meet as given.
pub const SUM_TOLERANCE: f64 = 1e-12;
/// Vectors within this distance of 1 are renormalized instead of rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-9;

/// A probability vector over structures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::NoStructures);
        }
        for &v in &values {
            if !v.is_finite() || !(0.0..=1.0 + RENORMALIZE_TOLERANCE).contains(&v) {
                return Err(Error::InvalidProbability {
                    what: "weights",
                    value: v,
                });
            }
        }
        let sum: f64 = values.iter().sum();
        let off = (sum - 1.0).abs();
        if off <= SUM_TOLERANCE {
            Ok(Weights(values))
        } else if off <= RENORMALIZE_TOLERANCE {
            Ok(Weights(values.into_iter().map(|v| v / sum).collect()))
        } else {
            Err(Error::NotNormalized {
                what: "weights",
                sum,
            })
        }
    }

    /// Empirical distribution of a particle set.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "particle counts must not all be zero".into(),
            ));
        }
        Ok(Weights(
            counts.iter().map(|&c| c as f64 / n as f64).collect(),
        ))
    }

    pub fn point_mass(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: index + 1,
            });
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(Weights(v))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::NoStructures);
        }
        Ok(Weights(vec![1.0 / k as f64; k]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when one structure carries all the mass.
    pub fn is_point_mass(&self) -> bool {
        self.0.contains(&1.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Weights {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Weights::new(values)
    }
}

impl From<Weights> for Vec<f64> {
    fn from(w: Weights) -> Self {
        w.0
    }
}

impl AsRef<[f64]> for Weights {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Prior over structures plus the likelihood each structure gives the word.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    structures: Vec<String>,
    prior: Weights,
    likelihood: Vec<f64>,
    allow_parse_failure: bool,
}

impl ModelSpec {
    /// Builds a spec with structures labelled `T1..TK`. Zero likelihoods are rejected.
    pub fn new(prior: Vec<f64>, likelihood: Vec<f64>) -> Result<Self> {
        Self::build(None, prior, likelihood, false)
    }

    /// Like [`ModelSpec::new`] but admits likelihood entries of exactly 0.
    pub fn allowing_parse_failure(prior: Vec<f64>, likelihood: Vec<f64>) -> Result<Self> {
        Self::build(None, prior, likelihood, true)
    }

    pub fn with_labels(
        structures: Vec<String>,
        prior: Vec<f64>,
        likelihood: Vec<f64>,
        allow_parse_failure: bool,
    ) -> Result<Self> {
        Self::build(Some(structures), prior, likelihood, allow_parse_failure)
    }

    fn build(
        structures: Option<Vec<String>>,
        prior: Vec<f64>,
        likelihood: Vec<f64>,
        allow_parse_failure: bool,
    ) -> Result<Self> {
        let prior = Weights::new(prior)?;
        if likelihood.len() != prior.len() {
            return Err(Error::DimensionMismatch {
                expected: prior.len(),
                found: likelihood.len(),
            });
        }
        for (index, &q) in likelihood.iter().enumerate() {
            if !q.is_finite() || !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidProbability {
                    what: "likelihood",
                    value: q,
                });
            }
            if q == 0.0 && !allow_parse_failure {
                return Err(Error::ZeroLikelihood { index });
            }
        }
        let structures = match structures {
            Some(labels) => {
                if labels.len() != prior.len() {
                    return Err(Error::DimensionMismatch {
                        expected: prior.len(),
                        found: labels.len(),
                    });
                }
                labels
            }
            None => (1..=prior.len()).map(|i| format!("T{i}")).collect(),
        };
        Ok(ModelSpec {
            structures,
            prior,
            likelihood,
            allow_parse_failure,
        })
    }

    pub fn structures(&self) -> &[String] {
        &self.structures
    }

    pub fn prior(&self) -> &Weights {
        &self.prior
    }

    pub fn likelihood(&self) -> &[f64] {
        &self.likelihood
    }

    pub fn allow_parse_failure(&self) -> bool {
        self.allow_parse_failure
    }

    /// Number of structures K.
    pub fn k(&self) -> usize {
        self.likelihood.len()
    }

    /// Same likelihood, different prior.
    pub fn with_prior(&self, prior: Vec<f64>) -> Result<Self> {
        Self::build(
            Some(self.structures.clone()),
            prior,
            self.likelihood.clone(),
            self.allow_parse_failure,
        )
    }

    fn check(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                found: weights.len(),
            });
        }
        Ok(())
    }
}

// Slice kernels shared with the simulation hot loop. Callers guarantee lengths match.

pub(crate) fn marginal_of(likelihood: &[f64], weights: &[f64]) -> f64 {
    let m: f64 = likelihood.iter().zip(weights).map(|(q, w)| q * w).sum();
    m.clamp(0.0, 1.0)
}

pub(crate) fn surprisal_of(p: f64) -> f64 {
    if p == 0.0 {
        f64::INFINITY
    } else if p == 1.0 {
        0.0
    } else {
        -p.ln()
    }
}

pub(crate) fn asymptotic_of(likelihood: &[f64], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&q, &w) in likelihood.iter().zip(weights) {
        if w > 0.0 {
            if q == 0.0 {
                return f64::INFINITY;
            }
            total += w * -q.ln();
        }
    }
    total
}

pub(crate) fn kl_of(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b == 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

pub(crate) fn kl_cost_of(likelihood: &[f64], weights: &[f64]) -> f64 {
    let m = marginal_of(likelihood, weights);
    if m == 0.0 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for (&q, &w) in likelihood.iter().zip(weights) {
        if w > 0.0 {
            let posterior = q * w / m;
            if posterior == 0.0 {
                return f64::INFINITY;
            }
            total += w * (w / posterior).ln();
        }
    }
    total.max(0.0)
}

/// M(w|C) = Σ_T Q(w|T,C)·weights(T).
pub fn marginal_word_prob(spec: &ModelSpec, weights: &Weights) -> Result<f64> {
    spec.check(weights.as_slice())?;
    Ok(marginal_of(spec.likelihood(), weights.as_slice()))
}

/// −ln p in nats, `INFINITY` for p = 0.
pub fn surprisal(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability {
            what: "surprisal argument",
            value: p,
        });
    }
    Ok(surprisal_of(p))
}

/// Posterior over structures after observing the word.
pub fn bayes_posterior(spec: &ModelSpec, weights: &Weights) -> Result<Weights> {
    spec.check(weights.as_slice())?;
    let joint: Vec<f64> = spec
        .likelihood()
        .iter()
        .zip(weights.as_slice())
        .map(|(q, w)| q * w)
        .collect();
    let m: f64 = joint.iter().sum();
    if m == 0.0 {
        return Err(Error::TotalParseFailure);
    }
    Ok(Weights(joint.into_iter().map(|j| j / m).collect()))
}

/// KL(p ‖ q) in nats; `INFINITY` when p is not absolutely continuous w.r.t. q.
pub fn kl_divergence(p: &Weights, q: &Weights) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(kl_of(p.as_slice(), q.as_slice()))
}

/// Expected surprisal once every particle has collapsed onto one structure:
/// Σ_T weights(T)·(−ln Q(w|T,C)).
pub fn asymptotic_expected_surprisal(spec: &ModelSpec, weights: &Weights) -> Result<f64> {
    spec.check(weights.as_slice())?;
    Ok(asymptotic_of(spec.likelihood(), weights.as_slice()))
}

/// Total surprisal increase from resampling forever, KL(weights ‖ posterior).
pub fn kl_cost(spec: &ModelSpec, weights: &Weights) -> Result<f64> {
    spec.check(weights.as_slice())?;
    Ok(kl_cost_of(spec.likelihood(), weights.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // High-precision (30 digit) evaluations of the closed forms at
    // Q = (0.004, 0.5), priors (0.8, 0.2) and (0.2, 0.8).
    const AMB_SURPRISAL: f64 = 2.271_086_425_934_674_7;
    const AMB_ASYMPTOTE: f64 = 4.555_798_170_401_786;
    const AMB_KL: f64 = 2.284_711_744_467_111_5;
    const UNAMB_SURPRISAL: f64 = 0.914_292_729_211_482;
    const UNAMB_ASYMPTOTE: f64 = 1.658_809_928_020_405_5;
    const UNAMB_KL: f64 = 0.744_517_198_808_923_5;

    fn fig1(prior: [f64; 2]) -> (ModelSpec, Weights) {
        let spec = ModelSpec::new(prior.to_vec(), vec![0.004, 0.5]).unwrap();
        let w = spec.prior().clone();
        (spec, w)
    }

    #[test]
    fn marginal_examples() {
        let (spec, w) = fig1([0.8, 0.2]);
        assert_abs_diff_eq!(marginal_word_prob(&spec, &w).unwrap(), 0.1032, epsilon = 1e-15);
        let (spec, w) = fig1([0.2, 0.8]);
        assert_abs_diff_eq!(marginal_word_prob(&spec, &w).unwrap(), 0.4008, epsilon = 1e-15);
        let flat = ModelSpec::new(vec![0.3, 0.7], vec![0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(
            marginal_word_prob(&flat, flat.prior()).unwrap(),
            0.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn marginal_rejects_wrong_dimension() {
        let (spec, _) = fig1([0.8, 0.2]);
        let w = Weights::uniform(3).unwrap();
        assert!(matches!(
            marginal_word_prob(&spec, &w),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn surprisal_examples() {
        assert_abs_diff_eq!(surprisal(0.1032).unwrap(), AMB_SURPRISAL, epsilon = 1e-14);
        assert_eq!(surprisal(1.0).unwrap(), 0.0);
        assert_eq!(surprisal(0.0).unwrap(), f64::INFINITY);
        assert!(surprisal(1.5).is_err());
        assert!(surprisal(-0.1).is_err());
        assert!(surprisal(f64::NAN).is_err());
    }

    #[test]
    fn posterior_examples() {
        let (spec, w) = fig1([0.8, 0.2]);
        let post = bayes_posterior(&spec, &w).unwrap();
        assert_abs_diff_eq!(post.as_slice()[0], 0.0032 / 0.1032, epsilon = 1e-15);
        assert_abs_diff_eq!(post.as_slice()[1], 0.1 / 0.1032, epsilon = 1e-15);

        let flat = ModelSpec::new(vec![0.35, 0.65], vec![0.1, 0.1]).unwrap();
        let post = bayes_posterior(&flat, flat.prior()).unwrap();
        assert_abs_diff_eq!(post.as_slice()[0], 0.35, epsilon = 1e-15);

        let degenerate = ModelSpec::new(vec![1.0, 0.0], vec![0.004, 0.5]).unwrap();
        let post = bayes_posterior(&degenerate, degenerate.prior()).unwrap();
        assert_eq!(post.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn posterior_total_failure() {
        let spec = ModelSpec::allowing_parse_failure(vec![1.0, 0.0], vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            bayes_posterior(&spec, spec.prior()),
            Err(Error::TotalParseFailure)
        ));
        assert_eq!(kl_cost(&spec, spec.prior()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_examples() {
        let p = Weights::new(vec![0.8, 0.2]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = Weights::new(vec![0.0032 / 0.1032, 0.1 / 0.1032]).unwrap();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), AMB_KL, epsilon = 1e-13);
        let point = Weights::point_mass(2, 0).unwrap();
        let half = Weights::uniform(2).unwrap();
        assert_abs_diff_eq!(
            kl_divergence(&point, &half).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_eq!(kl_divergence(&half, &point).unwrap(), f64::INFINITY);
    }

    #[test]
    fn asymptote_and_cost_examples() {
        let (spec, w) = fig1([0.8, 0.2]);
        assert_abs_diff_eq!(
            asymptotic_expected_surprisal(&spec, &w).unwrap(),
            AMB_ASYMPTOTE,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(kl_cost(&spec, &w).unwrap(), AMB_KL, epsilon = 1e-13);

        let (spec, w) = fig1([0.2, 0.8]);
        assert_abs_diff_eq!(
            asymptotic_expected_surprisal(&spec, &w).unwrap(),
            UNAMB_ASYMPTOTE,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(kl_cost(&spec, &w).unwrap(), UNAMB_KL, epsilon = 1e-13);
        assert_abs_diff_eq!(
            surprisal(marginal_word_prob(&spec, &w).unwrap()).unwrap(),
            UNAMB_SURPRISAL,
            epsilon = 1e-14
        );

        let single = Weights::point_mass(2, 1).unwrap();
        assert_abs_diff_eq!(
            asymptotic_expected_surprisal(&spec, &single).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );

        let flat = ModelSpec::new(vec![0.8, 0.2], vec![0.3, 0.3]).unwrap();
        assert_abs_diff_eq!(kl_cost(&flat, flat.prior()).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_likelihood_needs_flag() {
        assert!(matches!(
            ModelSpec::new(vec![0.5, 0.5], vec![0.0, 0.5]),
            Err(Error::ZeroLikelihood { index: 0 })
        ));
        let spec = ModelSpec::allowing_parse_failure(vec![0.5, 0.5], vec![0.0, 0.5]).unwrap();
        assert_eq!(
            asymptotic_expected_surprisal(&spec, spec.prior()).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn weights_normalization_rules() {
        assert!(Weights::new(vec![0.5, 0.5 + 5e-13]).is_ok());
        let w = Weights::new(vec![0.5, 0.5 + 5e-10]).unwrap();
        let sum: f64 = w.as_slice().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-15);
        assert!(matches!(
            Weights::new(vec![0.5, 0.6]),
            Err(Error::NotNormalized { .. })
        ));
        assert!(Weights::new(vec![1.2, -0.2]).is_err());
        assert!(Weights::new(vec![]).is_err());
        assert!(ModelSpec::new(vec![0.5, 0.5], vec![0.5]).is_err());
        assert!(ModelSpec::new(vec![0.5, 0.5], vec![0.5, 1.5]).is_err());
    }

    fn spec_and_weights() -> impl Strategy<Value = (ModelSpec, Weights)> {
        (2usize..=5).prop_flat_map(|k| {
            (
                prop::collection::vec(0.001f64..1.0, k),
                prop::collection::vec(1e-4f64..1.0, k),
                prop::collection::vec(0.0f64..1.0, k),
            )
                .prop_map(|(prior, q, w)| {
                    let ps: f64 = prior.iter().sum();
                    let ws: f64 = w.iter().sum::<f64>() + 1e-9;
                    let spec =
                        ModelSpec::new(prior.iter().map(|p| p / ps).collect(), q).unwrap();
                    let mut wn: Vec<f64> = w.iter().map(|x| x / ws).collect();
                    let s: f64 = wn.iter().sum();
                    wn[0] += 1.0 - s;
                    (spec, Weights::new(wn).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn kl_cost_identity((spec, w) in spec_and_weights()) {
            let lhs = kl_cost(&spec, &w).unwrap();
            let rhs = asymptotic_expected_surprisal(&spec, &w).unwrap()
                - surprisal(marginal_word_prob(&spec, &w).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }

        #[test]
        fn gibbs_inequality((spec, w) in spec_and_weights()) {
            let kl = kl_divergence(&w, spec.prior()).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&w, &w).unwrap().abs() <= 1e-15);
        }

        #[test]
        fn posterior_is_normalized((spec, w) in spec_and_weights()) {
            let post = bayes_posterior(&spec, &w).unwrap();
            let s: f64 = post.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn marginal_is_linear((spec, w) in spec_and_weights(), alpha in 0.0f64..=1.0) {
            let p = spec.prior().as_slice();
            let mix: Vec<f64> = p.iter().zip(w.as_slice()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let mix = Weights::new(mix).unwrap();
            let lhs = marginal_word_prob(&spec, &mix).unwrap();
            let rhs = alpha * marginal_word_prob(&spec, spec.prior()).unwrap()
                + (1.0 - alpha) * marginal_word_prob(&spec, &w).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
