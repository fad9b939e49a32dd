//! Closed-form predictions of the per-step surprisal increase.
//!
//! Two approximations of ΔS(i), the expected-surprisal increase from
//! resampling step i to i+1:
//!
//! * second order: a Taylor expansion of −ln around the current marginal
//!   gives `(1/2N)·E[CV(Q)²]`, the squared coefficient of variation of the
//!   word likelihood across structures, averaged over particle sets;
//! * linear diffusion: the total cost of resampling forever (a KL
//!   divergence) spread evenly over the Wright–Fisher expected fixation
//!   time.
//!
//! Expectations are taken over a caller-supplied sample of weight vectors,
//! so both functions stay deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{kl_cost_of, marginal_of, ModelSpec, Weights};

/// Terms with 1 − w below this contribute 0 to ln(1 − w) sums.
pub const SINGULARITY_GUARD: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproximationKind {
    SecondOrder,
    LinearDiffusion,
}

impl ApproximationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ApproximationKind::SecondOrder => "second_order",
            ApproximationKind::LinearDiffusion => "linear_diffusion",
        }
    }
}

impl std::str::FromStr for ApproximationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_order" => Ok(ApproximationKind::SecondOrder),
            "linear_diffusion" => Ok(ApproximationKind::LinearDiffusion),
            other => Err(Error::InvalidArgument(format!(
                "unknown approximation kind `{other}`"
            ))),
        }
    }
}

/// Predicted ΔS(step) in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPrediction {
    pub kind: ApproximationKind,
    pub step: usize,
    pub value: f64,
}

impl DeltaPrediction {
    /// Second-order prediction from an already averaged CV².
    pub fn second_order(step: usize, mean_cv_sq: f64, n: u64) -> Self {
        DeltaPrediction {
            kind: ApproximationKind::SecondOrder,
            step,
            value: mean_cv_sq / (2.0 * n as f64),
        }
    }

    /// Linear-diffusion prediction from an already averaged
    /// `kl_cost / Σ(w−1)ln(1−w)` ratio.
    pub fn linear_diffusion(step: usize, mean_ratio: f64, n: u64) -> Self {
        DeltaPrediction {
            kind: ApproximationKind::LinearDiffusion,
            step,
            value: mean_ratio / (2.0 * n as f64),
        }
    }
}

pub(crate) fn cv_sq_of(likelihood: &[f64], weights: &[f64]) -> f64 {
    let mean = marginal_of(likelihood, weights);
    if mean == 0.0 {
        return f64::INFINITY;
    }
    let var: f64 = likelihood
        .iter()
        .zip(weights)
        .map(|(q, w)| w * (q - mean) * (q - mean))
        .fold(0.0, |a, x| a + x);
    var / (mean * mean)
}

/// Σ_T (w(T) − 1)·ln(1 − w(T)); equals the Shannon entropy when K = 2.
pub(crate) fn diffusion_denominator_of(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&w| 1.0 - w >= SINGULARITY_GUARD)
        .map(|&w| (w - 1.0) * (1.0 - w).ln())
        // folding from +0 keeps a point mass at +0 rather than −0
        .fold(0.0, |a, x| a + x)
}

/// `kl_cost / denominator`, defined as 0 when one structure holds all mass.
pub(crate) fn diffusion_ratio_of(likelihood: &[f64], weights: &[f64]) -> f64 {
    if weights.iter().any(|&w| 1.0 - w < SINGULARITY_GUARD) {
        return 0.0;
    }
    let denom = diffusion_denominator_of(weights);
    if denom <= 0.0 {
        return 0.0;
    }
    kl_cost_of(likelihood, weights) / denom
}

fn check(spec: &ModelSpec, weights: &Weights) -> Result<()> {
    if weights.len() != spec.k() {
        return Err(Error::DimensionMismatch {
            expected: spec.k(),
            found: weights.len(),
        });
    }
    Ok(())
}

fn check_sample(spec: &ModelSpec, sample: &[Weights], n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be ≥ 1".into()));
    }
    if sample.is_empty() {
        return Err(Error::InvalidArgument("weight sample is empty".into()));
    }
    sample.iter().try_for_each(|w| check(spec, w))
}

fn sample_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = crate::stats::Moments::new();
    values.for_each(|v| m.push(v));
    m.mean()
}

/// Var_w(Q) / E_w[Q]², `INFINITY` when the word has zero marginal.
pub fn coefficient_of_variation_sq(spec: &ModelSpec, weights: &Weights) -> Result<f64> {
    check(spec, weights)?;
    Ok(cv_sq_of(spec.likelihood(), weights.as_slice()))
}

/// `(1/2n)·mean(CV²)` over the supplied particle-set sample.
pub fn second_order_delta(
    spec: &ModelSpec,
    weights_sample: &[Weights],
    n: u64,
    step: usize,
) -> Result<DeltaPrediction> {
    check_sample(spec, weights_sample, n)?;
    let mean = sample_mean(
        weights_sample
            .iter()
            .map(|w| cv_sq_of(spec.likelihood(), w.as_slice())),
    );
    Ok(DeltaPrediction::second_order(step, mean, n))
}

/// Diffusion approximation of the expected steps until one structure remains:
/// −2n·Σ_T (1 − w(T))·ln(1 − w(T)).
pub fn fixation_time(weights: &Weights, n: u64) -> f64 {
    2.0 * n as f64 * diffusion_denominator_of(weights.as_slice())
}

/// `(1/2n)·mean(kl_cost / Σ(w−1)ln(1−w))` over the supplied sample;
/// point-mass members contribute 0.
pub fn linear_diffusion_delta(
    spec: &ModelSpec,
    weights_sample: &[Weights],
    n: u64,
    step: usize,
) -> Result<DeltaPrediction> {
    check_sample(spec, weights_sample, n)?;
    let mean = sample_mean(
        weights_sample
            .iter()
            .map(|w| diffusion_ratio_of(spec.likelihood(), w.as_slice())),
    );
    Ok(DeltaPrediction::linear_diffusion(step, mean, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::kl_cost;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // 30-digit evaluations at Q = (0.004, 0.5).
    const AMB_CV_SQ: f64 = 3.695_931_734_871_702_4;
    const UNAMB_CV_SQ: f64 = 0.245_034_880_339_122_15;
    const FIXATION_80_20_N25: f64 = 25.020_121_176_909_394;
    const AMB_SECOND_ORDER_N25: f64 = 0.073_918_634_697_434_05;
    const AMB_LINEAR_DIFFUSION_N25: f64 = 0.091_314_975_187_875_17;
    const UNAMB_SECOND_ORDER_N25: f64 = 0.004_900_697_606_782_443;
    const UNAMB_LINEAR_DIFFUSION_N25: f64 = 0.029_756_738_328_510_76;

    fn fig1(prior: [f64; 2]) -> ModelSpec {
        ModelSpec::new(prior.to_vec(), vec![0.004, 0.5]).unwrap()
    }

    #[test]
    fn cv_sq_examples() {
        let spec = fig1([0.8, 0.2]);
        assert_abs_diff_eq!(
            coefficient_of_variation_sq(&spec, spec.prior()).unwrap(),
            AMB_CV_SQ,
            epsilon = 1e-13
        );
        let flat = ModelSpec::new(vec![0.8, 0.2], vec![0.2, 0.2]).unwrap();
        assert_abs_diff_eq!(
            coefficient_of_variation_sq(&flat, flat.prior()).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let point = Weights::point_mass(2, 0).unwrap();
        assert_eq!(coefficient_of_variation_sq(&spec, &point).unwrap(), 0.0);
        let failing = ModelSpec::allowing_parse_failure(vec![1.0, 0.0], vec![0.0, 0.5]).unwrap();
        assert_eq!(
            coefficient_of_variation_sq(&failing, failing.prior()).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn point_predictions() {
        let amb = fig1([0.8, 0.2]);
        let sample = vec![amb.prior().clone()];
        let so = second_order_delta(&amb, &sample, 25, 0).unwrap();
        assert_abs_diff_eq!(so.value, AMB_SECOND_ORDER_N25, epsilon = 1e-14);
        assert_abs_diff_eq!(fixation_time(amb.prior(), 25), FIXATION_80_20_N25, epsilon = 1e-12);
        let ld = linear_diffusion_delta(&amb, &sample, 25, 0).unwrap();
        assert_abs_diff_eq!(ld.value, AMB_LINEAR_DIFFUSION_N25, epsilon = 1e-14);

        let unamb = fig1([0.2, 0.8]);
        let sample = vec![unamb.prior().clone()];
        assert_abs_diff_eq!(
            coefficient_of_variation_sq(&unamb, unamb.prior()).unwrap(),
            UNAMB_CV_SQ,
            epsilon = 1e-14
        );
        let so_u = second_order_delta(&unamb, &sample, 25, 0).unwrap();
        let ld_u = linear_diffusion_delta(&unamb, &sample, 25, 0).unwrap();
        assert_abs_diff_eq!(so_u.value, UNAMB_SECOND_ORDER_N25, epsilon = 1e-15);
        assert_abs_diff_eq!(ld_u.value, UNAMB_LINEAR_DIFFUSION_N25, epsilon = 1e-15);
        // digging-in sign: AMB grows faster under both approximations
        assert!(so.value > so_u.value);
        assert!(ld.value > ld_u.value);
    }

    #[test]
    fn fixation_time_examples() {
        let point = Weights::point_mass(2, 0).unwrap();
        assert_eq!(fixation_time(&point, 25), 0.0);
        let half = Weights::uniform(2).unwrap();
        assert_abs_diff_eq!(
            fixation_time(&half, 25),
            50.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn degenerate_samples_predict_zero() {
        let spec = fig1([0.8, 0.2]);
        let points = vec![Weights::point_mass(2, 0).unwrap(), Weights::point_mass(2, 1).unwrap()];
        assert_eq!(second_order_delta(&spec, &points, 25, 0).unwrap().value, 0.0);
        assert_eq!(linear_diffusion_delta(&spec, &points, 25, 0).unwrap().value, 0.0);
        let flat = ModelSpec::new(vec![0.8, 0.2], vec![0.1, 0.1]).unwrap();
        let sample = vec![flat.prior().clone()];
        assert_abs_diff_eq!(
            linear_diffusion_delta(&flat, &sample, 25, 0).unwrap().value,
            0.0,
            epsilon = 1e-16
        );
    }

    #[test]
    fn sample_errors() {
        let spec = fig1([0.8, 0.2]);
        assert!(second_order_delta(&spec, &[], 25, 0).is_err());
        assert!(linear_diffusion_delta(&spec, &[spec.prior().clone()], 0, 0).is_err());
        let bad = vec![Weights::uniform(3).unwrap()];
        assert!(second_order_delta(&spec, &bad, 25, 0).is_err());
    }

    #[test]
    fn predictions_scale_as_one_over_n() {
        let spec = fig1([0.8, 0.2]);
        let sample = vec![
            spec.prior().clone(),
            Weights::new(vec![0.6, 0.4]).unwrap(),
            Weights::new(vec![0.96, 0.04]).unwrap(),
        ];
        for kind in [ApproximationKind::SecondOrder, ApproximationKind::LinearDiffusion] {
            let at = |n| match kind {
                ApproximationKind::SecondOrder => second_order_delta(&spec, &sample, n, 0),
                ApproximationKind::LinearDiffusion => linear_diffusion_delta(&spec, &sample, n, 0),
            }
            .unwrap()
            .value;
            let (v5, v25, v125) = (at(5), at(25), at(125));
            assert_abs_diff_eq!(v5 / v25, 5.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v25 / v125, 5.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn linear_diffusion_is_cost_over_fixation_time(p in 0.001f64..0.999, q1 in 1e-4f64..1.0, q2 in 1e-4f64..1.0, n in 1u64..500) {
            let spec = ModelSpec::new(vec![p, 1.0 - p], vec![q1, q2]).unwrap();
            let w = spec.prior().clone();
            let ld = linear_diffusion_delta(&spec, std::slice::from_ref(&w), n, 0).unwrap().value;
            let expected = kl_cost(&spec, &w).unwrap() / fixation_time(&w, n);
            prop_assert!((ld - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }

        #[test]
        fn binary_denominator_is_entropy(p in 1e-6f64..(1.0 - 1e-6)) {
            let w = [p, 1.0 - p];
            let entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            prop_assert!((diffusion_denominator_of(&w) - entropy).abs() <= 1e-12);
        }
    }
}
