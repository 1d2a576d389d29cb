//! Coherent one-step conditional risk measures on finite outcome spaces.
//!
//! A coherent measure satisfies convexity, monotonicity, translation
//! invariance and positive homogeneity. Three families are supported:
//! plain expectation, conditional value-at-risk of the cost upper tail,
//! and mean-upper-semideviation. Every measure also admits a dual
//! description as a supremum of expectations over an envelope of test
//! distributions; for expectation and CVaR the envelope is materialized
//! and used as an independent evaluation route.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{PROB_TOL, PROP_TOL};

/// Parameterization of the one-step risk measure applied at every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    /// Risk-neutral expectation.
    Expectation,
    /// Conditional value-at-risk: the expected value of the worst
    /// `alpha`-fraction of outcomes (costs, so the upper tail).
    Cvar { alpha: f64 },
    /// Mean plus `beta` times the p-norm of the deviation above the mean,
    /// `p = order` restricted to 1 or 2.
    MeanSemideviation { beta: f64, order: u32 },
}

impl RiskSpec {
    pub fn validate(&self) -> Result<(), RiskError> {
        match *self {
            RiskSpec::Expectation => Ok(()),
            RiskSpec::Cvar { alpha } => {
                if alpha.is_finite() && alpha > 0.0 && alpha <= 1.0 {
                    Ok(())
                } else {
                    Err(RiskError::InvalidSpec(format!(
                        "cvar alpha must lie in (0, 1], got {alpha}"
                    )))
                }
            }
            RiskSpec::MeanSemideviation { beta, order } => {
                if !(beta.is_finite() && (0.0..=1.0).contains(&beta)) {
                    return Err(RiskError::InvalidSpec(format!(
                        "mean_semideviation beta must lie in [0, 1], got {beta}"
                    )));
                }
                if order != 1 && order != 2 {
                    return Err(RiskError::InvalidSpec(format!(
                        "mean_semideviation order must be 1 or 2, got {order}"
                    )));
                }
                Ok(())
            }
        }
    }
}

impl std::fmt::Display for RiskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RiskSpec::Expectation => write!(f, "expectation"),
            RiskSpec::Cvar { alpha } => write!(f, "cvar({alpha})"),
            RiskSpec::MeanSemideviation { beta, order } => {
                write!(f, "mean_semideviation({beta}, p={order})")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid risk specification: {0}")]
    InvalidSpec(String),
    #[error("outcome distribution is empty")]
    EmptyDistribution,
    #[error("values and probabilities differ in length ({values} vs {probs})")]
    LengthMismatch { values: usize, probs: usize },
    #[error("negative probability {value} at outcome {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    ProbabilityMass { sum: f64 },
    #[error("no envelope construction for {0}; evaluate it directly")]
    UnsupportedEnvelope(RiskSpec),
}

/// A random variable on a finite outcome space together with its law.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl OutcomeDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self, RiskError> {
        if values.is_empty() {
            return Err(RiskError::EmptyDistribution);
        }
        if values.len() != probs.len() {
            return Err(RiskError::LengthMismatch {
                values: values.len(),
                probs: probs.len(),
            });
        }
        for (i, &q) in probs.iter().enumerate() {
            if q < 0.0 {
                return Err(RiskError::NegativeProbability { index: i, value: q });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(RiskError::ProbabilityMass { sum });
        }
        Ok(Self { values, probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Evaluates the risk measure on a validated distribution.
pub fn evaluate_risk(spec: &RiskSpec, dist: &OutcomeDistribution) -> f64 {
    evaluate_slices(spec, &dist.values, &dist.probs)
}

/// Core evaluation on raw slices. Callers guarantee `values` and `probs`
/// have equal nonzero length and that `probs` is a probability vector.
///
/// Constant vectors short-circuit to the constant itself: translation
/// invariance plus positive homogeneity pin `rho(c * 1) = c` exactly.
pub(crate) fn evaluate_slices(spec: &RiskSpec, values: &[f64], probs: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), probs.len());
    debug_assert!(!values.is_empty());
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    match *spec {
        RiskSpec::Expectation => dot(probs, values),
        RiskSpec::Cvar { alpha } => {
            // The minimand w |-> w + E[(Z - w)_+] / alpha is convex and
            // piecewise linear with kinks exactly at the outcome values, so
            // scanning them yields the exact minimum.
            let mut best = f64::INFINITY;
            for &w in values {
                let mut tail = 0.0;
                for (&q, &z) in probs.iter().zip(values) {
                    tail += q * (z - w).max(0.0);
                }
                let cand = w + tail / alpha;
                if cand < best {
                    best = cand;
                }
            }
            best
        }
        RiskSpec::MeanSemideviation { beta, order } => {
            debug_assert!(order == 1 || order == 2);
            let mean = dot(probs, values);
            let mut dev = 0.0;
            for (&q, &z) in probs.iter().zip(values) {
                let up = (z - mean).max(0.0);
                dev += q * if order == 1 { up } else { up * up };
            }
            mean + beta * if order == 1 { dev } else { dev.sqrt() }
        }
    }
}

fn dot(probs: &[f64], values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&q, &z) in probs.iter().zip(values) {
        acc += q * z;
    }
    acc
}

/// Finite description of the dual feasible set of test distributions whose
/// supremum of expectations reproduces the measure.
#[derive(Clone, Debug)]
pub enum RiskEnvelope {
    /// Expectation: the singleton containing the base law itself.
    Singleton { probs: Vec<f64> },
    /// CVaR: probability vectors capped coordinatewise by `Q / alpha`.
    CappedSimplex { caps: Vec<f64> },
}

impl RiskEnvelope {
    pub fn for_spec(spec: &RiskSpec, probs: &[f64]) -> Result<Self, RiskError> {
        match *spec {
            RiskSpec::Expectation => Ok(RiskEnvelope::Singleton {
                probs: probs.to_vec(),
            }),
            RiskSpec::Cvar { alpha } => Ok(RiskEnvelope::CappedSimplex {
                caps: probs.iter().map(|&q| q / alpha).collect(),
            }),
            RiskSpec::MeanSemideviation { .. } => {
                Err(RiskError::UnsupportedEnvelope(spec.clone()))
            }
        }
    }

    /// Supremum of `sum xi(x') * values(x')` over the envelope, in closed
    /// form. For the capped simplex the optimum greedily saturates caps on
    /// the largest outcomes until unit mass is placed.
    pub fn supremum(&self, values: &[f64]) -> f64 {
        match self {
            RiskEnvelope::Singleton { probs } => dot(probs, values),
            RiskEnvelope::CappedSimplex { caps } => {
                let mut order: Vec<usize> = (0..values.len()).collect();
                order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
                let mut remaining = 1.0;
                let mut acc = 0.0;
                for i in order {
                    if remaining <= 0.0 {
                        break;
                    }
                    let take = caps[i].min(remaining);
                    acc += take * values[i];
                    remaining -= take;
                }
                acc
            }
        }
    }

    /// Membership test: `xi` is a probability vector inside the envelope.
    /// Absolute continuity with respect to the base law is implied by the
    /// coordinate caps (a zero base probability forces a zero cap).
    pub fn contains(&self, xi: &[f64]) -> bool {
        let mass_ok = (xi.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL
            && xi.iter().all(|&v| v >= -PROB_TOL);
        match self {
            RiskEnvelope::Singleton { probs } => {
                mass_ok
                    && xi.len() == probs.len()
                    && xi.iter().zip(probs).all(|(&a, &b)| (a - b).abs() <= PROB_TOL)
            }
            RiskEnvelope::CappedSimplex { caps } => {
                mass_ok
                    && xi.len() == caps.len()
                    && xi.iter().zip(caps).all(|(&v, &cap)| v <= cap + PROB_TOL)
            }
        }
    }
}

/// Evaluates the measure through its dual envelope. Must agree with
/// [`evaluate_risk`] for the supported families.
pub fn envelope_supremum(spec: &RiskSpec, dist: &OutcomeDistribution) -> Result<f64, RiskError> {
    RiskEnvelope::for_spec(spec, &dist.probs).map(|env| env.supremum(&dist.values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoherenceAxiom {
    Convexity,
    Monotonicity,
    TranslationInvariance,
    PositiveHomogeneity,
}

impl std::fmt::Display for CoherenceAxiom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            CoherenceAxiom::Convexity => "convexity",
            CoherenceAxiom::Monotonicity => "monotonicity",
            CoherenceAxiom::TranslationInvariance => "translation invariance",
            CoherenceAxiom::PositiveHomogeneity => "positive homogeneity",
        };
        f.write_str(name)
    }
}

/// First failing axiom instance found by [`check_coherence_axioms`].
#[derive(Clone, Debug)]
pub struct AxiomCounterexample {
    pub axiom: CoherenceAxiom,
    pub trial: usize,
    pub probs: Vec<f64>,
    pub values: Vec<f64>,
    pub other: Vec<f64>,
    pub scalar: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug)]
pub struct CoherenceReport {
    pub trials: usize,
    pub counterexample: Option<AxiomCounterexample>,
}

impl CoherenceReport {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Exercises the four coherence axioms on seeded pseudo-random finite-support
/// variables. Supports of size 2..=6, outcome values in [-10, 10]; every
/// inequality is asserted within `PROP_TOL`. Returns the first counterexample
/// instead of panicking so that deliberately broken specifications can be
/// probed.
pub fn check_coherence_axioms(spec: &RiskSpec, trials: usize, seed: u64) -> CoherenceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.gen_range(2..=6);
        let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mass: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= mass);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let lambda: f64 = rng.gen_range(0.0..=1.0);
        let scale: f64 = rng.gen_range(0.0..5.0);
        let shift: f64 = rng.gen_range(-10.0..10.0);

        let rho_z = evaluate_slices(spec, &z, &probs);
        let rho_w = evaluate_slices(spec, &w, &probs);

        let mix: Vec<f64> = z
            .iter()
            .zip(&w)
            .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let lhs = evaluate_slices(spec, &mix, &probs);
        let rhs = lambda * rho_z + (1.0 - lambda) * rho_w;
        if lhs > rhs + PROP_TOL {
            return CoherenceReport {
                trials,
                counterexample: Some(AxiomCounterexample {
                    axiom: CoherenceAxiom::Convexity,
                    trial,
                    probs,
                    values: z,
                    other: w,
                    scalar: lambda,
                    lhs,
                    rhs,
                }),
            };
        }

        // Dominating variable built by adding nonnegative gaps to z.
        let above: Vec<f64> = z.iter().map(|&v| v + rng.gen_range(0.0..5.0)).collect();
        let rho_above = evaluate_slices(spec, &above, &probs);
        if rho_z > rho_above + PROP_TOL {
            return CoherenceReport {
                trials,
                counterexample: Some(AxiomCounterexample {
                    axiom: CoherenceAxiom::Monotonicity,
                    trial,
                    probs,
                    values: z,
                    other: above,
                    scalar: 0.0,
                    lhs: rho_z,
                    rhs: rho_above,
                }),
            };
        }

        let shifted: Vec<f64> = w.iter().map(|&v| v + shift).collect();
        let lhs = evaluate_slices(spec, &shifted, &probs);
        let rhs = shift + rho_w;
        if (lhs - rhs).abs() > PROP_TOL {
            return CoherenceReport {
                trials,
                counterexample: Some(AxiomCounterexample {
                    axiom: CoherenceAxiom::TranslationInvariance,
                    trial,
                    probs,
                    values: w,
                    other: shifted,
                    scalar: shift,
                    lhs,
                    rhs,
                }),
            };
        }

        let scaled: Vec<f64> = z.iter().map(|&v| scale * v).collect();
        let lhs = evaluate_slices(spec, &scaled, &probs);
        let rhs = scale * rho_z;
        if (lhs - rhs).abs() > PROP_TOL {
            return CoherenceReport {
                trials,
                counterexample: Some(AxiomCounterexample {
                    axiom: CoherenceAxiom::PositiveHomogeneity,
                    trial,
                    probs,
                    values: z,
                    other: scaled,
                    scalar: scale,
                    lhs,
                    rhs,
                }),
            };
        }
    }
    CoherenceReport {
        trials,
        counterexample: None,
    }
}
