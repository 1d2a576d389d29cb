//! Verification tooling around the solver: exact policy evaluation, a
//! brute-force optimum over history-dependent policies, the a-priori
//! discretization error bound, grid-convergence sweeps, and a randomized
//! harness for the stage-operator laws.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::instance::{ConstantsBundle, MdpInstance};
use crate::risk::evaluate_slices;
use crate::solver::{apply_stage_operator, value_iteration_with_deadline, Engine, SolveTables};
use crate::thresholds::{min_risk_dp, ThresholdGrids};
use crate::{FEAS_TOL, PROP_TOL};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("policy has no entry at stage {stage}, state {state}, budget {threshold}")]
    PolicyUndefined {
        stage: usize,
        state: String,
        threshold: f64,
    },
    #[error(
        "start budget {r0} at state {state} lies below the minimum achievable risk {min_risk}"
    )]
    InfeasibleStart {
        state: String,
        r0: f64,
        min_risk: f64,
    },
    #[error("{count} reachable policies exceed the enumeration limit {limit}")]
    LimitExceeded { count: u128, limit: u128 },
    #[error("invalid error-bound input: {0}")]
    InvalidBoundInput(String),
}

/// Exact evaluation of an extracted policy from a start state and budget.
#[derive(Clone, Debug)]
pub struct PolicyEvaluation {
    /// Expected cumulative stage cost, by backward expectation over the
    /// augmented chain.
    pub expected_cost: f64,
    /// Nested (time-consistent) risk of the cumulative constraint cost.
    pub dynamic_risk: f64,
    /// Reachable (state, budget) pairs per stage with their probabilities.
    pub stage_support: Vec<Vec<SupportPoint>>,
}

#[derive(Clone, Debug)]
pub struct SupportPoint {
    pub state: usize,
    pub grid_index: usize,
    pub threshold: f64,
    pub probability: f64,
}

/// Walks the augmented chain induced by a solved policy. The expected cost
/// uses the plain expectation recursion; the dynamic risk composes the
/// one-step measure backward. Both are exact; normal termination guarantees
/// the policy was defined at every reachable augmented state.
pub fn evaluate_policy(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    tables: &SolveTables,
    x0: usize,
    r0: f64,
) -> Result<PolicyEvaluation, AnalysisError> {
    let n = instance.horizon();
    let root_idx = grids.grid(0, x0).snap_down(r0).ok_or_else(|| {
        AnalysisError::InfeasibleStart {
            state: instance.state_name(x0).to_string(),
            r0,
            min_risk: grids.grid(0, x0).lower,
        }
    })?;

    // reachable set per stage, with probabilities
    let mut stage_support: Vec<Vec<SupportPoint>> = Vec::with_capacity(n + 1);
    let mut frontier: HashMap<(usize, usize), f64> = HashMap::new();
    frontier.insert((x0, root_idx), 1.0);
    for k in 0..=n {
        let mut points: Vec<(&(usize, usize), &f64)> = frontier.iter().collect();
        points.sort_by_key(|(key, _)| **key);
        stage_support.push(
            points
                .iter()
                .map(|(&(x, ri), &p)| SupportPoint {
                    state: x,
                    grid_index: ri,
                    threshold: grids.grid(k, x).point(ri),
                    probability: p,
                })
                .collect(),
        );
        if k == n {
            break;
        }
        let mut next: HashMap<(usize, usize), f64> = HashMap::new();
        for (&(x, ri), &p) in frontier.iter() {
            let decision = tables.policy.decision(k, x, ri).ok_or_else(|| {
                AnalysisError::PolicyUndefined {
                    stage: k,
                    state: instance.state_name(x).to_string(),
                    threshold: grids.grid(k, x).point(ri),
                }
            })?;
            let row = instance.transition_row(x, decision.action);
            for (xp, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    *next.entry((xp, decision.thresholds[xp])).or_insert(0.0) += p * q;
                }
            }
        }
        frontier = next;
    }

    // backward recursions over the reachable augmented states
    let mut cost_memo: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let mut risk_memo: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let expected_cost = policy_cost(instance, tables, &mut cost_memo, 0, x0, root_idx);
    let dynamic_risk = policy_risk(instance, tables, &mut risk_memo, 0, x0, root_idx);
    Ok(PolicyEvaluation {
        expected_cost,
        dynamic_risk,
        stage_support,
    })
}

fn policy_cost(
    instance: &MdpInstance,
    tables: &SolveTables,
    memo: &mut HashMap<(usize, usize, usize), f64>,
    k: usize,
    x: usize,
    ri: usize,
) -> f64 {
    if k == instance.horizon() {
        return 0.0;
    }
    if let Some(&v) = memo.get(&(k, x, ri)) {
        return v;
    }
    let decision = tables
        .policy
        .decision(k, x, ri)
        .expect("reachability already verified");
    let row = instance.transition_row(x, decision.action);
    let mut acc = instance.stage_cost(x, decision.action);
    for (xp, &q) in row.iter().enumerate() {
        if q > 0.0 {
            acc += q * policy_cost(instance, tables, memo, k + 1, xp, decision.thresholds[xp]);
        }
    }
    memo.insert((k, x, ri), acc);
    acc
}

fn policy_risk(
    instance: &MdpInstance,
    tables: &SolveTables,
    memo: &mut HashMap<(usize, usize, usize), f64>,
    k: usize,
    x: usize,
    ri: usize,
) -> f64 {
    if k == instance.horizon() {
        return 0.0;
    }
    if let Some(&v) = memo.get(&(k, x, ri)) {
        return v;
    }
    let decision = tables
        .policy
        .decision(k, x, ri)
        .expect("reachability already verified");
    let row = instance.transition_row(x, decision.action);
    let mut probs = Vec::new();
    let mut tails = Vec::new();
    for (xp, &q) in row.iter().enumerate() {
        if q > 0.0 {
            probs.push(q);
            tails.push(policy_risk(
                instance,
                tables,
                memo,
                k + 1,
                xp,
                decision.thresholds[xp],
            ));
        }
    }
    let value = instance.constraint_cost(x, decision.action)
        + evaluate_slices(instance.risk(), &tails, &probs);
    memo.insert((k, x, ri), value);
    value
}

/// Exact optimum and policy counts from exhaustive enumeration.
#[derive(Clone, Debug)]
pub struct OracleOutcome {
    /// Minimum expected cost over feasible policies; `+inf` if none.
    pub value: f64,
    pub feasible_policies: u128,
    pub total_policies: u128,
}

/// Enumerates every deterministic history-dependent policy reachable from
/// `x0`, computes its exact cost and nested risk, and returns the cheapest
/// policy whose risk fits within `r0` (same boundary tolerance as the
/// solver). Subtree outcomes depend only on (stage, state), so they are
/// memoized as multisets of `(cost, risk)` pairs and combined across
/// independent successor slots; the policy count is checked against `limit`
/// before any enumeration happens.
pub fn brute_force_optimum(
    instance: &MdpInstance,
    x0: usize,
    r0: f64,
    limit: u128,
) -> Result<OracleOutcome, AnalysisError> {
    let n = instance.horizon();
    let ns = instance.num_states();

    // policy counts per (stage, state)
    let mut counts = vec![vec![1u128; ns]; n + 1];
    for k in (0..n).rev() {
        for x in 0..ns {
            let mut total = 0u128;
            for &u in instance.admissible(x) {
                let mut prod = 1u128;
                for (xp, &q) in instance.transition_row(x, u).iter().enumerate() {
                    if q > 0.0 {
                        prod = prod.saturating_mul(counts[k + 1][xp]);
                    }
                }
                total = total.saturating_add(prod);
            }
            counts[k][x] = total;
        }
    }
    let total_policies = counts[0][x0];
    if total_policies > limit {
        return Err(AnalysisError::LimitExceeded {
            count: total_policies,
            limit,
        });
    }

    // Outcome multisets per reachable (stage, state): (cost, risk,
    // multiplicity). Built lazily so unreachable subtrees never enumerate;
    // every reachable count is dominated by the root count checked above.
    let mut outcomes: HashMap<(usize, usize), OutcomeSet> = HashMap::new();
    let root = subtree_outcomes(instance, &mut outcomes, 0, x0);

    let mut value = f64::INFINITY;
    let mut feasible_policies = 0u128;
    for &(cost, risk, mult) in root {
        if risk <= r0 + FEAS_TOL {
            feasible_policies += mult;
            if cost < value {
                value = cost;
            }
        }
    }
    Ok(OracleOutcome {
        value,
        feasible_policies,
        total_policies,
    })
}

/// Policy outcomes of one subtree: (expected cost, nested risk, number of
/// policies realizing the pair).
type OutcomeSet = Vec<(f64, f64, u128)>;

fn subtree_outcomes<'a>(
    instance: &MdpInstance,
    memo: &'a mut HashMap<(usize, usize), OutcomeSet>,
    k: usize,
    x: usize,
) -> &'a OutcomeSet {
    if !memo.contains_key(&(k, x)) {
        let entry = if k == instance.horizon() {
            vec![(0.0, 0.0, 1)]
        } else {
            let mut merged: HashMap<(u64, u64), u128> = HashMap::new();
            for &u in instance.admissible(x) {
                let row = instance.transition_row(x, u);
                let mut support = Vec::new();
                let mut probs = Vec::new();
                for (xp, &q) in row.iter().enumerate() {
                    if q > 0.0 {
                        support.push(xp);
                        probs.push(q);
                    }
                }
                for &xp in &support {
                    subtree_outcomes(instance, memo, k + 1, xp);
                }
                let sets: Vec<OutcomeSet> = support
                    .iter()
                    .map(|&xp| memo[&(k + 1, xp)].clone())
                    .collect();
                let mut pick = vec![0usize; sets.len()];
                let mut risk_in = vec![0.0f64; sets.len()];
                loop {
                    let mut cost = instance.stage_cost(x, u);
                    let mut mult = 1u128;
                    for (j, &p) in pick.iter().enumerate() {
                        let (c, r, m) = sets[j][p];
                        cost += probs[j] * c;
                        risk_in[j] = r;
                        mult = mult.saturating_mul(m);
                    }
                    let risk = instance.constraint_cost(x, u)
                        + evaluate_slices(instance.risk(), &risk_in, &probs);
                    *merged.entry((cost.to_bits(), risk.to_bits())).or_insert(0) += mult;
                    // odometer over the successor outcome sets
                    let mut pos = sets.len();
                    loop {
                        if pos == 0 {
                            break;
                        }
                        pos -= 1;
                        pick[pos] += 1;
                        if pick[pos] < sets[pos].len() {
                            break;
                        }
                        pick[pos] = 0;
                    }
                    if pick.iter().all(|&p| p == 0) {
                        break;
                    }
                }
            }
            merged
                .into_iter()
                .map(|((c, r), m)| (f64::from_bits(c), f64::from_bits(r), m))
                .collect()
        };
        memo.insert((k, x), entry);
    }
    &memo[&(k, x)]
}

/// A-priori bound on the gap between the discretized and exact value
/// functions.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ErrorBoundReport {
    pub delta: f64,
    /// Sensitivity constants per stage (index 0..=N).
    pub m_v: Vec<f64>,
    /// Single-stage operator gaps `(m_v[k] + m_v[k+1]) * delta`.
    pub per_stage: Vec<f64>,
    /// Total bound `2 * delta * sum_k m_v[k]`, from the recursion.
    pub total: f64,
    /// Closed-form evaluation of the same sum; invalid at `m_r = 1` where the
    /// geometric series degenerates.
    pub closed_form: f64,
    pub closed_form_valid: bool,
}

/// Builds the sensitivity sequence from the recursion and cross-checks its
/// sum against the closed form. The recursion is authoritative; the closed
/// form is a consistency probe reported alongside it.
pub fn compute_error_bound(
    constants: &ConstantsBundle,
    delta: f64,
) -> Result<ErrorBoundReport, AnalysisError> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(AnalysisError::InvalidBoundInput(format!("delta = {delta}")));
    }
    let n = constants.horizon();
    let m_v = constants.m_v.clone();
    let per_stage: Vec<f64> = (0..n).map(|k| (m_v[k] + m_v[k + 1]) * delta).collect();
    let sum: f64 = m_v[..n].iter().sum();
    let total = 2.0 * delta * sum;

    let m = constants.m_r;
    let closed_form_valid = (1.0 - m).abs() > PROP_TOL;
    let closed_form = if closed_form_valid {
        let a = constants.m_c;
        let b = constants.m_q * constants.c_max;
        let nf = n as f64;
        let one = 1.0 - m;
        let pow = m.powi(n as i32);
        let series = nf * m * (2.0 * a + b * nf) / (2.0 * one)
            - nf * b * m * (1.0 + m) / (2.0 * one * one)
            - a * m * m * (1.0 - pow) / (one * one)
            + b * m * m * (1.0 - pow) / (one * one * one);
        2.0 * delta * series
    } else {
        f64::NAN
    };
    Ok(ErrorBoundReport {
        delta,
        m_v,
        per_stage,
        total,
        closed_form,
        closed_form_valid,
    })
}

/// One row of a grid-convergence sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub regions: usize,
    pub delta: f64,
    /// Discretized value at the snapped root; `None` when the solve timed
    /// out.
    pub value: Option<f64>,
    /// Gap to the brute-force optimum, when the oracle is tractable and both
    /// sides are finite.
    pub oracle_gap: Option<f64>,
    pub wall_ms: u128,
    pub timed_out: bool,
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub engine: Engine,
    pub epsilon: Option<f64>,
    pub oracle_limit: u128,
    pub per_solve_timeout: Option<Duration>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            engine: Engine::BranchAndBound,
            epsilon: None,
            oracle_limit: 10_000_000,
            per_solve_timeout: None,
        }
    }
}

/// Solves the instance at each region count in ascending order, recording the
/// root value, the spacing, timing, and (when tractable) the gap to the
/// brute-force optimum. A per-solve timeout marks the row and the sweep
/// continues.
pub fn sweep_grid_sizes(
    instance: &MdpInstance,
    x0: usize,
    r0: f64,
    region_counts: &[usize],
    options: &SweepOptions,
) -> Vec<SweepRow> {
    let min_risk = min_risk_dp(instance);
    let oracle = brute_force_optimum(instance, x0, r0, options.oracle_limit).ok();
    let mut ms: Vec<usize> = region_counts.to_vec();
    ms.sort_unstable();
    let mut rows = Vec::with_capacity(ms.len());
    for m in ms {
        let start = Instant::now();
        let grids = ThresholdGrids::build(instance, &min_risk, m, options.epsilon);
        let delta = grids.max_delta();
        let deadline = options.per_solve_timeout.map(|d| start + d);
        let solved = value_iteration_with_deadline(instance, &grids, options.engine, deadline);
        let wall_ms = start.elapsed().as_millis();
        match solved {
            Ok(tables) => {
                let value = tables.values.query(&grids, 0, x0, r0);
                let oracle_gap = oracle.as_ref().and_then(|o| {
                    (value.is_finite() && o.value.is_finite()).then_some(value - o.value)
                });
                rows.push(SweepRow {
                    regions: m,
                    delta,
                    value: Some(value),
                    oracle_gap,
                    wall_ms,
                    timed_out: false,
                });
            }
            Err(_) => rows.push(SweepRow {
                regions: m,
                delta,
                value: None,
                oracle_gap: None,
                wall_ms,
                timed_out: true,
            }),
        }
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorLaw {
    Monotonicity,
    ConstantShift,
    NonExpansivity,
}

impl std::fmt::Display for OperatorLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OperatorLaw::Monotonicity => "monotonicity",
            OperatorLaw::ConstantShift => "constant shift",
            OperatorLaw::NonExpansivity => "non-expansivity",
        })
    }
}

#[derive(Clone, Debug)]
pub struct OperatorLawViolation {
    pub law: OperatorLaw,
    pub trial: usize,
    pub stage: usize,
    pub state: usize,
    pub grid_index: usize,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct OperatorLawReport {
    pub trials: usize,
    pub counterexample: Option<OperatorLawViolation>,
}

impl OperatorLawReport {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Exercises monotonicity, constant shift, and non-expansivity of the
/// discretized stage operator on seeded random bounded value slices.
// negated comparisons report incomparable pairs as violations
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn operator_property_harness(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    trials: usize,
    seed: u64,
) -> OperatorLawReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = instance.horizon();
    let ns = instance.num_states();
    for trial in 0..trials {
        let k = rng.gen_range(0..n);
        let shape: Vec<usize> = (0..ns).map(|x| grids.grid(k + 1, x).len()).collect();
        let sample = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<Vec<f64>> {
            shape
                .iter()
                .map(|&len| (0..len).map(|_| rng.gen_range(lo..hi)).collect())
                .collect()
        };
        let base = sample(&mut rng, -10.0, 10.0);
        let other = sample(&mut rng, -10.0, 10.0);
        let lift: Vec<Vec<f64>> = base
            .iter()
            .map(|row| row.iter().map(|v| v + rng.gen_range(0.0..5.0)).collect())
            .collect();
        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|row| row.iter().map(|v| v + shift).collect())
            .collect();

        let engine = Engine::BranchAndBound;
        let t_base = apply_stage_operator(instance, grids, k, &base, engine);
        let t_lift = apply_stage_operator(instance, grids, k, &lift, engine);
        let t_shift = apply_stage_operator(instance, grids, k, &shifted, engine);
        let t_other = apply_stage_operator(instance, grids, k, &other, engine);

        let mut sup_input = 0.0f64;
        for (row_a, row_b) in base.iter().zip(&other) {
            for (&a, &b) in row_a.iter().zip(row_b) {
                sup_input = sup_input.max((a - b).abs());
            }
        }

        for x in 0..ns {
            for ri in 0..grids.grid(k, x).len() {
                let tb = t_base[x][ri];
                let tl = t_lift[x][ri];
                let ts = t_shift[x][ri];
                let to = t_other[x][ri];
                if !(tb <= tl + PROP_TOL) {
                    return OperatorLawReport {
                        trials,
                        counterexample: Some(OperatorLawViolation {
                            law: OperatorLaw::Monotonicity,
                            trial,
                            stage: k,
                            state: x,
                            grid_index: ri,
                            detail: format!("T[V] = {tb} > T[V-above] = {tl}"),
                        }),
                    };
                }
                if tb.is_finite() != ts.is_finite() || (tb.is_finite() && (ts - tb - shift).abs() > PROP_TOL)
                {
                    return OperatorLawReport {
                        trials,
                        counterexample: Some(OperatorLawViolation {
                            law: OperatorLaw::ConstantShift,
                            trial,
                            stage: k,
                            state: x,
                            grid_index: ri,
                            detail: format!("T[V+{shift}] = {ts}, T[V] + shift = {}", tb + shift),
                        }),
                    };
                }
                let gap = if tb.is_finite() && to.is_finite() {
                    (tb - to).abs()
                } else if tb.is_finite() == to.is_finite() {
                    0.0
                } else {
                    f64::INFINITY
                };
                if !(gap <= sup_input + PROP_TOL) {
                    return OperatorLawReport {
                        trials,
                        counterexample: Some(OperatorLawViolation {
                            law: OperatorLaw::NonExpansivity,
                            trial,
                            stage: k,
                            state: x,
                            grid_index: ri,
                            detail: format!("|T[V]-T[W]| = {gap} > sup|V-W| = {sup_input}"),
                        }),
                    };
                }
            }
        }
    }
    OperatorLawReport {
        trials,
        counterexample: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::value_iteration;
    use crate::testing::sample_instance;

    fn solved_sample(regions: usize) -> (MdpInstance, ThresholdGrids, SolveTables) {
        let inst = sample_instance();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, regions, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        (inst, grids, tables)
    }

    #[test]
    fn extracted_policy_is_feasible() {
        let (inst, grids, tables) = solved_sample(8);
        for (x0, r0) in [(0usize, 1.0f64), (0, 1.5), (1, 0.9), (2, 0.7)] {
            let eval = evaluate_policy(&inst, &grids, &tables, x0, r0).unwrap();
            assert!(
                eval.dynamic_risk <= r0 + FEAS_TOL,
                "risk {} exceeds budget {r0}",
                eval.dynamic_risk
            );
            // expected cost reproduces the table entry at the snapped root
            let v = tables.values.query(&grids, 0, x0, r0);
            assert!((eval.expected_cost - v).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_evaluation_on_degenerate_costs() {
        // d = 0, c = 1 per stage: cost telescopes to the horizon, risk to 0
        let mut raw = sample_instance().to_raw();
        for row in raw.stage_costs.iter_mut() {
            for entry in row.iter_mut() {
                *entry = Some(1.0);
            }
        }
        for row in raw.constraint_costs.iter_mut() {
            for entry in row.iter_mut() {
                *entry = Some(0.0);
            }
        }
        let inst = raw.validate().unwrap();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 4, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        let eval = evaluate_policy(&inst, &grids, &tables, 0, 0.0).unwrap();
        assert!((eval.expected_cost - 3.0).abs() < 1e-12);
        assert_eq!(eval.dynamic_risk, 0.0);
    }

    #[test]
    fn deterministic_chain_cost_is_path_sum() {
        use crate::instance::{RawAction, RawInstance};
        use crate::risk::RiskSpec;
        use std::collections::BTreeMap;
        let mut admissible = BTreeMap::new();
        for s in ["1", "2", "3"] {
            admissible.insert(s.to_string(), vec!["a".to_string()]);
        }
        let mut transitions = BTreeMap::new();
        transitions.insert(
            "a".to_string(),
            vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        let raw = RawInstance {
            states: vec!["1".into(), "2".into(), "3".into()],
            actions: vec![RawAction {
                name: "a".into(),
                embedding: None,
            }],
            admissible,
            transitions,
            stage_costs: vec![vec![Some(1.0)], vec![Some(2.0)], vec![Some(4.0)]],
            constraint_costs: vec![vec![Some(0.1)], vec![Some(0.2)], vec![Some(0.3)]],
            horizon: 3,
            risk: RiskSpec::Cvar { alpha: 0.5 },
        };
        let inst = raw.validate().unwrap();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 4, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        // path 1 -> 2 -> 3: costs 1 + 2 + 4, risks 0.1 + 0.2 + 0.3
        let eval = evaluate_policy(&inst, &grids, &tables, 0, 0.65).unwrap();
        assert!((eval.expected_cost - 7.0).abs() < 1e-12);
        assert!((eval.dynamic_risk - 0.6).abs() < 1e-12);
    }

    #[test]
    fn backward_cost_matches_forward_path_enumeration() {
        let (inst, grids, tables) = solved_sample(6);
        let r0 = 1.1;
        let eval = evaluate_policy(&inst, &grids, &tables, 0, r0).unwrap();
        // forward enumeration over all sample paths (3 stages, 3 states: 27)
        let root = grids.grid(0, 0).snap_down(r0).unwrap();
        let mut total = 0.0;
        let mut stack = vec![(0usize, 0usize, root, 1.0f64, 0.0f64)];
        while let Some((k, x, ri, prob, cost)) = stack.pop() {
            if k == inst.horizon() {
                total += prob * cost;
                continue;
            }
            let dec = tables.policy.decision(k, x, ri).unwrap();
            let row = inst.transition_row(x, dec.action);
            for (xp, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    stack.push((
                        k + 1,
                        xp,
                        dec.thresholds[xp],
                        prob * q,
                        cost + inst.stage_cost(x, dec.action),
                    ));
                }
            }
        }
        assert!(
            (eval.expected_cost - total).abs() < 1e-10,
            "backward {} vs forward {}",
            eval.expected_cost,
            total
        );
    }

    #[test]
    fn stage_support_probabilities_sum_to_one() {
        let (inst, grids, tables) = solved_sample(8);
        let eval = evaluate_policy(&inst, &grids, &tables, 0, 1.2).unwrap();
        assert_eq!(eval.stage_support.len(), inst.horizon() + 1);
        for stage in &eval.stage_support {
            let mass: f64 = stage.iter().map(|p| p.probability).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_on_single_policy_instance() {
        use crate::instance::{RawAction, RawInstance};
        use crate::risk::RiskSpec;
        use std::collections::BTreeMap;
        let mut admissible = BTreeMap::new();
        admissible.insert("s".to_string(), vec!["a".to_string()]);
        let mut transitions = BTreeMap::new();
        transitions.insert("a".to_string(), vec![vec![1.0]]);
        let raw = RawInstance {
            states: vec!["s".into()],
            actions: vec![RawAction {
                name: "a".into(),
                embedding: None,
            }],
            admissible,
            transitions,
            stage_costs: vec![vec![Some(2.5)]],
            constraint_costs: vec![vec![Some(0.5)]],
            horizon: 2,
            risk: RiskSpec::Expectation,
        };
        let inst = raw.validate().unwrap();
        let out = brute_force_optimum(&inst, 0, 1.0, 1000).unwrap();
        assert_eq!(out.total_policies, 1);
        assert_eq!(out.feasible_policies, 1);
        assert!((out.value - 5.0).abs() < 1e-12);
        // infeasible budget
        let out = brute_force_optimum(&inst, 0, 0.5, 1000).unwrap();
        assert_eq!(out.feasible_policies, 0);
        assert!(out.value.is_infinite());
    }

    #[test]
    fn oracle_single_stage_formula() {
        // horizon 1: optimum = min { c(x0,u) : d(x0,u) <= r0 }
        let mut raw = sample_instance().to_raw();
        raw.horizon = 1;
        let inst = raw.validate().unwrap();
        let out = brute_force_optimum(&inst, 2, 0.3, 1000).unwrap();
        assert!((out.value - 6.0).abs() < 1e-12);
        let out = brute_force_optimum(&inst, 2, 0.5, 1000).unwrap();
        assert!((out.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_reference_on_sample() {
        // frozen from an independent implementation
        let inst = sample_instance();
        let out = brute_force_optimum(&inst, 0, 1.0, 10_000_000).unwrap();
        assert_eq!(out.total_policies, 8192);
        assert_eq!(out.feasible_policies, 11);
        assert!((out.value - 11.08).abs() < 1e-9);
        let out = brute_force_optimum(&inst, 0, 1.2, 10_000_000).unwrap();
        assert_eq!(out.feasible_policies, 1891);
        assert!((out.value - 8.48).abs() < 1e-9);
        let out = brute_force_optimum(&inst, 0, 1.8, 10_000_000).unwrap();
        assert_eq!(out.feasible_policies, 8192);
        assert!((out.value - 6.36).abs() < 1e-9);
    }

    #[test]
    fn oracle_respects_limit() {
        let inst = sample_instance();
        let err = brute_force_optimum(&inst, 0, 1.0, 100).unwrap_err();
        match err {
            AnalysisError::LimitExceeded { count, limit } => {
                assert_eq!(count, 8192);
                assert_eq!(limit, 100);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn oracle_multiplicities_sum_to_total() {
        let inst = sample_instance();
        let out = brute_force_optimum(&inst, 1, 0.95, 10_000_000).unwrap();
        assert!(out.feasible_policies <= out.total_policies);
        assert_eq!(out.total_policies, 8192);
    }

    #[test]
    fn error_bound_hand_example() {
        let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, 0.5, 3).unwrap();
        let report = compute_error_bound(&bundle, 0.1).unwrap();
        assert!((report.total - 1.69).abs() < 1e-9);
        assert!(report.closed_form_valid);
        assert!((report.closed_form - report.total).abs() < 1e-9);
        assert!((report.per_stage[2] - (1.0 + 0.0) * 0.1).abs() < 1e-12);
    }

    #[test]
    fn error_bound_degenerate_cases() {
        let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, 0.5, 3).unwrap();
        let report = compute_error_bound(&bundle, 0.0).unwrap();
        assert_eq!(report.total, 0.0);
        let zero = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, 0.0, 3).unwrap();
        let report = compute_error_bound(&zero, 0.3).unwrap();
        assert_eq!(report.total, 0.0);
        assert!(report.m_v.iter().all(|&v| v == 0.0));
        assert!(compute_error_bound(&bundle, -1.0).is_err());
    }

    #[test]
    fn closed_form_agrees_across_mr_values() {
        for m_r in [0.1, 0.5, 0.9, 2.0] {
            let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, m_r, 3).unwrap();
            let report = compute_error_bound(&bundle, 0.1).unwrap();
            assert!(report.closed_form_valid);
            assert!(
                (report.closed_form - report.total).abs() <= PROP_TOL,
                "m_r = {m_r}: recursion {} vs closed form {}",
                report.total,
                report.closed_form
            );
        }
        // singular point is flagged, not trusted
        let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, 1.0, 3).unwrap();
        let report = compute_error_bound(&bundle, 0.1).unwrap();
        assert!(!report.closed_form_valid);
        assert!(report.total > 0.0);
    }

    #[test]
    fn sweep_single_region_count_matches_direct_solve() {
        let inst = sample_instance();
        let rows = sweep_grid_sizes(&inst, 0, 1.2, &[10], &SweepOptions::default());
        assert_eq!(rows.len(), 1);
        let (_, grids, tables) = solved_sample(10);
        let direct = tables.values.query(&grids, 0, 0, 1.2);
        assert_eq!(rows[0].value, Some(direct));
        assert!(!rows[0].timed_out);
        let gap = rows[0].oracle_gap.unwrap();
        assert!(gap >= -PROP_TOL);
    }

    #[test]
    fn sweep_zero_cost_instance_is_flat_zero() {
        let mut raw = sample_instance().to_raw();
        for row in raw.stage_costs.iter_mut() {
            for entry in row.iter_mut() {
                *entry = Some(0.0);
            }
        }
        let inst = raw.validate().unwrap();
        let rows = sweep_grid_sizes(&inst, 0, 1.0, &[5, 10, 20], &SweepOptions::default());
        for row in rows {
            assert_eq!(row.value, Some(0.0));
        }
    }

    #[test]
    fn sweep_values_nonincreasing_on_nested_ladder() {
        let inst = sample_instance();
        let rows = sweep_grid_sizes(&inst, 0, 1.2, &[5, 10, 20, 40], &SweepOptions::default());
        for pair in rows.windows(2) {
            let a = pair[0].value.unwrap();
            let b = pair[1].value.unwrap();
            assert!(b <= a, "value rose from {a} to {b}");
        }
    }

    #[test]
    fn sweep_timeout_marks_row_and_continues() {
        // the naive engine cannot finish a 200-cell grid in a millisecond
        let inst = sample_instance();
        let options = SweepOptions {
            engine: Engine::Naive,
            per_solve_timeout: Some(Duration::from_millis(1)),
            ..SweepOptions::default()
        };
        let rows = sweep_grid_sizes(&inst, 0, 1.2, &[200], &options);
        assert_eq!(rows.len(), 1);
        assert!(rows[0].timed_out);
        assert_eq!(rows[0].value, None);
        assert_eq!(rows[0].oracle_gap, None);
        assert!(rows[0].delta > 0.0);
    }

    #[test]
    fn zero_shift_is_identity() {
        let inst = sample_instance();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 5, None);
        let slice: Vec<Vec<f64>> = (0..3)
            .map(|x| grids.grid(1, x).points.iter().map(|p| 7.0 - p).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = slice
            .iter()
            .map(|row| row.iter().map(|v| v + 0.0).collect())
            .collect();
        let a = apply_stage_operator(&inst, &grids, 0, &slice, Engine::BranchAndBound);
        let b = apply_stage_operator(&inst, &grids, 0, &shifted, Engine::BranchAndBound);
        assert_eq!(a, b);
    }

    #[test]
    fn policy_undefined_is_reported_with_location() {
        let (inst, grids, tables) = solved_sample(4);
        let broken = SolveTables {
            values: tables.values.clone(),
            policy: tables.policy.without_state_entries(1, 2),
        };
        // state 3 is reachable from state 1 at stage 1 under every action
        let err = evaluate_policy(&inst, &grids, &broken, 0, 1.5).unwrap_err();
        match err {
            AnalysisError::PolicyUndefined { stage, state, .. } => {
                assert_eq!(stage, 1);
                assert_eq!(state, "3");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn infeasible_start_is_reported() {
        let (inst, grids, tables) = solved_sample(4);
        let err = evaluate_policy(&inst, &grids, &tables, 0, 0.4).unwrap_err();
        assert!(matches!(err, AnalysisError::InfeasibleStart { .. }));
    }

    #[test]
    fn operator_laws_hold_on_sample() {
        let inst = sample_instance();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 6, None);
        let report = operator_property_harness(&inst, &grids, 100, 3);
        assert!(report.passed(), "{:?}", report.counterexample);
    }

    #[test]
    fn identical_slices_have_zero_expansion_gap() {
        let inst = sample_instance();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 5, None);
        let slice: Vec<Vec<f64>> = (0..3)
            .map(|x| grids.grid(1, x).points.iter().map(|p| p * 2.0).collect())
            .collect();
        let a = apply_stage_operator(&inst, &grids, 0, &slice, Engine::BranchAndBound);
        let b = apply_stage_operator(&inst, &grids, 0, &slice, Engine::BranchAndBound);
        assert_eq!(a, b);
    }
}
