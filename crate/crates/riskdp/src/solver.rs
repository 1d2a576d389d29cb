//! Discretized constrained Bellman operator and backward value iteration.
//!
//! One stage step at `(x, r)` minimizes `c(x,u) + sum_x' Q(x'|x,u) V(x', r'(x'))`
//! over actions `u` and per-successor budget updates `r'` drawn from the
//! next-stage grids, subject to `d(x,u) + rho(r'(.)) <= r`. Infeasibility is a
//! value (`+inf`), not an error. Two engines solve the inner problem: a naive
//! exhaustive scan of the product grid, and a branch-and-bound search that
//! prunes with the monotonicity of `rho` in each budget coordinate and an
//! objective lower bound. Both return identical results, including the
//! tie-break: smallest action index first, then the lexicographically largest
//! update vector (successors in declared order) — equal cost, loosest
//! downstream budgets.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::instance::MdpInstance;
use crate::risk::{evaluate_slices, RiskSpec};
use crate::thresholds::ThresholdGrids;
use crate::{FEAS_TOL, PROP_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Naive,
    BranchAndBound,
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Engine::Naive),
            "bnb" => Ok(Engine::BranchAndBound),
            other => Err(format!("unknown engine \"{other}\"; use naive or bnb")),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Naive => "naive",
            Engine::BranchAndBound => "bnb",
        })
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solve exceeded its deadline")]
    Timeout,
    #[error("solver invariant violated: {0}")]
    InvariantViolation(String),
}

/// Minimizer of one inner problem: the action and, per successor state, the
/// index of the granted budget in the next-stage grid. Zero-probability
/// successors are pinned to the top grid point; they influence neither
/// feasibility nor cost.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerDecision {
    pub action: usize,
    pub thresholds: Vec<usize>,
}

/// Value of one inner problem; `decision` is `None` exactly when the value is
/// infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolution {
    pub value: f64,
    pub decision: Option<InnerDecision>,
}

impl InnerSolution {
    fn infeasible() -> Self {
        InnerSolution {
            value: f64::INFINITY,
            decision: None,
        }
    }
}

/// Value function slices per stage: `stages[k][x][ri]` over the grid points
/// of stage `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    stages: Vec<Vec<Vec<f64>>>,
}

impl ValueTable {
    pub fn stage(&self, k: usize) -> &[Vec<f64>] {
        &self.stages[k]
    }

    pub fn value(&self, k: usize, x: usize, ri: usize) -> f64 {
        self.stages[k][x][ri]
    }

    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    /// Value at an arbitrary budget: snap down, then read the table.
    /// Budgets below the feasible interval yield `+inf`.
    pub fn query(&self, grids: &ThresholdGrids, k: usize, x: usize, r: f64) -> f64 {
        match grids.grid(k, x).snap_down(r) {
            Some(ri) => self.stages[k][x][ri],
            None => f64::INFINITY,
        }
    }
}

/// Minimizing decisions for every finite table entry, `k < N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    stages: Vec<Vec<Vec<Option<InnerDecision>>>>,
}

impl PolicyTable {
    pub fn decision(&self, k: usize, x: usize, ri: usize) -> Option<&InnerDecision> {
        self.stages[k][x][ri].as_ref()
    }

    pub fn stage(&self, k: usize) -> &[Vec<Option<InnerDecision>>] {
        &self.stages[k]
    }

    /// Copy with one state's entries blanked at one stage (tests exercise the
    /// undefined-policy error path with this).
    #[cfg(test)]
    pub(crate) fn without_state_entries(&self, k: usize, x: usize) -> Self {
        let mut stages = self.stages.clone();
        for entry in stages[k][x].iter_mut() {
            *entry = None;
        }
        Self { stages }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveTables {
    pub values: ValueTable,
    pub policy: PolicyTable,
}

impl SolveTables {
    pub fn decision_at(
        &self,
        grids: &ThresholdGrids,
        k: usize,
        x: usize,
        r: f64,
    ) -> Option<&InnerDecision> {
        grids
            .grid(k, x)
            .snap_down(r)
            .and_then(|ri| self.policy.decision(k, x, ri))
    }
}

/// Budget-independent data for one admissible action at a fixed (stage,
/// state): transition support, next-stage grids and value slices restricted
/// to the support, plus per-successor objective minima for bounding.
struct ActionContext<'a> {
    action: usize,
    cost: f64,
    dcost: f64,
    support: Vec<usize>,
    probs: Vec<f64>,
    grid_points: Vec<&'a [f64]>,
    values: Vec<&'a [f64]>,
    value_min: Vec<f64>,
    nonincreasing: Vec<bool>,
}

fn build_contexts<'a>(
    instance: &MdpInstance,
    grids: &'a ThresholdGrids,
    k: usize,
    x: usize,
    v_next: &'a [Vec<f64>],
) -> Vec<ActionContext<'a>> {
    instance
        .admissible(x)
        .iter()
        .map(|&u| {
            let row = instance.transition_row(x, u);
            let mut support = Vec::new();
            let mut probs = Vec::new();
            for (xp, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    support.push(xp);
                    probs.push(q);
                }
            }
            let grid_points: Vec<&[f64]> = support
                .iter()
                .map(|&xp| grids.grid(k + 1, xp).points.as_slice())
                .collect();
            let values: Vec<&[f64]> = support.iter().map(|&xp| v_next[xp].as_slice()).collect();
            let value_min = values
                .iter()
                .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min))
                .collect();
            let nonincreasing = values
                .iter()
                .map(|v| v.windows(2).all(|w| w[1] <= w[0]))
                .collect();
            ActionContext {
                action: u,
                cost: instance.stage_cost(x, u),
                dcost: instance.constraint_cost(x, u),
                support,
                probs,
                grid_points,
                values,
                value_min,
                nonincreasing,
            }
        })
        .collect()
}

/// Objective of one candidate, folded left to right in successor order.
/// Both engines and the policy evaluator share this fold so equal candidates
/// produce bitwise-equal values.
fn candidate_value(ctx: &ActionContext<'_>, idxs: &[usize]) -> f64 {
    let mut acc = ctx.cost;
    for (j, &gi) in idxs.iter().enumerate() {
        acc += ctx.probs[j] * ctx.values[j][gi];
    }
    acc
}

fn candidate_feasible(ctx: &ActionContext<'_>, spec: &RiskSpec, rvals: &[f64], budget: f64) -> bool {
    ctx.dcost + evaluate_slices(spec, rvals, &ctx.probs) <= budget + FEAS_TOL
}

fn naive_scan(
    ctx: &ActionContext<'_>,
    spec: &RiskSpec,
    budget: f64,
    best: &mut f64,
    best_decision: &mut Option<(usize, Vec<usize>)>,
) {
    let dims: Vec<usize> = ctx.grid_points.iter().map(|g| g.len()).collect();
    let m = dims.len();
    debug_assert!(m > 0, "transition rows have unit mass, support is nonempty");
    let mut idxs: Vec<usize> = dims.iter().map(|&d| d - 1).collect();
    let mut rvals: Vec<f64> = (0..m).map(|j| ctx.grid_points[j][idxs[j]]).collect();
    loop {
        if candidate_feasible(ctx, spec, &rvals, budget) {
            let value = candidate_value(ctx, &idxs);
            if value < *best {
                *best = value;
                *best_decision = Some((ctx.action, idxs.clone()));
            }
        }
        // mixed-radix countdown: candidates stream in lexicographically
        // descending order, so the first hit at any value is the
        // lexicographically largest among its ties
        let mut pos = m;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            if idxs[pos] > 0 {
                idxs[pos] -= 1;
                rvals[pos] = ctx.grid_points[pos][idxs[pos]];
                for p in pos + 1..m {
                    idxs[p] = dims[p] - 1;
                    rvals[p] = ctx.grid_points[p][idxs[p]];
                }
                break;
            }
        }
    }
}

fn bnb_scan(
    ctx: &ActionContext<'_>,
    spec: &RiskSpec,
    budget: f64,
    best: &mut f64,
    best_decision: &mut Option<(usize, Vec<usize>)>,
) {
    let m = ctx.grid_points.len();
    debug_assert!(m > 0);
    // scratch holds the lowest grid point in every not-yet-assigned slot, so
    // rho(scratch) is the least risk any completion of the prefix can incur
    let mut rvals: Vec<f64> = ctx.grid_points.iter().map(|g| g[0]).collect();
    let mut idxs = vec![0usize; m];
    bnb_node(
        ctx,
        spec,
        budget,
        0,
        ctx.cost,
        &mut idxs,
        &mut rvals,
        best,
        best_decision,
    );
}

// the negated comparison is load-bearing: an incomparable bound must prune
#[allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]
fn bnb_node(
    ctx: &ActionContext<'_>,
    spec: &RiskSpec,
    budget: f64,
    depth: usize,
    acc: f64,
    idxs: &mut Vec<usize>,
    rvals: &mut Vec<f64>,
    best: &mut f64,
    best_decision: &mut Option<(usize, Vec<usize>)>,
) {
    let m = ctx.grid_points.len();
    let grid = ctx.grid_points[depth];
    // rho is monotone in each coordinate, so feasibility of the cheapest
    // completion is a prefix property in the grid index: binary-search its
    // boundary instead of scanning the infeasible top
    let feasible_count = partition_point(grid.len(), |gi| {
        rvals[depth] = grid[gi];
        candidate_feasible(ctx, spec, rvals, budget)
    });
    if feasible_count == 0 {
        rvals[depth] = grid[0];
        return;
    }
    for gi in (0..feasible_count).rev() {
        // lower bound: actual contributions through this slot, cheapest
        // possible contributions after it, folded in the same order as
        // candidate_value so rounding stays monotone
        let acc_here = acc + ctx.probs[depth] * ctx.values[depth][gi];
        let mut bound = acc_here;
        for l in depth + 1..m {
            bound += ctx.probs[l] * ctx.value_min[l];
        }
        if !(bound < *best) {
            if ctx.nonincreasing[depth] {
                // descending scan only raises the bound from here on
                break;
            }
            continue;
        }
        idxs[depth] = gi;
        if depth + 1 == m {
            // complete assignment: the bound has no relaxed terms left, so it
            // is the exact candidate value, and the feasibility probe above
            // already checked the full vector
            *best = bound;
            *best_decision = Some((ctx.action, idxs.clone()));
        } else {
            rvals[depth] = grid[gi];
            bnb_node(
                ctx,
                spec,
                budget,
                depth + 1,
                acc_here,
                idxs,
                rvals,
                best,
                best_decision,
            );
        }
    }
    rvals[depth] = grid[0];
}

/// `partition_point` over `0..len` for a prefix predicate.
fn partition_point(len: usize, mut pred: impl FnMut(usize) -> bool) -> usize {
    let mut lo = 0usize;
    let mut hi = len;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

fn minimize_over_contexts(
    ctxs: &[ActionContext<'_>],
    spec: &RiskSpec,
    budget: f64,
    engine: Engine,
    next_grid_lens: &[usize],
) -> InnerSolution {
    let mut best = f64::INFINITY;
    let mut best_decision: Option<(usize, Vec<usize>)> = None;
    for ctx in ctxs {
        match engine {
            Engine::Naive => naive_scan(ctx, spec, budget, &mut best, &mut best_decision),
            Engine::BranchAndBound => bnb_scan(ctx, spec, budget, &mut best, &mut best_decision),
        }
    }
    match best_decision {
        None => InnerSolution::infeasible(),
        Some((action, support_idxs)) => {
            let ctx = ctxs.iter().find(|c| c.action == action).unwrap();
            let mut thresholds: Vec<usize> =
                next_grid_lens.iter().map(|&len| len - 1).collect();
            for (j, &xp) in ctx.support.iter().enumerate() {
                thresholds[xp] = support_idxs[j];
            }
            InnerSolution {
                value: best,
                decision: Some(InnerDecision { action, thresholds }),
            }
        }
    }
}

/// Exact minimum of one inner problem at stage `k`, state `x`, budget `r`,
/// against an arbitrary next-stage value slice. Returns the infeasible
/// solution when no action/update pair satisfies the risk constraint.
pub fn inner_minimize(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    k: usize,
    x: usize,
    budget: f64,
    v_next: &[Vec<f64>],
    engine: Engine,
) -> InnerSolution {
    let ctxs = build_contexts(instance, grids, k, x, v_next);
    let next_grid_lens: Vec<usize> = (0..instance.num_states())
        .map(|xp| grids.grid(k + 1, xp).len())
        .collect();
    minimize_over_contexts(&ctxs, instance.risk(), budget, engine, &next_grid_lens)
}

/// Applies the discretized stage operator at every grid point of stage `k`,
/// returning the new value slice. The next-stage slice must be shaped like
/// the stage-(k+1) grids.
pub fn apply_stage_operator(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    k: usize,
    v_next: &[Vec<f64>],
    engine: Engine,
) -> Vec<Vec<f64>> {
    compute_stage(instance, grids, k, v_next, engine, None)
        .map(|(values, _)| values)
        .expect("no deadline set")
}

type StageResult = (Vec<Vec<f64>>, Vec<Vec<Option<InnerDecision>>>);

fn compute_stage(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    k: usize,
    v_next: &[Vec<f64>],
    engine: Engine,
    deadline: Option<Instant>,
) -> Result<StageResult, SolverError> {
    let ns = instance.num_states();
    let next_grid_lens: Vec<usize> = (0..ns).map(|xp| grids.grid(k + 1, xp).len()).collect();
    let mut stage_values = Vec::with_capacity(ns);
    let mut stage_policy = Vec::with_capacity(ns);
    for x in 0..ns {
        let ctxs = build_contexts(instance, grids, k, x, v_next);
        let points = &grids.grid(k, x).points;
        let solutions: Result<Vec<InnerSolution>, SolverError> = points
            .par_iter()
            .map(|&budget| {
                if let Some(deadline) = deadline {
                    if Instant::now() > deadline {
                        return Err(SolverError::Timeout);
                    }
                }
                Ok(minimize_over_contexts(
                    &ctxs,
                    instance.risk(),
                    budget,
                    engine,
                    &next_grid_lens,
                ))
            })
            .collect();
        let solutions = solutions?;
        stage_values.push(solutions.iter().map(|s| s.value).collect::<Vec<_>>());
        stage_policy.push(
            solutions
                .into_iter()
                .map(|s| s.decision)
                .collect::<Vec<_>>(),
        );
    }
    Ok((stage_values, stage_policy))
}

/// Backward value iteration over the grids: terminal values are zero, each
/// earlier stage is one application of the stage operator. Verifies the
/// value-magnitude bound and monotonicity in the budget before returning.
pub fn value_iteration(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    engine: Engine,
) -> Result<SolveTables, SolverError> {
    value_iteration_with_deadline(instance, grids, engine, None)
}

pub fn value_iteration_with_deadline(
    instance: &MdpInstance,
    grids: &ThresholdGrids,
    engine: Engine,
    deadline: Option<Instant>,
) -> Result<SolveTables, SolverError> {
    let n = instance.horizon();
    let ns = instance.num_states();
    let mut stages: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n + 1];
    stages[n] = (0..ns)
        .map(|x| vec![0.0; grids.grid(n, x).len()])
        .collect();
    let mut policy: Vec<Vec<Vec<Option<InnerDecision>>>> = vec![Vec::new(); n];
    for k in (0..n).rev() {
        let (values, decisions) = compute_stage(instance, grids, k, &stages[k + 1], engine, deadline)?;
        stages[k] = values;
        policy[k] = decisions;
    }
    let tables = SolveTables {
        values: ValueTable { stages },
        policy: PolicyTable { stages: policy },
    };
    verify_solve_invariants(instance, &tables)?;
    Ok(tables)
}

/// Finite values stay within `(N - k) * c_max` (plus rounding headroom) and
/// are nonincreasing in the budget.
// negated comparisons flag incomparable entries instead of passing them
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn verify_solve_invariants(
    instance: &MdpInstance,
    tables: &SolveTables,
) -> Result<(), SolverError> {
    let n = instance.horizon();
    let c_max = instance.max_abs_stage_cost();
    for k in 0..=n {
        let limit = (n - k) as f64 * c_max;
        let limit = limit + PROP_TOL * (1.0 + limit);
        for (x, slice) in tables.values.stage(k).iter().enumerate() {
            for (ri, &v) in slice.iter().enumerate() {
                if v.is_finite() && v.abs() > limit {
                    return Err(SolverError::InvariantViolation(format!(
                        "|V[{k}][{x}][{ri}]| = {v} exceeds {limit}"
                    )));
                }
                if ri > 0 && !(v <= slice[ri - 1]) {
                    return Err(SolverError::InvariantViolation(format!(
                        "V[{k}][{x}] not nonincreasing at index {ri}: {} -> {v}",
                        slice[ri - 1]
                    )));
                }
            }
        }
    }
    Ok(())
}
