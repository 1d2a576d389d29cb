//! Feasible risk-budget intervals and their uniform discretization grids.
//!
//! For each stage `k` and state `x` the achievable risk budgets form an
//! interval: the lower endpoint is the minimum achievable tail risk (an
//! unconstrained risk-averse DP computes it exactly), the upper endpoint is
//! `(N - k)` times the largest one-stage constraint cost. Each interval is
//! partitioned uniformly; queries snap a budget down to the nearest grid
//! point below, which keeps the discretized solution conservative.

use crate::instance::MdpInstance;
use crate::risk::evaluate_slices;

/// Minimum achievable tail risk per (stage, state), computed exactly with no
/// discretization. The terminal stage carries zero risk.
#[derive(Clone, Debug, PartialEq)]
pub struct MinRiskTable {
    values: Vec<Vec<f64>>,
}

impl MinRiskTable {
    pub fn value(&self, k: usize, x: usize) -> f64 {
        self.values[k][x]
    }

    pub fn stage(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }
}

/// Backward recursion for the unconstrained minimum-risk problem:
/// `R(N, x) = 0`, `R(k, x) = min_u { d(x,u) + rho(R(k+1, .); Q(.|x,u)) }`.
///
/// Risk is evaluated over the support of each transition row, in ascending
/// state order, exactly matching the solver's feasibility arithmetic so the
/// grid lower endpoint is feasible bit-for-bit.
pub fn min_risk_dp(instance: &MdpInstance) -> MinRiskTable {
    let n = instance.horizon();
    let ns = instance.num_states();
    let mut values = vec![vec![0.0f64; ns]; n + 1];
    let mut vals = Vec::with_capacity(ns);
    let mut probs = Vec::with_capacity(ns);
    for k in (0..n).rev() {
        let mut stage = vec![0.0f64; ns];
        for (x, entry) in stage.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for &u in instance.admissible(x) {
                let row = instance.transition_row(x, u);
                vals.clear();
                probs.clear();
                for (xp, &q) in row.iter().enumerate() {
                    if q > 0.0 {
                        probs.push(q);
                        vals.push(values[k + 1][xp]);
                    }
                }
                let cand =
                    instance.constraint_cost(x, u) + evaluate_slices(instance.risk(), &vals, &probs);
                if cand < best {
                    best = cand;
                }
            }
            *entry = best;
        }
        values[k] = stage;
    }
    MinRiskTable { values }
}

/// Feasible budget interval `[min achievable risk, (N - k) * max d]` at
/// stage `k`, state `x`. Degenerates to `[0, 0]` at the terminal stage.
pub fn threshold_interval(
    instance: &MdpInstance,
    min_risk: &MinRiskTable,
    k: usize,
    x: usize,
) -> (f64, f64) {
    let n = instance.horizon();
    assert!(k <= n, "stage {k} beyond horizon {n}");
    let lower = min_risk.value(k, x);
    let upper = (n - k) as f64 * instance.max_constraint_cost();
    (lower, upper)
}

/// Uniform grid over one budget interval. `points` runs from `lower` to
/// `upper + epsilon` inclusive with spacing `delta`; a zero-width interval
/// collapses to the single point `lower`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdGrid {
    pub lower: f64,
    pub upper: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub points: Vec<f64>,
}

impl ThresholdGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn last_index(&self) -> usize {
        self.points.len() - 1
    }

    /// Largest grid point `<= r`, as an index. `None` when `r` lies below the
    /// interval (no budget is achievable there). Budgets beyond the top point
    /// clamp to it with a warning: every achievable risk already fits.
    pub fn snap_down(&self, r: f64) -> Option<usize> {
        let below = self.points.partition_point(|p| *p <= r);
        if below == 0 {
            return None;
        }
        if below == self.points.len() && r > *self.points.last().unwrap() {
            log::warn!(
                "budget {r} exceeds the grid top {}; clamping",
                self.points.last().unwrap()
            );
        }
        Some(below - 1)
    }
}

/// Builds the grid for one interval: `interior_points + 2` equally spaced
/// points from `lower` to `upper + epsilon`.
pub fn build_grid(lower: f64, upper: f64, interior_points: usize, epsilon: f64) -> ThresholdGrid {
    assert!(epsilon > 0.0, "epsilon must be positive");
    if upper <= lower {
        return ThresholdGrid {
            lower,
            upper,
            epsilon,
            delta: 0.0,
            points: vec![lower],
        };
    }
    let cells = (interior_points + 1) as f64;
    let span = upper + epsilon - lower;
    let delta = span / cells;
    let points = (0..=interior_points + 1)
        .map(|i| lower + i as f64 * delta)
        .collect();
    ThresholdGrid {
        lower,
        upper,
        epsilon,
        delta,
        points,
    }
}

/// Per-(stage, state) grids for a whole solve. The terminal stage always
/// holds the single point `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdGrids {
    grids: Vec<Vec<ThresholdGrid>>,
    regions: usize,
}

impl ThresholdGrids {
    /// Builds grids with `regions` uniform cells per interval (clamped to at
    /// least one). `epsilon` defaults to `1e-9 * max(1, upper)` so the
    /// extension is not absorbed at large magnitudes.
    pub fn build(
        instance: &MdpInstance,
        min_risk: &MinRiskTable,
        regions: usize,
        epsilon: Option<f64>,
    ) -> Self {
        let n = instance.horizon();
        let ns = instance.num_states();
        let regions = regions.max(1);
        let interior = regions - 1;
        let mut grids = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut stage = Vec::with_capacity(ns);
            for x in 0..ns {
                if k == n {
                    stage.push(ThresholdGrid {
                        lower: 0.0,
                        upper: 0.0,
                        epsilon: epsilon.unwrap_or(1e-9),
                        delta: 0.0,
                        points: vec![0.0],
                    });
                    continue;
                }
                let (lower, upper) = threshold_interval(instance, min_risk, k, x);
                let eps = epsilon.unwrap_or_else(|| 1e-9 * upper.max(1.0));
                stage.push(build_grid(lower, upper, interior, eps));
            }
            grids.push(stage);
        }
        Self { grids, regions }
    }

    pub fn grid(&self, k: usize, x: usize) -> &ThresholdGrid {
        &self.grids[k][x]
    }

    pub fn stage(&self, k: usize) -> &[ThresholdGrid] {
        &self.grids[k]
    }

    pub fn horizon(&self) -> usize {
        self.grids.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.grids[0].len()
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Largest spacing over all grids; the step size that enters the error
    /// bound.
    pub fn max_delta(&self) -> f64 {
        self.grids
            .iter()
            .flatten()
            .map(|g| g.delta)
            .fold(0.0, f64::max)
    }
}
