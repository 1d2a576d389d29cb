//! Solver for finite-horizon Markov decision processes with dynamic,
//! time-consistent risk constraints.
//!
//! The optimization problem is: minimize the expected cumulative stage cost
//! subject to a nested (time-consistent) risk constraint on the cumulative
//! constraint cost, where risk is measured by a coherent one-step conditional
//! risk measure composed over stages. The constrained Bellman recursion runs
//! on an augmented state `(state, risk budget)`; the continuous budget axis is
//! discretized onto per-(stage, state) uniform grids, which makes the computed
//! value function a conservative (upper) approximation of the true optimum and
//! the extracted policies exactly feasible.
//!
//! Modules:
//! - [`instance`]: problem definition, validation, Lipschitz constants.
//! - [`risk`]: coherent risk measures, axiom checks, dual envelopes.
//! - [`thresholds`]: feasible budget intervals and grid construction.
//! - [`solver`]: discretized constrained Bellman operator and value iteration.
//! - [`analysis`]: exact policy evaluation, brute-force oracle, error bounds,
//!   grid-convergence sweeps, operator-law harness.
//! - [`report`]: deterministic solve-report serialization.

pub mod analysis;
pub mod instance;
pub mod report;
pub mod risk;
pub mod solver;
pub mod thresholds;

/// Absolute tolerance for probability mass checks (row sums, distributions).
pub const PROB_TOL: f64 = 1e-12;

/// Absolute slack applied to feasibility comparisons `d + rho(r') <= r`.
/// Shared by the solver and the brute-force oracle so both agree at
/// constraint boundaries.
pub const FEAS_TOL: f64 = 1e-12;

/// Tolerance for property and axiom assertions (coherence, operator laws,
/// closed-form cross-checks).
pub const PROP_TOL: f64 = 1e-9;

pub use analysis::{
    brute_force_optimum, compute_error_bound, evaluate_policy, operator_property_harness,
    sweep_grid_sizes, AnalysisError, ErrorBoundReport, OracleOutcome, PolicyEvaluation, SweepRow,
};
pub use instance::{
    validate_instance, ActionDef, ConstantsBundle, InstanceError, LipschitzConstants, MdpInstance,
    RawInstance, ValidationErrors, Violation,
};
pub use risk::{
    check_coherence_axioms, envelope_supremum, evaluate_risk, CoherenceReport, OutcomeDistribution,
    RiskEnvelope, RiskError, RiskSpec,
};
pub use solver::{
    apply_stage_operator, inner_minimize, value_iteration, value_iteration_with_deadline, Engine,
    InnerDecision, InnerSolution, PolicyTable, SolveTables, SolverError, ValueTable,
};
pub use thresholds::{
    build_grid, min_risk_dp, threshold_interval, MinRiskTable, ThresholdGrid, ThresholdGrids,
};
