//! Acceptance suite. Each test prints one pass/fail line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::time::Instant;

use common::{
    feasible_root, shipped_instance, random_instance, tight_feasible_root, GeneratorConfig,
    SHIPPED_INSTANCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskdp::analysis::{
    brute_force_optimum, compute_error_bound, evaluate_policy, operator_property_harness,
};
use riskdp::instance::ConstantsBundle;
use riskdp::risk::{
    check_coherence_axioms, envelope_supremum, evaluate_risk, OutcomeDistribution, RiskSpec,
};
use riskdp::solver::{inner_minimize, value_iteration, Engine};
use riskdp::thresholds::{min_risk_dp, ThresholdGrids};
use riskdp::{FEAS_TOL, PROP_TOL};

fn pass(n: usize, what: &str) {
    println!("acceptance {n} ({what}): PASS");
}

/// Criterion 1: solving the shipped instance over the nested ladder
/// M in {5,10,20,40,80,160} yields a nonincreasing value column at every
/// sampled feasible root, the late-refinement gap |V(80) - V(160)| does not
/// exceed the early gap |V(20) - V(40)| on average over the root sample, and
/// the full ladder completes within the ten-minute budget.
#[test]
fn criterion_1_grid_ladder_on_shipped_instance() {
    let started = Instant::now();
    let inst = shipped_instance();
    let min_risk = min_risk_dp(&inst);
    let ladder = [5usize, 10, 20, 40, 80, 160];

    let mut solved = Vec::new();
    for &m in &ladder {
        let grids = ThresholdGrids::build(&inst, &min_risk, m, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        solved.push((grids, tables));
    }

    // roots: each state, budgets spanning its feasible interval
    let mut roots = Vec::new();
    for x0 in 0..inst.num_states() {
        let lower = min_risk.value(0, x0);
        let upper = inst.horizon() as f64 * inst.max_constraint_cost();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            roots.push((x0, lower + t * (upper - lower)));
        }
    }

    let mut early_gaps = Vec::new();
    let mut late_gaps = Vec::new();
    for &(x0, r0) in &roots {
        let column: Vec<f64> = solved
            .iter()
            .map(|(grids, tables)| tables.values.query(grids, 0, x0, r0))
            .collect();
        assert!(column.iter().all(|v| v.is_finite()), "root ({x0}, {r0})");
        for w in column.windows(2) {
            assert!(
                w[1] <= w[0],
                "value rose from {} to {} at root ({x0}, {r0})",
                w[0],
                w[1]
            );
        }
        early_gaps.push((column[2] - column[3]).abs()); // M = 20 vs 40
        late_gaps.push((column[4] - column[5]).abs()); // M = 80 vs 160
    }
    let early: f64 = early_gaps.iter().sum::<f64>() / early_gaps.len() as f64;
    let late: f64 = late_gaps.iter().sum::<f64>() / late_gaps.len() as f64;
    assert!(
        late <= early + PROP_TOL,
        "late refinement gap {late} exceeds early gap {early}"
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "ladder took {elapsed:?}, over the 10-minute budget"
    );
    pass(1, "grid ladder on shipped instance");
}

/// Criterion 2: on 50 random small instances the brute-force optimum never
/// exceeds the discretized value at the snapped root (to 1e-9), and halving
/// the grid step shrinks the mean optimality gap to at most 0.75 of its
/// coarse value.
#[test]
fn criterion_2_oracle_sandwich_and_linear_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    // budgets in the binding region so discretization gaps are visible;
    // horizon at least 2 so budget updates matter
    let cfg = GeneratorConfig {
        min_horizon: 2,
        ..GeneratorConfig::default()
    };
    let mut coarse_gaps = Vec::new();
    let mut fine_gaps = Vec::new();
    for _ in 0..50 {
        let inst = random_instance(&mut rng, &cfg);
        let min_risk = min_risk_dp(&inst);
        let (x0, r0) = tight_feasible_root(&mut rng, &inst, &min_risk);
        let oracle = brute_force_optimum(&inst, x0, r0, 10_000_000).unwrap();
        let mut gaps = [0.0f64; 2];
        for (i, m) in [5usize, 10].into_iter().enumerate() {
            let grids = ThresholdGrids::build(&inst, &min_risk, m, None);
            let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
            let vd = tables.values.query(&grids, 0, x0, r0);
            assert!(
                oracle.value <= vd + PROP_TOL,
                "oracle {} above discretized {vd} (m = {m})",
                oracle.value
            );
            gaps[i] = (vd - oracle.value).max(0.0);
        }
        coarse_gaps.push(gaps[0]);
        fine_gaps.push(gaps[1]);
    }
    assert!(
        coarse_gaps.iter().any(|&g| g > PROP_TOL),
        "no trial produced a visible gap; the rate statistic would be vacuous"
    );
    let coarse: f64 = coarse_gaps.iter().sum::<f64>() / coarse_gaps.len() as f64;
    let fine: f64 = fine_gaps.iter().sum::<f64>() / fine_gaps.len() as f64;
    assert!(
        fine <= 0.75 * coarse,
        "mean gap at half step {fine} not within 0.75x of {coarse}"
    );
    pass(2, "oracle sandwich and linear-rate evidence");
}

/// Criterion 3: the policy extracted from every randomized solve satisfies
/// its risk budget exactly, across 200 trials.
#[test]
fn criterion_3_exact_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let cfg = GeneratorConfig::default();
    for trial in 0..200 {
        let inst = random_instance(&mut rng, &cfg);
        let min_risk = min_risk_dp(&inst);
        let regions = rng.gen_range(1..=10);
        let grids = ThresholdGrids::build(&inst, &min_risk, regions, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        let (x0, r0) = feasible_root(&mut rng, &inst, &min_risk);
        let eval = evaluate_policy(&inst, &grids, &tables, x0, r0).unwrap();
        assert!(
            eval.dynamic_risk <= r0 + FEAS_TOL,
            "trial {trial}: risk {} exceeds budget {r0}",
            eval.dynamic_risk
        );
    }
    pass(3, "exact feasibility of extracted policies");
}

/// Criterion 4: monotonicity, constant shift, and non-expansivity of the
/// stage operator hold over 1000 randomized value-slice trials per risk kind.
#[test]
fn criterion_4_operator_laws() {
    for (seed, spec) in [
        (41u64, RiskSpec::Expectation),
        (42, RiskSpec::Cvar { alpha: 0.25 }),
        (43, RiskSpec::Cvar { alpha: 0.5 }),
        (
            44,
            RiskSpec::MeanSemideviation {
                beta: 0.2,
                order: 2,
            },
        ),
    ] {
        let mut raw = shipped_instance().to_raw();
        raw.risk = spec.clone();
        let inst = raw.validate().unwrap();
        let min_risk = min_risk_dp(&inst);
        let grids = ThresholdGrids::build(&inst, &min_risk, 6, None);
        let report = operator_property_harness(&inst, &grids, 1000, seed);
        assert!(
            report.passed(),
            "{spec}: {:?}",
            report.counterexample
        );
    }
    pass(4, "operator laws across risk kinds");
}

/// Criterion 5: all four coherence axioms hold over 1000 seeded trials per
/// risk specification, and the dual-envelope route reproduces direct
/// evaluation for expectation and CVaR on 1000 random distributions.
#[test]
fn criterion_5_risk_coherence_and_dual_route() {
    for spec in [
        RiskSpec::Expectation,
        RiskSpec::Cvar { alpha: 0.25 },
        RiskSpec::Cvar { alpha: 0.5 },
        RiskSpec::MeanSemideviation {
            beta: 0.2,
            order: 2,
        },
    ] {
        let report = check_coherence_axioms(&spec, 1000, 55);
        assert!(report.passed(), "{spec}: {:?}", report.counterexample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=6);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mass: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= mass);
        let dist = OutcomeDistribution::new(values, probs).unwrap();
        let specs = [
            RiskSpec::Expectation,
            RiskSpec::Cvar {
                alpha: rng.gen_range(0.05..=1.0),
            },
        ];
        for spec in specs {
            let direct = evaluate_risk(&spec, &dist);
            let dual = envelope_supremum(&spec, &dist).unwrap();
            assert!(
                (direct - dual).abs() <= PROP_TOL,
                "{spec}: direct {direct} vs dual {dual}"
            );
        }
    }
    pass(5, "risk coherence and dual-route agreement");
}

/// Criterion 6: the error-bound calculator reproduces the hand-derived
/// example and its recursion agrees with the closed form across M_r values.
#[test]
fn criterion_6_bound_calculator() {
    let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, 0.5, 3).unwrap();
    let report = compute_error_bound(&bundle, 0.1).unwrap();
    assert!(
        (report.total - 1.69).abs() <= PROP_TOL,
        "total bound {}",
        report.total
    );
    for m_r in [0.1, 0.5, 0.9, 2.0] {
        let bundle = ConstantsBundle::from_parts(2.0, 0.4, 0.4, 6.0, m_r, 3).unwrap();
        let report = compute_error_bound(&bundle, 0.1).unwrap();
        assert!(report.closed_form_valid);
        assert!(
            (report.closed_form - report.total).abs() <= PROP_TOL,
            "m_r = {m_r}: {} vs {}",
            report.total,
            report.closed_form
        );
    }
    pass(6, "error-bound calculator");
}

/// Criterion 7: every solve in a randomized suite keeps finite values within
/// (N - k) * c_max and nonincreasing in the budget; zero violations.
#[test]
fn criterion_7_value_bounds_and_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let cfg = GeneratorConfig::default();
    for _ in 0..100 {
        let inst = random_instance(&mut rng, &cfg);
        let min_risk = min_risk_dp(&inst);
        let regions = rng.gen_range(1..=12);
        let grids = ThresholdGrids::build(&inst, &min_risk, regions, None);
        let tables = value_iteration(&inst, &grids, Engine::BranchAndBound).unwrap();
        let n = inst.horizon();
        let c_max = inst.max_abs_stage_cost();
        for k in 0..=n {
            let limit = (n - k) as f64 * c_max;
            let limit = limit + PROP_TOL * (1.0 + limit);
            for x in 0..inst.num_states() {
                let slice = &tables.values.stage(k)[x];
                for (ri, &v) in slice.iter().enumerate() {
                    assert!(v.is_finite(), "grid points are always feasible");
                    assert!(v.abs() <= limit, "|V[{k}][{x}][{ri}]| = {v} > {limit}");
                    if ri > 0 {
                        assert!(v <= slice[ri - 1], "V[{k}][{x}] rose at {ri}");
                    }
                }
            }
        }
    }
    pass(7, "value bound and budget monotonicity");
}

/// Criterion 8: the naive and branch-and-bound inner minimizers return
/// identical values and identically tie-broken decisions on 500 randomized
/// stage problems with at most 8 grid points per successor.
#[test]
fn criterion_8_engine_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let cfg = GeneratorConfig::default();
    for problem in 0..500 {
        let inst = random_instance(&mut rng, &cfg);
        let min_risk = min_risk_dp(&inst);
        let regions = rng.gen_range(1..=7); // at most 8 points per grid
        let grids = ThresholdGrids::build(&inst, &min_risk, regions, None);
        let k = rng.gen_range(0..inst.horizon());
        let monotone = rng.gen_bool(0.5);
        let v_next: Vec<Vec<f64>> = (0..inst.num_states())
            .map(|x| {
                let len = grids.grid(k + 1, x).len();
                let mut row: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
                if monotone {
                    row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                }
                row
            })
            .collect();
        for x in 0..inst.num_states() {
            for &budget in &grids.grid(k, x).points {
                let naive = inner_minimize(&inst, &grids, k, x, budget, &v_next, Engine::Naive);
                let bnb =
                    inner_minimize(&inst, &grids, k, x, budget, &v_next, Engine::BranchAndBound);
                assert!(
                    naive == bnb,
                    "problem {problem}, stage {k}, state {x}, budget {budget}:\n  \
                     naive {naive:?}\n  bnb   {bnb:?}"
                );
            }
        }
    }
    pass(8, "engine equivalence");
}

/// The shipped instance file is the one the suite reasons about.
#[test]
fn shipped_instance_digest_matches_expected_shape() {
    let bytes = std::fs::read(SHIPPED_INSTANCE).unwrap();
    let digest = riskdp::report::instance_digest(&bytes);
    assert_eq!(digest.len(), 64);
    let inst = shipped_instance();
    assert_eq!(inst.num_states(), 3);
    assert_eq!(inst.num_actions(), 2);
    assert_eq!(inst.horizon(), 3);
    assert_eq!(
        inst.risk(),
        &RiskSpec::MeanSemideviation {
            beta: 0.2,
            order: 2
        }
    );
}
