//! Shared fixtures for integration and acceptance tests.
#![allow(dead_code)] // each test binary uses its own subset

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use riskdp::instance::{MdpInstance, RawAction, RawInstance};
use riskdp::risk::RiskSpec;
use riskdp::thresholds::MinRiskTable;

pub const SHIPPED_INSTANCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/paper_sec4.json");

pub fn shipped_instance() -> MdpInstance {
    let bytes = std::fs::read(SHIPPED_INSTANCE).expect("instance file ships with the crate");
    let raw: RawInstance = serde_json::from_slice(&bytes).unwrap();
    raw.validate().unwrap()
}

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub max_states: usize,
    pub max_actions: usize,
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub risk_pool: Vec<RiskSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_states: 3,
            max_actions: 2,
            min_horizon: 1,
            max_horizon: 3,
            risk_pool: vec![
                RiskSpec::Expectation,
                RiskSpec::Cvar { alpha: 0.25 },
                RiskSpec::Cvar { alpha: 0.5 },
                RiskSpec::MeanSemideviation {
                    beta: 0.2,
                    order: 2,
                },
            ],
        }
    }
}

/// Small random instance, always valid: every admissible transition row is a
/// normalized positive-weight draw with occasional structural zeros.
pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> MdpInstance {
    let ns = rng.gen_range(1..=cfg.max_states);
    let nu = rng.gen_range(1..=cfg.max_actions);
    let horizon = rng.gen_range(cfg.min_horizon..=cfg.max_horizon);
    let states: Vec<String> = (1..=ns).map(|i| format!("s{i}")).collect();
    let actions: Vec<RawAction> = (1..=nu)
        .map(|i| RawAction {
            name: format!("a{i}"),
            embedding: None,
        })
        .collect();

    let mut admissible = BTreeMap::new();
    for state in &states {
        let mut names: Vec<String> = actions
            .iter()
            .filter(|_| rng.gen_bool(0.8))
            .map(|a| a.name.clone())
            .collect();
        if names.is_empty() {
            names.push(actions[rng.gen_range(0..nu)].name.clone());
        }
        admissible.insert(state.clone(), names);
    }

    let mut transitions = BTreeMap::new();
    for action in &actions {
        let mut matrix = Vec::with_capacity(ns);
        for _ in 0..ns {
            let mut row: Vec<f64> = (0..ns)
                .map(|_| {
                    if ns > 1 && rng.gen_bool(0.25) {
                        0.0
                    } else {
                        rng.gen_range(0.05..1.0)
                    }
                })
                .collect();
            if row.iter().all(|&w| w == 0.0) {
                row[rng.gen_range(0..ns)] = 1.0;
            }
            let mass: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= mass);
            matrix.push(row);
        }
        transitions.insert(action.name.clone(), matrix);
    }

    let stage_costs = (0..ns)
        .map(|_| (0..nu).map(|_| Some(rng.gen_range(0.0..5.0))).collect())
        .collect();
    let constraint_costs = (0..ns)
        .map(|_| (0..nu).map(|_| Some(rng.gen_range(0.0..1.0))).collect())
        .collect();

    let raw = RawInstance {
        states,
        actions,
        admissible,
        transitions,
        stage_costs,
        constraint_costs,
        horizon: horizon as i64,
        risk: cfg.risk_pool[rng.gen_range(0..cfg.risk_pool.len())].clone(),
    };
    raw.validate().expect("generated instance is valid")
}

/// Start state plus a budget inside its feasible interval. Occasionally lands
/// exactly on the lower endpoint to exercise the tight boundary.
pub fn feasible_root(
    rng: &mut ChaCha8Rng,
    instance: &MdpInstance,
    min_risk: &MinRiskTable,
) -> (usize, f64) {
    let x0 = rng.gen_range(0..instance.num_states());
    let lower = min_risk.value(0, x0);
    let upper = instance.horizon() as f64 * instance.max_constraint_cost();
    let r0 = if rng.gen_bool(0.2) {
        lower
    } else {
        lower + rng.gen_range(0.0..=1.0) * (upper - lower)
    };
    (x0, r0)
}

/// Budget in the lower part of the feasible interval, where the risk
/// constraint binds and discretization gaps are visible.
pub fn tight_feasible_root(
    rng: &mut ChaCha8Rng,
    instance: &MdpInstance,
    min_risk: &MinRiskTable,
) -> (usize, f64) {
    let x0 = rng.gen_range(0..instance.num_states());
    let lower = min_risk.value(0, x0);
    let upper = instance.horizon() as f64 * instance.max_constraint_cost();
    let r0 = lower + rng.gen_range(0.02..0.35) * (upper - lower);
    (x0, r0)
}
