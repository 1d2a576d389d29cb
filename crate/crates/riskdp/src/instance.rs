//! Problem instances: definition, validation, and derived constants.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::RiskSpec;
use crate::PROB_TOL;

/// One admissibility violation found during validation, naming the offending
/// field and location.
#[derive(Clone, Debug)]
pub struct Violation {
    pub field: String,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.location.is_empty() {
            write!(f, "{}: {}", self.field, self.message)
        } else {
            write!(f, "{}: {} at {}", self.field, self.message, self.location)
        }
    }
}

#[derive(Debug, Error)]
pub struct ValidationErrors(pub Vec<Violation>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instance validation failed ({} violations):", self.0.len())?;
        for v in &self.0 {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error(
        "actions {a} and {b} admissible at state {state} share the embedding {value}; \
         Lipschitz quotients are undefined"
    )]
    EmbeddingCollision {
        state: String,
        a: String,
        b: String,
        value: f64,
    },
    #[error("constant inputs must be nonnegative and finite: {0}")]
    InvalidConstant(String),
}

/// Action identifier plus the real embedding used in Lipschitz quotients.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDef {
    pub name: String,
    pub embedding: f64,
}

/// Serde mirror of the instance file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub states: Vec<String>,
    pub actions: Vec<RawAction>,
    pub admissible: BTreeMap<String, Vec<String>>,
    #[serde(rename = "Q")]
    pub transitions: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(rename = "c")]
    pub stage_costs: Vec<Vec<Option<f64>>>,
    #[serde(rename = "d")]
    pub constraint_costs: Vec<Vec<Option<f64>>>,
    pub horizon: i64,
    pub risk: RiskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawAction {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<f64>,
}

impl RawInstance {
    /// Validates every structural and numeric requirement, collecting all
    /// violations rather than stopping at the first. Probability rows within
    /// the tolerance band are renormalized to unit mass; rows already within
    /// a few ulps are left untouched so validation is idempotent.
    pub fn validate(&self) -> Result<MdpInstance, ValidationErrors> {
        let mut violations = Vec::new();
        let ns = self.states.len();
        let nu = self.actions.len();

        if ns == 0 {
            violations.push(Violation {
                field: "states".into(),
                location: String::new(),
                message: "at least one state is required".into(),
            });
        }
        if nu == 0 {
            violations.push(Violation {
                field: "actions".into(),
                location: String::new(),
                message: "at least one action is required".into(),
            });
        }
        for (i, s) in self.states.iter().enumerate() {
            if self.states[..i].contains(s) {
                violations.push(Violation {
                    field: "states".into(),
                    location: format!("(index {i})"),
                    message: format!("duplicate state name \"{s}\""),
                });
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if self.actions[..i].iter().any(|b| b.name == a.name) {
                violations.push(Violation {
                    field: "actions".into(),
                    location: format!("(index {i})"),
                    message: format!("duplicate action name \"{}\"", a.name),
                });
            }
        }
        if self.horizon < 1 {
            violations.push(Violation {
                field: "horizon".into(),
                location: String::new(),
                message: format!("horizon must be >= 1, got {}", self.horizon),
            });
        }
        if let Err(e) = self.risk.validate() {
            violations.push(Violation {
                field: "risk".into(),
                location: String::new(),
                message: e.to_string(),
            });
        }

        let state_index =
            |name: &str| -> Option<usize> { self.states.iter().position(|s| s == name) };
        let action_index =
            |name: &str| -> Option<usize> { self.actions.iter().position(|a| a.name == name) };

        // Admissible action sets, resolved to indices and kept in declared
        // action order.
        let mut admissible: Vec<Vec<usize>> = vec![Vec::new(); ns];
        for (x, state) in self.states.iter().enumerate() {
            match self.admissible.get(state) {
                None => violations.push(Violation {
                    field: "admissible".into(),
                    location: format!("(x={state})"),
                    message: "state has no admissible-action entry".into(),
                }),
                Some(names) if names.is_empty() => violations.push(Violation {
                    field: "admissible".into(),
                    location: format!("(x={state})"),
                    message: "admissible action set is empty".into(),
                }),
                Some(names) => {
                    let mut indices = Vec::with_capacity(names.len());
                    for name in names {
                        match action_index(name) {
                            Some(u) if indices.contains(&u) => {}
                            Some(u) => indices.push(u),
                            None => violations.push(Violation {
                                field: "admissible".into(),
                                location: format!("(x={state})"),
                                message: format!("unknown action \"{name}\""),
                            }),
                        }
                    }
                    indices.sort_unstable();
                    admissible[x] = indices;
                }
            }
        }
        for key in self.admissible.keys() {
            if state_index(key).is_none() {
                violations.push(Violation {
                    field: "admissible".into(),
                    location: format!("(x={key})"),
                    message: "unknown state".into(),
                });
            }
        }

        // Transition rows for admissible pairs: nonnegative entries, unit
        // mass within PROB_TOL.
        let mut transition: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; nu]; ns];
        for (x, state) in self.states.iter().enumerate() {
            for &u in &admissible[x] {
                let action = &self.actions[u].name;
                let matrix = match self.transitions.get(action) {
                    Some(m) => m,
                    None => {
                        violations.push(Violation {
                            field: "Q".into(),
                            location: format!("(u={action})"),
                            message: "no transition matrix for admissible action".into(),
                        });
                        continue;
                    }
                };
                let row = match matrix.get(x) {
                    Some(r) if r.len() == ns => r,
                    _ => {
                        violations.push(Violation {
                            field: "Q".into(),
                            location: format!("(x={state}, u={action})"),
                            message: format!("row must have {ns} entries"),
                        });
                        continue;
                    }
                };
                let mut ok = true;
                for (xp, &q) in row.iter().enumerate() {
                    if q < 0.0 || !q.is_finite() {
                        violations.push(Violation {
                            field: "Q".into(),
                            location: format!("(x={state}, u={action}, x'={})", self.states[xp]),
                            message: format!("negative or non-finite probability {q}"),
                        });
                        ok = false;
                    }
                }
                if !ok {
                    continue;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    violations.push(Violation {
                        field: "Q".into(),
                        location: format!("(x={state}, u={action})"),
                        message: format!("row sum {sum} != 1"),
                    });
                    continue;
                }
                let mut row = row.clone();
                // Skip renormalization for rows already within a few ulps so
                // re-validating a validated instance is a fixed point.
                let skip = 2.0 * (ns as f64 + 1.0) * f64::EPSILON;
                if (sum - 1.0).abs() > skip {
                    row.iter_mut().for_each(|q| *q /= sum);
                }
                transition[x][u] = Some(row);
            }
        }

        // Stage and constraint costs for admissible pairs; constraint costs
        // must be nonnegative so that (N - k) * max d genuinely dominates
        // every achievable tail risk.
        let mut stage_cost: Vec<Vec<Option<f64>>> = vec![vec![None; nu]; ns];
        let mut constraint_cost: Vec<Vec<Option<f64>>> = vec![vec![None; nu]; ns];
        for (x, state) in self.states.iter().enumerate() {
            for &u in &admissible[x] {
                let action = &self.actions[u].name;
                match self.stage_costs.get(x).and_then(|r| r.get(u)).copied() {
                    Some(Some(v)) if v.is_finite() => stage_cost[x][u] = Some(v),
                    _ => violations.push(Violation {
                        field: "c".into(),
                        location: format!("(x={state}, u={action})"),
                        message: "missing or non-finite cost entry".into(),
                    }),
                }
                match self
                    .constraint_costs
                    .get(x)
                    .and_then(|r| r.get(u))
                    .copied()
                {
                    Some(Some(v)) if v.is_finite() && v >= 0.0 => {
                        constraint_cost[x][u] = Some(v)
                    }
                    Some(Some(v)) if v.is_finite() => violations.push(Violation {
                        field: "d".into(),
                        location: format!("(x={state}, u={action})"),
                        message: format!(
                            "constraint cost {v} is negative; shift d and the budget r0 \
                             by a common constant to make it nonnegative"
                        ),
                    }),
                    _ => violations.push(Violation {
                        field: "d".into(),
                        location: format!("(x={state}, u={action})"),
                        message: "missing or non-finite constraint cost entry".into(),
                    }),
                }
            }
        }

        let actions = self
            .actions
            .iter()
            .enumerate()
            .map(|(i, a)| ActionDef {
                name: a.name.clone(),
                embedding: a.embedding.unwrap_or((i + 1) as f64),
            })
            .collect();

        if !violations.is_empty() {
            return Err(ValidationErrors(violations));
        }
        Ok(MdpInstance {
            states: self.states.clone(),
            actions,
            admissible,
            transition,
            stage_cost,
            constraint_cost,
            horizon: self.horizon as usize,
            risk: self.risk.clone(),
        })
    }
}

/// Validates a raw instance description. See [`RawInstance::validate`].
pub fn validate_instance(raw: &RawInstance) -> Result<MdpInstance, ValidationErrors> {
    raw.validate()
}

/// A validated risk-constrained MDP. Immutable after construction and safe to
/// share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpInstance {
    states: Vec<String>,
    actions: Vec<ActionDef>,
    admissible: Vec<Vec<usize>>,
    transition: Vec<Vec<Option<Vec<f64>>>>,
    stage_cost: Vec<Vec<Option<f64>>>,
    constraint_cost: Vec<Vec<Option<f64>>>,
    horizon: usize,
    risk: RiskSpec,
}

/// Tightest constants satisfying the Lipschitz inequalities of the stage
/// cost, constraint cost, and transition kernel in the action embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzConstants {
    pub m_c: f64,
    pub m_d: f64,
    pub m_q: f64,
}

impl MdpInstance {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn risk(&self) -> &RiskSpec {
        &self.risk
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn actions(&self) -> &[ActionDef] {
        &self.actions
    }

    pub fn state_name(&self, x: usize) -> &str {
        &self.states[x]
    }

    pub fn action_name(&self, u: usize) -> &str {
        &self.actions[u].name
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn admissible(&self, x: usize) -> &[usize] {
        &self.admissible[x]
    }

    /// Transition row `Q(. | x, u)`. Panics for inadmissible pairs.
    pub fn transition_row(&self, x: usize, u: usize) -> &[f64] {
        self.transition[x][u]
            .as_deref()
            .expect("transition row requested for inadmissible pair")
    }

    pub fn stage_cost(&self, x: usize, u: usize) -> f64 {
        self.stage_cost[x][u].expect("stage cost requested for inadmissible pair")
    }

    pub fn constraint_cost(&self, x: usize, u: usize) -> f64 {
        self.constraint_cost[x][u].expect("constraint cost requested for inadmissible pair")
    }

    /// Largest absolute stage cost over admissible pairs.
    pub fn max_abs_stage_cost(&self) -> f64 {
        let mut best = 0.0f64;
        for x in 0..self.num_states() {
            for &u in &self.admissible[x] {
                best = best.max(self.stage_cost(x, u).abs());
            }
        }
        best
    }

    /// Largest constraint cost over admissible pairs. One stage can add at
    /// most this much risk, so `(N - k)` times it bounds every tail risk.
    pub fn max_constraint_cost(&self) -> f64 {
        let mut best = 0.0f64;
        for x in 0..self.num_states() {
            for &u in &self.admissible[x] {
                best = best.max(self.constraint_cost(x, u));
            }
        }
        best
    }

    /// Maximizes the three difference quotients over all states and distinct
    /// admissible action pairs. Zero when every admissible set is a
    /// singleton. Fails if two distinct admissible actions share an
    /// embedding.
    pub fn lipschitz_constants(&self) -> Result<LipschitzConstants, InstanceError> {
        let mut m_c = 0.0f64;
        let mut m_d = 0.0f64;
        let mut m_q = 0.0f64;
        for x in 0..self.num_states() {
            let actions = &self.admissible[x];
            for (i, &a) in actions.iter().enumerate() {
                for &b in &actions[i + 1..] {
                    let gap = (self.actions[a].embedding - self.actions[b].embedding).abs();
                    if gap == 0.0 {
                        return Err(InstanceError::EmbeddingCollision {
                            state: self.states[x].clone(),
                            a: self.actions[a].name.clone(),
                            b: self.actions[b].name.clone(),
                            value: self.actions[a].embedding,
                        });
                    }
                    m_c = m_c.max((self.stage_cost(x, a) - self.stage_cost(x, b)).abs() / gap);
                    m_d = m_d
                        .max((self.constraint_cost(x, a) - self.constraint_cost(x, b)).abs() / gap);
                    let total_variation: f64 = self
                        .transition_row(x, a)
                        .iter()
                        .zip(self.transition_row(x, b))
                        .map(|(&p, &q)| (p - q).abs())
                        .sum();
                    m_q = m_q.max(total_variation / gap);
                }
            }
        }
        Ok(LipschitzConstants { m_c, m_d, m_q })
    }

    /// Converts back to the raw file form (used to check that validation is
    /// idempotent and to embed instances in reports).
    pub fn to_raw(&self) -> RawInstance {
        let mut admissible = BTreeMap::new();
        for (x, state) in self.states.iter().enumerate() {
            admissible.insert(
                state.clone(),
                self.admissible[x]
                    .iter()
                    .map(|&u| self.actions[u].name.clone())
                    .collect(),
            );
        }
        let mut transitions = BTreeMap::new();
        for (u, action) in self.actions.iter().enumerate() {
            let mut any = false;
            let matrix: Vec<Vec<f64>> = self
                .transition
                .iter()
                .map(|per_action| match &per_action[u] {
                    Some(row) => {
                        any = true;
                        row.clone()
                    }
                    None => vec![0.0; self.states.len()],
                })
                .collect();
            if any {
                transitions.insert(action.name.clone(), matrix);
            }
        }
        RawInstance {
            states: self.states.clone(),
            actions: self
                .actions
                .iter()
                .map(|a| RawAction {
                    name: a.name.clone(),
                    embedding: Some(a.embedding),
                })
                .collect(),
            admissible,
            transitions,
            stage_costs: self.stage_cost.clone(),
            constraint_costs: self.constraint_cost.clone(),
            horizon: self.horizon as i64,
            risk: self.risk.clone(),
        }
    }
}

/// Constants feeding the a-priori discretization error bound. `m_r` is the
/// feasibility-correspondence Lipschitz constant; it is not computable from
/// the instance and must be supplied by the caller.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantsBundle {
    pub m_c: f64,
    pub m_d: f64,
    pub m_q: f64,
    pub m_r: f64,
    pub c_max: f64,
    /// Value-function sensitivity constants per stage, `m_v[horizon] = 0`,
    /// `m_v[k] = (m_c + m_q * (horizon - k - 1) * c_max + m_v[k + 1]) * m_r`.
    pub m_v: Vec<f64>,
}

impl ConstantsBundle {
    pub fn from_parts(
        m_c: f64,
        m_d: f64,
        m_q: f64,
        c_max: f64,
        m_r: f64,
        horizon: usize,
    ) -> Result<Self, InstanceError> {
        for (name, v) in [
            ("m_c", m_c),
            ("m_d", m_d),
            ("m_q", m_q),
            ("c_max", c_max),
            ("m_r", m_r),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(InstanceError::InvalidConstant(format!("{name} = {v}")));
            }
        }
        if horizon == 0 {
            return Err(InstanceError::InvalidConstant("horizon = 0".into()));
        }
        let mut m_v = vec![0.0; horizon + 1];
        for k in (0..horizon).rev() {
            m_v[k] = (m_c + m_q * (horizon - k - 1) as f64 * c_max + m_v[k + 1]) * m_r;
        }
        Ok(Self {
            m_c,
            m_d,
            m_q,
            m_r,
            c_max,
            m_v,
        })
    }

    pub fn derive(instance: &MdpInstance, m_r: f64) -> Result<Self, InstanceError> {
        let lip = instance.lipschitz_constants()?;
        Self::from_parts(
            lip.m_c,
            lip.m_d,
            lip.m_q,
            instance.max_abs_stage_cost(),
            m_r,
            instance.horizon(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.m_v.len() - 1
    }
}
