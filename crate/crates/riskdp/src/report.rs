//! Deterministic solve-report construction and serialization.
//!
//! Reports are plain JSON with struct-ordered fields; rerunning a solve with
//! the same instance file and flags reproduces the bytes exactly, except for
//! the trailing `timing` block. Numbers are rounded to 12 significant digits
//! and infinities serialize as the string `"inf"`.

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::analysis::ErrorBoundReport;
use crate::instance::{ConstantsBundle, MdpInstance};
use crate::solver::{Engine, SolveTables};
use crate::thresholds::ThresholdGrids;

/// Rounds to `digits` significant decimal digits. Non-finite values pass
/// through.
pub fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let magnitude = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    (v * factor).round() / factor
}

/// Formats a value for report and CSV emission: 12 significant digits,
/// `inf` for infinities.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{}", round_sig(v, 12))
    }
}

/// JSON wrapper applying the report number conventions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportValue(pub f64);

impl Serialize for ReportValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(round_sig(self.0, 12))
        } else if self.0 == f64::INFINITY {
            serializer.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            serializer.serialize_str("-inf")
        } else {
            serializer.serialize_str("nan")
        }
    }
}

/// SHA-256 of the raw instance file bytes, hex-encoded.
pub fn instance_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub instance_digest: String,
    pub engine: String,
    pub grid_regions: usize,
    pub epsilon_override: Option<f64>,
    pub x0: String,
    pub r0: ReportValue,
    pub root: RootSummary,
    pub constants: ConstantsSection,
    pub error_bound: ErrorBoundSection,
    pub grids: Vec<GridSummary>,
    pub values: Vec<StageValues>,
    pub policy: Vec<StagePolicy>,
    pub timing: Timing,
}

#[derive(Debug, Serialize)]
pub struct RootSummary {
    pub feasible: bool,
    pub snapped_threshold: Option<ReportValue>,
    pub value: ReportValue,
    pub action: Option<String>,
    pub threshold_updates: Option<Vec<ThresholdUpdate>>,
}

#[derive(Debug, Serialize)]
pub struct ThresholdUpdate {
    pub state: String,
    pub threshold: ReportValue,
}

#[derive(Debug, Serialize)]
pub struct ConstantsSection {
    pub m_c: ReportValue,
    pub m_d: ReportValue,
    pub m_q: ReportValue,
    pub m_r: ReportValue,
    pub m_r_note: Option<String>,
    pub c_max: ReportValue,
    pub m_v: Vec<ReportValue>,
}

#[derive(Debug, Serialize)]
pub struct ErrorBoundSection {
    pub delta: ReportValue,
    pub per_stage: Vec<ReportValue>,
    pub total: ReportValue,
    pub closed_form: Option<ReportValue>,
    pub closed_form_valid: bool,
}

#[derive(Debug, Serialize)]
pub struct GridSummary {
    pub stage: usize,
    pub state: String,
    pub lower: ReportValue,
    pub upper: ReportValue,
    pub epsilon: ReportValue,
    pub delta: ReportValue,
    pub points: usize,
}

#[derive(Debug, Serialize)]
pub struct StageValues {
    pub stage: usize,
    pub per_state: Vec<StateValues>,
}

#[derive(Debug, Serialize)]
pub struct StateValues {
    pub state: String,
    pub thresholds: Vec<ReportValue>,
    pub values: Vec<ReportValue>,
}

#[derive(Debug, Serialize)]
pub struct StagePolicy {
    pub stage: usize,
    pub per_state: Vec<StatePolicy>,
}

#[derive(Debug, Serialize)]
pub struct StatePolicy {
    pub state: String,
    pub entries: Vec<Option<PolicyEntry>>,
}

#[derive(Debug, Serialize)]
pub struct PolicyEntry {
    pub action: String,
    pub threshold_updates: Vec<ThresholdUpdate>,
}

#[derive(Debug, Serialize, Default)]
pub struct Timing {
    pub grid_ms: u128,
    pub solve_ms: u128,
    pub total_ms: u128,
}

pub struct ReportInputs<'a> {
    pub instance: &'a MdpInstance,
    pub digest: String,
    pub engine: Engine,
    pub grid_regions: usize,
    pub epsilon_override: Option<f64>,
    pub x0: usize,
    pub r0: f64,
    pub grids: &'a ThresholdGrids,
    pub tables: &'a SolveTables,
    pub constants: &'a ConstantsBundle,
    pub m_r_defaulted: bool,
    pub error_bound: &'a ErrorBoundReport,
    pub timing: Timing,
}

pub fn build_solve_report(inputs: ReportInputs<'_>) -> SolveReport {
    let ReportInputs {
        instance,
        digest,
        engine,
        grid_regions,
        epsilon_override,
        x0,
        r0,
        grids,
        tables,
        constants,
        m_r_defaulted,
        error_bound,
        timing,
    } = inputs;
    let n = instance.horizon();

    let root_index = grids.grid(0, x0).snap_down(r0);
    let root_value = match root_index {
        Some(ri) => tables.values.value(0, x0, ri),
        None => f64::INFINITY,
    };
    let root_decision = root_index.and_then(|ri| tables.policy.decision(0, x0, ri));
    let root = RootSummary {
        feasible: root_value.is_finite(),
        snapped_threshold: root_index.map(|ri| ReportValue(grids.grid(0, x0).point(ri))),
        value: ReportValue(root_value),
        action: root_decision.map(|d| instance.action_name(d.action).to_string()),
        threshold_updates: root_decision.map(|d| {
            d.thresholds
                .iter()
                .enumerate()
                .map(|(xp, &ti)| ThresholdUpdate {
                    state: instance.state_name(xp).to_string(),
                    threshold: ReportValue(grids.grid(1, xp).point(ti)),
                })
                .collect()
        }),
    };

    let mut grid_rows = Vec::new();
    for k in 0..=n {
        for x in 0..instance.num_states() {
            let g = grids.grid(k, x);
            grid_rows.push(GridSummary {
                stage: k,
                state: instance.state_name(x).to_string(),
                lower: ReportValue(g.lower),
                upper: ReportValue(g.upper),
                epsilon: ReportValue(g.epsilon),
                delta: ReportValue(g.delta),
                points: g.len(),
            });
        }
    }

    let values = (0..=n)
        .map(|k| StageValues {
            stage: k,
            per_state: (0..instance.num_states())
                .map(|x| StateValues {
                    state: instance.state_name(x).to_string(),
                    thresholds: grids
                        .grid(k, x)
                        .points
                        .iter()
                        .map(|&p| ReportValue(p))
                        .collect(),
                    values: tables.values.stage(k)[x]
                        .iter()
                        .map(|&v| ReportValue(v))
                        .collect(),
                })
                .collect(),
        })
        .collect();

    let policy = (0..n)
        .map(|k| StagePolicy {
            stage: k,
            per_state: (0..instance.num_states())
                .map(|x| StatePolicy {
                    state: instance.state_name(x).to_string(),
                    entries: (0..grids.grid(k, x).len())
                        .map(|ri| {
                            tables.policy.decision(k, x, ri).map(|d| PolicyEntry {
                                action: instance.action_name(d.action).to_string(),
                                threshold_updates: d
                                    .thresholds
                                    .iter()
                                    .enumerate()
                                    .map(|(xp, &ti)| ThresholdUpdate {
                                        state: instance.state_name(xp).to_string(),
                                        threshold: ReportValue(
                                            grids.grid(k + 1, xp).point(ti),
                                        ),
                                    })
                                    .collect(),
                            })
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();

    SolveReport {
        instance_digest: digest,
        engine: engine.to_string(),
        grid_regions,
        epsilon_override,
        x0: instance.state_name(x0).to_string(),
        r0: ReportValue(r0),
        root,
        constants: ConstantsSection {
            m_c: ReportValue(constants.m_c),
            m_d: ReportValue(constants.m_d),
            m_q: ReportValue(constants.m_q),
            m_r: ReportValue(constants.m_r),
            m_r_note: m_r_defaulted.then(|| {
                "m_r defaulted to 1 - 1e-6; supply --mr from problem-specific analysis \
                 for a meaningful bound"
                    .to_string()
            }),
            c_max: ReportValue(constants.c_max),
            m_v: constants.m_v.iter().map(|&v| ReportValue(v)).collect(),
        },
        error_bound: ErrorBoundSection {
            delta: ReportValue(error_bound.delta),
            per_stage: error_bound
                .per_stage
                .iter()
                .map(|&v| ReportValue(v))
                .collect(),
            total: ReportValue(error_bound.total),
            closed_form: error_bound
                .closed_form_valid
                .then_some(ReportValue(error_bound.closed_form)),
            closed_form_valid: error_bound.closed_form_valid,
        },
        grids: grid_rows,
        values,
        policy,
        timing,
    }
}
