//! The recovery decision table.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub max_retries_per_step: u32,
    pub max_replans: u32,
    pub max_reclassifies: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { max_retries_per_step: 2, max_replans: 2, max_reclassifies: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    /// Retries already spent on the failing step in the current plan revision.
    pub attempts: u32,
    pub replans: u32,
    pub reclassifies: u32,
}

/// Where in the session the failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Classification,
    Planning,
    Execution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transient,
    Contract,
    Permanent,
    StructuredOutput,
    BackendUnavailable,
    BackendRejected,
    InvalidPlan,
    /// Invalid plan whose defects name an unknown or inactive capability.
    MissingCapability,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 8] = [
        ErrorClass::Transient,
        ErrorClass::Contract,
        ErrorClass::Permanent,
        ErrorClass::StructuredOutput,
        ErrorClass::BackendUnavailable,
        ErrorClass::BackendRejected,
        ErrorClass::InvalidPlan,
        ErrorClass::MissingCapability,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    Retry,
    Replan,
    Reclassify,
    Abort,
}

impl fmt::Display for RecoveryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecoveryKind::Retry => "retry",
            RecoveryKind::Replan => "replan",
            RecoveryKind::Reclassify => "reclassify",
            RecoveryKind::Abort => "abort",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryAction {
    pub kind: RecoveryKind,
    pub reason: String,
    pub originating_step: Option<u32>,
}

/// Pure decision function. Budgets are compared against counters that have
/// not yet been incremented for this failure.
pub fn decide(class: ErrorClass, phase: Phase, counters: Counters, budgets: Budgets) -> RecoveryKind {
    use ErrorClass::*;
    use RecoveryKind::*;
    let can_retry = counters.attempts < budgets.max_retries_per_step;
    let can_replan = counters.replans < budgets.max_replans;
    let can_reclassify = counters.reclassifies < budgets.max_reclassifies;
    let or_abort = |ok: bool, kind| if ok { kind } else { Abort };

    if class == BackendRejected {
        return Abort;
    }
    match phase {
        Phase::Execution => match class {
            Transient | StructuredOutput | BackendUnavailable => {
                if can_retry {
                    Retry
                } else {
                    or_abort(can_replan, Replan)
                }
            }
            Contract | InvalidPlan => or_abort(can_replan, Replan),
            MissingCapability => or_abort(can_reclassify, Reclassify),
            Permanent | BackendRejected => Abort,
        },
        Phase::Planning => match class {
            MissingCapability => or_abort(can_reclassify, Reclassify),
            InvalidPlan | StructuredOutput | BackendUnavailable | Transient | Contract => or_abort(can_replan, Replan),
            Permanent | BackendRejected => Abort,
        },
        Phase::Classification => match class {
            Permanent | BackendRejected => Abort,
            _ => or_abort(can_reclassify, Reclassify),
        },
    }
}

pub fn classify_error(
    class: ErrorClass,
    phase: Phase,
    detail: &str,
    step: Option<u32>,
    counters: Counters,
    budgets: Budgets,
) -> RecoveryAction {
    let kind = decide(class, phase, counters, budgets);
    let phase_name = match phase {
        Phase::Classification => "classification",
        Phase::Planning => "planning",
        Phase::Execution => "execution",
    };
    let class_name = serde_json::to_value(class).expect("enum serializes");
    let budget_note = match kind {
        RecoveryKind::Retry => format!(" (retry {}/{})", counters.attempts + 1, budgets.max_retries_per_step),
        RecoveryKind::Replan => format!(" (replan {}/{})", counters.replans + 1, budgets.max_replans),
        RecoveryKind::Reclassify => {
            format!(" (reclassify {}/{})", counters.reclassifies + 1, budgets.max_reclassifies)
        }
        RecoveryKind::Abort => String::new(),
    };
    RecoveryAction {
        kind,
        reason: format!("{} failure during {phase_name}: {detail}{budget_note}", class_name.as_str().unwrap_or("")),
        originating_step: step,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backoff {
    None,
    Exponential { base_ms: u64, cap_ms: u64 },
}

impl Backoff {
    pub const LIVE: Backoff = Backoff::Exponential { base_ms: 1_000, cap_ms: 30_000 };

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        match *self {
            Backoff::None => Duration::ZERO,
            Backoff::Exponential { base_ms, cap_ms } => {
                let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
                Duration::from_millis(base_ms.saturating_mul(factor).min(cap_ms))
            }
        }
    }
}
