//! Deterministic discrete-event simulation of scripted user agents behind NAT
//! boxes, talking to the proxy over a simulated internet.
//!
//! Delivery is instantaneous; everything one event triggers (a REGISTER and its
//! 200 OK, an RTP packet and the relay's forwards) is settled before the next
//! event runs. Events at the same virtual time run in insertion order.

mod engine;
pub mod report;
pub mod scenario;

use thiserror::Error;

use crate::nat::NatType;

pub use engine::{run_scenario, PROXY_IP, PROXY_MEDIA_RANGE, REFLECTOR};
pub use report::{count_savings, CallSummary, DirectionStats, Hop, HopDir, LogEvent, NatSummary, Report};
pub use scenario::{Action, ExtraClient, Mode, NaiveSdp, Outcome, Scenario, ScriptEvent, Signaling};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("reports come from different scripts")]
    ScriptMismatch,
}

/// One cell of the NAT-type matrix.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct MatrixCell {
    pub mode: Mode,
    pub nat_a: NatType,
    pub nat_b: NatType,
    pub outcome: Outcome,
    /// `None` when the outcome for this pairing is recorded but not asserted.
    pub expected: Option<Outcome>,
    pub delivered_ab: u64,
    pub delivered_ba: u64,
    pub sent_ab: u64,
    pub sent_ba: u64,
    pub pool_restored: bool,
}

impl MatrixCell {
    pub fn holds(&self) -> bool {
        self.expected.is_none_or(|e| e == self.outcome)
    }
}

/// Outcome a pairing must reach, when it is pinned at all.
pub fn expected_outcome(mode: Mode, nat_a: NatType, nat_b: NatType) -> Option<Outcome> {
    let strict = |t: NatType| matches!(t, NatType::Symmetric | NatType::PortRestrictedCone);
    match mode {
        Mode::Adapted | Mode::Baseline => Some(Outcome::MediaOk),
        Mode::Naive if strict(nat_a) && strict(nat_b) => Some(Outcome::MediaBlocked),
        Mode::Naive => None,
    }
}

/// Runs `template` once per NAT pairing for each mode, overriding its NAT types and mode.
pub fn run_matrix(template: &Scenario, modes: &[Mode]) -> Result<Vec<MatrixCell>, SimError> {
    let mut cells = Vec::new();
    for &mode in modes {
        for nat_a in NatType::ALL {
            for nat_b in NatType::ALL {
                let scenario = Scenario { nat_a, nat_b, mode, ..template.clone() };
                let r = run_scenario(&scenario)?;
                let stat = |f: &str, t: &str| r.direction(f, t).cloned().unwrap_or_default();
                let (ab, ba) = (stat("A", "B"), stat("B", "A"));
                cells.push(MatrixCell {
                    mode,
                    nat_a,
                    nat_b,
                    outcome: r.outcome,
                    expected: expected_outcome(mode, nat_a, nat_b),
                    delivered_ab: ab.delivered,
                    delivered_ba: ba.delivered,
                    sent_ab: ab.sent,
                    sent_ba: ba.sent,
                    pool_restored: r.pool_restored,
                });
            }
        }
    }
    Ok(cells)
}
