use serde::Serialize;

use crate::nat::{BlockReason, NatType};
use crate::sip::{Transport, TransportAddress};
use crate::time::SimTime;

use super::scenario::{Mode, Outcome, Signaling};
use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEvent {
    pub time: SimTime,
    pub actor: String,
    pub event: String,
    pub detail: String,
}

/// Media counters for one sender-to-receiver direction of one call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DirectionStats {
    pub call: String,
    pub from: String,
    pub to: String,
    pub sent: u64,
    /// Packets that reached the receiver with byte-identical payloads.
    pub delivered: u64,
    pub corrupted: u64,
    pub duplicates: u64,
    pub rtcp_sent: u64,
    pub rtcp_delivered: u64,
}

impl DirectionStats {
    pub fn complete(&self) -> bool {
        self.delivered == self.sent && self.corrupted == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallSummary {
    pub id: String,
    pub from: String,
    pub to: String,
    pub established: bool,
    /// Final status the caller saw for its INVITE, if any reached it.
    pub final_status: Option<u16>,
    pub hung_up: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HopDir {
    Out,
    In,
}

/// One NAT traversal decision, recorded so a test can re-judge it independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hop {
    pub time: SimTime,
    pub nat: String,
    pub dir: HopDir,
    pub transport: Transport,
    pub src: TransportAddress,
    pub dst: TransportAddress,
    /// Outbound: the public source the NAT assigned. Inbound: the private target.
    pub translated: Option<TransportAddress>,
    pub blocked: Option<BlockReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NatSummary {
    pub client: String,
    pub nat_type: NatType,
    pub public_ip: std::net::Ipv4Addr,
    pub udp_binding_ttl_ms: u64,
    pub tcp_idle_ttl_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub mode: Mode,
    pub seed: u64,
    pub signaling: Signaling,
    pub nats: Vec<NatSummary>,
    pub outcome: Outcome,
    pub directions: Vec<DirectionStats>,
    pub calls: Vec<CallSummary>,
    pub sip_messages: u64,
    pub allocation_transactions: u64,
    /// Whether the relay port pool ended exactly as it started.
    pub pool_restored: bool,
    pub ended_at: SimTime,
    /// Canonical JSON of the clients and script, used to pair reports.
    pub script_fingerprint: String,
    pub events: Vec<LogEvent>,
    pub hops: Vec<Hop>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn events_named<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a LogEvent> + 'a {
        self.events.iter().filter(move |e| e.event == event)
    }

    pub fn direction(&self, from: &str, to: &str) -> Option<&DirectionStats> {
        self.directions.iter().find(|d| d.from == from && d.to == to)
    }
}

/// Allocation exchanges the adapted run avoided relative to the baseline run of the
/// same script.
pub fn count_savings(adapted: &Report, baseline: &Report) -> Result<i64, SimError> {
    if adapted.script_fingerprint != baseline.script_fingerprint {
        return Err(SimError::ScriptMismatch);
    }
    Ok(baseline.allocation_transactions as i64 - adapted.allocation_transactions as i64)
}
