use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::media::MismatchPolicy;
use crate::nat::NatType;
use crate::sip::TransportAddress;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Persistent-connection registrar plus the proxy's media relay.
    #[default]
    Adapted,
    /// SDP forwarded untouched; clients send media straight at the addresses it names.
    #[serde(alias = "naive-direct")]
    Naive,
    /// Adapted flow, plus accounting of the allocation exchanges a relay-server
    /// deployment would have needed.
    #[serde(alias = "baseline-turn-count")]
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Adapted, Mode::Naive, Mode::Baseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Adapted => "adapted",
            Mode::Naive => "naive",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adapted" => Ok(Mode::Adapted),
            "naive" | "naive-direct" => Ok(Mode::Naive),
            "baseline" | "baseline-turn-count" => Ok(Mode::Baseline),
            other => Err(SimError::InvalidScenario(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signaling {
    #[default]
    Tcp,
    Udp,
}

/// What address a client writes into its SDP when the proxy leaves SDP alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NaiveSdp {
    /// The client's own private address.
    #[default]
    Private,
    /// The public mapping the client's NAT gave a probe sent to a reflector.
    Mapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    MediaOk,
    MediaBlocked,
    SignalingBlocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraClient {
    pub name: String,
    pub nat: NatType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Action {
    /// Registers `client`, or every client when omitted.
    Register {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<String>,
    },
    Call {
        from: String,
        to: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        #[serde(default = "yes")]
        answer: bool,
    },
    /// Both parties of `call` (or of every established call) send `packets` RTP packets.
    Talk {
        packets: u32,
        #[serde(default = "default_interval")]
        interval_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        call: Option<String>,
    },
    Idle {
        secs: u64,
    },
    Hangup {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        call: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        by: Option<String>,
    },
}

fn yes() -> bool {
    true
}

fn default_interval() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    /// Absolute virtual time; defaults to when the previous event finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<u64>,
    #[serde(flatten)]
    pub action: Action,
}

impl From<Action> for ScriptEvent {
    fn from(action: Action) -> Self {
        ScriptEvent { at_ms: None, action }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub nat_a: NatType,
    pub nat_b: NatType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_clients: Vec<ExtraClient>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub signaling: Signaling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub udp_binding_ttl_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp_idle_ttl_secs: Option<u64>,
    /// Period of CRLF keepalives clients send to the proxy over UDP signaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keepalive_secs: Option<u64>,
    #[serde(default)]
    pub naive_sdp: NaiveSdp,
    #[serde(default)]
    pub mismatch_policy: MismatchPolicy,
    /// Fault injection: the relay sends from the source leg's port instead of the
    /// destination leg's.
    #[serde(default)]
    pub forward_from_wrong_port: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Outcome>,
    pub script: Vec<ScriptEvent>,
}

impl Scenario {
    /// The two-client call every example builds on: register, call, talk, hang up.
    pub fn basic_call(nat_a: NatType, nat_b: NatType, packets: u32) -> Self {
        Scenario {
            nat_a,
            nat_b,
            extra_clients: Vec::new(),
            seed: 0,
            mode: Mode::Adapted,
            signaling: Signaling::Tcp,
            udp_binding_ttl_secs: None,
            tcp_idle_ttl_secs: None,
            keepalive_secs: None,
            naive_sdp: NaiveSdp::Private,
            mismatch_policy: MismatchPolicy::Drop,
            forward_from_wrong_port: false,
            expect: None,
            script: vec![
                Action::Register { client: None }.into(),
                Action::Call { from: "A".into(), to: "B".into(), id: None, answer: true }.into(),
                Action::Talk { packets, interval_ms: 20, call: None }.into(),
                Action::Hangup { call: None, by: None }.into(),
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn client_names(&self) -> Vec<String> {
        let mut names = vec!["A".to_owned(), "B".to_owned()];
        names.extend(self.extra_clients.iter().map(|c| c.name.clone()));
        names
    }

    pub(crate) fn clients(&self) -> Vec<ClientSpec> {
        let mut out = vec![ClientSpec::a(self.nat_a), ClientSpec::b(self.nat_b)];
        for (i, c) in self.extra_clients.iter().enumerate() {
            out.push(ClientSpec::extra(i + 2, &c.name, c.nat));
        }
        out
    }

    /// Default call id for the `n`th call action (zero-based).
    pub fn call_id(n: usize, explicit: Option<&str>) -> String {
        explicit.map_or_else(|| format!("call-{}", n + 1), str::to_owned)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let names = self.client_names();
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != names.len() {
            return bad("client names must be unique".into());
        }
        if let Some(c) = names.iter().find(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric())) {
            return bad(format!("client name {c:?} must be non-empty ASCII alphanumerics"));
        }
        if names.len() > 200 {
            return bad("at most 200 clients".into());
        }
        if self.udp_binding_ttl_secs == Some(0) || self.tcp_idle_ttl_secs == Some(0) {
            return bad("TTL overrides must be positive".into());
        }
        if self.keepalive_secs == Some(0) {
            return bad("keepalive period must be positive".into());
        }
        let known = |n: &str| unique.contains(n);
        let mut calls = BTreeSet::new();
        let mut cursor = 0u64;
        for (i, ev) in self.script.iter().enumerate() {
            if let Some(at) = ev.at_ms {
                if at < cursor {
                    return bad(format!("event {i} at {at} ms precedes the previous event ({cursor} ms)"));
                }
                cursor = at;
            }
            match &ev.action {
                Action::Register { client } => {
                    if let Some(c) = client.as_deref().filter(|c| !known(c)) {
                        return bad(format!("event {i}: unknown client {c:?}"));
                    }
                }
                Action::Call { from, to, id, .. } => {
                    if !known(from) || !known(to) || from == to {
                        return bad(format!("event {i}: call needs two distinct known clients"));
                    }
                    let id = Scenario::call_id(calls.len(), id.as_deref());
                    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c.is_control()) {
                        return bad(format!("event {i}: bad call id {id:?}"));
                    }
                    if !calls.insert(id.clone()) {
                        return bad(format!("event {i}: duplicate call id {id:?}"));
                    }
                }
                Action::Talk { packets, interval_ms, call } => {
                    if *packets == 0 || *interval_ms == 0 || *packets > 1_000_000 {
                        return bad(format!("event {i}: talk needs 1..=1000000 packets and a positive interval"));
                    }
                    if let Some(c) = call.as_deref().filter(|c| !calls.contains(*c)) {
                        return bad(format!("event {i}: talk on unknown call {c:?}"));
                    }
                    cursor = cursor.saturating_add(u64::from(*packets) * interval_ms);
                }
                Action::Idle { secs } => cursor = cursor.saturating_add(secs.saturating_mul(1000)),
                Action::Hangup { call, by } => {
                    if let Some(c) = call.as_deref().filter(|c| !calls.contains(*c)) {
                        return bad(format!("event {i}: hangup of unknown call {c:?}"));
                    }
                    if let Some(b) = by.as_deref().filter(|b| !known(b)) {
                        return bad(format!("event {i}: unknown client {b:?}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fixed addressing for one simulated user agent and its NAT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ClientSpec {
    pub name: String,
    pub user: String,
    pub domain: String,
    pub private_ip: Ipv4Addr,
    pub public_ip: Ipv4Addr,
    pub sip_port: u16,
    pub media_port: u16,
    pub nat: NatType,
}

impl ClientSpec {
    fn a(nat: NatType) -> Self {
        ClientSpec {
            name: "A".into(),
            user: "ClientA".into(),
            domain: "local1.com".into(),
            private_ip: Ipv4Addr::new(192, 168, 1, 11),
            public_ip: Ipv4Addr::new(68, 92, 25, 44),
            sip_port: 5600,
            media_port: 49570,
            nat,
        }
    }

    fn b(nat: NatType) -> Self {
        ClientSpec {
            name: "B".into(),
            user: "ClientB".into(),
            domain: "local2.com".into(),
            private_ip: Ipv4Addr::new(10, 0, 0, 4),
            public_ip: Ipv4Addr::new(83, 12, 40, 7),
            sip_port: 5600,
            media_port: 6580,
            nat,
        }
    }

    fn extra(i: usize, name: &str, nat: NatType) -> Self {
        ClientSpec {
            name: name.into(),
            user: format!("Client{name}"),
            domain: format!("local{}.com", i + 1),
            private_ip: Ipv4Addr::new(172, 16, i as u8, 10),
            public_ip: Ipv4Addr::new(198, 51, 100, i as u8),
            sip_port: 5600,
            media_port: 30000,
            nat,
        }
    }

    pub fn aor(&self) -> String {
        format!("sip:{}@{}", self.user, self.domain)
    }

    pub fn sip_addr(&self) -> TransportAddress {
        TransportAddress::new(self.private_ip, self.sip_port).expect("fixed port")
    }

    pub fn rtp_addr(&self) -> TransportAddress {
        TransportAddress::new(self.private_ip, self.media_port).expect("fixed port")
    }

    pub fn rtcp_addr(&self) -> TransportAddress {
        self.rtp_addr().with_port(self.media_port + 1).expect("fixed port")
    }
}
