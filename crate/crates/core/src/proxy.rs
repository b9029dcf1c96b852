//! SIP proxy/registrar tying the connection manager and the media controller into a
//! call flow: REGISTER, INVITE with offer rewrite, 200 OK with answer rewrite, ACK,
//! and BYE with media release.
//!
//! The proxy is transport-agnostic: callers hand it framed messages tagged with the
//! connection they arrived on and get back `(connection, bytes)` pairs to send.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::connection::{aor_key, ConnectionId, ConnectionManager, RegistrationError, DEFAULT_REGISTRATION_TTL};
use crate::media::{MediaController, MediaDecision, MediaError, MismatchPolicy};
use crate::sdp::{parse_sdp, serialize_sdp};
use crate::sip::{
    parse_message, serialize_message, stamp_received, uri_of, Method, SipMessage, SipUri, TransportAddress,
};
use crate::time::SimTime;

pub const DEFAULT_SIP_PORT: u16 = 5060;
pub const DEFAULT_INVITE_TIMEOUT: Duration = Duration::from_secs(32);
const TERMINATED_RETENTION: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyConfig {
    pub public_ip: Ipv4Addr,
    pub sip_tcp_port: u16,
    pub media_port_range: (u16, u16),
    pub registration_ttl: Duration,
    pub invite_timeout: Duration,
    /// With `false` the proxy forwards SDP untouched and relays no media.
    pub relay_media: bool,
    pub mismatch_policy: MismatchPolicy,
}

impl ProxyConfig {
    pub fn new(public_ip: Ipv4Addr) -> Self {
        ProxyConfig {
            public_ip,
            sip_tcp_port: DEFAULT_SIP_PORT,
            media_port_range: (40000, 40999),
            registration_ttl: DEFAULT_REGISTRATION_TTL,
            invite_timeout: DEFAULT_INVITE_TIMEOUT,
            relay_media: true,
            mismatch_policy: MismatchPolicy::Drop,
        }
    }

    pub fn sip_address(&self) -> TransportAddress {
        TransportAddress::new(self.public_ip, self.sip_tcp_port).expect("validated port")
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        let (lo, hi) = self.media_port_range;
        if self.sip_tcp_port == 0 {
            return Err(ProxyError::InvalidConfig("SIP port 0".into()));
        }
        if (lo..=hi).contains(&self.sip_tcp_port) {
            return Err(ProxyError::InvalidConfig(format!(
                "media range {lo}..={hi} contains the SIP port {}",
                self.sip_tcp_port
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProxyError {
    #[error("invalid proxy configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Media(#[from] MediaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallPhase {
    Idle,
    Inviting,
    Established,
    Terminated,
}

#[derive(Debug, Clone)]
pub struct CallState {
    pub call_id: String,
    pub caller_aor: String,
    pub callee_aor: String,
    pub phase: CallPhase,
    /// Every phase the call has been in, starting with `Idle`.
    pub history: Vec<CallPhase>,
    pub caller_conn: ConnectionId,
    pub has_media: bool,
    answered: bool,
    invite: SipMessage,
    started_at: SimTime,
    ended_at: Option<SimTime>,
}

impl CallState {
    fn enter(&mut self, phase: CallPhase, now: SimTime) {
        debug_assert!(matches!(
            (self.phase, phase),
            (CallPhase::Idle, CallPhase::Inviting)
                | (CallPhase::Inviting, CallPhase::Established)
                | (CallPhase::Inviting | CallPhase::Established, CallPhase::Terminated)
        ));
        self.phase = phase;
        self.history.push(phase);
        if phase == CallPhase::Terminated {
            self.ended_at = Some(now);
        }
    }
}

/// A message for the transport layer to write onto `conn`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub conn: ConnectionId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickAction {
    RegistrationExpired(String),
    /// An unanswered INVITE hit the guard timer; `response` is the 408 for the caller.
    InviteTimedOut {
        call_id: String,
        response: Option<Outbound>,
    },
}

type TransactionKey = (String, u32, Method);

#[derive(Debug)]
pub struct Proxy {
    config: ProxyConfig,
    connections: ConnectionManager,
    media: MediaController,
    calls: BTreeMap<String, CallState>,
    /// Forwarded requests awaiting a final response, keyed by (Call-ID, CSeq).
    pending: BTreeMap<TransactionKey, ConnectionId>,
}

impl Proxy {
    pub fn new(config: ProxyConfig) -> Result<Self, ProxyError> {
        config.validate()?;
        let media = MediaController::new(config.public_ip, config.media_port_range)?
            .with_policy(config.mismatch_policy);
        Ok(Proxy {
            connections: ConnectionManager::new(config.registration_ttl),
            media,
            calls: BTreeMap::new(),
            pending: BTreeMap::new(),
            config,
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn connections(&self) -> &ConnectionManager {
        &self.connections
    }

    pub fn media(&self) -> &MediaController {
        &self.media
    }

    pub fn call(&self, call_id: &str) -> Option<&CallState> {
        self.calls.get(call_id)
    }

    pub fn calls(&self) -> impl Iterator<Item = &CallState> {
        self.calls.values()
    }

    /// Registers a new signaling connection from `remote`.
    pub fn accept(&mut self, remote: TransportAddress) -> ConnectionId {
        let id = self.connections.open(remote);
        debug!(%id, %remote, "connection accepted");
        id
    }

    pub fn close(&mut self, conn: ConnectionId) -> Vec<String> {
        let gone = self.connections.on_connection_closed(conn);
        if !gone.is_empty() {
            info!(%conn, ?gone, "registrations dropped with connection");
        }
        gone
    }

    pub fn handle_media(
        &mut self,
        relay_port: u16,
        src: TransportAddress,
        datagram: &[u8],
        now: SimTime,
    ) -> MediaDecision {
        self.media.on_media_packet(relay_port, src, datagram, now)
    }

    /// Processes one framed SIP message that arrived on `conn`.
    pub fn handle_message(&mut self, conn: ConnectionId, raw: &[u8], now: SimTime) -> Vec<Outbound> {
        let Some(source) = self.connections.remote_of(conn) else {
            warn!(%conn, "message on unknown connection");
            return Vec::new();
        };
        let msg = match parse_message(raw) {
            Ok(m) => m,
            Err(e) => {
                warn!(%conn, error = %e, "unparseable message");
                return bad_request(raw, &e.to_string())
                    .map(|bytes| vec![Outbound { conn, bytes }])
                    .unwrap_or_default();
            }
        };
        if !msg.is_request() {
            return self.handle_response(msg, now);
        }
        let msg = stamp_received(msg, source);
        match msg.method().expect("requests have a method") {
            Method::Register => self.handle_register(conn, msg, now),
            Method::Invite => self.handle_invite(conn, msg, now),
            Method::Ack => self.handle_ack(conn, msg, now),
            Method::Bye => self.handle_bye(conn, msg, now),
        }
    }

    fn reply(&self, conn: ConnectionId, req: &SipMessage, code: u16, reason: &str) -> Vec<Outbound> {
        self.send(conn, &SipMessage::response_to(req, code, reason))
    }

    fn send(&self, conn: ConnectionId, msg: &SipMessage) -> Vec<Outbound> {
        match serialize_message(msg) {
            Ok(bytes) => vec![Outbound { conn, bytes }],
            Err(e) => {
                warn!(error = %e, "dropping unserializable message");
                Vec::new()
            }
        }
    }

    fn handle_register(&mut self, conn: ConnectionId, msg: SipMessage, now: SimTime) -> Vec<Outbound> {
        match self.connections.register(conn, &msg, now) {
            Ok(reg) => {
                info!(aor = %reg.aor, %conn, source = %reg.source, "registered");
                let mut ok = SipMessage::response_to(&msg, 200, "OK");
                ok.contact = msg.contact.clone();
                self.send(conn, &ok)
            }
            Err(RegistrationError::MalformedRegister(what)) => {
                self.reply(conn, &msg, 400, &format!("Missing {what}"))
            }
            Err(RegistrationError::UnknownConnection(_)) => Vec::new(),
        }
    }

    fn handle_invite(&mut self, conn: ConnectionId, mut msg: SipMessage, now: SimTime) -> Vec<Outbound> {
        if self.calls.get(&msg.call_id).is_some_and(|c| c.phase != CallPhase::Terminated) {
            return self.reply(conn, &msg, 400, "Re-INVITE Not Supported");
        }
        let (Some(callee), Some(caller)) = (msg.request_uri().and_then(SipUri::parse), msg.from_uri()) else {
            return self.reply(conn, &msg, 400, "Bad Request-URI");
        };
        let callee_aor = aor_key(&callee);
        let target = match self.connections.route_to(&callee_aor) {
            Ok(t) => t,
            Err(e) => {
                info!(error = %e, "INVITE not routable");
                return self.reply(conn, &msg, 404, "Not Found");
            }
        };

        let has_media = self.config.relay_media;
        if has_media {
            let offer = match msg.is_sdp().then(|| parse_sdp(&msg.body)) {
                Some(Ok(sdp)) => sdp,
                _ => return self.reply(conn, &msg, 488, "Not Acceptable Here"),
            };
            match self.media.allocate_session(&msg.call_id) {
                Ok(_) => {}
                Err(MediaError::PoolExhausted) => {
                    warn!(call_id = %msg.call_id, "media pool exhausted");
                    return self.reply(conn, &msg, 503, "Service Unavailable");
                }
                Err(e) => {
                    warn!(error = %e, "media allocation failed");
                    return self.reply(conn, &msg, 500, "Server Internal Error");
                }
            }
            let rewritten = self
                .media
                .process_offer(&msg.call_id, &offer)
                .and_then(|sdp| serialize_sdp(&sdp).map_err(MediaError::from));
            match rewritten {
                Ok(body) => msg.body = body,
                Err(e) => {
                    warn!(error = %e, "offer rewrite failed");
                    let _ = self.media.release_session(&msg.call_id);
                    return self.reply(conn, &msg, 488, "Not Acceptable Here");
                }
            }
        }

        let mut call = CallState {
            call_id: msg.call_id.clone(),
            caller_aor: aor_key(&caller),
            callee_aor,
            phase: CallPhase::Idle,
            history: vec![CallPhase::Idle],
            caller_conn: conn,
            has_media,
            answered: false,
            invite: msg.clone(),
            started_at: now,
            ended_at: None,
        };
        call.enter(CallPhase::Inviting, now);
        info!(call_id = %call.call_id, caller = %call.caller_aor, callee = %call.callee_aor, "inviting");
        self.calls.insert(call.call_id.clone(), call);
        self.pending
            .insert((msg.call_id.clone(), msg.cseq.seq, Method::Invite), conn);
        self.send(target, &msg)
    }

    /// Connection of the other party in the dialog, seen from the sender of `msg`.
    fn peer_conn(&mut self, call_id: &str, msg: &SipMessage) -> Option<ConnectionId> {
        let call = self.calls.get(call_id)?;
        let sender = msg.from_uri().map(|u| aor_key(&u));
        let (peer_aor, fallback) = if sender.as_deref() == Some(call.callee_aor.as_str()) {
            (call.caller_aor.clone(), Some(call.caller_conn))
        } else {
            (call.callee_aor.clone(), None)
        };
        match self.connections.route_to(&peer_aor) {
            Ok(c) => Some(c),
            Err(_) => fallback.filter(|c| self.connections.is_live(*c)),
        }
    }

    fn handle_ack(&mut self, _conn: ConnectionId, msg: SipMessage, now: SimTime) -> Vec<Outbound> {
        let Some(call) = self.calls.get(&msg.call_id) else {
            debug!(call_id = %msg.call_id, "ACK for unknown call");
            return Vec::new();
        };
        if call.phase == CallPhase::Terminated {
            // ACK for a failure response; nothing to forward.
            return Vec::new();
        }
        let Some(target) = self.peer_conn(&msg.call_id, &msg) else {
            return Vec::new();
        };
        let call = self.calls.get_mut(&msg.call_id).expect("checked above");
        if call.phase == CallPhase::Inviting && call.answered {
            call.enter(CallPhase::Established, now);
            info!(call_id = %msg.call_id, "established");
        }
        self.send(target, &msg)
    }

    fn terminate(&mut self, call_id: &str, now: SimTime) {
        if let Some(call) = self.calls.get_mut(call_id) {
            if call.phase != CallPhase::Terminated {
                call.enter(CallPhase::Terminated, now);
                if call.has_media {
                    if let Err(e) = self.media.release_session(call_id) {
                        warn!(error = %e, "release failed");
                    }
                }
                info!(%call_id, "terminated");
            }
        }
    }

    fn handle_bye(&mut self, conn: ConnectionId, msg: SipMessage, now: SimTime) -> Vec<Outbound> {
        if !self.calls.get(&msg.call_id).is_some_and(|c| c.phase != CallPhase::Terminated) {
            return self.reply(conn, &msg, 481, "Call/Transaction Does Not Exist");
        }
        let Some(target) = self.peer_conn(&msg.call_id, &msg) else {
            self.terminate(&msg.call_id, now);
            return self.reply(conn, &msg, 404, "Not Found");
        };
        self.terminate(&msg.call_id, now);
        self.pending.insert((msg.call_id.clone(), msg.cseq.seq, Method::Bye), conn);
        self.send(target, &msg)
    }

    fn handle_response(&mut self, mut msg: SipMessage, now: SimTime) -> Vec<Outbound> {
        let code = msg.status().expect("responses have a status");
        let key = (msg.call_id.clone(), msg.cseq.seq, msg.cseq.method);
        let Some(&origin) = self.pending.get(&key) else {
            debug!(call_id = %msg.call_id, code, "response matches no pending request");
            return Vec::new();
        };
        if code >= 200 {
            self.pending.remove(&key);
        }
        if msg.cseq.method == Method::Invite {
            if code >= 300 {
                self.terminate(&msg.call_id, now);
            } else {
                let relay = self.calls.get(&msg.call_id).is_some_and(|c| c.has_media);
                if relay && !msg.body.is_empty() {
                    let rewritten = match msg.is_sdp().then(|| parse_sdp(&msg.body)) {
                        Some(Ok(sdp)) => self
                            .media
                            .process_answer(&msg.call_id, &sdp)
                            .and_then(|s| serialize_sdp(&s).map_err(MediaError::from)),
                        Some(Err(e)) => Err(MediaError::SdpRewrite(e)),
                        None => Err(MediaError::UnknownCall(msg.call_id.clone())),
                    };
                    match rewritten {
                        Ok(body) => msg.body = body,
                        Err(e) => {
                            warn!(error = %e, "answer rewrite failed");
                            let invite = self.calls[&msg.call_id].invite.clone();
                            self.terminate(&msg.call_id, now);
                            return self.reply(origin, &invite, 488, "Not Acceptable Here");
                        }
                    }
                }
                if code >= 200 {
                    if let Some(call) = self.calls.get_mut(&msg.call_id) {
                        call.answered = true;
                    }
                }
            }
        }
        self.send(origin, &msg)
    }

    /// Advances timers: registration expiry and the unanswered-INVITE guard.
    pub fn tick(&mut self, now: SimTime) -> Vec<TickAction> {
        let mut actions: Vec<TickAction> = self
            .connections
            .expire(now)
            .into_iter()
            .map(TickAction::RegistrationExpired)
            .collect();

        let timeout = self.config.invite_timeout;
        let stale: Vec<String> = self
            .calls
            .values()
            .filter(|c| c.phase == CallPhase::Inviting && !c.answered && now.since(c.started_at) >= timeout)
            .map(|c| c.call_id.clone())
            .collect();
        for call_id in stale {
            let call = &self.calls[&call_id];
            let (conn, invite) = (call.caller_conn, call.invite.clone());
            self.pending.retain(|(id, _, _), _| *id != call_id);
            self.terminate(&call_id, now);
            let response = self
                .connections
                .is_live(conn)
                .then(|| self.reply(conn, &invite, 408, "Request Timeout").pop())
                .flatten();
            actions.push(TickAction::InviteTimedOut { call_id, response });
        }

        self.calls.retain(|_, c| {
            c.ended_at
                .is_none_or(|t| now.since(t) < TERMINATED_RETENTION)
        });
        actions
    }
}

/// Builds a 400 by copying whatever dialog headers the broken message carried.
fn bad_request(raw: &[u8], reason: &str) -> Option<Vec<u8>> {
    let text = String::from_utf8_lossy(raw);
    let head = text.split("\r\n\r\n").next().unwrap_or_default();
    let head = head.split("\n\n").next().unwrap_or_default();
    let first = head.lines().next().unwrap_or_default();
    if first.starts_with("SIP/2.0 ") {
        // Never answer a response.
        return None;
    }
    let mut out = String::from("SIP/2.0 400 Bad Request\r\n");
    for line in head.lines().skip(1) {
        let name = line.split(':').next().unwrap_or_default().trim().to_ascii_lowercase();
        if matches!(name.as_str(), "via" | "from" | "to" | "call-id" | "cseq") {
            out.push_str(line.trim_end());
            out.push_str("\r\n");
        }
    }
    let warning: String = reason.chars().filter(|c| !c.is_control() && *c != '"').collect();
    out.push_str(&format!("Warning: 399 proxy \"{warning}\"\r\nContent-Length: 0\r\n\r\n"));
    Some(out.into_bytes())
}

/// URI of a header value, lowercased into an address-of-record.
pub fn aor_of(header_value: &str) -> Option<String> {
    uri_of(header_value).map(|u| aor_key(&u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::parse_sdp;
    use crate::sip::{Transport, ViaHeader};

    const OFFER: &str = "v=0\r\no=ClientB 1 1 IN IP4 local2.com\r\ns=Session SDP\r\nc=IN IP4 10.0.0.4\r\nt=0 0\r\nm=audio 6580 RTP/AVP 0\r\na=rtpmap:0 PCMU/8000\r\n";
    const ANSWER: &str = "v=0\r\no=ClientA 2 2 IN IP4 local1.com\r\ns=Session SDP\r\nc=IN IP4 192.168.1.11\r\nt=0 0\r\nm=audio 49570 RTP/AVP 0\r\na=rtpmap:0 PCMU/8000\r\n";

    fn addr(s: &str) -> TransportAddress {
        s.parse().unwrap()
    }

    fn proxy(range: (u16, u16)) -> Proxy {
        let mut c = ProxyConfig::new(Ipv4Addr::new(200, 1, 1, 1));
        c.media_port_range = range;
        Proxy::new(c).unwrap()
    }

    fn register(user: &str, domain: &str, ip: &str) -> Vec<u8> {
        let uri = format!("<sip:{user}@{domain}>");
        let m = SipMessage::request(
            Method::Register,
            format!("sip:{domain}"),
            ViaHeader::new(Transport::Tcp, addr(&format!("{ip}:5600"))).with_branch("z9hG4bKr"),
            uri.clone(),
            uri,
            format!("reg-{user}"),
            1,
        )
        .with_contact(format!("<sip:{user}@{ip}:5600>"));
        serialize_message(&m).unwrap()
    }

    fn invite(call_id: &str) -> SipMessage {
        SipMessage::request(
            Method::Invite,
            "sip:ClientA@local1.com",
            ViaHeader::new(Transport::Tcp, addr("10.0.0.4:5600")).with_branch("z9hG4bKi"),
            "ClientB <sip:ClientB@local2.com>",
            "ClientA <sip:ClientA@local1.com>",
            call_id,
            1,
        )
        .with_contact("<sip:ClientB@10.0.0.4:5600>")
        .with_body("application/sdp", OFFER.as_bytes().to_vec())
    }

    fn status(out: &Outbound) -> u16 {
        parse_message(&out.bytes).unwrap().status().unwrap()
    }

    struct Ladder {
        p: Proxy,
        a: ConnectionId,
        b: ConnectionId,
    }

    fn registered(range: (u16, u16)) -> Ladder {
        let mut p = proxy(range);
        let a = p.accept(addr("68.92.25.44:4325"));
        let b = p.accept(addr("83.12.40.7:7000"));
        for (c, u, d, ip) in [(a, "ClientA", "local1.com", "192.168.1.11"), (b, "ClientB", "local2.com", "10.0.0.4")] {
            let out = p.handle_message(c, &register(u, d, ip), SimTime::ZERO);
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].conn, c);
            assert_eq!(status(&out[0]), 200);
        }
        Ladder { p, a, b }
    }

    #[test]
    fn register_reply_carries_received() {
        let Ladder { p, a, .. } = registered((40000, 40099));
        let reg = p.connections().registration("sip:ClientA@local1.com").unwrap();
        assert_eq!(reg.connection, a);
        assert_eq!(reg.source, addr("68.92.25.44:4325"));
    }

    #[test]
    fn full_ladder_through_proxy() {
        let Ladder { mut p, a, b } = registered((40000, 40099));
        let t = SimTime::from_secs(1);

        // B calls A.
        let out = p.handle_message(b, &serialize_message(&invite("call-1")).unwrap(), t);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].conn, a);
        let fwd = parse_message(&out[0].bytes).unwrap();
        assert_eq!(fwd.via.received, Some(addr("83.12.40.7:7000")));
        let offer = parse_sdp(&fwd.body).unwrap();
        assert_eq!(offer.media_address(), Some(addr("200.1.1.1:40002")));
        assert_eq!(p.call("call-1").unwrap().phase, CallPhase::Inviting);

        // A answers.
        let ok = SipMessage::response_to(&fwd, 200, "OK")
            .with_contact("<sip:ClientA@192.168.1.11:5600>")
            .with_body("application/sdp", ANSWER.as_bytes().to_vec());
        let out = p.handle_message(a, &serialize_message(&ok).unwrap(), t);
        assert_eq!(out[0].conn, b);
        let answer = parse_sdp(&parse_message(&out[0].bytes).unwrap().body).unwrap();
        assert_eq!(answer.media_address(), Some(addr("200.1.1.1:40000")));

        // B acknowledges.
        let mut ack = invite("call-1");
        ack.start = crate::sip::StartLine::Request { method: Method::Ack, uri: "sip:ClientA@192.168.1.11:5600".into() };
        ack.cseq.method = Method::Ack;
        ack.body.clear();
        ack.content_type = None;
        let out = p.handle_message(b, &serialize_message(&ack).unwrap(), t);
        assert_eq!(out[0].conn, a);
        assert_eq!(p.call("call-1").unwrap().phase, CallPhase::Established);

        // Media both ways.
        let d = p.handle_media(40002, addr("83.12.40.7:7002"), b"from-b", t);
        assert!(d.forwards.is_empty());
        let d = p.handle_media(40000, addr("68.92.25.44:4400"), b"from-a", t);
        assert_eq!(d.forwards.len(), 2);

        // A hangs up; BYE goes to B and B's 200 comes back to A.
        let mut bye = SipMessage::request(
            Method::Bye,
            "sip:ClientB@10.0.0.4:5600",
            ViaHeader::new(Transport::Tcp, addr("192.168.1.11:5600")).with_branch("z9hG4bKb"),
            "ClientA <sip:ClientA@local1.com>",
            "ClientB <sip:ClientB@local2.com>",
            "call-1",
            2,
        );
        bye.contact = None;
        let out = p.handle_message(a, &serialize_message(&bye).unwrap(), t);
        assert_eq!(out[0].conn, b);
        assert_eq!(p.media().pool().allocated_count(), 0);
        let fwd_bye = parse_message(&out[0].bytes).unwrap();
        let out = p.handle_message(b, &serialize_message(&SipMessage::response_to(&fwd_bye, 200, "OK")).unwrap(), t);
        assert_eq!(out[0].conn, a);
        assert_eq!(
            p.call("call-1").unwrap().history,
            [CallPhase::Idle, CallPhase::Inviting, CallPhase::Established, CallPhase::Terminated]
        );
    }

    #[test]
    fn invite_to_unregistered_gets_404() {
        let mut p = proxy((40000, 40099));
        let b = p.accept(addr("83.12.40.7:7000"));
        let out = p.handle_message(b, &serialize_message(&invite("c")).unwrap(), SimTime::ZERO);
        assert_eq!(out[0].conn, b);
        assert_eq!(status(&out[0]), 404);
        assert_eq!(p.media().pool().allocated_count(), 0);
    }

    #[test]
    fn invite_with_exhausted_pool_gets_503() {
        let Ladder { mut p, b, .. } = registered((40000, 40003));
        p.handle_message(b, &serialize_message(&invite("c1")).unwrap(), SimTime::ZERO);
        let before = p.media().pool().clone();
        let out = p.handle_message(b, &serialize_message(&invite("c2")).unwrap(), SimTime::ZERO);
        assert_eq!(status(&out[0]), 503);
        assert_eq!(*p.media().pool(), before);
        assert!(p.call("c2").is_none());
    }

    #[test]
    fn garbage_gets_400_and_responses_are_not_answered() {
        let Ladder { mut p, a, .. } = registered((40000, 40099));
        let raw = b"INVITE sip:ClientA@local1.com SIP/2.0\r\nCall-ID: x\r\nCSeq: 1 INVITE\r\nContent-Length: 0\r\n\r\n";
        let out = p.handle_message(a, raw, SimTime::ZERO);
        let text = String::from_utf8(out[0].bytes.clone()).unwrap();
        assert!(text.starts_with("SIP/2.0 400 Bad Request\r\n"));
        assert!(text.contains("Call-ID: x\r\n"));
        assert!(p.handle_message(a, b"SIP/2.0 200 OK\r\n\r\n", SimTime::ZERO).is_empty());
    }

    #[test]
    fn bye_for_unknown_call_gets_481() {
        let Ladder { mut p, a, .. } = registered((40000, 40099));
        let bye = SipMessage::request(
            Method::Bye,
            "sip:ClientB@local2.com",
            ViaHeader::new(Transport::Tcp, addr("192.168.1.11:5600")),
            "<sip:ClientA@local1.com>",
            "<sip:ClientB@local2.com>",
            "nope",
            2,
        );
        let out = p.handle_message(a, &serialize_message(&bye).unwrap(), SimTime::ZERO);
        assert_eq!(status(&out[0]), 481);
    }

    #[test]
    fn invite_without_sdp_is_rejected_and_frees_nothing() {
        let Ladder { mut p, b, .. } = registered((40000, 40099));
        let mut inv = invite("c");
        inv.body.clear();
        inv.content_type = None;
        let out = p.handle_message(b, &serialize_message(&inv).unwrap(), SimTime::ZERO);
        assert_eq!(status(&out[0]), 488);
        assert_eq!(p.media().pool().allocated_count(), 0);
    }

    #[test]
    fn unanswered_invite_times_out() {
        let Ladder { mut p, b, .. } = registered((40000, 40099));
        p.handle_message(b, &serialize_message(&invite("c")).unwrap(), SimTime::from_secs(1));
        assert!(p.tick(SimTime::from_secs(32)).is_empty());
        let actions = p.tick(SimTime::from_secs(33));
        let [TickAction::InviteTimedOut { call_id, response: Some(resp) }] = actions.as_slice() else {
            panic!("unexpected {actions:?}");
        };
        assert_eq!(call_id, "c");
        assert_eq!(resp.conn, b);
        assert_eq!(status(resp), 408);
        assert_eq!(p.media().pool().allocated_count(), 0);
        assert_eq!(p.call("c").unwrap().phase, CallPhase::Terminated);
    }

    #[test]
    fn registrations_expire_on_tick() {
        let Ladder { mut p, .. } = registered((40000, 40099));
        assert!(p.tick(SimTime::from_secs(10)).is_empty());
        let actions = p.tick(SimTime::from_secs(3600));
        assert_eq!(actions.len(), 2);
        assert!(actions.iter().all(|a| matches!(a, TickAction::RegistrationExpired(_))));
    }

    #[test]
    fn config_rejects_overlap() {
        let mut c = ProxyConfig::new(Ipv4Addr::new(200, 1, 1, 1));
        c.media_port_range = (5000, 6000);
        assert!(matches!(Proxy::new(c), Err(ProxyError::InvalidConfig(_))));
    }

    #[test]
    fn passthrough_mode_leaves_sdp_alone() {
        let mut c = ProxyConfig::new(Ipv4Addr::new(200, 1, 1, 1));
        c.relay_media = false;
        let mut p = Proxy::new(c).unwrap();
        let a = p.accept(addr("68.92.25.44:4325"));
        let b = p.accept(addr("83.12.40.7:7000"));
        p.handle_message(a, &register("ClientA", "local1.com", "192.168.1.11"), SimTime::ZERO);
        let out = p.handle_message(b, &serialize_message(&invite("c")).unwrap(), SimTime::ZERO);
        assert_eq!(parse_message(&out[0].bytes).unwrap().body, OFFER.as_bytes());
        assert_eq!(p.media().pool().allocated_count(), 0);
    }
}
