//! Helpers shared by the integration tests: fixtures, generators, and reference
//! models that re-derive expected behaviour without using the library's logic.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use proptest::prelude::*;

use siprelay::nat::NatType;
use siprelay::rtp::RtpPacket;
use siprelay::sdp::{parse_sdp, serialize_sdp, MediaDesc, MediaType, SdpSession};
use siprelay::sim::{Hop, HopDir, Report};
use siprelay::sip::{
    parse_message, serialize_message, CSeq, HostPort, Method, SipMessage, StartLine, Transport, TransportAddress,
    ViaHeader,
};

pub const INVITE: &[u8] = include_bytes!("../fixtures/invite.sip");
pub const OK: &[u8] = include_bytes!("../fixtures/ok.sip");
pub const INVITE_PRINTED: &[u8] = include_bytes!("../fixtures/invite_printed.sip");
pub const OK_PRINTED: &[u8] = include_bytes!("../fixtures/ok_printed.sip");

/// Canonical wire form: CRLF everywhere, SDP bodies re-emitted in canonical order.
pub fn canonicalize(raw: &[u8]) -> Vec<u8> {
    let mut msg = parse_message(raw).expect("fixture parses");
    if msg.is_sdp() {
        msg.body = serialize_sdp(&parse_sdp(&msg.body).expect("fixture SDP parses")).unwrap();
    }
    serialize_message(&msg).unwrap()
}

pub fn sdp_lines(body: &[u8]) -> Vec<String> {
    String::from_utf8(body.to_vec())
        .unwrap()
        .lines()
        .map(str::to_owned)
        .filter(|l| !l.trim().is_empty())
        .collect()
}

// ---- generators ----

fn token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9.!%*_+`'~-]{0,11}"
}

fn clean() -> impl Strategy<Value = String> {
    "[!-~]([ -~]{0,24}[!-~])?"
}

fn param_value() -> impl Strategy<Value = String> {
    "[!-~&&[^;,=]]{1,12}"
}

fn addr() -> impl Strategy<Value = TransportAddress> {
    (any::<u32>(), 1u16..).prop_map(|(ip, port)| TransportAddress::new(Ipv4Addr::from(ip), port).unwrap())
}

fn method() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

fn via() -> impl Strategy<Value = ViaHeader> {
    (
        prop::sample::select(vec![Transport::Udp, Transport::Tcp]),
        "[A-Za-z0-9][A-Za-z0-9._-]{0,14}",
        prop::option::of(1u16..),
        prop::option::of(param_value()),
        prop::option::of(addr()),
        prop::collection::vec(
            (token().prop_filter("reserved", |n| {
                !n.eq_ignore_ascii_case("branch") && !n.eq_ignore_ascii_case("received")
            }), prop::option::of(param_value())),
            0..3,
        ),
    )
        .prop_map(|(transport, host, port, branch, received, params)| ViaHeader {
            transport,
            sent_by: HostPort { host, port },
            branch,
            received,
            params,
        })
}

pub fn sip_message() -> impl Strategy<Value = SipMessage> {
    let start = prop_oneof![
        (method(), "(sip|SIP|Sip):[!-~]{1,26}").prop_map(|(m, uri)| (StartLine::Request { method: m, uri }, Some(m))),
        (100u16..=699, prop_oneof![Just(String::new()), clean()])
            .prop_map(|(code, reason)| (StartLine::Response { code, reason }, None)),
    ];
    (
        start,
        via(),
        (clean(), clean(), "[!-~]{1,30}"),
        (any::<u32>(), method()),
        (prop::option::of(clean()), prop::option::of(clean())),
        prop::collection::vec(("X-[A-Za-z0-9-]{1,10}", clean()), 0..3),
        prop::collection::vec(any::<u8>(), 0..200),
    )
        .prop_map(|((start, req_method), via, (from, to, call_id), (seq, m), (contact, content_type), extra, body)| {
            SipMessage {
                start,
                via,
                from,
                to,
                call_id,
                cseq: CSeq { seq, method: req_method.unwrap_or(m) },
                contact,
                content_type,
                extra_headers: extra,
                body,
            }
        })
}

pub fn sdp_session() -> impl Strategy<Value = SdpSession> {
    let media = (
        prop::sample::select(vec![MediaType::Audio, MediaType::Video]),
        1u16..,
        "[A-Za-z0-9/]{1,10}",
        prop::collection::vec(0u8..=127, 1..5),
    )
        .prop_map(|(media_type, port, proto, formats)| MediaDesc { media_type, port, proto, formats });
    (
        any::<u32>(),
        (clean(), clean(), clean()),
        any::<u32>(),
        prop::collection::vec(media, 1..3),
        prop::collection::vec(clean(), 0..4),
        prop::collection::vec(("[bdefghijklnpqruwxyz]", clean()).prop_map(|(k, v)| format!("{k}={v}")), 0..3),
    )
        .prop_map(|(version, (origin, session_name, timing), ip, media, attributes, other_lines)| SdpSession {
            version,
            origin,
            session_name,
            connection_ip: Ipv4Addr::from(ip),
            timing,
            media,
            attributes,
            other_lines,
        })
}

pub fn rtp_packet() -> impl Strategy<Value = RtpPacket> {
    (any::<bool>(), 0u8..=127, any::<u16>(), any::<u32>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..300))
        .prop_map(|(marker, payload_type, sequence, timestamp, ssrc, payload)| RtpPacket {
            version: 2,
            marker,
            payload_type,
            sequence,
            timestamp,
            ssrc,
            payload,
        })
}

/// Byte-level RTP encoder written straight from the header layout.
pub fn encode_rtp(p: &RtpPacket) -> Vec<u8> {
    let mut out = vec![0x80, (u8::from(p.marker) << 7) | p.payload_type];
    out.extend(p.sequence.to_be_bytes());
    out.extend(p.timestamp.to_be_bytes());
    out.extend(p.ssrc.to_be_bytes());
    out.extend(&p.payload);
    out
}

/// Fuzz inputs: raw noise plus fixtures with random byte edits and truncations.
pub fn fuzz_input() -> impl Strategy<Value = Vec<u8>> {
    let seeds = vec![INVITE.to_vec(), OK.to_vec(), INVITE_PRINTED.to_vec(), OK_PRINTED.to_vec()];
    let mutated = (
        prop::sample::select(seeds),
        prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..4), 1..12),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(mut buf, edits, cut)| {
            for (at, byte, op) in edits {
                if buf.is_empty() {
                    break;
                }
                let i = at.index(buf.len());
                match op {
                    0 => buf[i] = byte,
                    1 => buf.insert(i, byte),
                    2 => {
                        buf.remove(i);
                    }
                    _ => buf.insert(i, b"\r\n:;,= <>@"[usize::from(byte) % 10]),
                }
            }
            if !buf.is_empty() && cut.index(4) == 0 {
                let n = cut.index(buf.len());
                buf.truncate(n);
            }
            buf
        });
    prop_oneof![prop::collection::vec(any::<u8>(), 0..600), mutated]
}

// ---- NAT reference model ----

type OracleBinding = (Transport, TransportAddress, Option<TransportAddress>, BTreeSet<TransportAddress>, u64);

/// NAT written from the four filtering rules alone, used to re-judge recorded hops.
pub struct OracleNat {
    pub nat_type: NatType,
    pub udp_ttl_ms: u64,
    pub tcp_ttl_ms: Option<u64>,
    bindings: BTreeMap<u16, OracleBinding>,
}

impl OracleNat {
    pub fn new(nat_type: NatType, udp_ttl_ms: u64, tcp_ttl_ms: Option<u64>) -> Self {
        OracleNat { nat_type, udp_ttl_ms, tcp_ttl_ms, bindings: BTreeMap::new() }
    }

    fn alive(&self, transport: Transport, last: u64, now: u64) -> bool {
        let idle = now - last;
        match transport {
            Transport::Udp => idle < self.udp_ttl_ms,
            Transport::Tcp => self.tcp_ttl_ms.is_none_or(|t| idle < t),
        }
    }

    /// Accept rule for a UDP packet, given what the binding has sent to.
    pub fn accepts(nat_type: NatType, peers: &BTreeSet<TransportAddress>, key: Option<TransportAddress>, src: TransportAddress) -> bool {
        match nat_type {
            NatType::FullCone => !peers.is_empty(),
            NatType::RestrictedCone => peers.iter().any(|p| p.ip() == src.ip()),
            NatType::PortRestrictedCone => peers.contains(&src),
            NatType::Symmetric => key == Some(src),
        }
    }

    /// Checks one recorded hop against the model; returns a description on disagreement.
    pub fn check(&mut self, hop: &Hop) -> Result<(), String> {
        let now = hop.time.as_millis();
        let symmetric = self.nat_type == NatType::Symmetric;
        match hop.dir {
            HopDir::Out => {
                let ext = hop.translated.ok_or_else(|| format!("no mapping: {hop:?}"))?;
                let key_dst = symmetric.then_some(hop.dst);
                let existing = self
                    .bindings
                    .iter()
                    .find(|(_, b)| b.0 == hop.transport && b.1 == hop.src && b.2 == key_dst && self.alive(b.0, b.4, now))
                    .map(|(p, _)| *p);
                match existing {
                    Some(port) if port != ext.port() => return Err(format!("live mapping not reused: {hop:?}")),
                    Some(_) => {}
                    None => {
                        if let Some(b) = self.bindings.get(&ext.port()) {
                            if self.alive(b.0, b.4, now) {
                                return Err(format!("new mapping took a live port: {hop:?}"));
                            }
                        }
                        self.bindings.insert(ext.port(), (hop.transport, hop.src, key_dst, BTreeSet::new(), now));
                    }
                }
                let b = self.bindings.get_mut(&ext.port()).unwrap();
                b.3.insert(hop.dst);
                b.4 = now;
            }
            HopDir::In => {
                let verdict = match self.bindings.get(&hop.dst.port()) {
                    Some(b) if b.0 == hop.transport && self.alive(b.0, b.4, now) => {
                        let ok = match hop.transport {
                            Transport::Tcp => b.3.contains(&hop.src),
                            Transport::Udp => Self::accepts(self.nat_type, &b.3, b.2, hop.src),
                        };
                        ok.then_some(b.1)
                    }
                    _ => None,
                };
                if verdict != hop.translated {
                    return Err(format!("expected {verdict:?}: {hop:?}"));
                }
                if verdict.is_some() {
                    self.bindings.get_mut(&hop.dst.port()).unwrap().4 = now;
                }
            }
        }
        Ok(())
    }
}

/// Replays every hop of `report` through fresh reference NATs.
pub fn replay_hops(report: &Report) -> Result<usize, String> {
    let mut nats: BTreeMap<String, OracleNat> = report
        .nats
        .iter()
        .map(|n| (n.client.clone(), OracleNat::new(n.nat_type, n.udp_binding_ttl_ms, n.tcp_idle_ttl_ms)))
        .collect();
    for hop in &report.hops {
        nats.get_mut(&hop.nat).ok_or("unknown NAT")?.check(hop)?;
    }
    Ok(report.hops.len())
}
