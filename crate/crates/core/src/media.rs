//! Multimedia flow controller: UDP port pool on the proxy's public address, SDP
//! rewriting, address latching and RTP/RTCP relaying.
//!
//! Each call gets two even/odd port pairs, one per leg. A leg's client sends to its
//! own pair and receives from it, so every forwarded datagram leaves from the port
//! the destination client already talks to. That is what lets replies through
//! port-restricted and symmetric NATs.
//!
//! Public client addresses are learned from the first datagram on each relay port
//! (latching). SDP addresses are only recorded, never used for forwarding, since
//! they are usually private.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};

use crate::sdp::{rewrite_media, SdpError, SdpSession};
use crate::sip::TransportAddress;
use crate::time::SimTime;

pub const DEFAULT_BUFFER_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MediaError {
    #[error("media port range {0}..={1} holds no RTP/RTCP pair")]
    InvalidRange(u16, u16),
    #[error("media port pool exhausted")]
    PoolExhausted,
    #[error("call {0} already has a media session")]
    DuplicateCall(String),
    #[error("no media session for call {0}")]
    UnknownCall(String),
    #[error("cannot rewrite SDP: {0}")]
    SdpRewrite(#[from] SdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    /// Sent the offer (leg A).
    Caller,
    /// Sent the answer (leg B).
    Callee,
}

impl Leg {
    pub fn peer(self) -> Leg {
        match self {
            Leg::Caller => Leg::Callee,
            Leg::Callee => Leg::Caller,
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rtp,
    Rtcp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortOwner {
    pub call_id: String,
    pub leg: Leg,
    pub kind: StreamKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortPool {
    lo: u16,
    hi: u16,
    free: BTreeSet<u16>,
    allocated: BTreeMap<u16, PortOwner>,
}

impl PortPool {
    pub fn new(lo: u16, hi: u16) -> Result<Self, MediaError> {
        let first_even = lo.checked_add(lo % 2);
        if lo == 0 || hi < lo || first_even.and_then(|p| p.checked_add(1)).is_none_or(|p| p > hi) {
            return Err(MediaError::InvalidRange(lo, hi));
        }
        Ok(PortPool {
            lo,
            hi,
            free: (lo..=hi).collect(),
            allocated: BTreeMap::new(),
        })
    }

    pub fn range(&self) -> (u16, u16) {
        (self.lo, self.hi)
    }

    pub fn contains(&self, port: u16) -> bool {
        (self.lo..=self.hi).contains(&port)
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_count(&self) -> usize {
        self.allocated.len()
    }

    pub fn owner(&self, port: u16) -> Option<&PortOwner> {
        self.allocated.get(&port)
    }

    fn free_pairs(&self) -> impl Iterator<Item = u16> + '_ {
        self.free
            .iter()
            .copied()
            .filter(move |p| p % 2 == 0 && *p < self.hi && self.free.contains(&(p + 1)))
    }

    /// Reserves one RTP/RTCP pair for each leg, or nothing at all.
    fn allocate_call(&mut self, call_id: &str) -> Result<[u16; 2], MediaError> {
        let [a, b] = match self.free_pairs().take(2).collect::<Vec<_>>()[..] {
            [a, b] => [a, b],
            _ => return Err(MediaError::PoolExhausted),
        };
        for (rtp, leg) in [(a, Leg::Caller), (b, Leg::Callee)] {
            for (port, kind) in [(rtp, StreamKind::Rtp), (rtp + 1, StreamKind::Rtcp)] {
                self.free.remove(&port);
                self.allocated.insert(
                    port,
                    PortOwner {
                        call_id: call_id.to_owned(),
                        leg,
                        kind,
                    },
                );
            }
        }
        Ok([a, b])
    }

    fn release(&mut self, port: u16) -> bool {
        if self.allocated.remove(&port).is_some() {
            self.free.insert(port);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LegCounters {
    pub packets_in: u64,
    pub bytes_in: u64,
    /// Forwarded to the peer as soon as they arrived.
    pub forwarded: u64,
    /// Buffered while the peer was unknown, forwarded once it latched.
    pub flushed: u64,
    pub bytes_relayed: u64,
    pub dropped_mismatch: u64,
    pub dropped_overflow: u64,
    /// Still buffered when the session was released.
    pub dropped_unflushed: u64,
}

impl LegCounters {
    pub fn dropped(&self) -> u64 {
        self.dropped_mismatch + self.dropped_overflow + self.dropped_unflushed
    }

    pub fn relayed(&self) -> u64 {
        self.forwarded + self.flushed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegState {
    pub relay_rtp_port: u16,
    pub relay_rtcp_port: u16,
    /// Address from this leg's own SDP. Informational; usually private.
    pub declared: Option<TransportAddress>,
    pub latched_rtp: Option<TransportAddress>,
    pub latched_rtcp: Option<TransportAddress>,
    pub counters: LegCounters,
    pub last_packet_at: Option<SimTime>,
    pending: VecDeque<(StreamKind, Vec<u8>)>,
}

impl LegState {
    fn new(rtp: u16) -> Self {
        LegState {
            relay_rtp_port: rtp,
            relay_rtcp_port: rtp + 1,
            declared: None,
            latched_rtp: None,
            latched_rtcp: None,
            counters: LegCounters::default(),
            last_packet_at: None,
            pending: VecDeque::new(),
        }
    }

    pub fn latched(&self, kind: StreamKind) -> Option<TransportAddress> {
        match kind {
            StreamKind::Rtp => self.latched_rtp,
            StreamKind::Rtcp => self.latched_rtcp,
        }
    }

    fn latched_mut(&mut self, kind: StreamKind) -> &mut Option<TransportAddress> {
        match kind {
            StreamKind::Rtp => &mut self.latched_rtp,
            StreamKind::Rtcp => &mut self.latched_rtcp,
        }
    }

    pub fn relay_port(&self, kind: StreamKind) -> u16 {
        match kind {
            StreamKind::Rtp => self.relay_rtp_port,
            StreamKind::Rtcp => self.relay_rtcp_port,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    Allocated,
    HalfLatched,
    Relaying,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaSession {
    pub call_id: String,
    legs: [LegState; 2],
    pub state: SessionState,
}

impl MediaSession {
    pub fn leg(&self, leg: Leg) -> &LegState {
        &self.legs[leg.idx()]
    }

    fn leg_mut(&mut self, leg: Leg) -> &mut LegState {
        &mut self.legs[leg.idx()]
    }

    fn update_state(&mut self) {
        let latched = self.legs.iter().filter(|l| l.latched_rtp.is_some()).count();
        self.state = match latched {
            0 => SessionState::Allocated,
            1 => SessionState::HalfLatched,
            _ => SessionState::Relaying,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forward {
    /// Proxy port to send from: the destination leg's own relay port.
    pub from_port: u16,
    pub to: TransportAddress,
    pub datagram: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    UnknownPort,
    SourceMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Forwarded,
    Buffered,
    Dropped(DropReason),
}

/// What happened to one datagram, plus every datagram that must now go out. A
/// packet that completes latching can release the peer's buffered packets too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaDecision {
    pub disposition: Disposition,
    pub forwards: Vec<Forward>,
}

impl MediaDecision {
    fn drop(reason: DropReason) -> Self {
        MediaDecision {
            disposition: Disposition::Dropped(reason),
            forwards: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchPolicy {
    /// Keep the first latched source and drop the rest.
    #[default]
    Drop,
    /// Move the latch to the new source.
    Relatch,
}

#[derive(Debug)]
pub struct MediaController {
    public_ip: Ipv4Addr,
    pool: PortPool,
    sessions: BTreeMap<String, MediaSession>,
    released: Vec<MediaSession>,
    policy: MismatchPolicy,
    buffer_cap: usize,
}

impl MediaController {
    pub fn new(public_ip: Ipv4Addr, port_range: (u16, u16)) -> Result<Self, MediaError> {
        Ok(MediaController {
            public_ip,
            pool: PortPool::new(port_range.0, port_range.1)?,
            sessions: BTreeMap::new(),
            released: Vec::new(),
            policy: MismatchPolicy::Drop,
            buffer_cap: DEFAULT_BUFFER_CAP,
        })
    }

    pub fn with_policy(mut self, policy: MismatchPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_buffer_cap(mut self, cap: usize) -> Self {
        self.buffer_cap = cap;
        self
    }

    pub fn public_ip(&self) -> Ipv4Addr {
        self.public_ip
    }

    pub fn pool(&self) -> &PortPool {
        &self.pool
    }

    pub fn session(&self, call_id: &str) -> Option<&MediaSession> {
        self.sessions.get(call_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &MediaSession> {
        self.sessions.values()
    }

    /// Sessions already released, oldest first, with their final counters.
    pub fn released_sessions(&self) -> &[MediaSession] {
        &self.released
    }

    fn relay_addr(&self, port: u16) -> TransportAddress {
        TransportAddress::new(self.public_ip, port).expect("pool ports are non-zero")
    }

    /// Reserves relay ports for a call. No client is involved.
    pub fn allocate_session(&mut self, call_id: &str) -> Result<&MediaSession, MediaError> {
        if self.sessions.contains_key(call_id) {
            return Err(MediaError::DuplicateCall(call_id.to_owned()));
        }
        let [a, b] = self.pool.allocate_call(call_id)?;
        let session = MediaSession {
            call_id: call_id.to_owned(),
            legs: [LegState::new(a), LegState::new(b)],
            state: SessionState::Allocated,
        };
        Ok(self.sessions.entry(call_id.to_owned()).or_insert(session))
    }

    fn rewrite_for(&mut self, call_id: &str, sdp: &SdpSession, sender: Leg) -> Result<SdpSession, MediaError> {
        let session = self
            .sessions
            .get(call_id)
            .ok_or_else(|| MediaError::UnknownCall(call_id.to_owned()))?;
        // The receiver of this SDP will send to its own relay port.
        let relay = self.relay_addr(session.leg(sender.peer()).relay_rtp_port);
        let (rewritten, declared) = rewrite_media(sdp, relay)?;
        self.sessions
            .get_mut(call_id)
            .expect("looked up above")
            .leg_mut(sender)
            .declared = Some(declared);
        Ok(rewritten)
    }

    /// Rewrites the caller's offer so the callee sends to the callee-facing relay port.
    pub fn process_offer(&mut self, call_id: &str, sdp: &SdpSession) -> Result<SdpSession, MediaError> {
        self.rewrite_for(call_id, sdp, Leg::Caller)
    }

    /// Rewrites the callee's answer so the caller sends to the caller-facing relay port.
    pub fn process_answer(&mut self, call_id: &str, sdp: &SdpSession) -> Result<SdpSession, MediaError> {
        self.rewrite_for(call_id, sdp, Leg::Callee)
    }

    pub fn on_media_packet(
        &mut self,
        relay_port: u16,
        src: TransportAddress,
        datagram: &[u8],
        now: SimTime,
    ) -> MediaDecision {
        let Some(owner) = self.pool.owner(relay_port).cloned() else {
            debug!(relay_port, %src, "datagram on unallocated port");
            return MediaDecision::drop(DropReason::UnknownPort);
        };
        let Some(session) = self.sessions.get_mut(&owner.call_id) else {
            return MediaDecision::drop(DropReason::UnknownPort);
        };
        let (leg, kind) = (owner.leg, owner.kind);
        let policy = self.policy;
        let cap = self.buffer_cap;

        let this = session.leg_mut(leg);
        this.counters.packets_in += 1;
        this.counters.bytes_in += datagram.len() as u64;
        this.last_packet_at = Some(now);

        let mut newly_latched = false;
        match this.latched(kind) {
            None => {
                *this.latched_mut(kind) = Some(src);
                newly_latched = true;
                debug!(call_id = %owner.call_id, ?leg, ?kind, %src, "latched");
            }
            Some(prev) if prev != src => match policy {
                MismatchPolicy::Drop => {
                    this.counters.dropped_mismatch += 1;
                    warn!(call_id = %owner.call_id, ?leg, ?kind, %src, latched = %prev, "source mismatch");
                    return MediaDecision::drop(DropReason::SourceMismatch);
                }
                MismatchPolicy::Relatch => {
                    *this.latched_mut(kind) = Some(src);
                    newly_latched = true;
                }
            },
            Some(_) => {}
        }

        let mut forwards = Vec::new();

        // This leg just became reachable: release what the peer buffered for it.
        if newly_latched {
            let to = src;
            let from_port = session.leg(leg).relay_port(kind);
            let peer = session.leg_mut(leg.peer());
            let mut keep = VecDeque::new();
            for (k, d) in peer.pending.drain(..) {
                if k == kind {
                    peer.counters.flushed += 1;
                    peer.counters.bytes_relayed += d.len() as u64;
                    forwards.push(Forward {
                        from_port,
                        to,
                        datagram: d,
                    });
                } else {
                    keep.push_back((k, d));
                }
            }
            peer.pending = keep;
        }

        let peer = session.leg(leg.peer());
        let disposition = match peer.latched(kind) {
            Some(to) => {
                forwards.push(Forward {
                    from_port: peer.relay_port(kind),
                    to,
                    datagram: datagram.to_vec(),
                });
                let this = session.leg_mut(leg);
                this.counters.forwarded += 1;
                this.counters.bytes_relayed += datagram.len() as u64;
                Disposition::Forwarded
            }
            None => {
                let this = session.leg_mut(leg);
                if this.pending.len() >= cap {
                    this.pending.pop_front();
                    this.counters.dropped_overflow += 1;
                }
                this.pending.push_back((kind, datagram.to_vec()));
                Disposition::Buffered
            }
        };
        session.update_state();
        MediaDecision {
            disposition,
            forwards,
        }
    }

    /// Returns the call's ports to the pool. Counters stay available through
    /// [`released_sessions`](Self::released_sessions).
    pub fn release_session(&mut self, call_id: &str) -> Result<usize, MediaError> {
        let mut session = self
            .sessions
            .remove(call_id)
            .ok_or_else(|| MediaError::UnknownCall(call_id.to_owned()))?;
        let mut freed = 0;
        for leg in &mut session.legs {
            for port in [leg.relay_rtp_port, leg.relay_rtcp_port] {
                freed += usize::from(self.pool.release(port));
            }
            leg.counters.dropped_unflushed += leg.pending.len() as u64;
            leg.pending.clear();
        }
        session.state = SessionState::Released;
        self.released.push(session);
        Ok(freed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{parse_sdp, serialize_sdp};

    const OFFER: &str = "v=0\r\no=ClientA 2890844526 28902245844526 IN IP4 local1.com\r\ns=Session SDP\r\nc=IN IP4 192.168.1.11\r\nt=0 0\r\nm=audio 49570 RTP/AVP 0\r\na=rtpmap:0 PCMU/8000\r\n";
    const ANSWER: &str = "v=0\r\no=ClientB 284586526 28922265 IN IP4 local2.com\r\ns=Session SDP\r\nc=IN IP4 10.0.0.4\r\nt=0 0\r\nm=audio 6580 RTP/AVP 0\r\na=rtpmap:0 PCMU/8000\r\n";

    fn addr(s: &str) -> TransportAddress {
        s.parse().unwrap()
    }

    fn controller() -> MediaController {
        MediaController::new(Ipv4Addr::new(200, 1, 1, 1), (40000, 40100)).unwrap()
    }

    /// Independent model: walk the range in order, take the first two even ports whose
    /// odd neighbour is also in range.
    fn expected_pairs(lo: u16, hi: u16) -> Vec<u16> {
        (lo..=hi).filter(|p| p % 2 == 0 && *p < hi).take(2).collect()
    }

    #[test]
    fn sequential_allocation() {
        let mut mc = controller();
        let s = mc.allocate_session("c1").unwrap();
        let got = [s.leg(Leg::Caller).relay_rtp_port, s.leg(Leg::Callee).relay_rtp_port];
        assert_eq!(got.to_vec(), expected_pairs(40000, 40100));
        assert_eq!(s.leg(Leg::Caller).relay_rtcp_port, 40001);
        assert_eq!(s.leg(Leg::Callee).relay_rtcp_port, 40003);
        assert_eq!(s.state, SessionState::Allocated);

        let odd = MediaController::new(Ipv4Addr::new(200, 1, 1, 1), (40001, 40006)).unwrap();
        let mut odd = odd;
        let s = odd.allocate_session("c").unwrap();
        assert_eq!(
            vec![s.leg(Leg::Caller).relay_rtp_port, s.leg(Leg::Callee).relay_rtp_port],
            expected_pairs(40001, 40006)
        );
    }

    #[test]
    fn duplicate_and_exhaustion() {
        let mut mc = MediaController::new(Ipv4Addr::new(200, 1, 1, 1), (40000, 40003)).unwrap();
        mc.allocate_session("c1").unwrap();
        assert_eq!(mc.allocate_session("c1").unwrap_err(), MediaError::DuplicateCall("c1".into()));
        assert_eq!(mc.allocate_session("c2").unwrap_err(), MediaError::PoolExhausted);
        assert_eq!(mc.pool().allocated_count(), 4);
    }

    #[test]
    fn exhaustion_with_one_pair_left_allocates_nothing() {
        let mut mc = MediaController::new(Ipv4Addr::new(200, 1, 1, 1), (40000, 40005)).unwrap();
        mc.allocate_session("c1").unwrap();
        let before = mc.pool().clone();
        assert_eq!(mc.allocate_session("c2").unwrap_err(), MediaError::PoolExhausted);
        assert_eq!(*mc.pool(), before);
    }

    #[test]
    fn release_frees_four_ports_and_recovers() {
        let mut mc = MediaController::new(Ipv4Addr::new(200, 1, 1, 1), (40000, 40003)).unwrap();
        let pristine = mc.pool().clone();
        mc.allocate_session("c1").unwrap();
        assert_eq!(mc.allocate_session("c2").unwrap_err(), MediaError::PoolExhausted);
        assert_eq!(mc.release_session("c1"), Ok(4));
        assert_eq!(*mc.pool(), pristine);
        assert_eq!(mc.release_session("c1"), Err(MediaError::UnknownCall("c1".into())));
        assert!(mc.allocate_session("c2").is_ok());
        assert_eq!(mc.released_sessions()[0].state, SessionState::Released);
    }

    #[test]
    fn bad_ranges() {
        assert!(PortPool::new(40001, 40001).is_err());
        assert!(PortPool::new(40001, 40002).is_err());
        assert!(PortPool::new(40000, 39999).is_err());
        assert!(PortPool::new(65534, 65535).is_ok());
        assert!(PortPool::new(65535, 65535).is_err());
    }

    #[test]
    fn offer_and_answer_rewrites() {
        let mut mc = controller();
        mc.allocate_session("c1").unwrap();
        let offer = mc.process_offer("c1", &parse_sdp(OFFER.as_bytes()).unwrap()).unwrap();
        assert_eq!(offer.media_address(), Some(addr("200.1.1.1:40002")));
        let answer = mc.process_answer("c1", &parse_sdp(ANSWER.as_bytes()).unwrap()).unwrap();
        assert_eq!(answer.media_address(), Some(addr("200.1.1.1:40000")));
        let s = mc.session("c1").unwrap();
        assert_eq!(s.leg(Leg::Caller).declared, Some(addr("192.168.1.11:49570")));
        assert_eq!(s.leg(Leg::Callee).declared, Some(addr("10.0.0.4:6580")));
        let text = String::from_utf8(serialize_sdp(&answer).unwrap()).unwrap();
        assert!(text.contains("c=IN IP4 200.1.1.1\r\n"));
        assert!(text.contains("m=audio 40000 RTP/AVP 0\r\n"));
    }

    #[test]
    fn offer_errors() {
        let mut mc = controller();
        let two = OFFER.replace("a=rtpmap", "m=video 49572 RTP/AVP 31\r\na=rtpmap");
        assert!(matches!(
            mc.process_offer("nope", &parse_sdp(OFFER.as_bytes()).unwrap()),
            Err(MediaError::UnknownCall(_))
        ));
        mc.allocate_session("c1").unwrap();
        assert_eq!(
            mc.process_offer("c1", &parse_sdp(two.as_bytes()).unwrap()),
            Err(MediaError::SdpRewrite(SdpError::MultipleMediaUnsupported(2)))
        );
    }

    #[test]
    fn latch_buffer_then_relay() {
        let mut mc = controller();
        mc.allocate_session("c1").unwrap();
        let a = addr("68.92.25.44:62001");
        let b = addr("83.12.40.7:7000");

        let d = mc.on_media_packet(40000, a, b"a1", SimTime::ZERO);
        assert_eq!(d.disposition, Disposition::Buffered);
        assert!(d.forwards.is_empty());
        let s = mc.session("c1").unwrap();
        assert_eq!(s.leg(Leg::Caller).latched_rtp, Some(a));
        assert_eq!(s.state, SessionState::HalfLatched);

        // B's first packet goes to A and releases A's buffered packet toward B.
        let d = mc.on_media_packet(40002, b, b"b1", SimTime::ZERO);
        assert_eq!(d.disposition, Disposition::Forwarded);
        assert_eq!(
            d.forwards,
            [
                Forward { from_port: 40002, to: b, datagram: b"a1".to_vec() },
                Forward { from_port: 40000, to: a, datagram: b"b1".to_vec() },
            ]
        );
        assert_eq!(mc.session("c1").unwrap().state, SessionState::Relaying);

        let d = mc.on_media_packet(40000, a, b"a2", SimTime::ZERO);
        assert_eq!(d.forwards, [Forward { from_port: 40002, to: b, datagram: b"a2".to_vec() }]);

        let c = mc.session("c1").unwrap().leg(Leg::Caller).counters;
        assert_eq!((c.packets_in, c.forwarded, c.flushed, c.dropped()), (2, 1, 1, 0));
    }

    #[test]
    fn rtcp_latches_independently() {
        let mut mc = controller();
        mc.allocate_session("c1").unwrap();
        let a = addr("68.92.25.44:62001");
        let a_rtcp = addr("68.92.25.44:62002");
        let b = addr("83.12.40.7:7000");
        mc.on_media_packet(40000, a, b"rtp", SimTime::ZERO);
        mc.on_media_packet(40001, a_rtcp, b"rtcp", SimTime::ZERO);
        // B's RTP releases only the RTP packet.
        let d = mc.on_media_packet(40002, b, b"x", SimTime::ZERO);
        assert_eq!(d.forwards.len(), 2);
        assert!(d.forwards.iter().all(|f| f.datagram != b"rtcp"));
        assert_eq!(mc.session("c1").unwrap().leg(Leg::Caller).pending(), 1);
        let d = mc.on_media_packet(40003, addr("83.12.40.7:7001"), b"y", SimTime::ZERO);
        assert_eq!(
            d.forwards,
            [
                Forward { from_port: 40003, to: addr("83.12.40.7:7001"), datagram: b"rtcp".to_vec() },
                Forward { from_port: 40001, to: a_rtcp, datagram: b"y".to_vec() },
            ]
        );
    }

    #[test]
    fn unknown_port_and_mismatch() {
        let mut mc = controller();
        assert_eq!(
            mc.on_media_packet(40000, addr("1.1.1.1:1"), b"x", SimTime::ZERO).disposition,
            Disposition::Dropped(DropReason::UnknownPort)
        );
        mc.allocate_session("c1").unwrap();
        mc.on_media_packet(40000, addr("1.1.1.1:1"), b"x", SimTime::ZERO);
        assert_eq!(
            mc.on_media_packet(40000, addr("1.1.1.1:2"), b"x", SimTime::ZERO).disposition,
            Disposition::Dropped(DropReason::SourceMismatch)
        );
        assert_eq!(mc.session("c1").unwrap().leg(Leg::Caller).counters.dropped_mismatch, 1);
    }

    #[test]
    fn relatch_policy_moves_latch() {
        let mut mc = controller().with_policy(MismatchPolicy::Relatch);
        mc.allocate_session("c1").unwrap();
        mc.on_media_packet(40000, addr("1.1.1.1:1"), b"x", SimTime::ZERO);
        mc.on_media_packet(40000, addr("1.1.1.1:2"), b"x", SimTime::ZERO);
        assert_eq!(
            mc.session("c1").unwrap().leg(Leg::Caller).latched_rtp,
            Some(addr("1.1.1.1:2"))
        );
    }

    #[test]
    fn buffer_overflow_drops_oldest() {
        let mut mc = controller().with_buffer_cap(3);
        mc.allocate_session("c1").unwrap();
        let a = addr("1.1.1.1:1");
        for i in 0..5u8 {
            mc.on_media_packet(40000, a, &[i], SimTime::ZERO);
        }
        let d = mc.on_media_packet(40002, addr("2.2.2.2:2"), b"b", SimTime::ZERO);
        let flushed: Vec<_> = d.forwards.iter().filter(|f| f.to != a).map(|f| f.datagram[0]).collect();
        assert_eq!(flushed, [2, 3, 4]);
        let c = mc.session("c1").unwrap().leg(Leg::Caller).counters;
        assert_eq!(c.dropped_overflow, 2);
        assert_eq!(c.packets_in, c.relayed() + c.dropped());
    }

    #[test]
    fn release_counts_unflushed() {
        let mut mc = controller();
        mc.allocate_session("c1").unwrap();
        mc.on_media_packet(40000, addr("1.1.1.1:1"), b"x", SimTime::ZERO);
        mc.release_session("c1").unwrap();
        let c = mc.released_sessions()[0].leg(Leg::Caller).counters;
        assert_eq!(c.dropped_unflushed, 1);
        assert_eq!(c.packets_in, c.relayed() + c.dropped());
        assert_eq!(
            mc.on_media_packet(40000, addr("1.1.1.1:1"), b"x", SimTime::ZERO).disposition,
            Disposition::Dropped(DropReason::UnknownPort)
        );
    }
}
