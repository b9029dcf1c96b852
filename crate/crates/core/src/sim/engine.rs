use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::connection::ConnectionId;
use crate::media::{Disposition, PortPool, StreamKind};
use crate::nat::{Inbound, NatBox, NatConfig, NatType, DEFAULT_UDP_BINDING_TTL};
use crate::proxy::{Proxy, ProxyConfig, TickAction};
use crate::rtp::{build_rtp, parse_rtp};
use crate::sdp::parse_sdp;
use crate::sip::{
    parse_message, serialize_message, FrameDecoder, Method, SipMessage, Transport, TransportAddress, ViaHeader,
};
use crate::time::SimTime;

use super::report::{CallSummary, DirectionStats, Hop, HopDir, LogEvent, NatSummary, Report};
use super::scenario::{Action, ClientSpec, Mode, NaiveSdp, Outcome, Scenario, Signaling};
use super::SimError;

pub const PROXY_IP: Ipv4Addr = Ipv4Addr::new(200, 1, 1, 1);
pub const PROXY_MEDIA_RANGE: (u16, u16) = (40000, 40099);
/// Address-discovery server clients probe when advertising mapped addresses.
pub const REFLECTOR: TransportAddress = TransportAddress::from_parts(Ipv4Addr::new(200, 1, 1, 2), 3478);

const TICK: Duration = Duration::from_secs(1);
/// Virtual time run after the last script event so timers can fire.
const DRAIN: Duration = Duration::from_secs(40);
const PAYLOAD_LEN: usize = 160;
const SAMPLES_PER_PACKET: u32 = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Script(usize),
    Tick,
    Keepalive(usize),
    Rtp { call: usize, side: usize },
    Rtcp { call: usize, side: usize },
}

enum Wire {
    SipUp { client: usize, bytes: Vec<u8> },
    SipDown { conn: ConnectionId, bytes: Vec<u8> },
    MediaUp { client: usize, kind: StreamKind, dst: TransportAddress, bytes: Vec<u8> },
    Relay { from: TransportAddress, to: TransportAddress, bytes: Vec<u8> },
}

struct Client {
    spec: ClientSpec,
    nat: NatBox,
    tcp_conn: Option<ConnectionId>,
    registered: bool,
    wants_registration: bool,
    cseq: u32,
    counted_signaling_alloc: bool,
    counted_media_alloc: bool,
}

struct SimCall {
    id: String,
    /// Client indices, caller first.
    parties: [usize; 2],
    answer: bool,
    /// Where each side sends its media, learned from the SDP it received.
    remote_media: [Option<TransportAddress>; 2],
    established: [bool; 2],
    hung_up: [bool; 2],
    final_status: Option<u16>,
    invite: Option<SipMessage>,
    /// Direction indices: caller to callee, then callee to caller.
    dirs: [usize; 2],
    ssrc: [u32; 2],
    next_seq: [u16; 2],
    next_ts: [u32; 2],
}

impl SimCall {
    fn side_of(&self, client: usize) -> Option<usize> {
        self.parties.iter().position(|&c| c == client)
    }

    fn can_send(&self, side: usize) -> bool {
        self.established[side] && !self.hung_up[side] && self.remote_media[side].is_some()
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Ev>,
    wire: VecDeque<Wire>,
    rng: ChaCha8Rng,
    proxy: Proxy,
    initial_pool: PortPool,
    clients: Vec<Client>,
    by_public_ip: BTreeMap<Ipv4Addr, usize>,
    udp_conns: BTreeMap<TransportAddress, ConnectionId>,
    decoders: BTreeMap<ConnectionId, FrameDecoder>,
    calls: Vec<SimCall>,
    call_index: BTreeMap<String, usize>,
    /// SSRC to (call, sending side).
    streams: BTreeMap<u32, (usize, usize)>,
    directions: Vec<DirectionStats>,
    sip_messages: u64,
    allocations: u64,
    branch: u64,
    events: Vec<LogEvent>,
    hops: Vec<Hop>,
}

/// Runs `scenario` to completion under the virtual clock.
pub fn run_scenario(scenario: &Scenario) -> Result<Report, SimError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario)?;
    sim.run();
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        let invalid = |e: &dyn std::fmt::Display| SimError::InvalidScenario(e.to_string());
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let mut clients = Vec::new();
        let mut by_public_ip = BTreeMap::new();
        for spec in scenario.clients() {
            let mut cfg = NatConfig::new(spec.nat, spec.public_ip);
            cfg.udp_binding_ttl = scenario
                .udp_binding_ttl_secs
                .map_or(DEFAULT_UDP_BINDING_TTL, Duration::from_secs);
            cfg.tcp_idle_ttl = scenario.tcp_idle_ttl_secs.map(Duration::from_secs);
            cfg.port_offset = rng.gen();
            by_public_ip.insert(spec.public_ip, clients.len());
            clients.push(Client {
                nat: NatBox::new(cfg).map_err(|e| invalid(&e))?,
                spec,
                tcp_conn: None,
                registered: false,
                wants_registration: false,
                cseq: 0,
                counted_signaling_alloc: false,
                counted_media_alloc: false,
            });
        }
        let mut pc = ProxyConfig::new(PROXY_IP);
        pc.media_port_range = PROXY_MEDIA_RANGE;
        pc.relay_media = scenario.mode != Mode::Naive;
        pc.mismatch_policy = scenario.mismatch_policy;
        let proxy = Proxy::new(pc).map_err(|e| invalid(&e))?;
        Ok(Sim {
            scenario,
            now: SimTime::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            wire: VecDeque::new(),
            rng,
            initial_pool: proxy.media().pool().clone(),
            proxy,
            clients,
            by_public_ip,
            udp_conns: BTreeMap::new(),
            decoders: BTreeMap::new(),
            calls: Vec::new(),
            call_index: BTreeMap::new(),
            streams: BTreeMap::new(),
            directions: Vec::new(),
            sip_messages: 0,
            allocations: 0,
            branch: 0,
            events: Vec::new(),
            hops: Vec::new(),
        })
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn log(&mut self, actor: &str, event: &str, detail: impl Into<String>) {
        self.events.push(LogEvent {
            time: self.now,
            actor: actor.to_owned(),
            event: event.to_owned(),
            detail: detail.into(),
        });
    }

    fn proxy_sip(&self) -> TransportAddress {
        self.proxy.config().sip_address()
    }

    fn signaling_transport(&self) -> Transport {
        match self.scenario.signaling {
            Signaling::Tcp => Transport::Tcp,
            Signaling::Udp => Transport::Udp,
        }
    }

    fn run(&mut self) {
        let mut cursor = SimTime::ZERO;
        let mut last = SimTime::ZERO;
        for (i, ev) in self.scenario.script.iter().enumerate() {
            let at = ev.at_ms.map_or(cursor, SimTime::from_millis);
            self.schedule(at, Ev::Script(i));
            cursor = at
                + match &ev.action {
                    Action::Talk { packets, interval_ms, .. } => {
                        Duration::from_millis(u64::from(*packets) * interval_ms)
                    }
                    Action::Idle { secs } => Duration::from_secs(*secs),
                    _ => Duration::ZERO,
                };
            last = cursor;
        }
        let end = last + DRAIN;
        let mut t = SimTime::ZERO;
        while t <= end {
            self.schedule(t, Ev::Tick);
            t = t + TICK;
        }
        if let (Signaling::Udp, Some(period)) = (self.scenario.signaling, self.scenario.keepalive_secs) {
            let period = Duration::from_secs(period);
            for c in 0..self.clients.len() {
                let mut t = SimTime::ZERO + period;
                while t <= end {
                    self.schedule(t, Ev::Keepalive(c));
                    t = t + period;
                }
            }
        }

        while let Some(((at, _), ev)) = self.queue.pop_first() {
            self.now = at;
            match ev {
                Ev::Script(i) => self.script(i),
                Ev::Tick => self.tick(),
                Ev::Keepalive(c) => self.keepalive(c),
                Ev::Rtp { call, side } => self.send_rtp(call, side),
                Ev::Rtcp { call, side } => self.send_rtcp(call, side),
            }
            self.settle();
        }
    }

    fn finish(mut self) -> Report {
        let registration_failed = self.clients.iter().any(|c| c.wants_registration && !c.registered);
        let calls_failed = self.calls.iter().any(|c| !c.established[0]);
        let outcome = if registration_failed || calls_failed {
            Outcome::SignalingBlocked
        } else if self.directions.iter().all(DirectionStats::complete) {
            Outcome::MediaOk
        } else {
            Outcome::MediaBlocked
        };
        let pool_restored = *self.proxy.media().pool() == self.initial_pool;
        self.log("sim", "finished", format!("{outcome:?}"));
        let calls = self
            .calls
            .iter()
            .map(|c| CallSummary {
                id: c.id.clone(),
                from: self.clients[c.parties[0]].spec.name.clone(),
                to: self.clients[c.parties[1]].spec.name.clone(),
                established: c.established[0],
                final_status: c.final_status,
                hung_up: c.hung_up.iter().all(|h| *h),
            })
            .collect();
        let nats = self
            .clients
            .iter()
            .map(|c| NatSummary {
                client: c.spec.name.clone(),
                nat_type: c.spec.nat,
                public_ip: c.spec.public_ip,
                udp_binding_ttl_ms: c.nat.config().udp_binding_ttl.as_millis() as u64,
                tcp_idle_ttl_ms: c.nat.config().tcp_idle_ttl.map(|d| d.as_millis() as u64),
            })
            .collect();
        Report {
            mode: self.scenario.mode,
            seed: self.scenario.seed,
            signaling: self.scenario.signaling,
            nats,
            outcome,
            directions: self.directions,
            calls,
            sip_messages: self.sip_messages,
            allocation_transactions: self.allocations,
            pool_restored,
            ended_at: self.now,
            script_fingerprint: fingerprint(self.scenario),
            events: self.events,
            hops: self.hops,
        }
    }

    fn script(&mut self, i: usize) {
        let action = self.scenario.script[i].action.clone();
        match action {
            Action::Register { client } => {
                let targets: Vec<usize> = match client {
                    Some(name) => vec![self.client_named(&name)],
                    None => (0..self.clients.len()).collect(),
                };
                for c in targets {
                    self.send_register(c);
                }
            }
            Action::Call { from, to, id, answer } => {
                let id = Scenario::call_id(self.calls.len(), id.as_deref());
                let (from, to) = (self.client_named(&from), self.client_named(&to));
                self.start_call(id, from, to, answer);
            }
            Action::Talk { packets, interval_ms, call } => {
                let targets: Vec<usize> = match call {
                    Some(id) => vec![self.call_index[&id]],
                    None => (0..self.calls.len()).collect(),
                };
                for call in targets {
                    if !self.calls[call].can_send(0) && !self.calls[call].can_send(1) {
                        continue;
                    }
                    for side in 0..2 {
                        self.schedule(self.now, Ev::Rtcp { call, side });
                    }
                    for n in 0..packets {
                        let at = self.now + Duration::from_millis(u64::from(n) * interval_ms);
                        for side in 0..2 {
                            self.schedule(at, Ev::Rtp { call, side });
                        }
                    }
                }
            }
            Action::Idle { secs } => self.log("sim", "idle", format!("{secs}s")),
            Action::Hangup { call, by } => {
                let targets: Vec<usize> = match call {
                    Some(id) => vec![self.call_index[&id]],
                    None => (0..self.calls.len()).collect(),
                };
                for call in targets {
                    let side = match &by {
                        Some(name) => {
                            let c = self.client_named(name);
                            match self.calls[call].side_of(c) {
                                Some(s) => s,
                                None => {
                                    self.log(name, "hangup-skipped", format!("not in {}", self.calls[call].id));
                                    continue;
                                }
                            }
                        }
                        None => 0,
                    };
                    self.send_bye(call, side);
                }
            }
        }
    }

    fn client_named(&self, name: &str) -> usize {
        self.clients
            .iter()
            .position(|c| c.spec.name == name)
            .expect("validated client name")
    }

    fn next_branch(&mut self) -> String {
        self.branch += 1;
        format!("z9hG4bK{:06}", self.branch)
    }

    fn via(&mut self, client: usize) -> ViaHeader {
        let branch = self.next_branch();
        ViaHeader::new(self.signaling_transport(), self.clients[client].spec.sip_addr()).with_branch(branch)
    }

    fn name_addr(&self, client: usize) -> String {
        let s = &self.clients[client].spec;
        format!("{} <{}>", s.user, s.aor())
    }

    fn contact(&self, client: usize) -> String {
        let s = &self.clients[client].spec;
        format!("<sip:{}@{}>", s.user, s.sip_addr())
    }

    fn next_cseq(&mut self, client: usize) -> u32 {
        self.clients[client].cseq += 1;
        self.clients[client].cseq
    }

    fn client_send(&mut self, client: usize, msg: &SipMessage) {
        match serialize_message(msg) {
            Ok(bytes) => self.wire.push_back(Wire::SipUp { client, bytes }),
            Err(e) => self.log(&self.clients[client].spec.name.clone(), "sip-build-error", e.to_string()),
        }
    }

    fn send_register(&mut self, c: usize) {
        self.clients[c].wants_registration = true;
        let via = self.via(c);
        let seq = self.next_cseq(c);
        let spec = &self.clients[c].spec;
        let msg = SipMessage::request(
            Method::Register,
            format!("sip:{}", spec.domain),
            via,
            self.name_addr(c),
            self.name_addr(c),
            format!("reg-{}@{}", spec.user, spec.domain),
            seq,
        )
        .with_contact(self.contact(c));
        let name = spec.name.clone();
        self.log(&name, "register", spec.aor());
        self.count_signaling_alloc(c);
        self.client_send(c, &msg);
    }

    fn count_signaling_alloc(&mut self, c: usize) {
        if self.scenario.mode == Mode::Baseline && !self.clients[c].counted_signaling_alloc {
            self.clients[c].counted_signaling_alloc = true;
            self.allocations += 1;
            let name = self.clients[c].spec.name.clone();
            self.log(&name, "turn-allocate", "signaling");
        }
    }

    fn count_media_alloc(&mut self, c: usize) {
        if self.scenario.mode == Mode::Baseline && !self.clients[c].counted_media_alloc {
            self.clients[c].counted_media_alloc = true;
            self.allocations += 1;
            let name = self.clients[c].spec.name.clone();
            self.log(&name, "turn-allocate", "media");
        }
    }

    /// The media address a client puts into its own SDP.
    fn advertised_media(&mut self, c: usize) -> TransportAddress {
        let private = self.clients[c].spec.rtp_addr();
        if self.scenario.mode != Mode::Naive || self.scenario.naive_sdp == NaiveSdp::Private {
            return private;
        }
        match self.nat_out(c, Transport::Udp, private, REFLECTOR) {
            Some(mapped) => mapped,
            None => private,
        }
    }

    fn sdp_for(&mut self, c: usize, session: u64) -> Vec<u8> {
        let media = self.advertised_media(c);
        let s = &self.clients[c].spec;
        format!(
            "v=0\r\no={user} {session} {session} IN IP4 {domain}\r\ns=Session SDP\r\nc=IN IP4 {ip}\r\nt=0 0\r\nm=audio {port} RTP/AVP 0\r\na=rtpmap:0 PCMU/8000\r\n",
            user = s.user,
            domain = s.domain,
            ip = media.ip(),
            port = media.port(),
        )
        .into_bytes()
    }

    fn start_call(&mut self, id: String, caller: usize, callee: usize, answer: bool) {
        let idx = self.calls.len();
        let mut ssrc = [0u32; 2];
        for s in &mut ssrc {
            *s = loop {
                let v = self.rng.next_u32();
                if !self.streams.contains_key(&v) {
                    break v;
                }
            };
        }
        for (side, s) in ssrc.iter().enumerate() {
            self.streams.insert(*s, (idx, side));
        }
        let dirs = [self.directions.len(), self.directions.len() + 1];
        for (from, to) in [(caller, callee), (callee, caller)] {
            self.directions.push(DirectionStats {
                call: id.clone(),
                from: self.clients[from].spec.name.clone(),
                to: self.clients[to].spec.name.clone(),
                ..DirectionStats::default()
            });
        }
        let next_seq = [self.rng.gen(), self.rng.gen()];
        let next_ts = [self.rng.gen(), self.rng.gen()];
        self.call_index.insert(id.clone(), idx);

        let via = self.via(caller);
        let seq = self.next_cseq(caller);
        let body = self.sdp_for(caller, idx as u64 + 1);
        let invite = SipMessage::request(
            Method::Invite,
            self.clients[callee].spec.aor(),
            via,
            self.name_addr(caller),
            self.name_addr(callee),
            id.clone(),
            seq,
        )
        .with_contact(self.contact(caller))
        .with_body("application/sdp", body);
        self.calls.push(SimCall {
            id: id.clone(),
            parties: [caller, callee],
            answer,
            remote_media: [None, None],
            established: [false, false],
            hung_up: [false, false],
            final_status: None,
            invite: Some(invite.clone()),
            dirs,
            ssrc,
            next_seq,
            next_ts,
        });
        let name = self.clients[caller].spec.name.clone();
        let callee_name = self.clients[callee].spec.name.clone();
        self.log(&name, "invite", format!("{id} to {callee_name}"));
        self.client_send(caller, &invite);
    }

    fn send_bye(&mut self, call: usize, side: usize) {
        let c = &self.calls[call];
        let (me, peer) = (c.parties[side], c.parties[1 - side]);
        let name = self.clients[me].spec.name.clone();
        if !c.established[side] || c.hung_up[side] {
            let id = c.id.clone();
            self.log(&name, "hangup-skipped", id);
            return;
        }
        self.calls[call].hung_up[side] = true;
        let via = self.via(me);
        let seq = self.next_cseq(me);
        let peer_contact = self.clients[peer].spec.sip_addr();
        let peer_user = self.clients[peer].spec.user.clone();
        let mut bye = SipMessage::request(
            Method::Bye,
            format!("sip:{peer_user}@{peer_contact}"),
            via,
            self.name_addr(me),
            self.name_addr(peer),
            self.calls[call].id.clone(),
            seq,
        );
        bye.contact = None;
        self.log(&name, "bye", self.calls[call].id.clone());
        self.client_send(me, &bye);
    }

    fn tick(&mut self) {
        for action in self.proxy.tick(self.now) {
            match action {
                TickAction::RegistrationExpired(aor) => self.log("proxy", "registration-expired", aor),
                TickAction::InviteTimedOut { call_id, response } => {
                    self.log("proxy", "invite-timeout", call_id);
                    if let Some(out) = response {
                        self.sip_messages += 1;
                        self.wire.push_back(Wire::SipDown { conn: out.conn, bytes: out.bytes });
                    }
                }
            }
        }
        for c in 0..self.clients.len() {
            let n = self.clients[c].nat.expire(self.now);
            if n > 0 {
                let name = format!("nat-{}", self.clients[c].spec.name);
                self.log(&name, "bindings-expired", n.to_string());
            }
        }
    }

    fn keepalive(&mut self, c: usize) {
        if !self.clients[c].wants_registration {
            return;
        }
        let (src, dst) = (self.clients[c].spec.sip_addr(), self.proxy_sip());
        self.nat_out(c, Transport::Udp, src, dst);
    }

    fn send_rtp(&mut self, call: usize, side: usize) {
        let c = &mut self.calls[call];
        if !c.can_send(side) {
            return;
        }
        let (seq, ts, ssrc) = (c.next_seq[side], c.next_ts[side], c.ssrc[side]);
        c.next_seq[side] = seq.wrapping_add(1);
        c.next_ts[side] = ts.wrapping_add(SAMPLES_PER_PACKET);
        let (dst, dir, client) = (c.remote_media[side].expect("checked"), c.dirs[side], c.parties[side]);
        let bytes = build_rtp(0, seq, ts, ssrc, &payload(self.scenario.seed, ssrc, seq)).expect("valid RTP fields");
        self.directions[dir].sent += 1;
        self.count_media_alloc(client);
        self.wire.push_back(Wire::MediaUp { client, kind: StreamKind::Rtp, dst, bytes });
    }

    fn send_rtcp(&mut self, call: usize, side: usize) {
        let c = &self.calls[call];
        if !c.can_send(side) {
            return;
        }
        let rtp_dst = c.remote_media[side].expect("checked");
        let Some(dst) = rtp_dst.port().checked_add(1).and_then(|p| rtp_dst.with_port(p).ok()) else {
            return;
        };
        let (dir, client) = (c.dirs[side], c.parties[side]);
        // Empty receiver report.
        let mut bytes = vec![0x80, 201, 0, 1];
        bytes.extend_from_slice(&c.ssrc[side].to_be_bytes());
        self.directions[dir].rtcp_sent += 1;
        self.wire.push_back(Wire::MediaUp { client, kind: StreamKind::Rtcp, dst, bytes });
    }

    fn nat_out(
        &mut self,
        c: usize,
        transport: Transport,
        src: TransportAddress,
        dst: TransportAddress,
    ) -> Option<TransportAddress> {
        let result = self.clients[c].nat.outbound(transport, src, dst, self.now);
        let nat = self.clients[c].spec.name.clone();
        self.hops.push(Hop {
            time: self.now,
            nat: nat.clone(),
            dir: HopDir::Out,
            transport,
            src,
            dst,
            translated: result.as_ref().ok().copied(),
            blocked: None,
        });
        match result {
            Ok(a) => Some(a),
            Err(e) => {
                self.log(&format!("nat-{nat}"), "outbound-failed", e.to_string());
                None
            }
        }
    }

    fn nat_in(
        &mut self,
        c: usize,
        transport: Transport,
        src: TransportAddress,
        dst: TransportAddress,
    ) -> Option<TransportAddress> {
        let result = self.clients[c].nat.inbound(transport, src, dst, self.now);
        let nat = self.clients[c].spec.name.clone();
        let blocked = match result {
            Inbound::Delivered(_) => None,
            Inbound::Blocked(r) => Some(r),
        };
        self.hops.push(Hop {
            time: self.now,
            nat: nat.clone(),
            dir: HopDir::In,
            transport,
            src,
            dst,
            translated: result.delivered(),
            blocked,
        });
        if let Some(r) = blocked {
            self.log(&format!("nat-{nat}"), "blocked", format!("{transport} {src} -> {dst}: {r:?}"));
        }
        result.delivered()
    }

    fn settle(&mut self) {
        while let Some(w) = self.wire.pop_front() {
            match w {
                Wire::SipUp { client, bytes } => self.sip_up(client, bytes),
                Wire::SipDown { conn, bytes } => self.sip_down(conn, bytes),
                Wire::MediaUp { client, kind, dst, bytes } => self.media_up(client, kind, dst, bytes),
                Wire::Relay { from, to, bytes } => self.deliver_public(from, to, bytes),
            }
        }
    }

    fn sip_up(&mut self, c: usize, bytes: Vec<u8>) {
        self.sip_messages += 1;
        let transport = self.signaling_transport();
        let (src, dst) = (self.clients[c].spec.sip_addr(), self.proxy_sip());
        let Some(ext) = self.nat_out(c, transport, src, dst) else {
            return;
        };
        let name = self.clients[c].spec.name.clone();
        let conn = match transport {
            Transport::Tcp => match self.clients[c].tcp_conn {
                Some(conn) if self.proxy.connections().remote_of(conn) == Some(ext) => conn,
                previous => {
                    if let Some(old) = previous {
                        self.proxy.close(old);
                        self.decoders.remove(&old);
                        self.log(&name, "tcp-reset", old.to_string());
                    }
                    let conn = self.proxy.accept(ext);
                    self.clients[c].tcp_conn = Some(conn);
                    self.log(&name, "tcp-connect", format!("{conn} from {ext}"));
                    conn
                }
            },
            Transport::Udp => match self.udp_conns.get(&ext) {
                Some(conn) => *conn,
                None => {
                    let conn = self.proxy.accept(ext);
                    self.udp_conns.insert(ext, conn);
                    conn
                }
            },
        };
        let frames = match transport {
            Transport::Udp => vec![bytes],
            Transport::Tcp => {
                let decoder = self.decoders.entry(conn).or_default();
                decoder.push(&bytes);
                let mut frames = Vec::new();
                loop {
                    match decoder.next_frame() {
                        Ok(Some(f)) => frames.push(f),
                        Ok(None) => break,
                        Err(e) => {
                            self.log("proxy", "framing-error", e.to_string());
                            break;
                        }
                    }
                }
                frames
            }
        };
        for frame in frames {
            for out in self.proxy.handle_message(conn, &frame, self.now) {
                self.sip_messages += 1;
                self.wire.push_back(Wire::SipDown { conn: out.conn, bytes: out.bytes });
            }
        }
    }

    fn sip_down(&mut self, conn: ConnectionId, bytes: Vec<u8>) {
        let Some(remote) = self.proxy.connections().remote_of(conn) else {
            self.log("proxy", "send-failed", format!("{conn} closed"));
            return;
        };
        let Some(&c) = self.by_public_ip.get(&remote.ip()) else {
            self.log("net", "unroutable", remote.to_string());
            return;
        };
        let transport = self.signaling_transport();
        let src = self.proxy_sip();
        let Some(internal) = self.nat_in(c, transport, src, remote) else {
            let what = parse_message(&bytes).map(|m| describe(&m)).unwrap_or_default();
            self.log("proxy", "signaling-lost", format!("{what} to {remote}"));
            return;
        };
        if internal != self.clients[c].spec.sip_addr() {
            self.log("net", "no-listener", internal.to_string());
            return;
        }
        match parse_message(&bytes) {
            Ok(msg) => self.client_receive(c, msg),
            Err(e) => {
                let name = self.clients[c].spec.name.clone();
                self.log(&name, "unparseable", e.to_string());
            }
        }
    }

    fn client_receive(&mut self, c: usize, msg: SipMessage) {
        let name = self.clients[c].spec.name.clone();
        self.log(&name, "recv", describe(&msg));
        let call = self.call_index.get(&msg.call_id).copied();
        if let Some(code) = msg.status() {
            match msg.cseq.method {
                Method::Register if (200..300).contains(&code) => self.clients[c].registered = true,
                Method::Invite if code >= 200 => {
                    let Some(call) = call.filter(|&i| self.calls[i].parties[0] == c) else {
                        return;
                    };
                    let first = self.calls[call].final_status.is_none();
                    self.calls[call].final_status.get_or_insert(code);
                    if code < 300 && first {
                        let media = parse_sdp(&msg.body).ok().and_then(|s| s.media_address());
                        self.calls[call].remote_media[0] = media;
                        self.calls[call].established[0] = true;
                    }
                    if first {
                        self.send_ack(call, &msg);
                    }
                }
                _ => {}
            }
            return;
        }
        let Some(call) = call else {
            return;
        };
        match msg.method() {
            Some(Method::Invite) if self.calls[call].parties[1] == c => {
                let media = parse_sdp(&msg.body).ok().and_then(|s| s.media_address());
                self.calls[call].remote_media[1] = media;
                let resp = if self.calls[call].answer {
                    let body = self.sdp_for(c, call as u64 + 1001);
                    SipMessage::response_to(&msg, 200, "OK")
                        .with_contact(self.contact(c))
                        .with_body("application/sdp", body)
                } else {
                    SipMessage::response_to(&msg, 486, "Busy Here")
                };
                self.client_send(c, &resp);
            }
            Some(Method::Ack) if self.calls[call].parties[1] == c => {
                if self.calls[call].answer {
                    self.calls[call].established[1] = true;
                }
            }
            Some(Method::Bye) => {
                if let Some(side) = self.calls[call].side_of(c) {
                    self.calls[call].hung_up[side] = true;
                }
                let ok = SipMessage::response_to(&msg, 200, "OK");
                self.client_send(c, &ok);
            }
            _ => {}
        }
    }

    fn send_ack(&mut self, call: usize, response: &SipMessage) {
        let caller = self.calls[call].parties[0];
        let via = self.via(caller);
        let invite = self.calls[call].invite.clone().expect("caller keeps its INVITE");
        let target = response
            .contact_uri()
            .map(|u| u.to_string())
            .unwrap_or_else(|| invite.request_uri().unwrap_or_default().to_owned());
        let mut ack = SipMessage::request(
            Method::Ack,
            target,
            via,
            invite.from.clone(),
            response.to.clone(),
            invite.call_id.clone(),
            invite.cseq.seq,
        );
        ack.contact = None;
        self.client_send(caller, &ack);
    }

    fn media_up(&mut self, c: usize, kind: StreamKind, dst: TransportAddress, bytes: Vec<u8>) {
        let src = match kind {
            StreamKind::Rtp => self.clients[c].spec.rtp_addr(),
            StreamKind::Rtcp => self.clients[c].spec.rtcp_addr(),
        };
        let Some(ext) = self.nat_out(c, Transport::Udp, src, dst) else {
            return;
        };
        if dst.ip() == PROXY_IP {
            let decision = self.proxy.handle_media(dst.port(), ext, &bytes, self.now);
            if let Disposition::Dropped(reason) = decision.disposition {
                self.log("proxy", "media-dropped", format!("{kind:?} from {ext} on {}: {reason:?}", dst.port()));
            }
            for f in decision.forwards {
                let from_port = if self.scenario.forward_from_wrong_port {
                    self.wrong_port(f.from_port)
                } else {
                    f.from_port
                };
                let from = TransportAddress::from_parts(PROXY_IP, from_port);
                self.wire.push_back(Wire::Relay { from, to: f.to, bytes: f.datagram });
            }
        } else {
            self.deliver_public(ext, dst, bytes);
        }
    }

    /// The opposite leg's port of the same kind, for fault injection.
    fn wrong_port(&self, port: u16) -> u16 {
        let media = self.proxy.media();
        media
            .pool()
            .owner(port)
            .and_then(|o| media.session(&o.call_id).map(|s| s.leg(o.leg.peer()).relay_port(o.kind)))
            .unwrap_or(port)
    }

    fn deliver_public(&mut self, from: TransportAddress, to: TransportAddress, bytes: Vec<u8>) {
        if to == REFLECTOR {
            return;
        }
        let Some(&c) = self.by_public_ip.get(&to.ip()) else {
            self.log("net", "unroutable", format!("{from} -> {to}"));
            return;
        };
        let Some(internal) = self.nat_in(c, Transport::Udp, from, to) else {
            return;
        };
        let spec = &self.clients[c].spec;
        if internal == spec.rtp_addr() {
            self.receive_rtp(c, &bytes);
        } else if internal == spec.rtcp_addr() {
            self.receive_rtcp(c, &bytes);
        } else {
            self.log("net", "no-listener", internal.to_string());
        }
    }

    /// Resolves an SSRC to the direction it belongs to, if `c` is its receiver.
    fn direction_for(&self, c: usize, ssrc: u32) -> Option<usize> {
        let &(call, side) = self.streams.get(&ssrc)?;
        let call = &self.calls[call];
        (call.parties[1 - side] == c).then_some(call.dirs[side])
    }

    fn receive_rtp(&mut self, c: usize, bytes: &[u8]) {
        let name = self.clients[c].spec.name.clone();
        let Ok(pkt) = parse_rtp(bytes) else {
            self.log(&name, "rtp-garbled", bytes.len().to_string());
            return;
        };
        let Some(dir) = self.direction_for(c, pkt.ssrc) else {
            self.log(&name, "rtp-misdelivered", format!("ssrc {:08x}", pkt.ssrc));
            return;
        };
        if pkt.payload == payload(self.scenario.seed, pkt.ssrc, pkt.sequence) {
            self.directions[dir].delivered += 1;
        } else {
            self.directions[dir].corrupted += 1;
        }
    }

    fn receive_rtcp(&mut self, c: usize, bytes: &[u8]) {
        let ssrc = bytes.get(4..8).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")));
        if let Some(dir) = ssrc.and_then(|s| self.direction_for(c, s)) {
            self.directions[dir].rtcp_delivered += 1;
        }
    }
}

/// Deterministic payload for one packet, recomputable by the receiver.
fn payload(seed: u64, ssrc: u32, seq: u16) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(ssrc) << 16) ^ u64::from(seq));
    let mut out = vec![0u8; PAYLOAD_LEN];
    rng.fill_bytes(&mut out);
    out
}

fn describe(msg: &SipMessage) -> String {
    match (msg.method(), msg.status()) {
        (Some(m), _) => format!("{m} {}", msg.call_id),
        (None, Some(code)) => format!("{code} {} {}", msg.cseq.method, msg.call_id),
        _ => String::new(),
    }
}

fn fingerprint(s: &Scenario) -> String {
    let clients: Vec<(String, NatType)> = s.clients().into_iter().map(|c| (c.name, c.nat)).collect();
    serde_json::json!({ "clients": clients, "script": s.script }).to_string()
}
