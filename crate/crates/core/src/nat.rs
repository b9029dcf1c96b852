//! Deterministic NAT boxes of the four classic types.
//!
//! Mapping behaviour: cone NATs keep one external port per internal endpoint,
//! symmetric NATs one per (internal endpoint, destination). Filtering behaviour:
//!
//! | type                 | inbound accepted from                          |
//! |----------------------|------------------------------------------------|
//! | full cone            | anyone                                         |
//! | restricted cone      | any port of an IP the binding has sent to      |
//! | port restricted cone | exactly an (IP, port) the binding has sent to  |
//! | symmetric            | exactly the binding's destination              |
//!
//! TCP bindings stand for established connections and only accept from
//! endpoints they have sent to, whatever the NAT type.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sip::{Transport, TransportAddress};
use crate::time::SimTime;

pub const DEFAULT_UDP_BINDING_TTL: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NatType {
    FullCone,
    RestrictedCone,
    PortRestrictedCone,
    Symmetric,
}

impl NatType {
    pub const ALL: [NatType; 4] = [
        NatType::FullCone,
        NatType::RestrictedCone,
        NatType::PortRestrictedCone,
        NatType::Symmetric,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NatType::FullCone => "full-cone",
            NatType::RestrictedCone => "restricted-cone",
            NatType::PortRestrictedCone => "port-restricted-cone",
            NatType::Symmetric => "symmetric",
        }
    }
}

impl std::fmt::Display for NatType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NatError {
    #[error("no free external port in {lo}..={hi}")]
    PortPoolExhausted { lo: u16, hi: u16 },
    #[error("invalid NAT configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NatConfig {
    pub nat_type: NatType,
    pub public_ip: Ipv4Addr,
    pub udp_binding_ttl: Duration,
    /// `None` keeps TCP bindings for the life of the connection.
    pub tcp_idle_ttl: Option<Duration>,
    /// Inclusive range of external ports.
    pub port_range: (u16, u16),
    /// Where in `port_range` allocation starts, modulo the range size.
    pub port_offset: u16,
}

impl NatConfig {
    pub fn new(nat_type: NatType, public_ip: Ipv4Addr) -> Self {
        NatConfig {
            nat_type,
            public_ip,
            udp_binding_ttl: DEFAULT_UDP_BINDING_TTL,
            tcp_idle_ttl: None,
            port_range: (1024, 65535),
            port_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NatError> {
        let (lo, hi) = self.port_range;
        if lo == 0 || lo >= hi {
            return Err(NatError::InvalidConfig(format!("port range {lo}..={hi}")));
        }
        if self.udp_binding_ttl.is_zero() || self.tcp_idle_ttl.is_some_and(|t| t.is_zero()) {
            return Err(NatError::InvalidConfig("binding TTL must be positive".into()));
        }
        Ok(())
    }

    fn span(&self) -> u32 {
        u32::from(self.port_range.1 - self.port_range.0) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NatBinding {
    pub internal: TransportAddress,
    pub external: TransportAddress,
    pub transport: Transport,
    pub last_activity: SimTime,
    pub peers_contacted: BTreeSet<TransportAddress>,
    /// The single destination a symmetric binding serves.
    pub destination_key: Option<TransportAddress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockReason {
    /// Destination is not this NAT's public address.
    WrongAddress,
    NoBinding,
    Expired,
    Filtered,
}

/// Result of an inbound packet hitting the NAT. Blocking is a silent drop, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inbound {
    Delivered(TransportAddress),
    Blocked(BlockReason),
}

impl Inbound {
    pub fn delivered(&self) -> Option<TransportAddress> {
        match self {
            Inbound::Delivered(a) => Some(*a),
            Inbound::Blocked(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct MappingKey {
    transport: Transport,
    internal: TransportAddress,
    destination: Option<TransportAddress>,
}

#[derive(Debug, Clone)]
pub struct NatBox {
    config: NatConfig,
    bindings: BTreeMap<u16, NatBinding>,
    index: BTreeMap<MappingKey, u16>,
    cursor: u32,
}

impl NatBox {
    pub fn new(config: NatConfig) -> Result<Self, NatError> {
        config.validate()?;
        let cursor = u32::from(config.port_offset) % config.span();
        Ok(NatBox {
            config,
            bindings: BTreeMap::new(),
            index: BTreeMap::new(),
            cursor,
        })
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn public_ip(&self) -> Ipv4Addr {
        self.config.public_ip
    }

    pub fn bindings(&self) -> impl Iterator<Item = &NatBinding> {
        self.bindings.values()
    }

    fn key(&self, transport: Transport, internal: TransportAddress, dst: TransportAddress) -> MappingKey {
        let destination = (self.config.nat_type == NatType::Symmetric).then_some(dst);
        MappingKey {
            transport,
            internal,
            destination,
        }
    }

    /// The live binding an outbound packet from `internal` to `dst` would use, if any.
    pub fn binding_for(
        &self,
        transport: Transport,
        internal: TransportAddress,
        dst: TransportAddress,
        now: SimTime,
    ) -> Option<&NatBinding> {
        let port = self.index.get(&self.key(transport, internal, dst))?;
        self.bindings.get(port).filter(|b| !self.is_stale(b, now))
    }

    fn is_stale(&self, b: &NatBinding, now: SimTime) -> bool {
        let idle = now.since(b.last_activity);
        match b.transport {
            Transport::Udp => idle >= self.config.udp_binding_ttl,
            Transport::Tcp => self.config.tcp_idle_ttl.is_some_and(|ttl| idle >= ttl),
        }
    }

    fn remove(&mut self, port: u16) {
        if let Some(b) = self.bindings.remove(&port) {
            let key = self.key(b.transport, b.internal, b.destination_key.unwrap_or(b.internal));
            self.index.remove(&key);
        }
    }

    fn allocate_port(&mut self, now: SimTime) -> Result<u16, NatError> {
        let (lo, hi) = self.config.port_range;
        let span = self.config.span();
        for _ in 0..span {
            let port = (u32::from(lo) + self.cursor) as u16;
            self.cursor = (self.cursor + 1) % span;
            match self.bindings.get(&port) {
                None => return Ok(port),
                Some(b) if self.is_stale(b, now) => {
                    self.remove(port);
                    return Ok(port);
                }
                Some(_) => {}
            }
        }
        Err(NatError::PortPoolExhausted { lo, hi })
    }

    /// Translates an outbound packet and returns its public source address.
    pub fn outbound(
        &mut self,
        transport: Transport,
        internal_src: TransportAddress,
        external_dst: TransportAddress,
        now: SimTime,
    ) -> Result<TransportAddress, NatError> {
        let key = self.key(transport, internal_src, external_dst);
        let port = match self.index.get(&key).copied() {
            Some(port) if !self.is_stale(&self.bindings[&port], now) => port,
            existing => {
                if let Some(port) = existing {
                    self.remove(port);
                }
                let port = self.allocate_port(now)?;
                let external = TransportAddress::new(self.config.public_ip, port)
                    .expect("allocated ports are non-zero");
                self.bindings.insert(
                    port,
                    NatBinding {
                        internal: internal_src,
                        external,
                        transport,
                        last_activity: now,
                        peers_contacted: BTreeSet::new(),
                        destination_key: key.destination,
                    },
                );
                self.index.insert(key, port);
                port
            }
        };
        let b = self.bindings.get_mut(&port).expect("indexed binding exists");
        b.peers_contacted.insert(external_dst);
        b.last_activity = now;
        Ok(b.external)
    }

    /// Applies mapping lookup and filtering to a packet arriving from outside.
    pub fn inbound(
        &mut self,
        transport: Transport,
        external_src: TransportAddress,
        external_dst: TransportAddress,
        now: SimTime,
    ) -> Inbound {
        if external_dst.ip() != self.config.public_ip {
            return Inbound::Blocked(BlockReason::WrongAddress);
        }
        let port = external_dst.port();
        let Some(b) = self.bindings.get(&port).filter(|b| b.transport == transport) else {
            return Inbound::Blocked(BlockReason::NoBinding);
        };
        if self.is_stale(b, now) {
            self.remove(port);
            return Inbound::Blocked(BlockReason::Expired);
        }
        let accepted = match (transport, self.config.nat_type) {
            (Transport::Tcp, _) | (Transport::Udp, NatType::PortRestrictedCone) => {
                b.peers_contacted.contains(&external_src)
            }
            (Transport::Udp, NatType::FullCone) => true,
            (Transport::Udp, NatType::RestrictedCone) => {
                b.peers_contacted.iter().any(|p| p.ip() == external_src.ip())
            }
            (Transport::Udp, NatType::Symmetric) => b.destination_key == Some(external_src),
        };
        if !accepted {
            return Inbound::Blocked(BlockReason::Filtered);
        }
        let b = self.bindings.get_mut(&port).expect("checked above");
        b.last_activity = now;
        Inbound::Delivered(b.internal)
    }

    /// Drops every binding idle for at least its TTL. Returns how many were removed.
    pub fn expire(&mut self, now: SimTime) -> usize {
        let stale: Vec<u16> = self
            .bindings
            .iter()
            .filter(|(_, b)| self.is_stale(b, now))
            .map(|(p, _)| *p)
            .collect();
        for p in &stale {
            self.remove(*p);
        }
        stale.len()
    }
}
