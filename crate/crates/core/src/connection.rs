//! Registrar bound to persistent signaling connections.
//!
//! Each registration remembers the connection its REGISTER arrived on; every later
//! message for that address-of-record goes back down the same connection, so the
//! NAT binding the client opened stays the only path the proxy needs.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::sip::{Method, SipMessage, SipUri, TransportAddress};
use crate::time::SimTime;

pub const DEFAULT_REGISTRATION_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ConnectionId(pub u64);

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub aor: String,
    pub connection: ConnectionId,
    /// Source address of the connection as seen by the proxy.
    pub source: TransportAddress,
    pub expires_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistrationError {
    #[error("REGISTER is missing {0}")]
    MalformedRegister(&'static str),
    #[error("{0} is not a live connection")]
    UnknownConnection(ConnectionId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("{0} is not registered")]
    NotRegistered(String),
    #[error("connection for {0} is gone")]
    ConnectionDead(String),
}

/// Normalised address-of-record for a header value or URI.
pub fn aor_key(uri: &SipUri) -> String {
    uri.aor()
}

#[derive(Debug)]
pub struct ConnectionManager {
    ttl: Duration,
    next_id: u64,
    connections: BTreeMap<ConnectionId, TransportAddress>,
    registrations: BTreeMap<String, Registration>,
}

impl ConnectionManager {
    pub fn new(registration_ttl: Duration) -> Self {
        ConnectionManager {
            ttl: registration_ttl,
            next_id: 1,
            connections: BTreeMap::new(),
            registrations: BTreeMap::new(),
        }
    }

    /// Records a newly accepted connection from `remote`.
    pub fn open(&mut self, remote: TransportAddress) -> ConnectionId {
        let id = ConnectionId(self.next_id);
        self.next_id += 1;
        self.connections.insert(id, remote);
        id
    }

    pub fn remote_of(&self, conn: ConnectionId) -> Option<TransportAddress> {
        self.connections.get(&conn).copied()
    }

    pub fn is_live(&self, conn: ConnectionId) -> bool {
        self.connections.contains_key(&conn)
    }

    pub fn registration(&self, aor: &str) -> Option<&Registration> {
        self.registrations.get(aor)
    }

    pub fn registrations(&self) -> impl Iterator<Item = &Registration> {
        self.registrations.values()
    }

    /// Binds the REGISTER's address-of-record (from its To URI) to `conn`. Latest wins.
    pub fn register(
        &mut self,
        conn: ConnectionId,
        msg: &SipMessage,
        now: SimTime,
    ) -> Result<Registration, RegistrationError> {
        if msg.method() != Some(Method::Register) {
            return Err(RegistrationError::MalformedRegister("REGISTER method"));
        }
        let source = self
            .remote_of(conn)
            .ok_or(RegistrationError::UnknownConnection(conn))?;
        if msg.contact_uri().is_none() {
            return Err(RegistrationError::MalformedRegister("Contact"));
        }
        let to = msg
            .to_uri()
            .filter(|u| u.user.is_some())
            .ok_or(RegistrationError::MalformedRegister("To URI"))?;
        let reg = Registration {
            aor: aor_key(&to),
            connection: conn,
            source,
            expires_at: now + self.ttl,
        };
        self.registrations.insert(reg.aor.clone(), reg.clone());
        Ok(reg)
    }

    /// The connection to use for a message addressed to `aor`.
    pub fn route_to(&mut self, aor: &str) -> Result<ConnectionId, RouteError> {
        let reg = self
            .registrations
            .get(aor)
            .ok_or_else(|| RouteError::NotRegistered(aor.to_owned()))?;
        if !self.connections.contains_key(&reg.connection) {
            self.registrations.remove(aor);
            return Err(RouteError::ConnectionDead(aor.to_owned()));
        }
        Ok(reg.connection)
    }

    /// Forgets `conn` and every registration bound to it.
    pub fn on_connection_closed(&mut self, conn: ConnectionId) -> Vec<String> {
        self.connections.remove(&conn);
        let gone: Vec<String> = self
            .registrations
            .values()
            .filter(|r| r.connection == conn)
            .map(|r| r.aor.clone())
            .collect();
        for aor in &gone {
            self.registrations.remove(aor);
        }
        gone
    }

    /// Removes registrations whose expiry has passed.
    pub fn expire(&mut self, now: SimTime) -> Vec<String> {
        let gone: Vec<String> = self
            .registrations
            .values()
            .filter(|r| r.expires_at <= now)
            .map(|r| r.aor.clone())
            .collect();
        for aor in &gone {
            self.registrations.remove(aor);
        }
        gone
    }
}
