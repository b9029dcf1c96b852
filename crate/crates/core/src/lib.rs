//! SIP proxy with a persistent-connection registrar and a media relay, plus a
//! deterministic NAT simulator for exercising both across all four NAT behaviours.

pub mod connection;
pub mod media;
pub mod nat;
pub mod proxy;
pub mod rtp;
pub mod sdp;
pub mod service;
pub mod sim;
pub mod sip;
pub mod time;

pub use connection::{ConnectionId, ConnectionManager};
pub use media::{MediaController, MismatchPolicy, PortPool};
pub use nat::{NatBox, NatConfig, NatType};
pub use proxy::{Proxy, ProxyConfig};
pub use sip::{Transport, TransportAddress};
pub use time::SimTime;
