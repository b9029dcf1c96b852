use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transport protocol of a SIP hop or a NAT binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Udp,
    Tcp,
}

impl Transport {
    pub fn as_str(&self) -> &'static str {
        match self {
            Transport::Udp => "UDP",
            Transport::Tcp => "TCP",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An IPv4 `(address, port)` endpoint. Port 0 is not a valid endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TransportAddress {
    ip: Ipv4Addr,
    port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("port 0 is not a valid endpoint port")]
    ZeroPort,
    #[error("invalid transport address `{0}`")]
    Syntax(String),
}

impl TransportAddress {
    pub fn new(ip: Ipv4Addr, port: u16) -> Result<Self, AddressError> {
        if port == 0 {
            return Err(AddressError::ZeroPort);
        }
        Ok(Self { ip, port })
    }

    /// Infallible form for known-good ports; panics on port 0.
    pub const fn from_parts(ip: Ipv4Addr, port: u16) -> Self {
        assert!(port != 0, "port 0 is not addressable");
        Self { ip, port }
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.ip
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Same IP, different port. Fails only for port 0.
    pub fn with_port(&self, port: u16) -> Result<Self, AddressError> {
        Self::new(self.ip, port)
    }
}

impl fmt::Display for TransportAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl FromStr for TransportAddress {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, port) = s
            .rsplit_once(':')
            .ok_or_else(|| AddressError::Syntax(s.to_owned()))?;
        let ip: Ipv4Addr = ip.parse().map_err(|_| AddressError::Syntax(s.to_owned()))?;
        let port: u16 = port.parse().map_err(|_| AddressError::Syntax(s.to_owned()))?;
        Self::new(ip, port)
    }
}

impl TryFrom<String> for TransportAddress {
    type Error = AddressError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TransportAddress> for String {
    fn from(value: TransportAddress) -> Self {
        value.to_string()
    }
}

impl From<TransportAddress> for SocketAddr {
    fn from(value: TransportAddress) -> Self {
        SocketAddr::V4(SocketAddrV4::new(value.ip, value.port))
    }
}

impl TryFrom<SocketAddr> for TransportAddress {
    type Error = AddressError;

    fn try_from(value: SocketAddr) -> Result<Self, Self::Error> {
        match value {
            SocketAddr::V4(v4) => Self::new(*v4.ip(), v4.port()),
            SocketAddr::V6(v6) => Err(AddressError::Syntax(v6.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_displays() {
        let a: TransportAddress = "68.92.25.44:4325".parse().unwrap();
        assert_eq!(a.ip(), Ipv4Addr::new(68, 92, 25, 44));
        assert_eq!(a.port(), 4325);
        assert_eq!(a.to_string(), "68.92.25.44:4325");
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!("1.2.3.4:0".parse::<TransportAddress>(), Err(AddressError::ZeroPort));
        assert!("1.2.3.4".parse::<TransportAddress>().is_err());
        assert!("1.2.3:80".parse::<TransportAddress>().is_err());
        assert!("1.2.3.4:70000".parse::<TransportAddress>().is_err());
        assert!("45656465446464".parse::<TransportAddress>().is_err());
    }

    #[test]
    fn serde_uses_string_form() {
        let a: TransportAddress = "10.0.0.4:6580".parse().unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "\"10.0.0.4:6580\"");
        assert_eq!(serde_json::from_str::<TransportAddress>(&json).unwrap(), a);
    }
}
