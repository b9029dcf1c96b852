use std::fmt;

/// The parts of a `sip:` URI this crate needs: optional user, host, optional port.
/// URI parameters and headers are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipUri {
    pub user: Option<String>,
    pub host: String,
    pub port: Option<u16>,
}

impl SipUri {
    pub fn parse(s: &str) -> Option<SipUri> {
        let s = s.trim();
        let rest = s
            .strip_prefix("sip:")
            .or_else(|| s.strip_prefix("SIP:"))?;
        // Cut URI parameters and headers.
        let rest = rest.split([';', '?']).next().unwrap_or_default();
        let (user, hostport) = match rest.rsplit_once('@') {
            Some((u, hp)) => (Some(u), hp),
            None => (None, rest),
        };
        if let Some(u) = user {
            if u.is_empty() {
                return None;
            }
        }
        let (host, port) = match hostport.rsplit_once(':') {
            Some((h, p)) => (h, Some(p.parse::<u16>().ok().filter(|p| *p != 0)?)),
            None => (hostport, None),
        };
        if host.is_empty() || host.contains(char::is_whitespace) {
            return None;
        }
        Some(SipUri {
            user: user.map(str::to_owned),
            host: host.to_owned(),
            port,
        })
    }

    /// Address-of-record form: `sip:user@host` with the host lowercased.
    pub fn aor(&self) -> String {
        match &self.user {
            Some(u) => format!("sip:{}@{}", u, self.host.to_ascii_lowercase()),
            None => format!("sip:{}", self.host.to_ascii_lowercase()),
        }
    }
}

impl fmt::Display for SipUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sip:")?;
        if let Some(u) = &self.user {
            write!(f, "{u}@")?;
        }
        f.write_str(&self.host)?;
        if let Some(p) = self.port {
            write!(f, ":{p}")?;
        }
        Ok(())
    }
}

/// Pulls the URI out of a name-addr (`Name <sip:...>;tag=x`) or addr-spec header value.
pub fn uri_of(name_addr: &str) -> Option<SipUri> {
    let v = name_addr.trim();
    match (v.find('<'), v.find('>')) {
        (Some(l), Some(r)) if l < r => SipUri::parse(&v[l + 1..r]),
        (None, None) => SipUri::parse(v.split(';').next().unwrap_or_default()),
        _ => None,
    }
}
