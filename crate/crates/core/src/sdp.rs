//! SDP bodies with a session-level connection line and audio/video media lines.
//!
//! Only the `c=` address and `m=` port are interpreted for rewriting; `o=`, `t=`
//! and attribute lines are carried verbatim.

use std::fmt::Write as _;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::sip::TransportAddress;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SdpError {
    #[error("missing mandatory `{0}=` line")]
    MissingLine(char),
    #[error("duplicate `{0}=` line")]
    DuplicateLine(char),
    #[error("invalid media port in `{0}`")]
    BadPort(String),
    #[error("invalid connection address in `{0}`")]
    BadAddress(String),
    #[error("unparseable line `{0}`")]
    BadLine(String),
    #[error("exactly one media description is supported, found {0}")]
    MultipleMediaUnsupported(usize),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaType {
    Audio,
    Video,
}

impl MediaType {
    fn as_str(&self) -> &'static str {
        match self {
            MediaType::Audio => "audio",
            MediaType::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaDesc {
    pub media_type: MediaType,
    pub port: u16,
    pub proto: String,
    pub formats: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdpSession {
    pub version: u32,
    /// Opaque `o=` value.
    pub origin: String,
    pub session_name: String,
    pub connection_ip: Ipv4Addr,
    /// Opaque `t=` value.
    pub timing: String,
    pub media: Vec<MediaDesc>,
    /// `a=` values without the prefix, in order.
    pub attributes: Vec<String>,
    /// Complete lines of any other type (`b=`, `i=`, ...), in order.
    pub other_lines: Vec<String>,
}

impl SdpSession {
    /// The `(c= address, first m= port)` pair, i.e. where the sender of this SDP wants media.
    pub fn media_address(&self) -> Option<TransportAddress> {
        let port = self.media.first()?.port;
        TransportAddress::new(self.connection_ip, port).ok()
    }
}

fn is_clean(s: &str) -> bool {
    s.trim() == s && !s.chars().any(char::is_control)
}

fn parse_media(line: &str, value: &str) -> Result<MediaDesc, SdpError> {
    let bad = || SdpError::BadLine(line.to_owned());
    let mut it = value.split_whitespace();
    let media_type = match it.next() {
        Some("audio") => MediaType::Audio,
        Some("video") => MediaType::Video,
        _ => return Err(bad()),
    };
    let port = it
        .next()
        .and_then(|p| p.parse::<u16>().ok())
        .filter(|p| *p != 0)
        .ok_or_else(|| SdpError::BadPort(line.to_owned()))?;
    let proto = it.next().ok_or_else(bad)?.to_owned();
    let formats = it
        .map(|f| f.parse::<u8>().ok().filter(|pt| *pt <= 127))
        .collect::<Option<Vec<_>>>()
        .filter(|f| !f.is_empty())
        .ok_or_else(bad)?;
    Ok(MediaDesc {
        media_type,
        port,
        proto,
        formats,
    })
}

fn parse_connection(line: &str, value: &str) -> Result<Ipv4Addr, SdpError> {
    let mut it = value.split_whitespace();
    match (it.next(), it.next(), it.next(), it.next()) {
        (Some("IN"), Some("IP4"), Some(addr), None) => addr
            .parse()
            .map_err(|_| SdpError::BadAddress(line.to_owned())),
        _ => Err(SdpError::BadAddress(line.to_owned())),
    }
}

pub fn parse_sdp(text: &[u8]) -> Result<SdpSession, SdpError> {
    let text = std::str::from_utf8(text).map_err(|_| SdpError::BadLine("body is not UTF-8".into()))?;

    let mut version = None;
    let mut origin = None;
    let mut session_name = None;
    let mut connection_ip = None;
    let mut timing = None;
    let mut media = Vec::new();
    let mut attributes = Vec::new();
    let mut other_lines = Vec::new();

    for line in text.split('\n').map(str::trim) {
        if line.is_empty() {
            continue;
        }
        let bytes = line.as_bytes();
        if bytes.len() < 2 || bytes[1] != b'=' || !bytes[0].is_ascii_lowercase() || line.chars().any(char::is_control) {
            return Err(SdpError::BadLine(line.to_owned()));
        }
        let kind = bytes[0] as char;
        let value = line[2..].trim();
        fn once<T>(slot: &mut Option<T>, v: T, kind: char) -> Result<(), SdpError> {
            match slot.replace(v) {
                Some(_) => Err(SdpError::DuplicateLine(kind)),
                None => Ok(()),
            }
        }
        match kind {
            'v' => once(
                &mut version,
                value.parse().map_err(|_| SdpError::BadLine(line.to_owned()))?,
                kind,
            )?,
            'o' => once(&mut origin, value.to_owned(), kind)?,
            's' => once(&mut session_name, value.to_owned(), kind)?,
            'c' => once(&mut connection_ip, parse_connection(line, value)?, kind)?,
            't' => once(&mut timing, value.to_owned(), kind)?,
            'm' => media.push(parse_media(line, value)?),
            'a' => attributes.push(value.to_owned()),
            _ => other_lines.push(line.to_owned()),
        }
    }

    let session = SdpSession {
        version: version.ok_or(SdpError::MissingLine('v'))?,
        origin: origin.ok_or(SdpError::MissingLine('o'))?,
        session_name: session_name.ok_or(SdpError::MissingLine('s'))?,
        connection_ip: connection_ip.ok_or(SdpError::MissingLine('c'))?,
        timing: timing.ok_or(SdpError::MissingLine('t'))?,
        media,
        attributes,
        other_lines,
    };
    if session.media.is_empty() {
        return Err(SdpError::MissingLine('m'));
    }
    Ok(session)
}

fn validate(s: &SdpSession) -> Result<(), SdpError> {
    let bad = |what: &str| Err(SdpError::InvariantViolation(what.to_owned()));
    if s.media.is_empty() {
        return bad("no media description");
    }
    for (name, v) in [("o=", &s.origin), ("s=", &s.session_name), ("t=", &s.timing)] {
        if !is_clean(v) {
            return bad(name);
        }
    }
    for m in &s.media {
        if m.port == 0 {
            return bad("media port 0");
        }
        if m.proto.is_empty() || m.proto.contains(char::is_whitespace) || !is_clean(&m.proto) {
            return bad("media proto");
        }
        if m.formats.is_empty() || m.formats.iter().any(|f| *f > 127) {
            return bad("media formats");
        }
    }
    if s.attributes.iter().any(|a| !is_clean(a)) {
        return bad("attribute");
    }
    for l in &s.other_lines {
        let b = l.as_bytes();
        let reserved = b"vosctma".contains(&b.first().copied().unwrap_or(b'v'));
        if b.len() < 2 || b[1] != b'=' || !b[0].is_ascii_lowercase() || reserved || !is_clean(l) {
            return bad("extra line");
        }
    }
    Ok(())
}

/// Canonical form: `v o s c t m* a* other*`, CRLF line endings.
pub fn serialize_sdp(s: &SdpSession) -> Result<Vec<u8>, SdpError> {
    validate(s)?;
    let mut out = String::new();
    let _ = write!(out, "v={}\r\n", s.version);
    let _ = write!(out, "o={}\r\n", s.origin);
    let _ = write!(out, "s={}\r\n", s.session_name);
    let _ = write!(out, "c=IN IP4 {}\r\n", s.connection_ip);
    let _ = write!(out, "t={}\r\n", s.timing);
    for m in &s.media {
        let _ = write!(out, "m={} {} {}", m.media_type.as_str(), m.port, m.proto);
        for f in &m.formats {
            let _ = write!(out, " {f}");
        }
        out.push_str("\r\n");
    }
    for a in &s.attributes {
        let _ = write!(out, "a={a}\r\n");
    }
    for l in &s.other_lines {
        let _ = write!(out, "{l}\r\n");
    }
    Ok(out.into_bytes())
}

/// Points the single media stream at `relay`. Returns the rewritten session and the
/// address it previously named.
pub fn rewrite_media(
    s: &SdpSession,
    relay: TransportAddress,
) -> Result<(SdpSession, TransportAddress), SdpError> {
    if s.media.len() != 1 {
        return Err(SdpError::MultipleMediaUnsupported(s.media.len()));
    }
    let original = s
        .media_address()
        .ok_or_else(|| SdpError::InvariantViolation("media port 0".into()))?;
    let mut out = s.clone();
    out.connection_ip = relay.ip();
    out.media[0].port = relay.port();
    Ok((out, original))
}
