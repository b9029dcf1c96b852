use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::address::{Transport, TransportAddress};
use super::uri::{uri_of, SipUri};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SipError {
    #[error("malformed start line: {0}")]
    MalformedStartLine(String),
    #[error("unsupported method `{0}`")]
    UnsupportedMethod(String),
    #[error("missing mandatory header {0}")]
    MissingMandatoryHeader(&'static str),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("more than one Via header")]
    MultipleVia,
    #[error("CSeq method {cseq} does not match request method {method}")]
    CSeqMismatch { method: Method, cseq: Method },
    #[error("body is {actual} bytes but Content-Length says {declared}")]
    BodyLengthMismatch { declared: usize, actual: usize },
    #[error("header section is not terminated by an empty line")]
    Truncated,
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Register,
    Invite,
    Ack,
    Bye,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Register, Method::Invite, Method::Ack, Method::Bye];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Register => "REGISTER",
            Method::Invite => "INVITE",
            Method::Ack => "ACK",
            Method::Bye => "BYE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SipError::UnsupportedMethod(s.to_owned()))
    }
}

/// `host[:port]` as it appears in a Via sent-by.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostPort {
    pub host: String,
    pub port: Option<u16>,
}

impl HostPort {
    fn parse(s: &str) -> Option<HostPort> {
        let (host, port) = match s.rsplit_once(':') {
            Some((h, p)) => (h, Some(p.parse::<u16>().ok().filter(|p| *p != 0)?)),
            None => (s, None),
        };
        if host.is_empty() || !host.chars().all(|c| c.is_ascii_alphanumeric() || "-._".contains(c)) {
            return None;
        }
        Some(HostPort {
            host: host.to_owned(),
            port,
        })
    }
}

impl fmt::Display for HostPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.host)?;
        if let Some(p) = self.port {
            write!(f, ":{p}")?;
        }
        Ok(())
    }
}

impl From<TransportAddress> for HostPort {
    fn from(a: TransportAddress) -> Self {
        HostPort {
            host: a.ip().to_string(),
            port: Some(a.port()),
        }
    }
}

/// A single Via header. `received` holds the observed source as `ip:port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViaHeader {
    pub transport: Transport,
    pub sent_by: HostPort,
    pub branch: Option<String>,
    pub received: Option<TransportAddress>,
    /// Any other parameters, in wire order.
    pub params: Vec<(String, Option<String>)>,
}

impl ViaHeader {
    pub fn new(transport: Transport, sent_by: impl Into<HostPort>) -> Self {
        ViaHeader {
            transport,
            sent_by: sent_by.into(),
            branch: None,
            received: None,
            params: Vec::new(),
        }
    }

    pub fn with_branch(mut self, branch: impl Into<String>) -> Self {
        self.branch = Some(branch.into());
        self
    }

    fn parse(value: &str) -> Result<ViaHeader, SipError> {
        let bad = || SipError::MalformedHeader(format!("Via: {value}"));
        if value.contains(',') {
            return Err(SipError::MultipleVia);
        }
        let value = value.trim();
        let (proto, rest) = value.split_once(char::is_whitespace).ok_or_else(bad)?;
        let transport = match proto.to_ascii_uppercase().as_str() {
            "SIP/2.0/UDP" => Transport::Udp,
            "SIP/2.0/TCP" => Transport::Tcp,
            _ => return Err(bad()),
        };
        let mut parts = rest.split(';').map(str::trim);
        let sent_by = parts.next().and_then(HostPort::parse).ok_or_else(bad)?;
        let mut via = ViaHeader::new(transport, sent_by);
        for p in parts {
            let (name, val) = match p.split_once('=') {
                Some((n, v)) => (n.trim(), Some(v.trim())),
                None => (p, None),
            };
            if !is_token(name) || val.is_some_and(|v| !is_param_value(v)) {
                return Err(bad());
            }
            match (name.to_ascii_lowercase().as_str(), val) {
                ("branch", Some(v)) => via.branch = Some(v.to_owned()),
                ("received", Some(v)) => via.received = Some(v.parse().map_err(|_| bad())?),
                ("branch" | "received", None) => return Err(bad()),
                _ => via.params.push((name.to_owned(), val.map(str::to_owned))),
            }
        }
        Ok(via)
    }

    fn validate(&self) -> Result<(), SipError> {
        if HostPort::parse(&self.sent_by.to_string()).as_ref() != Some(&self.sent_by) {
            return Err(SipError::InvariantViolation(format!("Via sent-by `{}`", self.sent_by)));
        }
        if self.branch.as_deref().is_some_and(|b| !is_param_value(b)) {
            return Err(SipError::InvariantViolation("Via branch".into()));
        }
        for (name, val) in &self.params {
            let reserved = name.eq_ignore_ascii_case("branch") || name.eq_ignore_ascii_case("received");
            if reserved || !is_token(name) || val.as_deref().is_some_and(|v| !is_param_value(v)) {
                return Err(SipError::InvariantViolation(format!("Via parameter `{name}`")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ViaHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SIP/2.0/{} {}", self.transport, self.sent_by)?;
        if let Some(b) = &self.branch {
            write!(f, ";branch={b}")?;
        }
        if let Some(r) = &self.received {
            write!(f, ";received={r}")?;
        }
        for (n, v) in &self.params {
            match v {
                Some(v) => write!(f, ";{n}={v}")?,
                None => write!(f, ";{n}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CSeq {
    pub seq: u32,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartLine {
    Request { method: Method, uri: String },
    Response { code: u16, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipMessage {
    pub start: StartLine,
    pub via: ViaHeader,
    pub from: String,
    pub to: String,
    pub call_id: String,
    pub cseq: CSeq,
    pub contact: Option<String>,
    pub content_type: Option<String>,
    /// Headers this crate does not interpret, in wire order with their original names.
    pub extra_headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl SipMessage {
    pub fn request(
        method: Method,
        uri: impl Into<String>,
        via: ViaHeader,
        from: impl Into<String>,
        to: impl Into<String>,
        call_id: impl Into<String>,
        seq: u32,
    ) -> SipMessage {
        SipMessage {
            start: StartLine::Request {
                method,
                uri: uri.into(),
            },
            via,
            from: from.into(),
            to: to.into(),
            call_id: call_id.into(),
            cseq: CSeq { seq, method },
            contact: None,
            content_type: None,
            extra_headers: Vec::new(),
            body: Vec::new(),
        }
    }

    /// A body-less response to `req` echoing Via, From, To, Call-ID and CSeq.
    pub fn response_to(req: &SipMessage, code: u16, reason: impl Into<String>) -> SipMessage {
        SipMessage {
            start: StartLine::Response {
                code,
                reason: reason.into(),
            },
            via: req.via.clone(),
            from: req.from.clone(),
            to: req.to.clone(),
            call_id: req.call_id.clone(),
            cseq: req.cseq,
            contact: None,
            content_type: None,
            extra_headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_body(mut self, content_type: impl Into<String>, body: Vec<u8>) -> Self {
        self.content_type = Some(content_type.into());
        self.body = body;
        self
    }

    pub fn with_contact(mut self, contact: impl Into<String>) -> Self {
        self.contact = Some(contact.into());
        self
    }

    pub fn method(&self) -> Option<Method> {
        match &self.start {
            StartLine::Request { method, .. } => Some(*method),
            StartLine::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match &self.start {
            StartLine::Response { code, .. } => Some(*code),
            StartLine::Request { .. } => None,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(self.start, StartLine::Request { .. })
    }

    pub fn request_uri(&self) -> Option<&str> {
        match &self.start {
            StartLine::Request { uri, .. } => Some(uri),
            StartLine::Response { .. } => None,
        }
    }

    pub fn contact_uri(&self) -> Option<SipUri> {
        self.contact.as_deref().and_then(uri_of)
    }

    pub fn from_uri(&self) -> Option<SipUri> {
        uri_of(&self.from)
    }

    pub fn to_uri(&self) -> Option<SipUri> {
        uri_of(&self.to)
    }

    pub fn is_sdp(&self) -> bool {
        self.content_type
            .as_deref()
            .is_some_and(|c| c.trim().eq_ignore_ascii_case("application/sdp"))
    }

    /// Checks the invariants serialization relies on.
    pub fn validate(&self) -> Result<(), SipError> {
        let bad = |what: &str| Err(SipError::InvariantViolation(what.to_owned()));
        match &self.start {
            StartLine::Request { method, uri } => {
                if uri.contains(char::is_whitespace) || !uri.get(..4).is_some_and(|s| s.eq_ignore_ascii_case("sip:")) {
                    return bad("request URI must be a single sip: token");
                }
                if *method != self.cseq.method {
                    return Err(SipError::CSeqMismatch {
                        method: *method,
                        cseq: self.cseq.method,
                    });
                }
            }
            StartLine::Response { code, reason } => {
                if !(100..=699).contains(code) {
                    return bad("status code outside 100..=699");
                }
                if reason.contains(char::is_control) || (!is_clean_value(reason) && !reason.is_empty()) {
                    return bad("reason phrase");
                }
            }
        }
        if self.call_id.is_empty() {
            return bad("Call-ID is empty");
        }
        let values = [
            Some(("From", &self.from)),
            Some(("To", &self.to)),
            Some(("Call-ID", &self.call_id)),
            self.contact.as_ref().map(|c| ("Contact", c)),
            self.content_type.as_ref().map(|c| ("Content-Type", c)),
        ];
        for (name, v) in values.into_iter().flatten() {
            if !is_clean_value(v) && !(v.is_empty() && name != "Call-ID") {
                return bad(&format!("{name} value"));
            }
        }
        for (name, v) in &self.extra_headers {
            if !is_token(name) || canonical_header(name).is_some() || !(is_clean_value(v) || v.is_empty()) {
                return bad(&format!("extra header `{name}`"));
            }
        }
        self.via.validate()
    }
}

/// Adds or replaces the Via `received` parameter with the observed source.
pub fn stamp_received(mut msg: SipMessage, source: TransportAddress) -> SipMessage {
    msg.via.received = Some(source);
    msg
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Known {
    Via,
    From,
    To,
    CallId,
    CSeq,
    Contact,
    ContentType,
    ContentLength,
}

fn canonical_header(name: &str) -> Option<Known> {
    Some(match name.to_ascii_lowercase().as_str() {
        "via" => Known::Via,
        "from" => Known::From,
        "to" => Known::To,
        "call-id" => Known::CallId,
        "cseq" => Known::CSeq,
        "contact" => Known::Contact,
        "content-type" => Known::ContentType,
        "content-length" => Known::ContentLength,
        _ => return None,
    })
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-.!%*_+`'~".contains(&b))
}

fn is_param_value(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_graphic() && !b";,=".contains(&b))
}

/// Non-empty, no control characters, no surrounding whitespace.
fn is_clean_value(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && !s.chars().any(|c| c.is_control() && c != '\t')
}

/// Splits `raw` at the first empty line. Returns header text and body offset.
pub(crate) fn split_head(raw: &[u8]) -> Option<(&[u8], usize)> {
    let mut start = 0;
    while start <= raw.len() {
        let end = raw[start..].iter().position(|b| *b == b'\n')? + start;
        let line = &raw[start..end];
        if line.is_empty() || line == b"\r" {
            return Some((&raw[..start], end + 1));
        }
        start = end + 1;
    }
    None
}

fn parse_start_line(line: &str) -> Result<StartLine, SipError> {
    let malformed = || SipError::MalformedStartLine(line.chars().take(80).collect());
    if let Some(rest) = line.strip_prefix("SIP/2.0 ") {
        let (code, reason) = rest.split_once(' ').unwrap_or((rest, ""));
        if code.len() != 3 {
            return Err(malformed());
        }
        let code: u16 = code.parse().map_err(|_| malformed())?;
        if !(100..=699).contains(&code) || reason.chars().any(char::is_control) {
            return Err(malformed());
        }
        return Ok(StartLine::Response {
            code,
            reason: reason.trim().to_owned(),
        });
    }
    let mut it = line.split_whitespace();
    let (Some(method), Some(uri), Some(version), None) = (it.next(), it.next(), it.next(), it.next()) else {
        return Err(malformed());
    };
    if version != "SIP/2.0" || !uri.to_ascii_lowercase().starts_with("sip:") {
        return Err(malformed());
    }
    if !method.bytes().all(|b| b.is_ascii_uppercase()) {
        return Err(malformed());
    }
    Ok(StartLine::Request {
        method: method.parse()?,
        uri: uri.to_owned(),
    })
}

fn parse_cseq(value: &str) -> Result<CSeq, SipError> {
    let bad = || SipError::MalformedHeader(format!("CSeq: {value}"));
    let mut it = value.split_whitespace();
    let (Some(seq), Some(method), None) = (it.next(), it.next(), it.next()) else {
        return Err(bad());
    };
    Ok(CSeq {
        seq: seq.parse().map_err(|_| bad())?,
        method: method.parse()?,
    })
}

/// Parses one complete SIP message. Accepts CRLF or bare LF line endings.
pub fn parse_message(raw: &[u8]) -> Result<SipMessage, SipError> {
    let (head, body_at) = split_head(raw).ok_or(SipError::Truncated)?;
    let head = std::str::from_utf8(head)
        .map_err(|_| SipError::MalformedStartLine("header section is not UTF-8".into()))?;
    let mut lines = head.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let start = parse_start_line(lines.next().unwrap_or_default())?;

    // Unfold continuation lines.
    let mut headers: Vec<String> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if line.starts_with([' ', '\t']) {
            match headers.last_mut() {
                Some(prev) => {
                    prev.push(' ');
                    prev.push_str(line.trim());
                }
                None => return Err(SipError::MalformedHeader(line.to_owned())),
            }
        } else {
            headers.push(line.to_owned());
        }
    }

    let mut via = None;
    let mut from = None;
    let mut to = None;
    let mut call_id = None;
    let mut cseq = None;
    let mut contact = None;
    let mut content_type = None;
    let mut content_length = None;
    let mut extra_headers = Vec::new();

    for h in &headers {
        let (name, value) = h
            .split_once(':')
            .ok_or_else(|| SipError::MalformedHeader(h.clone()))?;
        let name = name.trim_end();
        if !is_token(name) || value.chars().any(|c| c.is_control() && c != '\t') {
            return Err(SipError::MalformedHeader(h.clone()));
        }
        let value = value.trim();
        let dup = || SipError::MalformedHeader(format!("duplicate {name}"));
        let set = |slot: &mut Option<String>| -> Result<(), SipError> {
            if slot.replace(value.to_owned()).is_some() {
                return Err(dup());
            }
            Ok(())
        };
        match canonical_header(name) {
            Some(Known::Via) => {
                if via.is_some() {
                    return Err(SipError::MultipleVia);
                }
                via = Some(ViaHeader::parse(value)?);
            }
            Some(Known::From) => set(&mut from)?,
            Some(Known::To) => set(&mut to)?,
            Some(Known::CallId) => set(&mut call_id)?,
            Some(Known::Contact) => set(&mut contact)?,
            Some(Known::ContentType) => set(&mut content_type)?,
            Some(Known::CSeq) => {
                if cseq.replace(parse_cseq(value)?).is_some() {
                    return Err(dup());
                }
            }
            Some(Known::ContentLength) => {
                let n: usize = value
                    .parse()
                    .map_err(|_| SipError::MalformedHeader(h.clone()))?;
                if content_length.replace(n).is_some() {
                    return Err(dup());
                }
            }
            None => extra_headers.push((name.to_owned(), value.to_owned())),
        }
    }

    let via = via.ok_or(SipError::MissingMandatoryHeader("Via"))?;
    let from = from.ok_or(SipError::MissingMandatoryHeader("From"))?;
    let to = to.ok_or(SipError::MissingMandatoryHeader("To"))?;
    let call_id = call_id
        .filter(|c| !c.is_empty())
        .ok_or(SipError::MissingMandatoryHeader("Call-ID"))?;
    let cseq = cseq.ok_or(SipError::MissingMandatoryHeader("CSeq"))?;

    if let StartLine::Request { method, .. } = &start {
        if *method != cseq.method {
            return Err(SipError::CSeqMismatch {
                method: *method,
                cseq: cseq.method,
            });
        }
    }

    let body = &raw[body_at.min(raw.len())..];
    let declared = content_length.unwrap_or(0);
    if body.len() != declared {
        return Err(SipError::BodyLengthMismatch {
            declared,
            actual: body.len(),
        });
    }

    Ok(SipMessage {
        start,
        via,
        from,
        to,
        call_id,
        cseq,
        contact,
        content_type,
        extra_headers,
        body: body.to_vec(),
    })
}

/// Emits the canonical wire form. Content-Length is always computed from the body.
pub fn serialize_message(msg: &SipMessage) -> Result<Vec<u8>, SipError> {
    use std::fmt::Write as _;

    msg.validate()?;
    let mut out = String::new();
    match &msg.start {
        StartLine::Request { method, uri } => {
            let _ = write!(out, "{method} {uri} SIP/2.0\r\n");
        }
        StartLine::Response { code, reason } => {
            let _ = write!(out, "SIP/2.0 {code} {reason}\r\n");
        }
    }
    let _ = write!(out, "Via: {}\r\n", msg.via);
    let _ = write!(out, "From: {}\r\n", msg.from);
    let _ = write!(out, "To: {}\r\n", msg.to);
    let _ = write!(out, "Call-ID: {}\r\n", msg.call_id);
    let _ = write!(out, "CSeq: {} {}\r\n", msg.cseq.seq, msg.cseq.method);
    if let Some(c) = &msg.contact {
        let _ = write!(out, "Contact: {c}\r\n");
    }
    if let Some(c) = &msg.content_type {
        let _ = write!(out, "Content-Type: {c}\r\n");
    }
    for (n, v) in &msg.extra_headers {
        let _ = write!(out, "{n}: {v}\r\n");
    }
    let _ = write!(out, "Content-Length: {}\r\n\r\n", msg.body.len());
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&msg.body);
    Ok(bytes)
}
