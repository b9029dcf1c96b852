//! SIP message subset: REGISTER, INVITE, ACK and BYE requests and their responses.

mod address;
pub mod framing;
mod message;
mod uri;

pub use address::{AddressError, Transport, TransportAddress};
pub use framing::{FrameDecoder, FramingError};
pub use message::{
    parse_message, serialize_message, stamp_received, CSeq, HostPort, Method, SipError, SipMessage,
    StartLine, ViaHeader,
};
pub use uri::{uri_of, SipUri};
