//! RTP fixed-header codec (RFC 1889 framing). Payloads are opaque.

use thiserror::Error;

pub const RTP_VERSION: u8 = 2;
pub const FIXED_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RtpError {
    #[error("datagram of {0} bytes is shorter than the RTP header")]
    TooShort(usize),
    #[error("RTP version {0}, expected 2")]
    BadVersion(u8),
    #[error("CSRC list or header extension runs past the datagram")]
    Truncated,
    #[error("padding length {0} is invalid")]
    BadPadding(u8),
    #[error("{field} out of range")]
    FieldOutOfRange { field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtpPacket {
    pub version: u8,
    pub marker: bool,
    pub payload_type: u8,
    pub sequence: u16,
    pub timestamp: u32,
    pub ssrc: u32,
    pub payload: Vec<u8>,
}

/// Decodes the fixed header, skipping any CSRC list, extension and padding.
pub fn parse_rtp(raw: &[u8]) -> Result<RtpPacket, RtpError> {
    if raw.len() < FIXED_HEADER_LEN {
        return Err(RtpError::TooShort(raw.len()));
    }
    let version = raw[0] >> 6;
    if version != RTP_VERSION {
        return Err(RtpError::BadVersion(version));
    }
    let padding = raw[0] & 0x20 != 0;
    let extension = raw[0] & 0x10 != 0;
    let csrc_count = (raw[0] & 0x0f) as usize;

    let mut offset = FIXED_HEADER_LEN + 4 * csrc_count;
    if extension {
        let ext = raw.get(offset..offset + 4).ok_or(RtpError::Truncated)?;
        let words = u16::from_be_bytes([ext[2], ext[3]]) as usize;
        offset += 4 + 4 * words;
    }
    if offset > raw.len() {
        return Err(RtpError::Truncated);
    }
    let mut end = raw.len();
    if padding {
        let pad = raw[raw.len() - 1];
        if pad == 0 || pad as usize > raw.len() - offset {
            return Err(RtpError::BadPadding(pad));
        }
        end -= pad as usize;
    }

    Ok(RtpPacket {
        version,
        marker: raw[1] & 0x80 != 0,
        payload_type: raw[1] & 0x7f,
        sequence: u16::from_be_bytes([raw[2], raw[3]]),
        timestamp: u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]),
        ssrc: u32::from_be_bytes([raw[8], raw[9], raw[10], raw[11]]),
        payload: raw[offset..end].to_vec(),
    })
}

/// Builds a packet with no CSRCs, extension, padding or marker.
pub fn build_rtp(
    payload_type: u8,
    sequence: u16,
    timestamp: u32,
    ssrc: u32,
    payload: &[u8],
) -> Result<Vec<u8>, RtpError> {
    if payload_type > 127 {
        return Err(RtpError::FieldOutOfRange {
            field: "payload type",
        });
    }
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + payload.len());
    out.push(RTP_VERSION << 6);
    out.push(payload_type);
    out.extend_from_slice(&sequence.to_be_bytes());
    out.extend_from_slice(&timestamp.to_be_bytes());
    out.extend_from_slice(&ssrc.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes header bits one at a time, MSB first, as an independent encoder.
    fn bit_encode(fields: &[(u64, u32)]) -> Vec<u8> {
        let mut bits = Vec::new();
        for &(value, width) in fields {
            for i in (0..width).rev() {
                bits.push(((value >> i) & 1) as u8);
            }
        }
        bits.chunks(8)
            .map(|c| c.iter().fold(0u8, |acc, b| (acc << 1) | b))
            .collect()
    }

    #[test]
    fn decodes_hand_encoded_header() {
        // V=2 P=0 X=0 CC=0 M=0 PT=0 seq=1 ts=0 ssrc=0xDEADBEEF
        let raw = bit_encode(&[(2, 2), (0, 1), (0, 1), (0, 4), (0, 1), (0, 7), (1, 16), (0, 32), (0xDEAD_BEEF, 32)]);
        assert_eq!(raw.len(), 12);
        let p = parse_rtp(&raw).unwrap();
        assert_eq!(
            p,
            RtpPacket {
                version: 2,
                marker: false,
                payload_type: 0,
                sequence: 1,
                timestamp: 0,
                ssrc: 0xDEAD_BEEF,
                payload: vec![],
            }
        );
        assert_eq!(build_rtp(0, 1, 0, 0xDEAD_BEEF, &[]).unwrap(), raw);
    }

    #[test]
    fn boundary_errors() {
        assert_eq!(parse_rtp(&[0x80; 11]), Err(RtpError::TooShort(11)));
        let mut raw = build_rtp(0, 1, 0, 0, &[]).unwrap();
        raw[0] = 0x40;
        assert_eq!(parse_rtp(&raw), Err(RtpError::BadVersion(1)));
        assert_eq!(
            build_rtp(128, 0, 0, 0, &[]),
            Err(RtpError::FieldOutOfRange { field: "payload type" })
        );
    }

    #[test]
    fn skips_csrc_extension_and_padding() {
        // V=2 P=1 X=1 CC=2, M=1 PT=8
        let mut raw = vec![0b1011_0010, 0x88, 0, 7, 0, 0, 0, 9, 1, 2, 3, 4];
        raw.extend_from_slice(&[0xAA; 8]); // two CSRCs
        raw.extend_from_slice(&[0xBE, 0xDE, 0, 1, 0xCC, 0xCC, 0xCC, 0xCC]); // one-word extension
        raw.extend_from_slice(b"voice");
        raw.extend_from_slice(&[0, 0, 3]); // 3 bytes padding
        let p = parse_rtp(&raw).unwrap();
        assert!(p.marker);
        assert_eq!(p.payload_type, 8);
        assert_eq!(p.sequence, 7);
        assert_eq!(p.timestamp, 9);
        assert_eq!(p.ssrc, 0x0102_0304);
        assert_eq!(p.payload, b"voice");
    }

    #[test]
    fn truncated_extensions_and_padding() {
        let mut raw = build_rtp(0, 0, 0, 0, &[]).unwrap();
        raw[0] |= 0x0f; // 15 CSRCs, none present
        assert_eq!(parse_rtp(&raw), Err(RtpError::Truncated));

        let mut raw = build_rtp(0, 0, 0, 0, &[0, 0]).unwrap();
        raw[0] |= 0x10;
        assert_eq!(parse_rtp(&raw), Err(RtpError::Truncated));

        let mut raw = build_rtp(0, 0, 0, 0, &[9]).unwrap();
        raw[0] |= 0x20;
        assert_eq!(parse_rtp(&raw), Err(RtpError::BadPadding(9)));
    }

    #[test]
    fn sequence_wrap_is_not_interpreted() {
        for seq in [65535u16, 0] {
            let raw = build_rtp(0, seq, 160, 1, b"x").unwrap();
            assert_eq!(parse_rtp(&raw).unwrap().sequence, seq);
        }
    }
}
