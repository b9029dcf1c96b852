//! Content-Length framing for SIP over a byte stream.

use thiserror::Error;

use super::message::split_head;

/// Largest message (headers plus body) accepted from a stream.
pub const MAX_MESSAGE_SIZE: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("message exceeds {MAX_MESSAGE_SIZE} bytes")]
    TooLarge,
    #[error("unreadable Content-Length header")]
    BadContentLength,
}

/// Accumulates stream bytes and yields one raw message at a time.
///
/// After an error the stream is unusable; callers should drop the connection.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete message, or `None` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, FramingError> {
        // Keep-alive CRLFs between messages.
        let lead = self.buf.iter().take_while(|b| matches!(b, b'\r' | b'\n')).count();
        self.buf.drain(..lead);

        let Some((head, body_at)) = split_head(&self.buf) else {
            if self.buf.len() > MAX_MESSAGE_SIZE {
                return Err(FramingError::TooLarge);
            }
            return Ok(None);
        };
        let len = content_length(head)?;
        let total = body_at + len;
        if total > MAX_MESSAGE_SIZE {
            return Err(FramingError::TooLarge);
        }
        if self.buf.len() < total {
            return Ok(None);
        }
        Ok(Some(self.buf.drain(..total).collect()))
    }
}

fn content_length(head: &[u8]) -> Result<usize, FramingError> {
    let mut found = None;
    for line in head.split(|b| *b == b'\n') {
        let line = String::from_utf8_lossy(line);
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                let n = value.trim().parse().map_err(|_| FramingError::BadContentLength)?;
                if found.replace(n).is_some_and(|prev| prev != n) {
                    return Err(FramingError::BadContentLength);
                }
            }
        }
    }
    Ok(found.unwrap_or(0))
}
