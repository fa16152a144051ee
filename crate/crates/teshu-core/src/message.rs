//! Key-value messages and the buffers that shuffles move around.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Fixed per-message framing overhead added to `size(msg)` so empty-value
/// messages still cost bytes on the wire.
pub const MSG_HEADER_BYTES: u64 = 8;

/// An opaque key-value payload. The key is never empty; the value may be.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Message {
    key: Vec<u8>,
    value: Vec<u8>,
}

impl Message {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Result<Self> {
        let key = key.into();
        if key.is_empty() {
            return Err(Error::InvalidArgument("message key must be non-empty".into()));
        }
        Ok(Self { key, value: value.into() })
    }

    /// Convenience constructor for messages whose value is a counter.
    pub fn counted(key: impl Into<Vec<u8>>, count: u64) -> Result<Self> {
        Self::new(key, encode_u64(count).to_vec())
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    pub fn size_bytes(&self) -> u64 {
        self.key.len() as u64 + self.value.len() as u64 + MSG_HEADER_BYTES
    }
}

/// Fixed-width little-endian codec for numeric combiner values.
pub fn encode_u64(v: u64) -> [u8; 8] {
    v.to_le_bytes()
}

/// Decodes the first eight bytes of a value as a little-endian integer.
pub fn decode_u64(bytes: &[u8]) -> Result<u64> {
    let arr: [u8; 8] = bytes
        .get(..8)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::InvalidArgument("value shorter than 8-byte codec".into()))?;
    Ok(u64::from_le_bytes(arr))
}

/// An ordered multiset of messages with a cached byte total.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MessageBuffer {
    msgs: Vec<Message>,
    total_bytes: u64,
}

impl MessageBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: Message) {
        self.total_bytes += msg.size_bytes();
        self.msgs.push(msg);
    }

    pub fn extend_from(&mut self, other: MessageBuffer) {
        self.total_bytes += other.total_bytes;
        self.msgs.extend(other.msgs);
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Message> {
        self.msgs.iter()
    }

    pub fn into_messages(self) -> Vec<Message> {
        self.msgs
    }

    /// Checked invariant: the cached total matches the per-message sum.
    pub fn bytes_consistent(&self) -> bool {
        self.msgs.iter().map(Message::size_bytes).sum::<u64>() == self.total_bytes
    }
}

impl FromIterator<Message> for MessageBuffer {
    fn from_iter<T: IntoIterator<Item = Message>>(iter: T) -> Self {
        let mut buf = MessageBuffer::new();
        for m in iter {
            buf.push(m);
        }
        buf
    }
}

impl<'a> IntoIterator for &'a MessageBuffer {
    type Item = &'a Message;
    type IntoIter = core::slice::Iter<'a, Message>;
    fn into_iter(self) -> Self::IntoIter {
        self.msgs.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_key_rejected() {
        assert!(Message::new(Vec::new(), b"v".to_vec()).is_err());
    }

    #[test]
    fn size_includes_header() {
        let m = Message::new(b"ab".to_vec(), Vec::new()).unwrap();
        assert_eq!(m.size_bytes(), 2 + MSG_HEADER_BYTES);
    }

    #[test]
    fn buffer_tracks_bytes() {
        let mut buf = MessageBuffer::new();
        buf.push(Message::counted(b"x".to_vec(), 1).unwrap());
        buf.push(Message::counted(b"yy".to_vec(), 2).unwrap());
        assert_eq!(buf.total_bytes(), (1 + 8 + 8) + (2 + 8 + 8));
        assert!(buf.bytes_consistent());
    }

    #[test]
    fn codec_round_trip() {
        for v in [0u64, 1, u64::MAX, 123_456_789] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
    }
}
