//! Fixed-size link cells and the relay payload carried inside RELAY cells.
//!
//! Link cell layout (512 bytes): `circ_id: u32 LE | command: u8 | payload[507]`.
//!
//! Relay payload layout (507 bytes, all little-endian):
//!
//! | offset | size | field      |
//! |--------|------|------------|
//! | 0      | 1    | relay_cmd  |
//! | 1      | 2    | recognized |
//! | 3      | 2    | stream_id  |
//! | 5      | 4    | digest     |
//! | 9      | 2    | length     |
//! | 11     | 496  | data       |

use std::fmt;

use thiserror::Error;

pub const CELL_LEN: usize = 512;
pub const PAYLOAD_LEN: usize = 507;
pub const RELAY_HEADER_LEN: usize = 11;
pub const RELAY_DATA_LEN: usize = 496;

pub const DIGEST_RANGE: std::ops::Range<usize> = 5..9;
pub const RECOGNIZED_RANGE: std::ops::Range<usize> = 1..3;

/// Link-level commands.
pub mod link_cmd {
    pub const CREATE: u8 = 1;
    pub const CREATED: u8 = 2;
    pub const RELAY: u8 = 3;
    pub const DESTROY: u8 = 4;
}

/// Core relay commands (1..=31). Everything from 32 up is extension space.
pub mod relay_cmd {
    pub const DATA: u8 = 1;
    pub const END: u8 = 2;
    pub const EXTEND: u8 = 3;
    pub const EXTENDED: u8 = 4;
    pub const PLUGIN_DELIVER: u8 = 16;
    pub const PLUGIN_ACK: u8 = 17;
    pub const PLUGIN_ERR: u8 = 18;

    pub const FIRST_EXTENSION: u8 = 32;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CellError {
    #[error("link cell must be {CELL_LEN} bytes, got {0}")]
    BadCellLength(usize),
    #[error("cell payload must be {PAYLOAD_LEN} bytes, got {0}")]
    BadPayloadLength(usize),
    #[error("relay data length {0} exceeds {RELAY_DATA_LEN}")]
    DataTooLong(usize),
    #[error("feature id {0} is in the core command range")]
    NotAFeature(u8),
}

/// An extension relay command in 32..=255.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureId(u8);

impl FeatureId {
    pub fn new(value: u8) -> Result<FeatureId, CellError> {
        if value >= relay_cmd::FIRST_EXTENSION {
            Ok(FeatureId(value))
        } else {
            Err(CellError::NotAFeature(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct LinkCell {
    pub circ_id: u32,
    pub command: u8,
    pub payload: [u8; PAYLOAD_LEN],
}

impl fmt::Debug for LinkCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkCell")
            .field("circ_id", &self.circ_id)
            .field("command", &self.command)
            .finish_non_exhaustive()
    }
}

impl LinkCell {
    pub fn new(circ_id: u32, command: u8, payload: [u8; PAYLOAD_LEN]) -> LinkCell {
        LinkCell { circ_id, command, payload }
    }

    /// Builds a cell from a payload slice, which must be exactly 507 bytes.
    pub fn from_parts(circ_id: u32, command: u8, payload: &[u8]) -> Result<LinkCell, CellError> {
        let payload: [u8; PAYLOAD_LEN] = payload.try_into().map_err(|_| CellError::BadPayloadLength(payload.len()))?;
        Ok(LinkCell { circ_id, command, payload })
    }

    /// Builds a cell whose payload starts with `prefix` and is zero-filled after.
    pub fn with_prefix(circ_id: u32, command: u8, prefix: &[u8]) -> Result<LinkCell, CellError> {
        if prefix.len() > PAYLOAD_LEN {
            return Err(CellError::BadPayloadLength(prefix.len()));
        }
        let mut payload = [0u8; PAYLOAD_LEN];
        payload[..prefix.len()].copy_from_slice(prefix);
        Ok(LinkCell { circ_id, command, payload })
    }

    pub fn encode(&self) -> [u8; CELL_LEN] {
        let mut out = [0u8; CELL_LEN];
        out[..4].copy_from_slice(&self.circ_id.to_le_bytes());
        out[4] = self.command;
        out[5..].copy_from_slice(&self.payload);
        out
    }

    /// Parses a 512-byte cell. Unknown commands are preserved as-is.
    pub fn decode(bytes: &[u8]) -> Result<LinkCell, CellError> {
        if bytes.len() != CELL_LEN {
            return Err(CellError::BadCellLength(bytes.len()));
        }
        let circ_id = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let mut payload = [0u8; PAYLOAD_LEN];
        payload.copy_from_slice(&bytes[5..]);
        Ok(LinkCell { circ_id, command: bytes[4], payload })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct RelayPayload {
    pub relay_cmd: u8,
    pub recognized: u16,
    pub stream_id: u16,
    pub digest: u32,
    pub length: u16,
    pub data: [u8; RELAY_DATA_LEN],
}

impl fmt::Debug for RelayPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelayPayload")
            .field("relay_cmd", &self.relay_cmd)
            .field("recognized", &self.recognized)
            .field("stream_id", &self.stream_id)
            .field("digest", &format_args!("{:#010x}", self.digest))
            .field("length", &self.length)
            .finish_non_exhaustive()
    }
}

impl RelayPayload {
    /// A fresh payload with `recognized = 0` and a zero digest.
    pub fn new(relay_cmd: u8, stream_id: u16, data: &[u8]) -> Result<RelayPayload, CellError> {
        if data.len() > RELAY_DATA_LEN {
            return Err(CellError::DataTooLong(data.len()));
        }
        let mut buf = [0u8; RELAY_DATA_LEN];
        buf[..data.len()].copy_from_slice(data);
        Ok(RelayPayload { relay_cmd, recognized: 0, stream_id, digest: 0, length: data.len() as u16, data: buf })
    }

    /// The `length`-prefixed portion of `data`, clamped to the data buffer.
    pub fn body(&self) -> &[u8] {
        &self.data[..usize::from(self.length).min(RELAY_DATA_LEN)]
    }

    pub fn is_extension(&self) -> bool {
        self.relay_cmd >= relay_cmd::FIRST_EXTENSION
    }

    pub fn encode(&self) -> [u8; PAYLOAD_LEN] {
        let mut out = [0u8; PAYLOAD_LEN];
        out[0] = self.relay_cmd;
        out[1..3].copy_from_slice(&self.recognized.to_le_bytes());
        out[3..5].copy_from_slice(&self.stream_id.to_le_bytes());
        out[5..9].copy_from_slice(&self.digest.to_le_bytes());
        out[9..11].copy_from_slice(&self.length.to_le_bytes());
        out[RELAY_HEADER_LEN..].copy_from_slice(&self.data);
        out
    }

    /// Parses a decrypted payload. `length` is carried verbatim; callers
    /// that care use [`RelayPayload::validate_length`].
    pub fn decode(bytes: &[u8; PAYLOAD_LEN]) -> RelayPayload {
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let mut data = [0u8; RELAY_DATA_LEN];
        data.copy_from_slice(&bytes[RELAY_HEADER_LEN..]);
        RelayPayload {
            relay_cmd: bytes[0],
            recognized: u16_at(1),
            stream_id: u16_at(3),
            digest: u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")),
            length: u16_at(9),
            data,
        }
    }

    pub fn validate_length(&self) -> Result<(), CellError> {
        if usize::from(self.length) > RELAY_DATA_LEN {
            Err(CellError::DataTooLong(self.length.into()))
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relay_cell_layout() {
        let cell = LinkCell::new(1, link_cmd::RELAY, [0u8; PAYLOAD_LEN]);
        let bytes = cell.encode();
        assert_eq!(&bytes[..5], &[0x01, 0x00, 0x00, 0x00, 0x03]);
        assert!(bytes[5..].iter().all(|&b| b == 0));
        assert_eq!(LinkCell::decode(&bytes).unwrap(), cell);
    }

    #[test]
    fn decode_rejects_wrong_lengths() {
        assert_eq!(LinkCell::decode(&[0u8; 511]), Err(CellError::BadCellLength(511)));
        assert_eq!(LinkCell::decode(&[]), Err(CellError::BadCellLength(0)));
    }

    #[test]
    fn unknown_link_command_survives_decode() {
        let mut bytes = [0u8; CELL_LEN];
        bytes[4] = 0x2A;
        assert_eq!(LinkCell::decode(&bytes).unwrap().command, 42);
    }

    #[test]
    fn from_parts_checks_payload_length() {
        assert_eq!(LinkCell::from_parts(1, 3, &[0u8; 506]), Err(CellError::BadPayloadLength(506)));
        assert!(LinkCell::from_parts(1, 3, &[0u8; 507]).is_ok());
    }

    #[test]
    fn feature_ids_start_at_32() {
        assert!(FeatureId::new(31).is_err());
        assert_eq!(FeatureId::new(32).unwrap().get(), 32);
        assert_eq!(FeatureId::new(255).unwrap().get(), 255);
    }

    #[test]
    fn relay_payload_rejects_oversized_data() {
        assert_eq!(RelayPayload::new(1, 0, &[0u8; 497]).unwrap_err(), CellError::DataTooLong(497));
        assert_eq!(RelayPayload::new(1, 0, &[]).unwrap().body(), &[] as &[u8]);
    }

    proptest! {
        #[test]
        fn link_cell_round_trip(circ_id: u32, command: u8, seed: u64) {
            let mut payload = [0u8; PAYLOAD_LEN];
            for (i, b) in payload.iter_mut().enumerate() {
                *b = (seed.rotate_left(i as u32 % 64) >> (i % 8)) as u8;
            }
            let cell = LinkCell::new(circ_id, command, payload);
            prop_assert_eq!(LinkCell::decode(&cell.encode()).unwrap(), cell);
        }

        #[test]
        fn relay_payload_round_trip(cmd: u8, recognized: u16, stream_id: u16, digest: u32,
                                    data in proptest::collection::vec(any::<u8>(), 0..=RELAY_DATA_LEN)) {
            let mut p = RelayPayload::new(cmd, stream_id, &data).unwrap();
            p.recognized = recognized;
            p.digest = digest;
            let decoded = RelayPayload::decode(&p.encode());
            prop_assert_eq!(decoded.body(), &data[..]);
            prop_assert_eq!(decoded, p);
        }
    }
}
