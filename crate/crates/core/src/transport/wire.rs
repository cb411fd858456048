//! Frame layout of the TCP backend (little-endian):
//!
//! ```text
//! magic u16 | type u8 | flags u8 | dst_addr u64 | rkey u32 | imm u32 | len u32 | payload[len]
//! ```
//!
//! Write acknowledgements reuse the `WRITE_IMM` type with the `ACK` flag set;
//! for those `dst_addr` carries the acknowledged byte count and `rkey` the
//! status code.

pub const MAGIC: u16 = 0x7FAA;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    WriteImm = 1,
    Send = 2,
    AtomicFaa = 3,
    AtomicReply = 4,
    Disconnect = 5,
}

impl TryFrom<u8> for FrameType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Ok(match v {
            1 => Self::WriteImm,
            2 => Self::Send,
            3 => Self::AtomicFaa,
            4 => Self::AtomicReply,
            5 => Self::Disconnect,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

pub mod flags {
    /// Frame acknowledges an earlier `WRITE_IMM`.
    pub const ACK: u8 = 0x01;
    /// The remote operation failed its access check.
    pub const ACCESS_ERROR: u8 = 0x02;
}

pub mod ack_status {
    pub const OK: u32 = 0;
    pub const REMOTE_ACCESS: u32 = 1;
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad frame magic {0:#06x}")]
    BadMagic(u16),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: FrameType,
    pub flags: u8,
    pub dst_addr: u64,
    pub rkey: u32,
    pub imm: u32,
    pub len: u32,
}

impl FrameHeader {
    pub fn new(kind: FrameType) -> Self {
        Self {
            kind,
            flags: 0,
            dst_addr: 0,
            rkey: 0,
            imm: 0,
            len: 0,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        out[2] = self.kind as u8;
        out[3] = self.flags;
        out[4..12].copy_from_slice(&self.dst_addr.to_le_bytes());
        out[12..16].copy_from_slice(&self.rkey.to_le_bytes());
        out[16..20].copy_from_slice(&self.imm.to_le_bytes());
        out[20..24].copy_from_slice(&self.len.to_le_bytes());
        out
    }

    pub fn decode(raw: &[u8; HEADER_LEN]) -> Result<Self, WireError> {
        let magic = u16::from_le_bytes([raw[0], raw[1]]);
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let le32 = |at: usize| u32::from_le_bytes(raw[at..at + 4].try_into().expect("4 bytes"));
        Ok(Self {
            kind: FrameType::try_from(raw[2])?,
            flags: raw[3],
            dst_addr: u64::from_le_bytes(raw[4..12].try_into().expect("8 bytes")),
            rkey: le32(12),
            imm: le32(16),
            len: le32(20),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let h = FrameHeader {
            kind: FrameType::WriteImm,
            flags: 0,
            dst_addr: 0x1122_3344_5566_7788,
            rkey: 0xAABB_CCDD,
            imm: 7,
            len: 100,
        };
        let raw = h.encode();
        assert_eq!(&raw[0..2], &[0xAA, 0x7F]);
        assert_eq!(raw[2], 1);
        assert_eq!(raw[4], 0x88);
        assert_eq!(&raw[12..16], &[0xDD, 0xCC, 0xBB, 0xAA]);
        assert_eq!(&raw[20..24], &[100, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_magic_and_type() {
        let mut raw = FrameHeader::new(FrameType::Send).encode();
        raw[2] = 9;
        assert_eq!(FrameHeader::decode(&raw), Err(WireError::UnknownType(9)));
        raw[0] = 0;
        assert!(matches!(FrameHeader::decode(&raw), Err(WireError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn header_round_trips(kind in 1u8..=5, flags: u8, dst: u64, rkey: u32, imm: u32, len: u32) {
            let h = FrameHeader { kind: FrameType::try_from(kind).unwrap(), flags, dst_addr: dst, rkey, imm, len };
            prop_assert_eq!(FrameHeader::decode(&h.encode()).unwrap(), h);
        }
    }
}
