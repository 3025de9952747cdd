//! Byte-level building blocks: LEB128 varints, CRC-32C framing and the
//! range coder shared by both layers.

mod range_coder;
mod varint;

pub use range_coder::{FreqTable, RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};
pub use varint::{read_varint, varint_len, write_varint};
pub(crate) use varint::take;

use crate::error::DecodeError;

pub fn crc32c(bytes: &[u8]) -> u32 {
    crc32c::crc32c(bytes)
}

/// Appends the little-endian CRC-32C of everything already in `out`.
pub(crate) fn seal(out: &mut Vec<u8>) {
    let c = crc32c(out);
    out.extend_from_slice(&c.to_le_bytes());
}

/// Splits off and verifies a trailing CRC-32C, returning the body.
pub(crate) fn unseal<'a>(bytes: &'a [u8], what: &'static str) -> Result<&'a [u8], DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated(what));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32c(body) != stored {
        return Err(DecodeError::Checksum(what));
    }
    Ok(body)
}
