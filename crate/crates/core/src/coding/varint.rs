use crate::error::DecodeError;

/// Appends `v` as unsigned LEB128.
pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

/// Reads one LEB128 value at `*pos`, advancing it. Rejects overlong and
/// non-minimal encodings so every value has exactly one byte form.
pub fn read_varint(buf: &[u8], pos: &mut usize, what: &'static str) -> Result<u64, DecodeError> {
    let mut v: u64 = 0;
    for i in 0..10 {
        let Some(&byte) = buf.get(*pos) else {
            return Err(DecodeError::Truncated(what));
        };
        *pos += 1;
        let bits = (byte & 0x7f) as u64;
        if i == 9 && bits > 1 {
            return Err(DecodeError::Malformed(format!("{what}: varint overflows 64 bits")));
        }
        v |= bits << (7 * i);
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return Err(DecodeError::Malformed(format!("{what}: non-minimal varint")));
            }
            return Ok(v);
        }
    }
    Err(DecodeError::Malformed(format!("{what}: varint longer than 10 bytes")))
}

pub(crate) fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
    let end = pos.checked_add(n).ok_or(DecodeError::Truncated(what))?;
    let s = buf.get(*pos..end).ok_or(DecodeError::Truncated(what))?;
    *pos = end;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        let mut out = Vec::new();
        write_varint(&mut out, 0);
        write_varint(&mut out, 127);
        write_varint(&mut out, 128);
        write_varint(&mut out, 300);
        assert_eq!(out, vec![0x00, 0x7f, 0x80, 0x01, 0xac, 0x02]);
    }

    #[test]
    fn rejects_truncated_and_padded() {
        assert_eq!(read_varint(&[0x80], &mut 0, "x"), Err(DecodeError::Truncated("x")));
        assert!(matches!(read_varint(&[0x80, 0x00], &mut 0, "x"), Err(DecodeError::Malformed(_))));
    }

    proptest! {
        #[test]
        fn round_trip(v in any::<u64>()) {
            let mut out = Vec::new();
            write_varint(&mut out, v);
            prop_assert_eq!(out.len(), varint_len(v));
            let mut pos = 0;
            prop_assert_eq!(read_varint(&out, &mut pos, "v").unwrap(), v);
            prop_assert_eq!(pos, out.len());
        }
    }
}
