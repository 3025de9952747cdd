//! Scalable container: one base block, an optional enhancement block and a
//! trailing CRC-32C over everything before it.
//!
//! ```text
//! "SFC1" | version u8 | flags u8 | varint H | varint W
//!        | varint len | base | [varint len | enhancement] | crc32c (LE)
//! ```
//!
//! Header bytes (everything except the two layer payloads) count toward
//! total bpp only.

use std::fmt::Write as _;

use crate::coding::{crc32c, read_varint, seal, take, unseal, varint_len, write_varint};
use crate::error::{DecodeError, Error, Result};
use crate::eval::Layer;

pub const MAGIC: [u8; 4] = *b"SFC1";
pub const VERSION: u8 = 1;
pub const FLAG_ENHANCEMENT: u8 = 1;
pub const FILE_EXTENSION: &str = "sfc";
pub const MAX_BLOCK_BYTES: usize = 1 << 30;
pub const MAX_SIDE: usize = 1 << 16;

/// Contents of a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalableBitstream {
    pub height: usize,
    pub width: usize,
    pub base: Vec<u8>,
    /// `None` when the stream carries no enhancement layer.
    pub enhancement: Option<Vec<u8>>,
}

impl ScalableBitstream {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn encoded_len(&self) -> usize {
        let block = |n: usize| varint_len(n as u64) + n;
        MAGIC.len()
            + 2
            + varint_len(self.height as u64)
            + varint_len(self.width as u64)
            + block(self.base.len())
            + self.enhancement.as_ref().map_or(0, |e| block(e.len()))
            + 4
    }

    pub fn header_len(&self) -> usize {
        self.encoded_len() - self.base.len() - self.enhancement.as_ref().map_or(0, Vec::len)
    }

    /// Bytes attributed to `layer`; `Total` is the whole stream.
    pub fn layer_bytes(&self, layer: Layer) -> usize {
        match layer {
            Layer::Base => self.base.len(),
            Layer::Enhancement => self.enhancement.as_ref().map_or(0, Vec::len),
            Layer::Total => self.encoded_len(),
        }
    }

    /// `8 * layer_bytes / (H * W)`.
    pub fn bpp(&self, layer: Layer) -> f64 {
        bits_per_pixel(self.layer_bytes(layer), self.height, self.width)
    }

    /// Same stream without its enhancement layer.
    pub fn base_only(&self) -> Self {
        ScalableBitstream {
            enhancement: None,
            ..self.clone()
        }
    }
}

pub fn bits_per_pixel(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height * width) as f64
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height > MAX_SIDE || width > MAX_SIDE {
        return Err(Error::invalid(format!("image dims {height}x{width} outside 1..={MAX_SIDE}")));
    }
    Ok(())
}

pub fn mux(base: &[u8], enhancement: Option<&[u8]>, height: usize, width: usize) -> Result<Vec<u8>> {
    check_dims(height, width)?;
    for (name, len) in [("base", Some(base.len())), ("enhancement", enhancement.map(<[u8]>::len))] {
        if len.is_some_and(|n| n > MAX_BLOCK_BYTES) {
            return Err(Error::invalid(format!("{name} block exceeds {MAX_BLOCK_BYTES} bytes")));
        }
    }
    let mut out = Vec::with_capacity(16 + base.len() + enhancement.map_or(0, <[u8]>::len));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(if enhancement.is_some() { FLAG_ENHANCEMENT } else { 0 });
    write_varint(&mut out, height as u64);
    write_varint(&mut out, width as u64);
    write_varint(&mut out, base.len() as u64);
    out.extend_from_slice(base);
    if let Some(e) = enhancement {
        write_varint(&mut out, e.len() as u64);
        out.extend_from_slice(e);
    }
    seal(&mut out);
    Ok(out)
}

impl ScalableBitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        mux(&self.base, self.enhancement.as_deref(), self.height, self.width)
    }
}

fn read_block<'a>(body: &'a [u8], pos: &mut usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
    let n = read_varint(body, pos, what)?;
    if n > MAX_BLOCK_BYTES as u64 {
        return Err(DecodeError::Malformed(format!("{what} length {n} exceeds the limit")));
    }
    take(body, pos, n as usize, what)
}

fn check_prefix(bytes: &[u8]) -> Result<(), DecodeError> {
    if bytes.len() < MAGIC.len() {
        return Err(DecodeError::Truncated("magic"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = *bytes.get(4).ok_or(DecodeError::Truncated("version"))?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    Ok(())
}

/// Flags, dims and the base block; returns the position after it.
fn read_through_base(buf: &[u8]) -> Result<(BaseView<'_>, usize), DecodeError> {
    let mut pos = 5;
    let flags = take(buf, &mut pos, 1, "flags")?[0];
    if flags & !FLAG_ENHANCEMENT != 0 {
        return Err(DecodeError::Malformed(format!("unknown flag bits {flags:#04x}")));
    }
    let height = read_varint(buf, &mut pos, "image height")?;
    let width = read_varint(buf, &mut pos, "image width")?;
    if height == 0 || width == 0 || height > MAX_SIDE as u64 || width > MAX_SIDE as u64 {
        return Err(DecodeError::Malformed(format!("image dims {height}x{width} out of range")));
    }
    let base = read_block(buf, &mut pos, "base block")?;
    let view = BaseView {
        height: height as usize,
        width: width as usize,
        base,
        has_enhancement: flags & FLAG_ENHANCEMENT != 0,
    };
    Ok((view, pos))
}

/// Parses and verifies a container.
///
/// Errors: [`DecodeError::BadMagic`], [`DecodeError::UnsupportedVersion`],
/// [`DecodeError::Checksum`] for a failed CRC, [`DecodeError::Truncated`]
/// when a declared field runs past the end, and [`DecodeError::Malformed`]
/// for unknown flags, invalid dims or trailing bytes.
pub fn demux(bytes: &[u8]) -> Result<ScalableBitstream, DecodeError> {
    check_prefix(bytes)?;
    let body = unseal(bytes, "container")?;
    let (view, mut pos) = read_through_base(body)?;
    let enhancement = if view.has_enhancement {
        Some(read_block(body, &mut pos, "enhancement block")?.to_vec())
    } else {
        None
    };
    if pos != body.len() {
        return Err(DecodeError::Malformed(format!("{} trailing bytes after the last block", body.len() - pos)));
    }
    Ok(ScalableBitstream {
        height: view.height,
        width: view.width,
        base: view.base.to_vec(),
        enhancement,
    })
}

/// Header and base block only, without reading past the base block.
///
/// The global checksum is not verified here (it covers the enhancement
/// bytes); the base payload carries its own checksum.
pub fn demux_base(bytes: &[u8]) -> Result<BaseView<'_>, DecodeError> {
    check_prefix(bytes)?;
    Ok(read_through_base(bytes)?.0)
}

/// Borrowed base layer of a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseView<'a> {
    pub height: usize,
    pub width: usize,
    pub base: &'a [u8],
    pub has_enhancement: bool,
}

/// Rewrites a stream without its enhancement layer.
pub fn strip_enhancement(bytes: &[u8]) -> Result<Vec<u8>> {
    demux(bytes)?.base_only().to_bytes()
}

/// bpp of `layer` for an encoded stream.
pub fn bpp(bytes: &[u8], layer: Layer) -> Result<f64> {
    Ok(demux(bytes)?.bpp(layer))
}

/// Human-readable field-by-field layout.
pub fn dump(bytes: &[u8]) -> Result<String> {
    let s = demux(bytes)?;
    let mut out = String::new();
    let mut off = 0;
    let mut line = |out: &mut String, name: &str, len: usize, note: String| {
        let _ = writeln!(out, "{off:>8}  {len:>8}  {name:<18} {note}");
        off += len;
    };
    let _ = writeln!(out, "{:>8}  {:>8}  {:<18} value", "offset", "bytes", "field");
    line(&mut out, "magic", 4, "SFC1".into());
    line(&mut out, "version", 1, VERSION.to_string());
    let flags = if s.enhancement.is_some() { FLAG_ENHANCEMENT } else { 0 };
    line(&mut out, "flags", 1, format!("{flags:#04x} (enhancement {})", if flags != 0 { "present" } else { "absent" }));
    line(&mut out, "height", varint_len(s.height as u64), s.height.to_string());
    line(&mut out, "width", varint_len(s.width as u64), s.width.to_string());
    line(&mut out, "base length", varint_len(s.base.len() as u64), s.base.len().to_string());
    line(&mut out, "base block", s.base.len(), format!("{:.4} bpp", s.bpp(Layer::Base)));
    if let Some(e) = &s.enhancement {
        line(&mut out, "enhancement length", varint_len(e.len() as u64), e.len().to_string());
        line(&mut out, "enhancement block", e.len(), format!("{:.4} bpp", s.bpp(Layer::Enhancement)));
    }
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    line(&mut out, "crc32c", 4, format!("{crc:08x}"));
    let _ = writeln!(
        out,
        "total {} bytes, {:.4} bpp (header {} bytes)",
        bytes.len(),
        s.bpp(Layer::Total),
        s.header_len()
    );
    debug_assert_eq!(crc, crc32c(&bytes[..bytes.len() - 4]));
    Ok(out)
}
