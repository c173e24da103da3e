//! Bitstream container framing the two entropy-coded payloads.
//!
//! Layout, all multi-byte fields big-endian:
//!
//! ```text
//! "DCR1" | version u8 | preset u8 | img_h u16 | img_w u16
//!        | y_c u16 | y_h u16 | y_w u16
//!        | hyper_len u32 | hyper bytes | y_len u32 | y bytes
//! ```
//!
//! `img_h`/`img_w` are the original image dimensions before padding; the
//! latent geometry describes the padded latent grid. Structural problems
//! (bad magic, unknown version, truncation, trailing bytes) surface as
//! bitstream errors, never panics. An empty latent grid is legal and
//! produces a header-only stream with both payloads empty.

use crate::error::{DiffcrError, Result};

pub const MAGIC: [u8; 4] = *b"DCR1";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub preset: u8,
    pub img_h: u16,
    pub img_w: u16,
    pub y_c: u16,
    pub y_h: u16,
    pub y_w: u16,
}

pub fn write_container(h: &Header, hyper: &[u8], y: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + hyper.len() + y.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(h.preset);
    out.extend_from_slice(&h.img_h.to_be_bytes());
    out.extend_from_slice(&h.img_w.to_be_bytes());
    out.extend_from_slice(&h.y_c.to_be_bytes());
    out.extend_from_slice(&h.y_h.to_be_bytes());
    out.extend_from_slice(&h.y_w.to_be_bytes());
    out.extend_from_slice(&(hyper.len() as u32).to_be_bytes());
    out.extend_from_slice(hyper);
    out.extend_from_slice(&(y.len() as u32).to_be_bytes());
    out.extend_from_slice(y);
    out
}

pub fn read_container(bytes: &[u8]) -> Result<(Header, &[u8], &[u8])> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(DiffcrError::bitstream(format!(
                "truncated stream: wanted {} bytes at offset {}, have {}",
                n,
                *pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(DiffcrError::bitstream(format!("bad magic {magic:02x?}")));
    }
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(DiffcrError::bitstream(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let preset = take(&mut pos, 1)?[0];
    let rd_u16 = |s: &[u8]| u16::from_be_bytes([s[0], s[1]]);
    let img_h = rd_u16(take(&mut pos, 2)?);
    let img_w = rd_u16(take(&mut pos, 2)?);
    let y_c = rd_u16(take(&mut pos, 2)?);
    let y_h = rd_u16(take(&mut pos, 2)?);
    let y_w = rd_u16(take(&mut pos, 2)?);
    let rd_len = |s: &[u8]| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let hyper_len = rd_len(take(&mut pos, 4)?);
    let hyper = take(&mut pos, hyper_len)?;
    let y_len = rd_len(take(&mut pos, 4)?);
    let y = take(&mut pos, y_len)?;
    if pos != bytes.len() {
        return Err(DiffcrError::bitstream(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok((Header { preset, img_h, img_w, y_c, y_h, y_w }, hyper, y))
}
