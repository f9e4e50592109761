//! `FHD1` prior-head files.
//!
//! ```text
//! magic "FHD1" | d u32 | c u32 | c x d f32 weights | c f32 biases
//! c x ( len u32 | len bytes UTF-8 name )
//! ```

use std::path::Path;

use super::bytes::{put_f32, put_u32, read_file, to_u32, write_file, Reader};
use crate::attention::PriorHead;
use crate::error::Result;

pub const HEAD_MAGIC: &[u8; 4] = b"FHD1";

pub fn encode_head(head: &PriorHead) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    put_u32(&mut out, to_u32(head.channels(), "channels")?);
    put_u32(&mut out, to_u32(head.classes(), "classes")?);
    for &v in head.weights().iter().chain(head.biases()) {
        put_f32(&mut out, v);
    }
    for name in head.class_names() {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
    }
    Ok(out)
}

pub fn decode_head(bytes: &[u8], path: &Path) -> Result<PriorHead> {
    let mut rd = Reader::new(bytes, path);
    rd.magic(HEAD_MAGIC)?;
    let d = rd.u32("channels")? as usize;
    let c = rd.u32("classes")? as usize;
    if c < 2 {
        return Err(rd.error(format!("prior head needs at least 2 classes, got {c}")));
    }
    if d == 0 {
        return Err(rd.error("prior head with zero channels"));
    }
    let weights = rd.f32s(c * d, "weights")?;
    let biases = rd.f32s(c, "biases")?;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = rd.u32("name length")? as usize;
        let raw = rd.take(len, "class name")?;
        let name = std::str::from_utf8(raw).map_err(|e| rd.error(format!("class name: {e}")))?;
        names.push(name.to_owned());
    }
    rd.finish()?;
    PriorHead::new(d, weights, biases, names).map_err(|e| rd.error(e.to_string()))
}

pub fn read_head(path: &Path) -> Result<PriorHead> {
    decode_head(&read_file(path)?, path)
}

pub fn write_head(path: &Path, head: &PriorHead) -> Result<()> {
    write_file(path, &encode_head(head)?)
}
