//! `FVT1` feature files.
//!
//! ```text
//! magic "FVT1" | version u32 | w u32 | h u32 | d u32 | count u32
//! count x ( label u32 | w*h*d f32 )
//! ```
//! All little-endian; features location-major (`q = row * w + col`), channel
//! inner.

use std::path::Path;

use super::bytes::{put_f32, put_u32, read_file, to_u32, write_file, Reader};
use crate::attention::FeatureTensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FVT1";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub records: Vec<(FeatureTensor, u32)>,
}

impl FeatureFile {
    pub fn new(w: usize, h: usize, d: usize) -> Self {
        FeatureFile {
            w,
            h,
            d,
            records: Vec::new(),
        }
    }
}

pub fn encode_features(file: &FeatureFile) -> Result<Vec<u8>> {
    let r = file.w * file.h;
    let mut out = Vec::with_capacity(24 + file.records.len() * (4 + 4 * r * file.d));
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, to_u32(file.w, "width")?);
    put_u32(&mut out, to_u32(file.h, "height")?);
    put_u32(&mut out, to_u32(file.d, "channels")?);
    put_u32(&mut out, to_u32(file.records.len(), "count")?);
    for (t, label) in &file.records {
        if (t.width(), t.height(), t.channels()) != (file.w, file.h, file.d) {
            return Err(Error::Shape(format!(
                "record {}x{}x{} in a {}x{}x{} file",
                t.width(),
                t.height(),
                t.channels(),
                file.w,
                file.h,
                file.d
            )));
        }
        put_u32(&mut out, *label);
        for &v in t.data() {
            put_f32(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureFile> {
    let mut rd = Reader::new(bytes, path);
    rd.magic(FEATURE_MAGIC)?;
    let version = rd.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(rd.error(format!("unsupported version {version}")));
    }
    let w = rd.u32("width")? as usize;
    let h = rd.u32("height")? as usize;
    let d = rd.u32("channels")? as usize;
    let count = rd.u32("count")? as usize;
    if w == 0 || h == 0 || d == 0 {
        return Err(rd.error(format!("empty tensor dims {w}x{h}x{d}")));
    }
    let record = (w * h * d)
        .checked_mul(4)
        .and_then(|b| b.checked_add(4))
        .ok_or_else(|| rd.error("record size overflow"))?;
    match record.checked_mul(count) {
        Some(n) if n == rd.remaining() => {}
        _ => {
            return Err(rd.error(format!(
                "declared {count} records of {record} bytes, payload is {} bytes",
                rd.remaining()
            )))
        }
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rd.u32("label")?;
        let data = rd.f32s(w * h * d, "features")?;
        let t = FeatureTensor::new(w, h, d, data).map_err(|e| rd.error(e.to_string()))?;
        records.push((t, label));
    }
    rd.finish()?;
    Ok(FeatureFile { w, h, d, records })
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&read_file(path)?, path)
}

pub fn write_features(path: &Path, file: &FeatureFile) -> Result<()> {
    write_file(path, &encode_features(file)?)
}
