use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Little-endian cursor over a byte buffer that reports parse errors with the
/// offending byte offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::parse(&self.path, self.pos as u64, reason)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.error("size overflow"))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.error("size overflow"))?, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit in 32 bits")))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
