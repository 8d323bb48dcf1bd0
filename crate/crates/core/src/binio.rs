//! Little-endian binary helpers shared by the on-disk formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct LeWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl LeWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        })
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32s(&mut self, vs: &[u32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) struct LeReader {
    path: PathBuf,
    inner: BufReader<File>,
}

impl LeReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: BufReader::new(file),
        })
    }

    pub fn format_err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, msg)
    }

    pub fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(&self.path, format!("truncated while reading {what}"))
            } else {
                Error::io(&self.path, e)
            }
        })
    }

    /// Checks a 4-byte magic tag followed by a u32 version.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let mut m = [0u8; 4];
        self.fill(&mut m, "magic")?;
        if &m != magic {
            return Err(self.format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(self.format_err(format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let mut buf = vec![0u8; n * 8];
        self.fill(&mut buf, what)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Errors unless the reader is at end of file.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_err("trailing bytes after payload")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

/// Upper bound guard for counts read from headers before allocating.
pub(crate) fn check_count(r: &LeReader, n: u64, limit: u64, what: &str) -> Result<usize> {
    if n > limit {
        return Err(r.format_err(format!("{what} count {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}
