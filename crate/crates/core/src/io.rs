//! Little-endian binary readers/writers for the crate's file formats.
//!
//! Every format starts with a 4-byte magic and a u64 version, followed by
//! u64 counts and packed f64 arrays. All multi-byte values are little-endian
//! regardless of host. Read errors report the byte offset at which parsing
//! failed so malformed files are diagnosable.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub struct ByteReader {
    data: Vec<u8>,
    pos: usize,
    path: PathBuf,
}

impl ByteReader {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let data = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ByteReader { data, pos: 0, path })
    }

    pub fn from_bytes(data: Vec<u8>) -> Self {
        ByteReader {
            data,
            pos: 0,
            path: PathBuf::from("<memory>"),
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn fail(&self, what: &str) -> Error {
        Error::data(format!(
            "{}: {} at byte offset {}",
            self.path.display(),
            what,
            self.pos
        ))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.fail(&format!("truncated file while reading {what}")));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?.to_vec();
        if got != magic {
            self.pos = start;
            return Err(self.fail(&format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        let bytes = self.take(8, what)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }

    /// Reads a u64 count and checks it against a sanity bound (guards
    /// against allocating on garbage lengths from corrupt files).
    pub fn read_count(&mut self, what: &str, max: u64) -> Result<usize> {
        let v = self.read_u64(what)?;
        if v > max {
            return Err(self.fail(&format!("implausible {what} count {v} (max {max})")));
        }
        Ok(v as usize)
    }

    pub fn read_f64(&mut self, what: &str) -> Result<f64> {
        let bytes = self.take(8, what)?;
        Ok(f64::from_le_bytes(bytes.try_into().unwrap()))
    }

    pub fn read_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        Ok(self.take(n, what)?.to_vec())
    }

    pub fn expect_eof(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::data(format!(
                "{}: {} trailing bytes at offset {}",
                self.path.display(),
                self.data.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_magic(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
    }

    pub fn write_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn write_f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.write_f64(*v);
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}
