//! Little-endian binary container shared by the splat and mesh assets:
//! 8-byte magic, u32 version, u32 metadata length, JSON metadata, then
//! packed arrays.

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 16;

pub(crate) struct Writer {
    pub bytes: Vec<u8>,
}

impl Writer {
    pub fn with_header<M: Serialize>(magic: &[u8; 8], version: u32, meta: &M) -> Result<Self> {
        let json = serde_json::to_vec(meta)?;
        let mut bytes = Vec::with_capacity(HEADER_LEN + json.len());
        bytes.extend_from_slice(magic);
        bytes.extend_from_slice(&version.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        Ok(Self { bytes })
    }

    pub fn raw(capacity: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(capacity),
        }
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self { bytes, pos: 0, kind }
    }

    /// Next `n` bytes; running out names `section` in the error.
    pub fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::Format(format!(
                "truncated {}: section '{section}' needs {n} bytes at offset {}, {have} remain",
                self.kind, self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Checks magic and version and parses the metadata block.
    pub fn header<M: DeserializeOwned>(&mut self, magic: &[u8; 8], version: u32) -> Result<M> {
        let head = self.take(HEADER_LEN, "header")?;
        if &head[..8] != magic {
            return Err(Error::Format(format!("not a {}: bad magic", self.kind)));
        }
        let v = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if v != version {
            return Err(Error::Format(format!(
                "{} version {v} is not supported (expected {version})",
                self.kind
            )));
        }
        let len = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let json = self.take(len, "metadata")?;
        serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("{} metadata: {e}", self.kind)))
    }

    pub fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| overflow(section))?, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn f64s(&mut self, n: usize, section: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| overflow(section))?, section)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, n: usize, section: &str) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| overflow(section))?, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(self.u32s(1, section)?[0])
    }

    pub fn finish(&self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(Error::Format(format!("{rest} trailing bytes after {} data", self.kind)));
        }
        Ok(())
    }
}

fn overflow(section: &str) -> Error {
    Error::Format(format!("section '{section}' size overflows"))
}
