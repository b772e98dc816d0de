//! Little-endian binary writer/reader with a trailing SHA-256 checksum,
//! shared by the dataset, grid-dump and checkpoint containers.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKSUM_LEN: usize = 32;
/// Magic, version and total length.
pub const HEADER_LEN: usize = 16;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        // Total file length, patched in `finish`.
        w.u64(0);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Appends the SHA-256 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let total = (self.buf.len() + CHECKSUM_LEN) as u64;
        self.buf[8..16].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

/// Reads just the magic bytes of a container.
pub fn magic(data: &[u8]) -> Result<[u8; 4]> {
    data.get(..4).map(|m| [m[0], m[1], m[2], m[3]]).ok_or(Error::Truncated)
}

impl<'a> Reader<'a> {
    /// Validates magic, version and checksum; returns a reader positioned
    /// after the header.
    pub fn open(data: &'a [u8], expect_magic: &[u8; 4], expect_version: u32) -> Result<Self> {
        let m = magic(data)?;
        if &m != expect_magic {
            return Err(Error::BadMagic(m));
        }
        if data.len() < 8 {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != expect_version {
            return Err(Error::VersionMismatch { found: version, expected: expect_version });
        }
        if data.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Truncated);
        }
        let total = u64::from_le_bytes(data[8..16].try_into().unwrap());
        if (data.len() as u64) < total {
            return Err(Error::Truncated);
        }
        if data.len() as u64 != total {
            return Err(Error::Checksum);
        }
        let (body, sum) = data.split_at(data.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        Ok(Self { data: body, pos: HEADER_LEN })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.data.len() {
            return Err(Error::Truncated);
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::InvalidArgument("non-UTF-8 string in file".into()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn expect_done(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{} trailing bytes", self.data.len() - self.pos)))
        }
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}
