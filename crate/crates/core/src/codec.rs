//! Little-endian binary container used by every on-disk snapshot.
//!
//! Layout: 8-byte magic, u32 format version, u64 payload length, payload,
//! SHA-256 of the payload. Floats are stored as raw IEEE-754 bits.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContainerError {
    BadMagic,
    Version { found: u32, expected: u32 },
    Checksum,
    Truncated,
    Invalid(String),
}

impl std::fmt::Display for ContainerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContainerError::BadMagic => write!(f, "unrecognised file signature"),
            ContainerError::Version { found, expected } => {
                write!(f, "format version {found}, expected {expected}")
            }
            ContainerError::Checksum => write!(f, "checksum mismatch"),
            ContainerError::Truncated => write!(f, "unexpected end of data"),
            ContainerError::Invalid(s) => write!(f, "{s}"),
        }
    }
}

impl std::error::Error for ContainerError {}

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
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

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }

    pub fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    pub fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.f64(*x);
        }
    }

    pub fn finish(self, magic: &[u8; 8], version: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 52);
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.buf);
        out.extend_from_slice(&Sha256::digest(&self.buf));
        out
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validate the container envelope and return a decoder over its payload.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Self, ContainerError> {
        if bytes.len() < 20 || &bytes[..8] != magic {
            return Err(ContainerError::BadMagic);
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != version {
            return Err(ContainerError::Version {
                found,
                expected: version,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let end = 20usize.checked_add(len).ok_or(ContainerError::Truncated)?;
        if bytes.len() != end + 32 {
            return Err(ContainerError::Truncated);
        }
        let payload = &bytes[20..end];
        if Sha256::digest(payload).as_slice() != &bytes[end..] {
            return Err(ContainerError::Checksum);
        }
        Ok(Self { buf: payload, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(ContainerError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32, ContainerError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>, ContainerError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(ContainerError::Invalid(format!("bad option tag {t}"))),
        }
    }

    pub fn read_len(&mut self) -> Result<usize, ContainerError> {
        let n = self.u64()?;
        // every encoded element takes at least one byte
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(ContainerError::Truncated);
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String, ContainerError> {
        let n = self.read_len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ContainerError::Invalid("string is not UTF-8".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, ContainerError> {
        let n = self.read_len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<(), ContainerError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(ContainerError::Invalid("trailing bytes after payload".into()))
        }
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCONT";

    fn sample() -> Vec<u8> {
        let mut e = Encoder::new();
        e.u32(7);
        e.str("hello");
        e.f64s(&[1.5, -0.0, f64::MIN_POSITIVE]);
        e.opt_f64(None);
        e.finish(MAGIC, 3)
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let mut d = Decoder::open(&bytes, MAGIC, 3).unwrap();
        assert_eq!(d.u32().unwrap(), 7);
        assert_eq!(d.str().unwrap(), "hello");
        let v = d.f64s().unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(d.opt_f64().unwrap(), None);
        d.finish().unwrap();
    }

    #[test]
    fn detects_corruption_and_version() {
        let mut bytes = sample();
        assert!(matches!(
            Decoder::open(&bytes, MAGIC, 4),
            Err(ContainerError::Version { found: 3, expected: 4 })
        ));
        bytes[22] ^= 0xff;
        assert!(matches!(Decoder::open(&bytes, MAGIC, 3), Err(ContainerError::Checksum)));
        assert!(matches!(Decoder::open(&bytes[..10], MAGIC, 3), Err(ContainerError::BadMagic)));
    }
}
