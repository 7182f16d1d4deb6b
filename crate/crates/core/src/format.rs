//! Little-endian record helpers shared by every on-disk format.
//!
//! All formats open with a 4-byte magic and a `u32` version, followed by
//! `u32` header fields and an `f32` payload.

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    /// Narrows to `f32`; rejects values that would become non-finite.
    pub fn f32s(&mut self, values: &[f64]) -> Result<()> {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            let x = v as f32;
            if !x.is_finite() {
                return Err(Error::NonFinite("f32 serialization"));
            }
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                expected: VERSION,
                found: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            expected: usize::MAX,
            found: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Fails with `Truncated` before allocating when the payload is short.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed(format!("payload of {n} values overflows")))?;
        let raw = self.take(bytes)?;
        let mut out = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite("f32 payload"));
            }
            out.push(v as f64);
        }
        Ok(out)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("dimensions {dims:?} overflow")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut w = Writer::new(b"TEST");
        w.u32(7);
        w.f32s(&[1.5, -2.0]).unwrap();
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f32s(2).unwrap(), vec![1.5, -2.0]);
        r.expect_end().unwrap();

        assert!(matches!(Reader::open(&bytes, b"NOPE"), Err(Error::BadMagic { .. })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Reader::open(&bad_version, b"TEST"),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let mut r = Reader::open(&bytes[..14], b"TEST").unwrap();
        r.u32().unwrap();
        assert!(matches!(r.f32s(2), Err(Error::Truncated { .. })));
    }

    #[test]
    fn overflowing_f32_rejected() {
        let mut w = Writer::new(b"TEST");
        assert!(w.f32s(&[1e300]).is_err());
    }
}
