//! Little-endian readers/writers that report the byte offset of failures.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(self.offset, msg))
    }

    /// Grows the buffer as data arrives, so a corrupt length field cannot
    /// trigger a huge up-front allocation.
    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 20));
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::format(
                self.offset + got as u64,
                format!("truncated while reading {what}"),
            ));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let b = self.bytes(N, what)?;
        Ok(b.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    /// Succeeds only if the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => self.fail("trailing bytes after last record"),
        }
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_len(w: &mut impl Write, n: usize, what: &str) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::data(format!("{what} {n} exceeds u32")))?;
    put_u32(w, v)
}
