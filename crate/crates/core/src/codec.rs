//! Little-endian cursor shared by the container and checkpoint decoders.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn require(&self, needed: u64) -> Result<(), FormatError> {
        if (self.remaining() as u64) < needed {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed,
                available: self.remaining() as u64,
            });
        }
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        self.require(N as u64)?;
        let mut out = [0u8; N];
        out.copy_from_slice(&self.data[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let offset = self.offset();
        let got: [u8; 4] = self.take()?;
        if got != expected.as_bytes()[..4] {
            return Err(FormatError::BadMagic { offset, expected });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<(), FormatError> {
        let offset = self.offset();
        let version = self.u32()?;
        if version != supported {
            return Err(FormatError::UnsupportedVersion { offset, version });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn finite_f32(&mut self) -> Result<f32, FormatError> {
        let offset = self.offset();
        let x = f32::from_le_bytes(self.take()?);
        if !x.is_finite() {
            return Err(FormatError::NonFinite { offset });
        }
        Ok(x)
    }

    pub(crate) fn finite_f64(&mut self) -> Result<f64, FormatError> {
        let offset = self.offset();
        let x = f64::from_le_bytes(self.take()?);
        if !x.is_finite() {
            return Err(FormatError::NonFinite { offset });
        }
        Ok(x)
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.offset(),
                extra: self.remaining() as u64,
            });
        }
        Ok(())
    }
}

/// Checked `count * width` for sizing a section before reading it.
pub(crate) fn section_len(count: u64, width: u64) -> u64 {
    count.saturating_mul(width)
}
