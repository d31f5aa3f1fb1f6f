//! Byte-level plumbing shared by the binary containers (band stacks, mask
//! rasters, checkpoints).
//!
//! Layout common to all of them: a 4-byte magic, a little-endian `u16`
//! version, the payload, and a trailing FNV-1a 64 checksum of every byte
//! before it. All multi-byte values are little-endian.
//!
//! Faults are detected in a fixed precedence so each corruption mode maps to
//! one error class: a wrong magic is reported before anything else, then an
//! unsupported version; a field read past the payload end is `Truncated`;
//! the checksum is verified by [`ByteReader::finish`] once the payload has
//! been consumed, so a flipped payload bit surfaces as `ChecksumMismatch`.

use crate::error::{FormatError, Result};
use crate::seed::fnv1a64;

const CHECKSUM_LEN: usize = 8;
const HEADER_LEN: usize = 6;

/// Serializes one container. `finish` appends the checksum.
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: [u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&version.to_le_bytes());
        ByteWriter { buf }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed UTF-8 (u16 length; plenty for band names and layer
    /// paths).
    pub fn put_str(&mut self, s: &str) {
        debug_assert!(s.len() <= u16::MAX as usize);
        self.put_u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_f32_slice(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Appends the FNV-1a 64 checksum of everything written so far and
    /// returns the finished container.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

/// Deserializes one container. Construct with [`ByteReader::open`], pull
/// fields in payload order, then call [`ByteReader::finish`] — only a reader
/// that finished cleanly has verified the checksum, so callers must not
/// hand out parsed data before that.
#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    /// End of payload = start of the trailing checksum.
    end: usize,
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn open(data: &'a [u8], magic: [u8; 4], version: u16) -> Result<ByteReader<'a>> {
        let min = HEADER_LEN + CHECKSUM_LEN;
        if data.len() < min {
            return Err(FormatError::Truncated {
                needed: (min - data.len()) as u64,
                remaining: 0,
                offset: data.len() as u64,
            }
            .into());
        }
        if data[..4] != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found: [data[0], data[1], data[2], data[3]],
                offset: 0,
            }
            .into());
        }
        let found = u16::from_le_bytes([data[4], data[5]]);
        if found != version {
            return Err(FormatError::UnsupportedVersion {
                found,
                supported: version,
                offset: 4,
            }
            .into());
        }
        Ok(ByteReader {
            data,
            end: data.len() - CHECKSUM_LEN,
            pos: HEADER_LEN,
        })
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    /// Bytes of payload not yet consumed.
    pub fn remaining(&self) -> usize {
        self.end - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                needed: (n - self.remaining()) as u64,
                remaining: self.remaining() as u64,
                offset: self.pos as u64,
            }
            .into());
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.offset();
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| {
            FormatError::InvalidField {
                what: "string field is not UTF-8".into(),
                offset: at,
            }
            .into()
        })
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::InvalidField {
            what: format!("f32 array length {n} overflows"),
            offset: self.pos as u64,
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Shorthand for an `InvalidField` fault at the current offset.
    pub fn invalid(&self, what: impl Into<String>) -> crate::error::Error {
        FormatError::InvalidField {
            what: what.into(),
            offset: self.pos as u64,
        }
        .into()
    }

    /// Declares how many payload bytes the rest of the container must hold,
    /// based on already-parsed size fields. A shorter payload is `Truncated`
    /// (cut files fault here, with the shortfall, before any checksum talk);
    /// a longer one is `InvalidField`.
    pub fn expect_remaining(&self, expected: usize) -> Result<()> {
        let remaining = self.remaining();
        if remaining < expected {
            return Err(FormatError::Truncated {
                needed: (expected - remaining) as u64,
                remaining: remaining as u64,
                offset: self.pos as u64,
            }
            .into());
        }
        if remaining > expected {
            return Err(self.invalid(format!(
                "payload carries {} byte(s) more than its declared sizes require",
                remaining - expected
            )));
        }
        Ok(())
    }

    /// Verifies the trailing checksum against the payload. Callable before
    /// the payload is consumed, so readers can rule out bit corruption ahead
    /// of semantic validation; `finish` re-checks it at the end.
    pub fn verify_checksum(&self) -> Result<()> {
        let stored = u64::from_le_bytes(self.data[self.end..].try_into().unwrap());
        let computed = fnv1a64(&self.data[..self.end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch {
                stored,
                computed,
                offset: self.end as u64,
            }
            .into());
        }
        Ok(())
    }

    /// Requires the payload to be fully consumed, then verifies the trailing
    /// checksum.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.end {
            return Err(FormatError::InvalidField {
                what: format!("{} unconsumed payload byte(s)", self.end - self.pos),
                offset: self.pos as u64,
            }
            .into());
        }
        self.verify_checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    const MAGIC: [u8; 4] = *b"PMTS";

    fn sample() -> Vec<u8> {
        let mut w = ByteWriter::new(MAGIC, 1);
        w.put_u32(7);
        w.put_str("green");
        w.put_f32_slice(&[1.5, -2.25]);
        w.put_f64(0.125);
        w.finish()
    }

    #[test]
    fn roundtrip_is_exact() {
        let bytes = sample();
        let mut r = ByteReader::open(&bytes, MAGIC, 1).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "green");
        assert_eq!(r.f32_vec(2).unwrap(), vec![1.5, -2.25]);
        assert_eq!(r.f64().unwrap(), 0.125);
        r.finish().unwrap();
    }

    #[test]
    fn wrong_magic_is_bad_magic() {
        let mut bytes = sample();
        bytes[0] ^= 0xff;
        match ByteReader::open(&bytes, MAGIC, 1) {
            Err(Error::Format(FormatError::BadMagic { offset: 0, .. })) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_unsupported() {
        let bytes = sample();
        match ByteReader::open(&bytes, MAGIC, 2) {
            Err(Error::Format(FormatError::UnsupportedVersion {
                found: 1,
                supported: 2,
                offset: 4,
            })) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn short_read_is_truncated() {
        let bytes = sample();
        let mut r = ByteReader::open(&bytes, MAGIC, 1).unwrap();
        let n = r.remaining();
        match r.take(n + 1) {
            Err(Error::Format(FormatError::Truncated {
                needed: 1,
                remaining,
                ..
            })) => assert_eq!(remaining as usize, n),
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn cut_file_is_truncated_not_checksum() {
        // chop mid-payload: the field reads must fault before any checksum
        // judgement is possible
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 12];
        let mut r = ByteReader::open(cut, MAGIC, 1).unwrap();
        let outcome = r
            .u32()
            .and_then(|_| r.str())
            .and_then(|_| r.f32_vec(2))
            .and_then(|_| r.f64().map(|v| vec![v as f32]));
        match outcome {
            Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_bit_is_checksum_mismatch() {
        let mut bytes = sample();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01; // inside the trailing f64 payload field
        let mut r = ByteReader::open(&bytes, MAGIC, 1).unwrap();
        r.u32().unwrap();
        r.str().unwrap();
        r.f32_vec(2).unwrap();
        r.f64().unwrap();
        match r.finish() {
            Err(Error::Format(FormatError::ChecksumMismatch { offset, .. })) => {
                assert_eq!(offset as usize, n - 8);
            }
            other => panic!("expected ChecksumMismatch, got {other:?}"),
        }
    }

    #[test]
    fn unconsumed_payload_is_invalid_field() {
        let bytes = sample();
        let mut r = ByteReader::open(&bytes, MAGIC, 1).unwrap();
        r.u32().unwrap();
        match r.finish() {
            Err(Error::Format(FormatError::InvalidField { .. })) => {}
            other => panic!("expected InvalidField, got {other:?}"),
        }
    }

    #[test]
    fn expect_remaining_reports_shortfall_and_excess() {
        let bytes = sample();
        let r = ByteReader::open(&bytes, MAGIC, 1).unwrap();
        let n = r.remaining();
        r.expect_remaining(n).unwrap();
        match r.expect_remaining(n + 5) {
            Err(Error::Format(FormatError::Truncated {
                needed: 5,
                remaining,
                ..
            })) => assert_eq!(remaining as usize, n),
            other => panic!("expected Truncated, got {other:?}"),
        }
        match r.expect_remaining(n - 1) {
            Err(Error::Format(FormatError::InvalidField { .. })) => {}
            other => panic!("expected InvalidField, got {other:?}"),
        }
    }

    #[test]
    fn checksum_is_verifiable_before_the_payload_is_consumed() {
        let good = sample();
        let r = ByteReader::open(&good, MAGIC, 1).unwrap();
        r.verify_checksum().unwrap();

        let mut bad = sample();
        bad[8] ^= 0x10;
        let r = ByteReader::open(&bad, MAGIC, 1).unwrap();
        match r.verify_checksum() {
            Err(Error::Format(FormatError::ChecksumMismatch { .. })) => {}
            other => panic!("expected ChecksumMismatch, got {other:?}"),
        }
    }
}
