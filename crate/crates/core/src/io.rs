//! Little-endian binary encoding shared by the dataset container and
//! checkpoints. Every file ends with a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8], version: u32) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(version);
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

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    /// Name, dtype, shape, then the little-endian payload.
    pub fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.str(name);
        self.str(T::DTYPE.name());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        T::write_le(t.data(), &mut payload);
        self.bytes(&payload);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.finish())?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Verify checksum, magic and version; returns a reader positioned after
    /// the header.
    pub fn open(bytes: &'a [u8], magic: &[u8], version: u32) -> Result<Self> {
        if bytes.len() < magic.len() + 8 || &bytes[..magic.len()] != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let mut r = Self {
            buf: body,
            pos: magic.len(),
        };
        let found = r.u32()?;
        if found != version {
            return Err(Error::Format(format!("unsupported format version {found} (expected {version})")));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checksum mismatch: payload is corrupt".into()));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid utf-8 string".into()))
    }

    pub fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.str()?;
        let tag = self.str()?;
        let dtype = DType::from_name(&tag).ok_or_else(|| Error::Format(format!("unknown dtype {tag:?}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "array {name} stored as {} but {} requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let payload = self.bytes()?;
        if payload.len() != shape.iter().product::<usize>() * dtype.size_of() {
            return Err(Error::Format(format!("array {name}: payload size does not match shape {shape:?}")));
        }
        let data = T::read_le(payload);
        Ok((name, Tensor::from_vec(shape, data)?))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap();
        let mut w = ByteWriter::new(b"TEST", 3);
        w.str("hello");
        w.tensor("w", &t);
        w.f64(0.1);
        let bytes = w.finish();
        let mut r = ByteReader::open(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.str().unwrap(), "hello");
        let (name, back) = r.tensor::<f32>().unwrap();
        assert_eq!(name, "w");
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(r.f64().unwrap(), 0.1);
        assert!(r.is_done());

        assert!(ByteReader::open(&bytes, b"TEST", 4).unwrap_err().to_string().contains("version"));
        assert!(ByteReader::open(&bytes, b"NOPE", 3).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(ByteReader::open(&bad, b"TEST", 3).unwrap_err().to_string().contains("checksum"));
    }
}
