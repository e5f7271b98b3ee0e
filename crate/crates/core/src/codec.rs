//! Little-endian binary encoding shared by weight and checkpoint files.

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Shape, Tensor};

#[derive(Default)]
pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    /// `u16` length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }

    /// dtype tag, rank (always 4), dims as `u32`, raw values.
    pub fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u8(T::DTYPE.tag());
        self.u8(4);
        for d in t.shape().dims() {
            self.u32(d as u32);
        }
        self.buf.reserve(t.len() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("truncated file: needed {} bytes at offset {}", n, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not valid UTF-8".into()))
    }

    /// Reads a tensor stored as either dtype and converts it to `T`.
    pub fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag)))?;
        let rank = self.u8()?;
        if rank != 4 {
            return Err(Error::Format(format!("unsupported tensor rank {}", rank)));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let shape = Shape::from(dims);
        let raw = self.take(shape.numel() * dtype.size_of())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let t = Tensor::from_vec([1, 2, 1, 2], vec![1.5f32, -2.0, 3.25, 0.0]).unwrap();
        let mut e = Encoder::default();
        e.u16(7);
        e.str("deep.stem.conv.weight");
        e.tensor(&t);
        e.f64(0.4);
        let mut d = Decoder::new(&e.buf);
        assert_eq!(d.u16().unwrap(), 7);
        assert_eq!(d.str().unwrap(), "deep.stem.conv.weight");
        assert_eq!(d.tensor::<f32>().unwrap(), t);
        assert_eq!(d.f64().unwrap(), 0.4);
        assert_eq!(d.remaining(), 0);

        let cut = &e.buf[..e.buf.len() - 12];
        let mut d = Decoder::new(cut);
        d.u16().unwrap();
        d.str().unwrap();
        assert!(matches!(d.tensor::<f32>(), Err(Error::Format(_))));
    }

    #[test]
    fn widening_read() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![0.1f32, 2.0, -7.5]).unwrap();
        let mut e = Encoder::default();
        e.tensor(&t);
        let wide: Tensor<f64> = Decoder::new(&e.buf).tensor().unwrap();
        assert_eq!(wide, t.cast::<f64>());
    }
}
