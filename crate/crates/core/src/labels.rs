use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel class indices for a batch, laid out `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(format!("label data has {} values, expected {}x{}x{}", data.len(), n, h, w)));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap { n, h, w, data: vec![value; n * h * w] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    /// The `i`-th map of the batch as a batch of one.
    pub fn item(&self, i: usize) -> LabelMap {
        let p = self.plane();
        LabelMap { n: 1, h: self.h, w: self.w, data: self.data[i * p..(i + 1) * p].to_vec() }
    }

    pub fn stack(items: &[LabelMap]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("stack of zero label maps"))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape(format!("label maps {}x{} and {}x{} differ", m.h, m.w, first.h, first.w)));
            }
            data.extend_from_slice(&m.data);
        }
        let n = items.iter().map(|m| m.n).sum();
        Ok(LabelMap { n, h: first.h, w: first.w, data })
    }

    /// Fails on the first value `>= classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&value) => Err(Error::LabelOutOfRange { value, classes }),
            None => Ok(()),
        }
    }

    /// Per-pixel argmax over channels; ties go to the lowest class.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> LabelMap {
        let s = logits.shape();
        let plane = s.plane();
        let d = logits.data();
        let mut out = vec![0u8; s.n * plane];
        for n in 0..s.n {
            for p in 0..plane {
                let mut best = 0;
                let mut best_v = d[n * s.c * plane + p];
                for c in 1..s.c {
                    let v = d[(n * s.c + c) * plane + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                out[n * plane + p] = best as u8;
            }
        }
        LabelMap { n: s.n, h: s.h, w: s.w, data: out }
    }

    pub fn counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                c[v as usize] += 1;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_stack() {
        let logits = Tensor::from_vec([1, 3, 1, 2], vec![0.0f32, 5.0, 1.0, 5.0, 1.0, 0.0]).unwrap();
        let m = LabelMap::argmax(&logits);
        assert_eq!(m.data(), &[1, 0]);
        let s = LabelMap::stack(&[m.clone(), m.clone()]).unwrap();
        assert_eq!((s.n, s.data().len()), (2, 4));
        assert_eq!(s.item(1), m);
        assert!(LabelMap::new(1, 2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn range_check() {
        let m = LabelMap::new(1, 1, 3, vec![0, 1, 3]).unwrap();
        assert!(matches!(m.check_range(3), Err(Error::LabelOutOfRange { value: 3, classes: 3 })));
        assert!(m.check_range(4).is_ok());
        assert_eq!(m.counts(4), vec![1, 1, 0, 1]);
    }
}
