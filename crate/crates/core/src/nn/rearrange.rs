//! Pure data movement: pixel (un)shuffle and channel concatenation.

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `(n, c, h, w) → (n, c·r², h/r, w/r)`; output channel `c·r² + i·r + j`
/// holds the pixels at offset `(i, j)` of each `r×r` block.
pub fn unshuffle_forward<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(format!("pixel_unshuffle: {}x{} not divisible by {}", s.h, s.w, r)));
    }
    let (oh, ow) = (s.h / r, s.w / r);
    let os = Shape::new(s.n, s.c * r * r, oh, ow);
    let xd = x.data();
    let mut out = Tensor::zeros(os);
    let od = out.data_mut();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..oh {
                        let src = &xd[s.index(n, c, y * r + i, 0)..][..s.w];
                        for xo in 0..ow {
                            od[k] = src[xo * r + j];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`unshuffle_forward`].
pub fn shuffle_forward<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(format!("pixel_shuffle: {} channels not divisible by {}", s.c, r * r)));
    }
    let (oc, oh, ow) = (s.c / (r * r), s.h * r, s.w * r);
    let os = Shape::new(s.n, oc, oh, ow);
    let xd = x.data();
    let mut out = Tensor::zeros(os);
    let od = out.data_mut();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..s.h {
                        let dst = &mut od[os.index(n, c, y * r + i, 0)..][..ow];
                        for xi in 0..s.w {
                            dst[xi * r + j] = xd[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

struct ShuffleBackward {
    r: usize,
    /// True when the forward op was the unshuffle.
    unshuffle: bool,
}

impl<T: Scalar> Backward<T> for ShuffleBackward {
    fn name(&self) -> &'static str {
        if self.unshuffle {
            "pixel_unshuffle"
        } else {
            "pixel_shuffle"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = if self.unshuffle { shuffle_forward(ctx.grad, self.r) } else { unshuffle_forward(ctx.grad, self.r) };
        vec![Some(g.expect("inverse permutation of a valid shape"))]
    }
}

pub fn pixel_unshuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let out = unshuffle_forward(tape.value(x), r)?;
    tape.record(out, &[x], ShuffleBackward { r, unshuffle: true })
}

pub fn pixel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let out = shuffle_forward(tape.value(x), r)?;
    tape.record(out, &[x], ShuffleBackward { r, unshuffle: false })
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let s = ctx.grad.shape();
        let plane = s.plane();
        let g = ctx.grad.data();
        let mut offset = 0;
        self.channels
            .iter()
            .zip(ctx.needs_grad)
            .map(|(&c, &need)| {
                let start = offset;
                offset += c;
                need.then(|| {
                    let mut data = Vec::with_capacity(s.n * c * plane);
                    for n in 0..s.n {
                        data.extend_from_slice(&g[(n * s.c + start) * plane..(n * s.c + start + c) * plane]);
                    }
                    Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), data).unwrap()
                })
            })
            .collect()
    }
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let first = *xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    if xs.len() == 1 {
        return Ok(first);
    }
    let s0 = tape.shape(first);
    let mut channels = Vec::with_capacity(xs.len());
    for &v in xs {
        let s = tape.shape(v);
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::shape(format!("concat: {} incompatible with {}", s, s0)));
        }
        channels.push(s.c);
    }
    let total: usize = channels.iter().sum();
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * total * plane);
    for n in 0..s0.n {
        for (&v, &c) in xs.iter().zip(&channels) {
            data.extend_from_slice(&tape.value(v).data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let out = Tensor::from_vec(Shape::new(s0.n, total, s0.h, s0.w), data)?;
    tape.record(out, xs, ConcatBackward { channels })
}
