//! Separable image resampling with the half-pixel (`align_corners = false`)
//! convention: output pixel `d` samples source coordinate `(d + 0.5)·in/out − 0.5`.

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Catmull-Rom family parameter for bicubic interpolation.
pub const BICUBIC_A: f64 = -0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

/// For each output position, the source indices and weights it blends.
#[derive(Clone, Debug)]
struct AxisTaps {
    taps: Vec<Vec<(usize, f64)>>,
}

fn cubic_near(t: f64) -> f64 {
    ((BICUBIC_A + 2.0) * t - (BICUBIC_A + 3.0)) * t * t + 1.0
}

fn cubic_far(t: f64) -> f64 {
    ((BICUBIC_A * t - 5.0 * BICUBIC_A) * t + 8.0 * BICUBIC_A) * t - 4.0 * BICUBIC_A
}

impl AxisTaps {
    fn new(input: usize, output: usize, mode: ResizeMode) -> Self {
        let scale = input as f64 / output as f64;
        let last = input - 1;
        let taps = (0..output)
            .map(|d| {
                let src = (d as f64 + 0.5) * scale - 0.5;
                match mode {
                    ResizeMode::Nearest => {
                        let i = (((d as f64 + 0.5) * scale).floor() as usize).min(last);
                        vec![(i, 1.0)]
                    }
                    ResizeMode::Bilinear => {
                        let src = src.max(0.0);
                        let i0 = (src.floor() as usize).min(last);
                        let i1 = (i0 + 1).min(last);
                        let l1 = src - i0 as f64;
                        if i1 == i0 || l1 == 0.0 {
                            vec![(i0, 1.0)]
                        } else {
                            vec![(i0, 1.0 - l1), (i1, l1)]
                        }
                    }
                    ResizeMode::Bicubic => {
                        let base = src.floor();
                        let t = src - base;
                        let w = [cubic_far(t + 1.0), cubic_near(t), cubic_near(1.0 - t), cubic_far(2.0 - t)];
                        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                        for (k, wk) in w.into_iter().enumerate() {
                            if wk == 0.0 {
                                continue;
                            }
                            let idx = (base as isize + k as isize - 1).clamp(0, last as isize) as usize;
                            match taps.iter_mut().find(|(i, _)| *i == idx) {
                                Some(tap) => tap.1 += wk,
                                None => taps.push((idx, wk)),
                            }
                        }
                        taps
                    }
                }
            })
            .collect();
        AxisTaps { taps }
    }
}

struct Resampler {
    rows: AxisTaps,
    cols: AxisTaps,
    input: Shape,
    output: Shape,
}

impl Resampler {
    fn new(input: Shape, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Self> {
        if out_h == 0 || out_w == 0 || input.h == 0 || input.w == 0 {
            return Err(Error::shape(format!("cannot resize {} to {}x{}", input, out_h, out_w)));
        }
        Ok(Resampler {
            rows: AxisTaps::new(input.h, out_h, mode),
            cols: AxisTaps::new(input.w, out_w, mode),
            input,
            output: Shape::new(input.n, input.c, out_h, out_w),
        })
    }

    fn forward<T: Scalar>(&self, x: &[T]) -> Tensor<T> {
        let (i, o) = (self.input, self.output);
        let cols: Vec<Vec<(usize, T)>> =
            self.cols.taps.iter().map(|t| t.iter().map(|&(k, w)| (k, T::lit(w))).collect()).collect();
        let rows: Vec<Vec<(usize, T)>> =
            self.rows.taps.iter().map(|t| t.iter().map(|&(k, w)| (k, T::lit(w))).collect()).collect();
        let mut out = Tensor::zeros(o);
        let mut tmp = vec![T::zero(); i.h * o.w];
        for (plane_in, plane_out) in x.chunks(i.plane()).zip(out.data_mut().chunks_mut(o.plane())) {
            for y in 0..i.h {
                let src = &plane_in[y * i.w..(y + 1) * i.w];
                for (ox, taps) in cols.iter().enumerate() {
                    tmp[y * o.w + ox] = taps.iter().fold(T::zero(), |acc, &(k, w)| acc + w * src[k]);
                }
            }
            for (oy, taps) in rows.iter().enumerate() {
                let dst = &mut plane_out[oy * o.w..(oy + 1) * o.w];
                for &(k, w) in taps {
                    for (d, &s) in dst.iter_mut().zip(&tmp[k * o.w..(k + 1) * o.w]) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, dy: &[T]) -> Tensor<T> {
        let (i, o) = (self.input, self.output);
        let mut dx = Tensor::zeros(i);
        let mut tmp = vec![T::zero(); i.h * o.w];
        for (gout, gin) in dy.chunks(o.plane()).zip(dx.data_mut().chunks_mut(i.plane())) {
            tmp.fill(T::zero());
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                for &(k, w) in taps {
                    let w = T::lit(w);
                    for (t, &g) in tmp[k * o.w..(k + 1) * o.w].iter_mut().zip(&gout[oy * o.w..(oy + 1) * o.w]) {
                        *t += w * g;
                    }
                }
            }
            for y in 0..i.h {
                let row = &mut gin[y * i.w..(y + 1) * i.w];
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    let g = tmp[y * o.w + ox];
                    for &(k, w) in taps {
                        row[k] += T::lit(w) * g;
                    }
                }
            }
        }
        dx
    }
}

struct ResizeBackward {
    resampler: Resampler,
}

impl<T: Scalar> Backward<T> for ResizeBackward {
    fn name(&self) -> &'static str {
        "resize"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.resampler.backward(ctx.grad.data()))]
    }
}

/// Resizes the spatial plane of every `(n, c)` slice to `out_h × out_w`.
pub fn resize_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    if (out_h, out_w) == (x.shape().h, x.shape().w) {
        return Ok(x.clone());
    }
    Ok(Resampler::new(x.shape(), out_h, out_w, mode)?.forward(x.data()))
}

/// Differentiable resize. Same-size resizes return the input unchanged.
pub fn resize<T: Scalar>(tape: &mut Tape<T>, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
    let s = tape.shape(x);
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x);
    }
    let resampler = Resampler::new(s, out_h, out_w, mode)?;
    let out = resampler.forward(tape.value(x).data());
    tape.record(out, &[x], ResizeBackward { resampler })
}
