use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec { kind, kernel, stride, padding }
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return Err(Error::shape(format!("pooling window {} does not fit input length {}", self.kernel, len)));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Clipped input range `[lo, hi)` of output position `o`.
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

enum PoolRule {
    /// Flat input index of each output's argmax.
    Max(Vec<usize>),
    Avg(PoolSpec),
}

struct PoolBackward {
    rule: PoolRule,
}

impl<T: Scalar> Backward<T> for PoolBackward {
    fn name(&self) -> &'static str {
        match self.rule {
            PoolRule::Max(_) => "max_pool2d",
            PoolRule::Avg(_) => "avg_pool2d",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let s = ctx.inputs[0].shape();
        let o = ctx.output.shape();
        let dy = ctx.grad.data();
        let mut dx = Tensor::zeros(s);
        let dxd = dx.data_mut();
        match &self.rule {
            PoolRule::Max(argmax) => {
                for (i, &src) in argmax.iter().enumerate() {
                    dxd[src] += dy[i];
                }
            }
            PoolRule::Avg(spec) => {
                for nc in 0..s.n * s.c {
                    for oy in 0..o.h {
                        let (y0, y1) = spec.window(oy, s.h);
                        for ox in 0..o.w {
                            let (x0, x1) = spec.window(ox, s.w);
                            let g = dy[(nc * o.h + oy) * o.w + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    dxd[(nc * s.h + y) * s.w + x] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Max or average pooling. Max treats padding as −∞ and sends gradient to the
/// first (row-major) maximum; average divides by the in-bounds count.
pub fn pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: PoolSpec) -> Result<Var> {
    let s = tape.shape(x);
    let (oh, ow) = (spec.output_len(s.h)?, spec.output_len(s.w)?);
    let os = Shape::new(s.n, s.c, oh, ow);
    let xd = tape.value(x).data();
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::new();
    {
        let od = out.data_mut();
        for nc in 0..s.n * s.c {
            for oy in 0..oh {
                let (y0, y1) = spec.window(oy, s.h);
                for ox in 0..ow {
                    let (x0, x1) = spec.window(ox, s.w);
                    if y0 >= y1 || x0 >= x1 {
                        return Err(Error::shape("pooling window lies entirely in padding"));
                    }
                    let oi = (nc * oh + oy) * ow + ox;
                    match spec.kind {
                        PoolKind::Max => {
                            let mut best = (T::neg_infinity(), 0usize);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let i = (nc * s.h + y) * s.w + xx;
                                    if xd[i] > best.0 {
                                        best = (xd[i], i);
                                    }
                                }
                            }
                            od[oi] = best.0;
                            argmax.push(best.1);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                acc += xd[(nc * s.h + y) * s.w + x0..(nc * s.h + y) * s.w + x1].iter().copied().sum::<T>();
                            }
                            od[oi] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        }
                    }
                }
            }
        }
    }
    let rule = match spec.kind {
        PoolKind::Max => PoolRule::Max(argmax),
        PoolKind::Avg => PoolRule::Avg(spec),
    };
    tape.record(out, &[x], PoolBackward { rule })
}

struct GlobalAvgBackward;

impl<T: Scalar> Backward<T> for GlobalAvgBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let s = ctx.inputs[0].shape();
        let inv = T::one() / T::lit(s.plane() as f64);
        let dy = ctx.grad.data();
        let mut dx = Tensor::zeros(s);
        for (i, d) in dx.data_mut().iter_mut().enumerate() {
            *d = dy[i / s.plane()] * inv;
        }
        vec![Some(dx)]
    }
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.plane() == 0 {
        return Err(Error::shape("global average pooling of an empty plane"));
    }
    let inv = T::one() / T::lit(s.plane() as f64);
    let data: Vec<T> = tape.value(x).data().chunks(s.plane()).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)?;
    tape.record(out, &[x], GlobalAvgBackward)
}
