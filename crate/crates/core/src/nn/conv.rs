//! Grouped 2-d convolution (cross-correlation, zero padding).
//!
//! Dense groups go through im2col + GEMM; the depthwise case (one input and
//! one output channel per group) uses a direct kernel.

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{gemm, Mat, Scalar, Shape, Tensor};

/// Static description of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride and padding, no groups, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
            bias: false,
        }
    }

    /// Depthwise `k × k` convolution over `channels` channels.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { groups: channels, ..Self::new(channels, channels, kernel, stride, padding) }
    }

    /// `3×3`, padding 1.
    pub fn k3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::new(in_channels, out_channels, 3, stride, 1)
    }

    /// `1×1`, stride 1, no padding.
    pub fn k1(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    pub fn with_bias(self) -> Self {
        ConvSpec { bias: true, ..self }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups.max(1), self.kernel.0, self.kernel.1)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Learnable scalars: weights plus optional bias.
    pub fn num_params(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || !self.in_channels.is_multiple_of(g) || !self.out_channels.is_multiple_of(g) {
            return Err(Error::invalid(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                g, self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("kernel and stride must be positive"));
        }
        Ok(())
    }

    /// `floor((in + 2p − k) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize| {
            let padded = len + 2 * p;
            if padded < k {
                None
            } else {
                Some((padded - k) / s + 1)
            }
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::shape(format!("convolution output for {}x{} input would be empty", h, w))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(x: Shape, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if x.c != spec.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {}",
                spec.in_channels, x.c
            )));
        }
        let (oh, ow) = spec.output_hw(x.h, x.w)?;
        Ok(Geom {
            n: x.n,
            cin: x.c,
            h: x.h,
            w: x.w,
            cout: spec.out_channels,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            groups: spec.groups,
            oh,
            ow,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.p()
    }
    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }
    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input/output index ranges along one axis for kernel offset `k`:
    /// output positions `o` with `0 <= o*s + k - p < len`.
    #[inline]
    fn valid_range(len: usize, out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
        // o*s + k >= p  →  o >= ceil((p - k) / s)
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p < len  →  o < (len + p - k) / s, rounded up
        let hi = if len + p <= k { 0 } else { (len + p - k).div_ceil(s) };
        (lo.min(out), hi.min(out))
    }
}

/// `(cin_g·kh·kw) × (oh·ow)` column matrix for one sample and group.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = Geom::valid_range(g.h, g.oh, g.sh, ky, g.ph);
            for kx in 0..g.kw {
                let (x0, x1) = Geom::valid_range(g.w, g.ow, g.sw, kx, g.pw);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(T::zero());
                for oy in y0..y1 {
                    let iy = oy * g.sh + ky - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.sw == 1 {
                        let ix0 = x0 + kx - g.pw;
                        dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.sw + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the input plane.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = Geom::valid_range(g.h, g.oh, g.sh, ky, g.ph);
            for kx in 0..g.kw {
                let (x0, x1) = Geom::valid_range(g.w, g.ow, g.sw, kx, g.pw);
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in y0..y1 {
                    let iy = oy * g.sh + ky - g.ph;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        dst[ox * g.sw + kx - g.pw] += src[ox];
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(x: &[T], w: &[T], g: &Geom, out: &mut [T], cols: &mut Vec<T>) {
    let (p, k, cin_g, cout_g) = (g.p(), g.k(), g.cin_g(), g.cout_g());
    if g.depthwise() {
        depthwise_forward(x, w, g, out);
        return;
    }
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
        let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
        let og = &mut out[grp * cout_g * p..(grp + 1) * cout_g * p];
        let cols_ref: &[T] = if g.pointwise() {
            xg
        } else {
            cols.resize(k * p, T::zero());
            im2col(xg, g, cols);
            cols
        };
        gemm(Mat::new(wg, cout_g, k), Mat::new(cols_ref, k, p), T::zero(), og);
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &Geom, out: &mut [T]) {
    let (p, kk) = (g.p(), g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &w[c * kk..(c + 1) * kk];
        let oc = &mut out[c * p..(c + 1) * p];
        oc.fill(T::zero());
        for ky in 0..g.kh {
            let (y0, y1) = Geom::valid_range(g.h, g.oh, g.sh, ky, g.ph);
            for kx in 0..g.kw {
                let (x0, x1) = Geom::valid_range(g.w, g.ow, g.sw, kx, g.pw);
                let wv = wc[ky * g.kw + kx];
                for oy in y0..y1 {
                    let row = &plane[(oy * g.sh + ky - g.ph) * g.w..][..g.w];
                    let orow = &mut oc[oy * g.ow..(oy + 1) * g.ow];
                    for ox in x0..x1 {
                        orow[ox] += wv * row[ox * g.sw + kx - g.pw];
                    }
                }
            }
        }
    }
}

/// Accumulates weight and input gradients of one depthwise sample.
fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &Geom, dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let (p, kk, plane_len) = (g.p(), g.kh * g.kw, g.h * g.w);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.cin {
        let plane = &x[c * plane_len..(c + 1) * plane_len];
        let dyc = &dy[c * p..(c + 1) * p];
        for ky in 0..g.kh {
            let (y0, y1) = Geom::valid_range(g.h, g.oh, g.sh, ky, g.ph);
            for kx in 0..g.kw {
                let (x0, x1) = Geom::valid_range(g.w, g.ow, g.sw, kx, g.pw);
                let wv = w[c * kk + ky * g.kw + kx];
                let mut acc = T::zero();
                for oy in y0..y1 {
                    let iy = oy * g.sh + ky - g.ph;
                    let drow = &dyc[oy * g.ow..(oy + 1) * g.ow];
                    if dw.is_some() {
                        let row = &plane[iy * g.w..(iy + 1) * g.w];
                        for ox in x0..x1 {
                            acc += drow[ox] * row[ox * g.sw + kx - g.pw];
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxrow = &mut dx[c * plane_len + iy * g.w..][..g.w];
                        for ox in x0..x1 {
                            dxrow[ox * g.sw + kx - g.pw] += wv * drow[ox];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[c * kk + ky * g.kw + kx] += acc;
                }
            }
        }
    }
}

/// Forward convolution on raw tensors (no tape).
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), spec)?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(format!("conv weight shape {} != expected {}", weight.shape(), spec.weight_shape())));
    }
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(format!("conv bias has {} elements, expected {}", b.len(), g.cout)));
        }
    }
    let mut out = Tensor::zeros(g.out_shape());
    let (xd, wd) = (x.data(), weight.data());
    parallel::for_each_chunk(out.data_mut(), g.out_len(), |n, o| {
        let mut cols = Vec::new();
        forward_sample(&xd[n * g.in_len()..(n + 1) * g.in_len()], wd, &g, o, &mut cols);
        if let Some(b) = bias {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut o[c * g.p()..(c + 1) * g.p()] {
                    *v += bv;
                }
            }
        }
    });
    Ok(out)
}

struct ConvBackward {
    geom: Geom,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for ConvBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = self.geom;
        let (x, w, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let (p, k, cin_g, cout_g) = (g.p(), g.k(), g.cin_g(), g.cout_g());
        let sample_x = |n: usize| &x[n * g.in_len()..(n + 1) * g.in_len()];
        let sample_dy = |n: usize| &dy[n * g.out_len()..(n + 1) * g.out_len()];

        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            parallel::for_each_chunk(dx.data_mut(), g.in_len(), |n, dxn| {
                if g.depthwise() {
                    depthwise_backward(sample_x(n), w, sample_dy(n), &g, Some(dxn), None);
                    return;
                }
                let mut dcols = vec![T::zero(); if g.pointwise() { 0 } else { k * p }];
                for grp in 0..g.groups {
                    let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
                    let dyg = &sample_dy(n)[grp * cout_g * p..(grp + 1) * cout_g * p];
                    let dxg = &mut dxn[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                    if g.pointwise() {
                        gemm(Mat::new(wg, cout_g, k).t(), Mat::new(dyg, cout_g, p), T::zero(), dxg);
                    } else {
                        gemm(Mat::new(wg, cout_g, k).t(), Mat::new(dyg, cout_g, p), T::zero(), &mut dcols);
                        col2im(&dcols, &g, dxg);
                    }
                }
            });
            dx
        });

        let dw = ctx.needs_grad[1].then(|| {
            let wlen = ctx.inputs[1].len();
            let partials = parallel::map_indexed(g.n, |n| {
                let mut dw = vec![T::zero(); wlen];
                if g.depthwise() {
                    depthwise_backward(sample_x(n), w, sample_dy(n), &g, None, Some(&mut dw));
                    return dw;
                }
                let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { k * p }];
                for grp in 0..g.groups {
                    let xg = &sample_x(n)[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                    let dyg = &sample_dy(n)[grp * cout_g * p..(grp + 1) * cout_g * p];
                    let cols_ref: &[T] = if g.pointwise() {
                        xg
                    } else {
                        im2col(xg, &g, &mut cols);
                        &cols
                    };
                    gemm(
                        Mat::new(dyg, cout_g, p),
                        Mat::new(cols_ref, k, p).t(),
                        T::zero(),
                        &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k],
                    );
                }
                dw
            });
            let mut acc = Tensor::zeros(ctx.inputs[1].shape());
            for part in partials {
                for (a, b) in acc.data_mut().iter_mut().zip(part) {
                    *a += b;
                }
            }
            acc
        });

        let mut grads = vec![dx, dw];
        if self.has_bias {
            grads.push(ctx.needs_grad[2].then(|| {
                let mut db = Tensor::zeros(Shape::new(1, g.cout, 1, 1));
                for n in 0..g.n {
                    let dyn_ = sample_dy(n);
                    for (c, d) in db.data_mut().iter_mut().enumerate() {
                        *d += dyn_[c * p..(c + 1) * p].iter().copied().sum::<T>();
                    }
                }
                db
            }));
        }
        grads
    }
}

/// Differentiable convolution. `weight` has shape `spec.weight_shape()`;
/// `bias`, when given, has `spec.out_channels` elements.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    let geom = Geom::new(tape.shape(x), spec)?;
    let out = conv2d_forward(tape.value(x), tape.value(weight), bias.map(|b| tape.value(b)), spec)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    tape.record(out, &inputs, ConvBackward { geom, has_bias: bias.is_some() })
}

/// Convolution applied independently to each channel.
pub fn depthwise_conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    if !spec.is_depthwise() {
        return Err(Error::invalid(format!(
            "depthwise convolution needs groups == in_channels == out_channels, got groups {} for {} -> {}",
            spec.groups, spec.in_channels, spec.out_channels
        )));
    }
    conv2d(tape, x, weight, bias, spec)
}
