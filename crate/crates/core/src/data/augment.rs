//! Random affine + flip + outer-frame swap augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelMap;
use crate::tensor::Tensor;

use super::{Sample, BACKGROUND, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the image size, per axis.
    pub translate: f64,
    pub rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub flip_lr: f64,
    pub flip_ud: f64,
    /// Probability of exchanging frames 1 and 3; frame 2 never moves.
    pub swap_frames: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            translate: 0.1,
            rotate_deg: 180.0,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 10.0,
            flip_lr: 0.5,
            flip_ud: 0.5,
            swap_frames: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            translate: 0.0,
            rotate_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            shear_deg: 0.0,
            flip_lr: 0.0,
            flip_ud: 0.0,
            swap_frames: 0.0,
        }
    }
}

/// One draw from an [`AugmentConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Shift in pixels.
    pub tx: f64,
    pub ty: f64,
    pub rotate: f64,
    pub scale: f64,
    pub shear: f64,
    pub flip_lr: bool,
    pub flip_ud: bool,
    pub swap_frames: bool,
}

fn symmetric(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { tx: 0.0, ty: 0.0, rotate: 0.0, scale: 1.0, shear: 0.0, flip_lr: false, flip_ud: false, swap_frames: false }
    }

    pub fn sample(cfg: &AugmentConfig, size: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = size;
        let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
        AugmentParams {
            tx: symmetric(&mut rng, cfg.translate) * w as f64,
            ty: symmetric(&mut rng, cfg.translate) * h as f64,
            rotate: symmetric(&mut rng, cfg.rotate_deg).to_radians(),
            scale,
            shear: symmetric(&mut rng, cfg.shear_deg).to_radians(),
            flip_lr: rng.random_bool(cfg.flip_lr.clamp(0.0, 1.0)),
            flip_ud: rng.random_bool(cfg.flip_ud.clamp(0.0, 1.0)),
            swap_frames: rng.random_bool(cfg.swap_frames.clamp(0.0, 1.0)),
        }
    }

    fn is_spatial_identity(&self) -> bool {
        self.tx == 0.0 && self.ty == 0.0 && self.rotate == 0.0 && self.scale == 1.0 && self.shear == 0.0 && !self.flip_lr && !self.flip_ud
    }

    /// Inverse of the linear part `R(rotate)·Shear_x(shear)·scale`.
    fn inverse_linear(&self) -> [f64; 4] {
        let (s, c) = self.rotate.sin_cos();
        let k = self.shear.tan();
        // Forward: [c, -s; s, c] · [1, k; 0, 1] · scale.
        let m = [c * self.scale, (c * k - s) * self.scale, s * self.scale, (s * k + c) * self.scale];
        let det = m[0] * m[3] - m[1] * m[2];
        [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
    }

    /// Continuous source position sampled by output point `(x, y)` of a
    /// `w × h` image. The affine map acts about the image centre; flips are
    /// applied after it.
    pub fn source_point(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let x = if self.flip_lr { w as f64 - x } else { x };
        let y = if self.flip_ud { h as f64 - y } else { y };
        let (dx, dy) = (x - cx - self.tx, y - cy - self.ty);
        let m = self.inverse_linear();
        (cx + m[0] * dx + m[1] * dy, cy + m[2] * dx + m[3] * dy)
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, sx: f64, sy: f64) -> f32 {
    // Pixel centres sit at integer + 0.5; outside the frame reads as 0.
    let (fx, fy) = (sx - 0.5, sy - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize] as f64
        }
    };
    let v = (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0))
        + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0));
    v as f32
}

/// Class with the largest bilinear weight among the four pixels around the
/// source point; outside the frame counts as background. Ties go to the
/// lower class.
fn label_sample(label: &LabelMap, w: usize, h: usize, sx: f64, sy: f64) -> u8 {
    let (fx, fy) = (sx - 0.5, sy - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let mut weight = [0.0f64; NUM_CLASSES];
    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            let class = if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                BACKGROUND
            } else {
                label.at(0, yi as usize, xi as usize)
            };
            weight[class as usize] += wx * wy;
        }
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if weight[c] > weight[best] {
            best = c;
        }
    }
    best as u8
}

/// Applies `p` to every frame (bilinear) and the label (argmax of
/// bilinearly interpolated class indicators).
pub fn apply(s: &Sample, p: &AugmentParams) -> Sample {
    let shape = s.frames.shape();
    let (h, w, frames) = (shape.h, shape.w, shape.c);
    let mut out = s.clone();
    if !p.is_spatial_identity() {
        let plane = h * w;
        let src = s.frames.data();
        let mut data = vec![0f32; src.len()];
        let mut label = LabelMap::filled(1, h, w, BACKGROUND);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = p.source_point(x as f64 + 0.5, y as f64 + 0.5, w, h);
                for f in 0..frames {
                    data[f * plane + y * w + x] = bilinear(&src[f * plane..(f + 1) * plane], w, h, sx, sy);
                }
                label.set(0, y, x, label_sample(&s.label, w, h, sx, sy));
            }
        }
        out.frames = Tensor::from_vec(shape, data).expect("same shape");
        out.label = label;
    }
    if p.swap_frames && frames >= 3 {
        let plane = h * w;
        let d = out.frames.data_mut();
        let (head, tail) = d.split_at_mut((frames - 1) * plane);
        head[..plane].swap_with_slice(&mut tail[..plane]);
    }
    out
}

/// Draws parameters from `seed` and applies them.
pub fn augment(s: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let shape = s.frames.shape();
    apply(s, &AugmentParams::sample(cfg, (shape.h, shape.w), seed))
}
