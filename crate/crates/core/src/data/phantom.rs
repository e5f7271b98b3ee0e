//! Synthetic three-frame IVUS-like cross sections with analytic labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

use super::{Sample, BACKGROUND, LUMEN, WALL};

pub const DEFAULT_SPACING_MM: f64 = 0.02;

pub const LUMEN_LEVEL: f64 = 0.12;
pub const WALL_LEVEL: f64 = 0.55;
pub const ADVENTITIA_LEVEL: f64 = 0.35;
pub const CATHETER_LEVEL: f64 = 0.05;
pub const CATHETER_RADIUS: f64 = 0.04;
pub const SHADOW_FACTOR: f64 = 0.15;
pub const SPECKLE_SHAPE: f64 = 4.0;

/// Rotated ellipse in pixel coordinates (pixel `(x, y)` has its centre at
/// `(x + 0.5, y + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized radius; `≤ 1` inside.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }
}

/// Angular sector (radians, measured around the image centre).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wedge {
    pub start: f64,
    pub width: f64,
}

impl Wedge {
    fn contains_angle(&self, phi: f64) -> bool {
        (phi - self.start).rem_euclid(2.0 * PI) <= self.width
    }
}

/// Everything needed to render one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub size: usize,
    pub eem: Ellipse,
    pub lumen: Ellipse,
    pub shadows: Vec<Wedge>,
}

impl Geometry {
    pub fn label_at(&self, x: f64, y: f64) -> u8 {
        if self.lumen.contains(x, y) {
            LUMEN
        } else if self.eem.contains(x, y) {
            WALL
        } else {
            BACKGROUND
        }
    }

    /// The wall between lumen and EEM, halfway between the two borders.
    fn mid_wall(&self) -> Ellipse {
        let (l, e) = (&self.lumen, &self.eem);
        Ellipse { cx: 0.5 * (l.cx + e.cx), cy: 0.5 * (l.cy + e.cy), a: 0.5 * (l.a + e.a), b: 0.5 * (l.b + e.b), theta: e.theta }
    }

    fn centre(&self) -> f64 {
        self.size as f64 / 2.0
    }

    pub fn in_catheter(&self, x: f64, y: f64) -> bool {
        let c = self.centre();
        let r = CATHETER_RADIUS * self.size as f64;
        (x - c).powi(2) + (y - c).powi(2) <= r * r
    }

    /// Points beyond the mid-wall inside a shadow wedge.
    pub fn in_shadow(&self, x: f64, y: f64) -> bool {
        if self.shadows.is_empty() || self.mid_wall().contains(x, y) {
            return false;
        }
        let c = self.centre();
        let phi = (y - c).atan2(x - c);
        self.shadows.iter().any(|w| w.contains_angle(phi))
    }

    /// Noise-free intensity at a point.
    pub fn base_intensity(&self, x: f64, y: f64) -> f64 {
        if self.in_catheter(x, y) {
            return CATHETER_LEVEL;
        }
        let level = match self.label_at(x, y) {
            LUMEN => LUMEN_LEVEL,
            WALL => WALL_LEVEL,
            _ => ADVENTITIA_LEVEL,
        };
        if self.in_shadow(x, y) {
            level * SHADOW_FACTOR
        } else {
            level
        }
    }

    pub fn render_label(&self) -> LabelMap {
        let n = self.size;
        let mut m = LabelMap::filled(1, n, n, BACKGROUND);
        for y in 0..n {
            for x in 0..n {
                m.set(0, y, x, self.label_at(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        m
    }

    /// Base intensity times mean-one gamma speckle, clamped to `[0, 1]`.
    pub fn render_frame(&self, rng: &mut impl Rng) -> Vec<f32> {
        let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma parameters");
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let v = self.base_intensity(x as f64 + 0.5, y as f64 + 0.5) * speckle.sample(rng);
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    /// Random geometry with the layout described in the module docs.
    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let cx = s / 2.0 + rng.random_range(-0.02..=0.02) * s;
        let cy = s / 2.0 + rng.random_range(-0.02..=0.02) * s;
        let theta = rng.random_range(0.0..PI);
        let eem = Ellipse { cx, cy, a: rng.random_range(0.25..=0.42) * s, b: rng.random_range(0.25..=0.42) * s, theta };
        let (ra, rb) = (rng.random_range(0.35..=0.75), rng.random_range(0.35..=0.75));
        // In the EEM's normalized frame the lumen is an axis-aligned ellipse
        // with semi-axes (ra, rb); an offset of at most half the remaining
        // gap keeps it well inside the unit disk.
        let reach = 0.5 * (1.0 - f64::max(ra, rb));
        let (off, dir) = (rng.random_range(0.0..=reach), rng.random_range(0.0..2.0 * PI));
        let (ou, ov) = (off * dir.cos() * eem.a, off * dir.sin() * eem.b);
        let (sn, cs) = theta.sin_cos();
        let lumen = Ellipse { cx: cx + ou * cs - ov * sn, cy: cy + ou * sn + ov * cs, a: ra * eem.a, b: rb * eem.b, theta };
        let shadows = (0..rng.random_range(0..=2))
            .map(|_| Wedge { start: rng.random_range(-PI..PI), width: rng.random_range(10.0f64..=40.0).to_radians() })
            .collect();
        Geometry { size, eem, lumen, shadows }
    }

    /// A neighbouring frame: every ellipse parameter moved by at most 2%.
    pub fn perturbed(&self, rng: &mut impl Rng) -> Self {
        let mut jitter = |e: &Ellipse| {
            let mut f = || 1.0 + rng.random_range(-0.02..=0.02);
            Ellipse { cx: e.cx * f(), cy: e.cy * f(), a: e.a * f(), b: e.b * f(), theta: e.theta * f() }
        };
        let (eem, lumen) = (jitter(&self.eem), jitter(&self.lumen));
        Geometry { eem, lumen, ..self.clone() }
    }
}

pub fn check_size(size: usize) -> Result<()> {
    if size < 64 || !size.is_multiple_of(64) {
        return Err(Error::invalid(format!("image size {} must be a multiple of 64 (and at least 64)", size)));
    }
    Ok(())
}

/// Deterministic phantom for `seed`: the label is rendered from the middle
/// frame's geometry, the outer frames from perturbed copies.
pub fn generate_phantom(seed: u64, size: usize) -> Result<Sample> {
    Ok(generate_with_geometry(seed, size)?.0)
}

pub fn generate_with_geometry(seed: u64, size: usize) -> Result<(Sample, Geometry)> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::random(size, &mut rng);
    let before = geom.perturbed(&mut rng);
    let after = geom.perturbed(&mut rng);
    let mut data = before.render_frame(&mut rng);
    data.extend(geom.render_frame(&mut rng));
    data.extend(after.render_frame(&mut rng));
    let frames = Tensor::from_vec([1, 3, size, size], data)?;
    let sample = Sample {
        id: format!("phantom-{:016x}", seed),
        frames,
        label: geom.render_label(),
        spacing_mm: DEFAULT_SPACING_MM,
    };
    Ok((sample, geom))
}
