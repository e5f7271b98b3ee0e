//! Overlap and surface-distance metrics, evaluation reports and the
//! throughput benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Sample, LUMEN, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::Csdn;
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("mask data has {} values, expected {}x{}", data.len(), h, w)));
        }
        Ok(Mask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Mask { h, w, data }
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Mask pixels with at least one 4-neighbour outside the mask (the image
    /// border counts as outside), as `(y, x)` in row-major order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.at(y, x) {
                    continue;
                }
                let exposed = y == 0
                    || x == 0
                    || y + 1 == self.h
                    || x + 1 == self.w
                    || !self.at(y - 1, x)
                    || !self.at(y + 1, x)
                    || !self.at(y, x - 1)
                    || !self.at(y, x + 1);
                if exposed {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(format!("masks {}x{} and {}x{} differ", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// `(lumen, eem)` masks of a single map: lumen is class 2, the EEM region
/// is every non-background pixel.
pub fn region_masks(label: &LabelMap) -> Result<(Mask, Mask)> {
    if label.n != 1 {
        return Err(Error::shape(format!("region masks need a single map, got a batch of {}", label.n)));
    }
    label.check_range(NUM_CLASSES)?;
    let lumen = label.data().iter().map(|&v| v == LUMEN).collect();
    let eem = label.data().iter().map(|&v| v >= 1).collect();
    Ok((Mask { h: label.h, w: label.w, data: lumen }, Mask { h: label.h, w: label.w, data: eem }))
}

fn overlap(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    same_shape(a, b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    let (i, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 })
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (i, na, nb) = overlap(a, b)?;
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Linear interpolation between order statistics at rank `q·(n−1)`.
/// `sorted` must be ascending and nonempty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Squared Euclidean distance transform of a point set on an `h × w` grid
/// (lower envelope of parabolas, one pass per axis). Exact for integer
/// coordinates.
fn squared_distance_field(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut f = vec![FAR; h * w];
    for &(y, x) in points {
        f[y * w + x] = 0.0;
    }
    let mut buf = Vec::new();
    let mut out = Vec::new();
    for y in 0..h {
        buf.clear();
        buf.extend_from_slice(&f[y * w..(y + 1) * w]);
        envelope_1d(&buf, &mut out);
        f[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    for x in 0..w {
        buf.clear();
        buf.extend((0..h).map(|y| f[y * w + x]));
        envelope_1d(&buf, &mut out);
        for y in 0..h {
            f[y * w + x] = out[y];
        }
    }
    f
}

/// `out[q] = min_p (q − p)² + f[p]`.
fn envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |i: usize| (i * i) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                // k == 0 and z[0] = −∞ cannot happen; kept for clarity.
                break;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Pooled directed boundary-to-boundary distances (pixels), ascending.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance("surface distance of an empty mask"));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let (da, db) = (squared_distance_field(a.h, a.w, &ba), squared_distance_field(b.h, b.w, &bb));
    let mut d: Vec<f64> = ba.iter().map(|&(y, x)| db[y * b.w + x].sqrt()).collect();
    d.extend(bb.iter().map(|&(y, x)| da[y * a.w + x].sqrt()));
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// 95th percentile of the pooled symmetric surface distances, in mm.
pub fn hd95(a: &Mask, b: &Mask, spacing_mm: f64) -> Result<f64> {
    Ok(percentile(&surface_distances(a, b)?, 0.95) * spacing_mm)
}

/// Largest surface distance, in mm.
pub fn hausdorff(a: &Mask, b: &Mask, spacing_mm: f64) -> Result<f64> {
    Ok(surface_distances(a, b)?.last().copied().unwrap_or(0.0) * spacing_mm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Lumen,
    Eem,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Lumen, Region::Eem];

    pub fn name(self) -> &'static str {
        match self {
            Region::Lumen => "lumen",
            Region::Eem => "eem",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub region: Region,
    pub dsc: f64,
    pub iou: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionSummary {
    pub dsc: f64,
    pub iou: f64,
    /// Mean over samples with a defined distance; `None` if there are none.
    pub hd95_mm: Option<f64>,
    /// Samples left out of the HD95 mean.
    pub hd95_excluded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throughput {
    pub fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub batch: usize,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub lumen: RegionSummary,
    pub eem: RegionSummary,
    pub throughput: Option<Throughput>,
}

pub const CSV_HEADER: &str = "sample_id,region,dsc,iou,hd95_mm";

/// Metrics of one prediction against its ground truth (single maps).
pub fn score_pair(id: &str, pred: &LabelMap, truth: &LabelMap, spacing_mm: f64) -> Result<[SampleMetrics; 2]> {
    let (pl, pe) = region_masks(pred)?;
    let (tl, te) = region_masks(truth)?;
    let one = |region, p: &Mask, t: &Mask| -> Result<SampleMetrics> {
        let hd95_mm = match hd95(p, t, spacing_mm) {
            Ok(v) => Some(v),
            Err(Error::UndefinedDistance(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(SampleMetrics { id: id.to_string(), region, dsc: dsc(p, t)?, iou: iou(p, t)?, hd95_mm })
    };
    Ok([one(Region::Lumen, &pl, &tl)?, one(Region::Eem, &pe, &te)?])
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let summarize = |region: Region| {
            let rows: Vec<&SampleMetrics> = samples.iter().filter(|m| m.region == region).collect();
            let n = rows.len().max(1) as f64;
            let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd95_mm).collect();
            RegionSummary {
                dsc: rows.iter().map(|m| m.dsc).sum::<f64>() / n,
                iou: rows.iter().map(|m| m.iou).sum::<f64>() / n,
                hd95_mm: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
                hd95_excluded: rows.len() - hd.len(),
            }
        };
        let (lumen, eem) = (summarize(Region::Lumen), summarize(Region::Eem));
        for (r, s) in [("lumen", &lumen), ("eem", &eem)] {
            if s.hd95_excluded > 0 {
                log::warn!("{} sample(s) with an empty {} mask excluded from the HD95 mean", s.hd95_excluded, r);
            }
        }
        Ok(MetricsReport { samples, lumen, eem, throughput: None })
    }

    pub fn region(&self, r: Region) -> &RegionSummary {
        match r {
            Region::Lumen => &self.lumen,
            Region::Eem => &self.eem,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.samples {
            let hd = m.hd95_mm.map_or_else(|| "nan".to_string(), |v| format!("{:.6}", v));
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", m.id, m.region.name(), m.dsc, m.iou, hd);
        }
        s
    }

    /// Fixed-width summary, one row per evaluated model.
    pub fn summary(&self, label: &str, params: Option<usize>) -> String {
        let hd = |r: &RegionSummary| r.hd95_mm.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>8} | {:>8} {:>8} {:>9} | {:>8} {:>8} {:>9}",
            "Method", "Params", "FPS", "L-DSC", "L-IoU", "L-HD95mm", "E-DSC", "E-IoU", "E-HD95mm"
        );
        let params = params.map_or_else(|| "-".to_string(), |p| format!("{:.0}K", p as f64 / 1000.0));
        let fps = self.throughput.map_or_else(|| "-".to_string(), |t| format!("{:.1}", t.fps));
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>8} | {:>8.4} {:>8.4} {:>9} | {:>8.4} {:>8.4} {:>9}",
            label,
            params,
            fps,
            self.lumen.dsc,
            self.lumen.iou,
            hd(&self.lumen),
            self.eem.dsc,
            self.eem.iou,
            hd(&self.eem)
        );
        let n = self.samples.len() / 2;
        let _ = writeln!(s, "samples: {}", n);
        for (name, r) in [("lumen", &self.lumen), ("eem", &self.eem)] {
            if r.hd95_excluded > 0 {
                let _ = writeln!(s, "warning: {} {} prediction(s) empty, excluded from HD95", r.hd95_excluded, name);
            }
        }
        s
    }
}

/// Scores eval-mode predictions of `net` on `samples`, `batch` at a time.
pub fn evaluate<T: Scalar>(net: &Csdn<T>, samples: &[Sample], batch: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut rows = Vec::with_capacity(2 * samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let frames: Vec<Tensor<T>> = chunk.iter().map(|s| s.frames.cast()).collect();
        let pred = net.predict_labels(&Tensor::stack(&frames)?)?;
        let scored: Vec<Result<[SampleMetrics; 2]>> =
            parallel::map_indexed(chunk.len(), |i| score_pair(&chunk[i].id, &pred.item(i), &chunk[i].label, chunk[i].spacing_mm));
        for r in scored {
            rows.extend(r?);
        }
    }
    MetricsReport::from_samples(rows)
}

/// Scores the ground truth against itself; a harness self-test.
pub fn evaluate_oracle(samples: &[Sample]) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(2 * samples.len());
    for s in samples {
        rows.extend(score_pair(&s.id, &s.label, &s.label, s.spacing_mm)?);
    }
    MetricsReport::from_samples(rows)
}

/// Times eval-mode forward passes on one thread after `warmup` untimed
/// passes. Input content is fixed pseudo-random frames.
pub fn fps_benchmark<T: Scalar>(net: &Csdn<T>, hw: (usize, usize), batch: usize, warmup: usize, timed: usize) -> Result<Throughput> {
    if warmup < 1 {
        return Err(Error::invalid("benchmark needs at least 1 warmup iteration"));
    }
    if timed < 10 {
        return Err(Error::invalid(format!("benchmark needs at least 10 timed iterations, got {}", timed)));
    }
    if batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    let (h, w) = hw;
    let x = Tensor::from_fn([batch, net.config().in_frames, h, w], |n, c, y, xx| {
        T::lit(((n * 31 + c * 17 + y * 7 + xx * 3) % 255) as f64 / 255.0)
    });
    parallel::with_mode(false, || {
        for _ in 0..warmup {
            net.predict(&x)?;
        }
        let mut lat = Vec::with_capacity(timed);
        let start = Instant::now();
        for _ in 0..timed {
            let t = Instant::now();
            net.predict(&x)?;
            lat.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let elapsed = start.elapsed().as_secs_f64();
        lat.sort_by(f64::total_cmp);
        Ok(Throughput {
            fps: (batch * timed) as f64 / elapsed,
            p50_ms: percentile(&lat, 0.50),
            p95_ms: percentile(&lat, 0.95),
            batch,
            iters: timed,
        })
    })
}
