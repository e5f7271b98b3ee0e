//! On-disk dataset: a text manifest plus one directory of binary PGM files
//! per sample.
//!
//! ```text
//! <root>/manifest.txt      csdn-dataset v1 spacing=<mm> size=<px>
//!                          <id> <train|val>
//!                          ...
//! <root>/<id>/frame1.pgm   8-bit P5
//! <root>/<id>/frame2.pgm
//! <root>/<id>/frame3.pgm
//! <root>/<id>/label.pgm    values 0, 1, 2
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::resize::resize_forward;
use crate::nn::ResizeMode;
use crate::tensor::Tensor;

use super::{Sample, NUM_CLASSES};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "csdn-dataset v1";
pub const FRAME_FILES: [&str; 3] = ["frame1.pgm", "frame2.pgm", "frame3.pgm"];
pub const LABEL_FILE: &str = "label.pgm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split `{}` (expected train or val)", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spacing_mm: f64,
    pub size: usize,
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |(_, s)| *s == split).map(|(id, _)| id.as_str())
    }

    /// Ids must be unique, which also keeps train and val disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (id, _) in &self.entries {
            if id.is_empty() || id.contains(char::is_whitespace) || id.contains('/') || id.contains('\\') {
                return Err(Error::Data(format!("invalid sample id `{}`", id)));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("sample id `{}` listed more than once", id)));
            }
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Data("spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} spacing={} size={}\n", HEADER, self.spacing_mm, self.size);
        for (id, split) in &self.entries {
            s.push_str(&format!("{} {}\n", id, split));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Data("empty manifest".into()))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| Error::Data(format!("manifest header must start with `{}`", HEADER)))?;
        let (mut spacing, mut size) = (None, None);
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("spacing", v)) => spacing = v.parse::<f64>().ok(),
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                _ => return Err(Error::Data(format!("unexpected manifest header field `{}`", field))),
            }
        }
        let (spacing_mm, size) = match (spacing, size) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Data("manifest header needs spacing=<mm> and size=<px>".into())),
        };
        let mut entries = Vec::new();
        for (no, line) in lines {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(split), None) => entries.push((id.to_string(), split.parse()?)),
                _ => return Err(Error::Data(format!("manifest line {}: expected `<id> <split>`", no + 1))),
            }
        }
        let m = Manifest { spacing_mm, size, entries };
        m.validate()?;
        Ok(m)
    }
}

/// Manifest plus every sample, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.manifest
            .entries
            .iter()
            .zip(&self.samples)
            .filter(|((_, s), _)| *s == split)
            .map(|(_, sample)| sample.clone())
            .collect()
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Binary 8-bit greyscale image.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), w * h);
    let mut buf = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    buf.extend_from_slice(pixels);
    io(path, fs::write(path, buf))
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = io(path, fs::read(path))?;
    parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: malformed PGM: {}", path.display(), msg)))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    // Header: magic, width, height, maxval as whitespace-separated tokens
    // with `#` comments, then exactly one whitespace byte.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(format!("unsupported magic `{}`", tokens[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad number `{}`", s));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(format!("maxval {} (only 255 is supported)", maxval));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or("pixel data truncated")?;
    Ok((w, h, data.to_vec()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Writes the four image files of one sample into `dir`.
pub fn save_sample(dir: &Path, s: &Sample) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let shape = s.frames.shape();
    let (h, w) = (shape.h, shape.w);
    for (f, name) in FRAME_FILES.iter().enumerate() {
        let px: Vec<u8> = s.frames.data()[f * h * w..(f + 1) * h * w].iter().map(|&v| quantize(v)).collect();
        write_pgm(&dir.join(name), w, h, &px)?;
    }
    write_pgm(&dir.join(LABEL_FILE), w, h, s.label.data())
}

/// Reads a sample directory. `label.pgm` is optional unless `need_label`;
/// a missing label reads as all background.
pub fn load_sample(dir: &Path, id: &str, spacing_mm: f64, need_label: bool) -> Result<Sample> {
    let mut size = None;
    let mut data = Vec::new();
    for name in FRAME_FILES {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Data(format!("missing frame {}", path.display())));
        }
        let (w, h, px) = read_pgm(&path)?;
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Data(format!("{}: frame size {}x{} differs from the other frames", path.display(), w, h)));
        }
        data.extend(px.into_iter().map(dequantize));
    }
    let (w, h) = size.expect("three frames read");
    let label_path = dir.join(LABEL_FILE);
    let label = if label_path.exists() {
        let (lw, lh, px) = read_pgm(&label_path)?;
        if (lw, lh) != (w, h) {
            return Err(Error::Data(format!("{}: label size {}x{} differs from frames {}x{}", label_path.display(), lw, lh, w, h)));
        }
        if let Some(&v) = px.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("{}: label value {} > {}", label_path.display(), v, NUM_CLASSES - 1)));
        }
        Some(LabelMap::new(1, h, w, px)?)
    } else if need_label {
        return Err(Error::Data(format!("missing label {}", label_path.display())));
    } else {
        None
    };
    Ok(Sample {
        id: id.to_string(),
        frames: Tensor::from_vec([1, 3, h, w], data)?,
        label: label.unwrap_or_else(|| LabelMap::filled(1, h, w, 0)),
        spacing_mm,
    })
}

/// Resizes a sample whose sides are not multiples of `multiple` down to the
/// nearest multiple below (bicubic frames, nearest label). Spacing is scaled
/// to keep physical size.
pub fn conform_size(s: Sample, multiple: usize) -> Result<Sample> {
    let shape = s.frames.shape();
    let fit = |v: usize| (v / multiple) * multiple;
    let (nh, nw) = (fit(shape.h), fit(shape.w));
    if (nh, nw) == (shape.h, shape.w) {
        return Ok(s);
    }
    if nh == 0 || nw == 0 {
        return Err(Error::Data(format!("image {}x{} is smaller than {}", shape.w, shape.h, multiple)));
    }
    let frames = resize_forward(&s.frames, nh, nw, ResizeMode::Bicubic)?.map(|v| v.clamp(0.0, 1.0));
    let mut label = LabelMap::filled(1, nh, nw, 0);
    for y in 0..nh {
        for x in 0..nw {
            let sy = ((y as f64 + 0.5) * shape.h as f64 / nh as f64) as usize;
            let sx = ((x as f64 + 0.5) * shape.w as f64 / nw as f64) as usize;
            label.set(0, y, x, s.label.at(0, sy.min(shape.h - 1), sx.min(shape.w - 1)));
        }
    }
    let spacing_mm = s.spacing_mm * shape.w as f64 / nw as f64;
    Ok(Sample { frames, label, spacing_mm, ..s })
}

pub fn save_dataset(root: &Path, manifest: &Manifest, samples: &[Sample]) -> Result<()> {
    manifest.validate()?;
    if manifest.entries.len() != samples.len() {
        return Err(Error::Data(format!("{} manifest entries for {} samples", manifest.entries.len(), samples.len())));
    }
    io(root, fs::create_dir_all(root))?;
    for ((id, _), s) in manifest.entries.iter().zip(samples) {
        save_sample(&root.join(id), s)?;
    }
    let path = root.join(MANIFEST);
    io(&path, fs::write(&path, manifest.to_text()))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    if !path.is_file() {
        return Err(Error::MissingManifest(root.to_path_buf()));
    }
    Manifest::parse(&io(&path, fs::read_to_string(&path))?)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let samples = manifest
        .entries
        .iter()
        .map(|(id, _)| load_sample(&root.join(id), id, manifest.spacing_mm, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}
