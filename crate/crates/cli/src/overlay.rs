//! Contour overlays written as binary PPM.

use std::path::Path;

use csdn::metrics::{region_masks, Mask};
use csdn::{Error, LabelMap, Result};

pub type Rgb = [u8; 3];

pub const PRED_EEM: Rgb = [255, 0, 0];
pub const PRED_LUMEN: Rgb = [0, 255, 0];
pub const TRUTH_EEM: Rgb = [255, 255, 0];
pub const TRUTH_LUMEN: Rgb = [0, 160, 255];

/// An RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub px: Vec<Rgb>,
}

impl Image {
    /// Grey image from values in `[0, 1]`.
    pub fn from_grey(w: usize, h: usize, grey: &[f32]) -> Self {
        assert_eq!(grey.len(), w * h);
        let px = grey.iter().map(|&v| [csdn::data::dataset::quantize(v); 3]).collect();
        Image { w, h, px }
    }

    pub fn draw_contour(&mut self, mask: &Mask, color: Rgb) {
        for (y, x) in mask.boundary() {
            self.px[y * self.w + x] = color;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut buf = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        for p in &self.px {
            buf.extend_from_slice(p);
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}

/// Frame with ground-truth contours (if any) under the predicted ones.
pub fn render(frame: &[f32], w: usize, h: usize, pred: &LabelMap, truth: Option<&LabelMap>) -> Result<Image> {
    let mut img = Image::from_grey(w, h, frame);
    if let Some(t) = truth {
        let (lumen, eem) = region_masks(t)?;
        img.draw_contour(&eem, TRUTH_EEM);
        img.draw_contour(&lumen, TRUTH_LUMEN);
    }
    let (lumen, eem) = region_masks(pred)?;
    img.draw_contour(&eem, PRED_EEM);
    img.draw_contour(&lumen, PRED_LUMEN);
    Ok(img)
}
