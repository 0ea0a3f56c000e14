use crate::geometry::Raster;

use super::StereoError;

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    raster: Raster<f64>,
}

impl IntensityImage {
    pub fn new(raster: Raster<f64>) -> Self {
        Self { raster }
    }

    /// Luminance-weighted conversion of 8-bit RGB.
    pub fn from_rgb8(rgb: &Raster<[u8; 3]>) -> Self {
        Self::new(rgb.map(|&[r, g, b]| luminance(r, g, b)))
    }

    pub fn raster(&self) -> &Raster<f64> {
        &self.raster
    }

    pub fn into_raster(self) -> Raster<f64> {
        self.raster
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.raster.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.raster.height()
    }

    /// Bilinear sample at a continuous coordinate. Out-of-bounds samples are
    /// rejected rather than clamped.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let w = self.raster.width();
        let h = self.raster.height();
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        // Both are non-negative here, so truncation is floor.
        let x0 = (x as usize).min(w.saturating_sub(2));
        let y0 = (y as usize).min(h.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v = self.raster.values();
        let i = y0 * w + x0;
        let x1 = if w > 1 { 1 } else { 0 };
        let y1 = if h > 1 { w } else { 0 };
        let top = v[i] + fx * (v[i + x1] - v[i]);
        let bottom = v[i + y1] + fx * (v[i + y1 + x1] - v[i + y1]);
        Some(top + fy * (bottom - top))
    }

    /// Central-difference gradient at an interior integer pixel.
    pub fn gradient(&self, x: usize, y: usize) -> (f64, f64) {
        let r = &self.raster;
        let gx = 0.5 * (r.at(x + 1, y) - r.at(x - 1, y));
        let gy = 0.5 * (r.at(x, y + 1) - r.at(x, y - 1));
        (gx, gy)
    }
}

pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Pixels whose central-difference gradient magnitude exceeds `threshold`.
/// The one-pixel border is always false.
pub fn texture_mask(image: &IntensityImage, threshold: f64) -> Result<Raster<bool>, StereoError> {
    if !(threshold > 0.0) {
        return Err(StereoError::InvalidThreshold(threshold));
    }
    let (w, h) = (image.width(), image.height());
    Ok(Raster::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return false;
        }
        let (gx, gy) = image.gradient(x, y);
        (gx * gx + gy * gy).sqrt() > threshold
    }))
}
