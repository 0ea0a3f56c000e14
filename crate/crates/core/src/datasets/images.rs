use std::path::Path;

use image::DynamicImage;

use crate::geometry::Raster;

use super::DatasetError;

/// Stored units per metre in TUM depth images.
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

fn open(path: &Path) -> Result<DynamicImage, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| DatasetError::BadImageFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// 8-bit colour image; grayscale and alpha inputs are converted.
pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<Raster<[u8; 3]>, DatasetError> {
    let img = open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels().map(|p| p.0).collect();
    Ok(Raster::from_vec(w, h, px).expect("buffer matches dimensions"))
}

/// 16-bit single-channel depth in metres, with stored zeros flagged as holes.
pub fn load_depth_png(
    path: impl AsRef<Path>,
    depth_scale: f64,
) -> Result<(Raster<f64>, Raster<bool>), DatasetError> {
    let path = path.as_ref();
    let img = match open(path)? {
        DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(DatasetError::BadImageFormat {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit single-channel depth, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u16> = img.pixels().map(|p| p.0[0]).collect();
    let depth = raw.iter().map(|&v| v as f64 / depth_scale).collect();
    let holes = raw.iter().map(|&v| v == 0).collect();
    Ok((
        Raster::from_vec(w, h, depth).expect("buffer matches dimensions"),
        Raster::from_vec(w, h, holes).expect("buffer matches dimensions"),
    ))
}

/// Source pixels overlapping each target pixel along one axis, with the
/// overlap lengths normalised to sum to one.
fn footprints(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let s = src as f64 / dst as f64;
    (0..dst)
        .map(|x| {
            let (a, b) = (x as f64 * s, (x + 1) as f64 * s);
            let mut v = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < src {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    v.push((i, overlap / s));
                }
                i += 1;
            }
            v
        })
        .collect()
}

/// Box-filter resampling of a colour image.
pub fn downsample_area(img: &Raster<[u8; 3]>, width: usize, height: usize) -> Raster<[u8; 3]> {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let fx = footprints(img.width(), width);
    let fy = footprints(img.height(), height);
    Raster::from_fn(width, height, |x, y| {
        let mut acc = [0.0f64; 3];
        for &(sy, wy) in &fy[y] {
            for &(sx, wx) in &fx[x] {
                let p = img.at(sx, sy);
                for c in 0..3 {
                    acc[c] += wx * wy * p[c] as f64;
                }
            }
        }
        acc.map(|v| v.round().clamp(0.0, 255.0) as u8)
    })
}

/// Nearest-neighbour resampling on pixel centres.
pub fn downsample_nearest<V: Clone>(img: &Raster<V>, width: usize, height: usize) -> Raster<V> {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let pick = |t: usize, dst: usize, src: usize| {
        let c = (t as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        (c.round().max(0.0) as usize).min(src - 1)
    };
    Raster::from_fn(width, height, |x, y| {
        img.at(pick(x, width, img.width()), pick(y, height, img.height())).clone()
    })
}
