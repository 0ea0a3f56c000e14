//! Per-keyframe depth predictions: log-depth, log-depth gradients and their
//! variances, as produced by a single-image depth predictor.

mod dfpred;
mod oracle;

use thiserror::Error;

use crate::geometry::Raster;

pub use dfpred::{load_predictions, read_predictions, save_predictions, write_predictions, HEADER_LEN, MAGIC};
pub use oracle::{fill_holes, synth_oracle, OracleParams, VARIANCE_FLOOR};

/// Prediction raster size used by default.
pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_HEIGHT: usize = 192;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("bad magic {found:?} at byte 0 (expected \"DFPR\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {version} at byte 4")]
    UnsupportedVersion { version: u32 },
    #[error("dimension mismatch in {field} at byte {offset}: {detail}")]
    DimensionMismatch {
        field: &'static str,
        offset: usize,
        detail: String,
    },
    #[error("non-positive or non-finite variance {value} in {field} at byte {offset}")]
    NonPositiveVariance {
        field: &'static str,
        offset: usize,
        value: f64,
    },
    #[error("file truncated while reading {field} at byte {offset}")]
    TruncatedFile { field: &'static str, offset: usize },
    #[error("non-finite value {value} in {field} at byte {offset}")]
    NonFinite {
        field: &'static str,
        offset: usize,
        value: f64,
    },
    #[error("focal length must be positive, got {0}")]
    NonPositiveFocal(f64),
    #[error("ground truth has no positive depth to fill holes from")]
    NonPositiveGroundTruth,
    #[error("invalid noise scale {0}")]
    InvalidNoise(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Names of the six channels, in file order.
pub const CHANNELS: [&str; 6] = [
    "log_depth",
    "log_depth_var",
    "grad_x",
    "grad_x_var",
    "grad_y",
    "grad_y_var",
];

/// Dense prediction rasters for one keyframe.
///
/// `grad_x[i]` predicts `ln d[i+1] − ln d[i]` and `grad_y[i]` predicts
/// `ln d[i+W] − ln d[i]`; the last column of `grad_x` and the last row of
/// `grad_y` are carried but never used.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub log_depth: Raster<f64>,
    pub log_depth_var: Raster<f64>,
    pub grad_x: Raster<f64>,
    pub grad_x_var: Raster<f64>,
    pub grad_y: Raster<f64>,
    pub grad_y_var: Raster<f64>,
    /// Focal length (pixels) the log-depths are normalised to.
    pub source_focal: f64,
}

impl PredictionSet {
    pub fn width(&self) -> usize {
        self.log_depth.width()
    }

    pub fn height(&self) -> usize {
        self.log_depth.height()
    }

    pub fn channels(&self) -> [&Raster<f64>; 6] {
        [
            &self.log_depth,
            &self.log_depth_var,
            &self.grad_x,
            &self.grad_x_var,
            &self.grad_y,
            &self.grad_y_var,
        ]
    }

    /// Checks shapes, positivity of variances and finiteness of everything.
    /// Offsets in errors are those the value would have in a DFPRED file.
    pub fn validate(&self) -> Result<(), PredictionError> {
        if !(self.source_focal > 0.0) || !self.source_focal.is_finite() {
            return Err(PredictionError::NonPositiveFocal(self.source_focal));
        }
        let n = self.log_depth.len();
        for (c, (name, r)) in CHANNELS.iter().zip(self.channels()).enumerate() {
            if !r.same_shape(&self.log_depth) {
                return Err(PredictionError::DimensionMismatch {
                    field: name,
                    offset: HEADER_LEN + c * n * 4,
                    detail: format!(
                        "{}x{} vs {}x{}",
                        r.width(),
                        r.height(),
                        self.width(),
                        self.height()
                    ),
                });
            }
            let is_var = c % 2 == 1;
            for (i, &v) in r.values().iter().enumerate() {
                let offset = HEADER_LEN + (c * n + i) * 4;
                if is_var && !(v > 0.0 && v.is_finite()) {
                    return Err(PredictionError::NonPositiveVariance {
                        field: name,
                        offset,
                        value: v,
                    });
                }
                if !v.is_finite() {
                    return Err(PredictionError::NonFinite {
                        field: name,
                        offset,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Median predicted depth (metres).
    pub fn median_depth(&self) -> f64 {
        let mut v: Vec<f64> = self.log_depth.values().to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let m = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        m.exp()
    }

    /// Predicted depths in metres.
    pub fn depth(&self) -> Raster<f64> {
        self.log_depth.map(|v| v.exp())
    }
}

/// Re-normalises log-depths to the focal length of the camera in use.
/// Gradients and variances are ratios in log space and stay untouched.
pub fn focal_adjust(p: &PredictionSet, test_focal: f64) -> Result<PredictionSet, PredictionError> {
    if !(test_focal > 0.0) || !test_focal.is_finite() {
        return Err(PredictionError::NonPositiveFocal(test_focal));
    }
    if !(p.source_focal > 0.0) {
        return Err(PredictionError::NonPositiveFocal(p.source_focal));
    }
    let mut out = p.clone();
    if test_focal != p.source_focal {
        let shift = (test_focal / p.source_focal).ln();
        out.log_depth.values_mut().iter_mut().for_each(|v| *v += shift);
    }
    out.source_focal = test_focal;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    /// Fraction of checked pixels whose `grad_x` disagrees with the forward
    /// difference of `log_depth` by more than the tolerance.
    pub fraction: f64,
    /// Same for `grad_y`.
    pub fraction_y: f64,
    pub checked_x: usize,
    pub checked_y: usize,
}

/// Diagnostic comparison of predicted gradients against differences of the
/// predicted log-depths.
pub fn gradient_consistency_check(p: &PredictionSet, tol: f64) -> ConsistencyReport {
    let ld = &p.log_depth;
    let (mut bad_x, mut n_x, mut bad_y, mut n_y) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..ld.len() {
        if let Some(j) = ld.right_of(i) {
            n_x += 1;
            if (p.grad_x[i] - (ld[j] - ld[i])).abs() > tol {
                bad_x += 1;
            }
        }
        if let Some(j) = ld.below(i) {
            n_y += 1;
            if (p.grad_y[i] - (ld[j] - ld[i])).abs() > tol {
                bad_y += 1;
            }
        }
    }
    let frac = |b: usize, n: usize| if n == 0 { 0.0 } else { b as f64 / n as f64 };
    ConsistencyReport {
        fraction: frac(bad_x, n_x),
        fraction_y: frac(bad_y, n_y),
        checked_x: n_x,
        checked_y: n_y,
    }
}
