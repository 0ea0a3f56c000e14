//! Synthetic stand-in for a depth predictor: ground truth plus Gaussian noise
//! whose variance is declared alongside the mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::Raster;

use super::{PredictionError, PredictionSet};

/// Lower bound on declared variances so that a noiseless oracle still
/// satisfies the strictly-positive variance invariant.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Standard deviation of log-depth noise.
    pub sigma_depth: f64,
    /// Standard deviation of log-depth gradient noise.
    pub sigma_grad: f64,
    pub seed: u64,
    /// Declared variance = `kappa` × sampling variance. 1 is an honest oracle.
    pub kappa: f64,
    /// Focal length written into the set; log-depths are metric for it.
    pub source_focal: f64,
}

impl OracleParams {
    pub fn new(sigma_depth: f64, sigma_grad: f64, seed: u64) -> Self {
        Self {
            sigma_depth,
            sigma_grad,
            seed,
            kappa: 1.0,
            source_focal: 1.0,
        }
    }

    pub fn with_focal(mut self, focal: f64) -> Self {
        self.source_focal = focal;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }
}

fn is_hole(v: f64, masked: bool) -> bool {
    masked || !(v > 0.0) || !v.is_finite()
}

/// Replaces holes (non-positive, non-finite, or flagged in `holes`) with the
/// nearest valid value in scanline order; ties go to the earlier pixel.
pub fn fill_holes(gt: &Raster<f64>, holes: Option<&Raster<bool>>) -> Result<Raster<f64>, PredictionError> {
    let n = gt.len();
    let hole = |i: usize| is_hole(gt[i], holes.is_some_and(|h| h[i]));
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for (i, p) in prev.iter_mut().enumerate() {
        if !hole(i) {
            last = Some(i);
        }
        *p = last;
    }
    if last.is_none() {
        return Err(PredictionError::NonPositiveGroundTruth);
    }
    let mut out = gt.clone();
    let mut next = None;
    for i in (0..n).rev() {
        if !hole(i) {
            next = Some(i);
            continue;
        }
        let src = match (prev[i], next) {
            (Some(p), Some(q)) => {
                if i - p <= q - i {
                    p
                } else {
                    q
                }
            }
            (Some(p), None) => p,
            (None, Some(q)) => q,
            (None, None) => unreachable!("at least one valid pixel exists"),
        };
        out[i] = gt[src];
    }
    Ok(out)
}

/// Samples a prediction set from ground-truth depth (metres).
///
/// Log-depth means are `ln gt + N(0, σ_d²)` and gradient means are forward
/// differences of `ln gt` plus `N(0, σ_g²)`. Noise is drawn in a fixed order
/// (log-depth, then x gradients, then y gradients), so a seed fully
/// determines the output.
pub fn synth_oracle(
    gt: &Raster<f64>,
    holes: Option<&Raster<bool>>,
    params: &OracleParams,
) -> Result<PredictionSet, PredictionError> {
    for s in [params.sigma_depth, params.sigma_grad] {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(PredictionError::InvalidNoise(s));
        }
    }
    if !(params.kappa > 0.0) || !params.kappa.is_finite() {
        return Err(PredictionError::InvalidNoise(params.kappa));
    }
    if !(params.source_focal > 0.0) {
        return Err(PredictionError::NonPositiveFocal(params.source_focal));
    }
    let filled = fill_holes(gt, holes)?;
    let ln_gt = filled.map(|v| v.ln());
    let (w, h) = (gt.width(), gt.height());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut noise = |sigma: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };

    let mut log_depth = ln_gt.clone();
    for v in log_depth.values_mut() {
        *v += noise(params.sigma_depth);
    }
    let mut grad_x = Raster::filled(w, h, 0.0);
    for i in 0..ln_gt.len() {
        if let Some(j) = ln_gt.right_of(i) {
            grad_x[i] = ln_gt[j] - ln_gt[i] + noise(params.sigma_grad);
        }
    }
    let mut grad_y = Raster::filled(w, h, 0.0);
    for i in 0..ln_gt.len() {
        if let Some(j) = ln_gt.below(i) {
            grad_y[i] = ln_gt[j] - ln_gt[i] + noise(params.sigma_grad);
        }
    }
    let declared = |s: f64| (params.kappa * s * s).max(VARIANCE_FLOOR);
    let set = PredictionSet {
        log_depth,
        log_depth_var: Raster::filled(w, h, declared(params.sigma_depth)),
        grad_x,
        grad_x_var: Raster::filled(w, h, declared(params.sigma_grad)),
        grad_y,
        grad_y_var: Raster::filled(w, h, declared(params.sigma_grad)),
        source_focal: params.source_focal,
    };
    set.validate()?;
    Ok(set)
}
