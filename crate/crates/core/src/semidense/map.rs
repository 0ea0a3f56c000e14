use crate::geometry::{Pose, Raster};

use super::epipolar::EpipolarObservation;

/// Observations further than this many prior standard deviations from a valid
/// estimate are treated as outliers.
pub const OUTLIER_GATE_SIGMAS: f64 = 5.0;

/// Per-pixel scale-ambiguous depth with variance (depth² units).
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDenseMap {
    pub depth: Raster<f64>,
    pub variance: Raster<f64>,
    pub valid: Raster<bool>,
    pub inlier_count: usize,
}

impl SemiDenseMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            depth: Raster::filled(width, height, 0.0),
            variance: Raster::filled(width, height, 0.0),
            valid: Raster::filled(width, height, false),
            inlier_count: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// `(depth, sigma)` of a valid pixel.
    pub fn prior(&self, i: usize) -> Option<(f64, f64)> {
        self.valid[i].then(|| (self.depth[i], self.variance[i].sqrt()))
    }

    /// Fraction of pixels holding a valid estimate.
    pub fn coverage(&self) -> f64 {
        self.inlier_count as f64 / self.valid.len() as f64
    }

    fn recount(&mut self) {
        self.inlier_count = self.valid.values().iter().filter(|v| **v).count();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub installed: usize,
    pub fused: usize,
    pub rejected: usize,
}

/// Folds a frame's observations into the map: new pixels are installed,
/// existing ones fused by inverse-variance weighting, and observations more
/// than five prior sigmas away are dropped.
pub fn update_semidense(map: &mut SemiDenseMap, observations: &[EpipolarObservation]) -> UpdateStats {
    let mut stats = UpdateStats::default();
    for obs in observations {
        let i = obs.index;
        if i >= map.valid.len()
            || !(obs.depth > 0.0)
            || !(obs.variance > 0.0)
            || !obs.depth.is_finite()
            || !obs.variance.is_finite()
        {
            stats.rejected += 1;
            continue;
        }
        if !map.valid[i] {
            map.depth[i] = obs.depth;
            map.variance[i] = obs.variance;
            map.valid[i] = true;
            stats.installed += 1;
            continue;
        }
        let (d0, v0) = (map.depth[i], map.variance[i]);
        if (obs.depth - d0).abs() > OUTLIER_GATE_SIGMAS * v0.sqrt() {
            stats.rejected += 1;
            continue;
        }
        let v1 = obs.variance;
        map.depth[i] = (d0 * v1 + obs.depth * v0) / (v0 + v1);
        map.variance[i] = v0 * v1 / (v0 + v1);
        stats.fused += 1;
    }
    map.recount();
    stats
}

/// Thresholds for starting a new keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    /// Translation relative to the median keyframe depth.
    pub lambda_trans: f64,
    /// Minimum number of valid semi-dense pixels.
    pub lambda_inliers: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            lambda_trans: 0.07,
            lambda_inliers: 1500,
        }
    }
}

/// Translation between the two poses divided by the median depth.
pub fn translation_ratio(kf_pose: &Pose, cur_pose: &Pose, median_depth: f64) -> f64 {
    kf_pose.inverse().compose(cur_pose).translation().norm() / median_depth
}

pub fn should_create_keyframe(
    kf_pose: &Pose,
    cur_pose: &Pose,
    median_depth: f64,
    map: &SemiDenseMap,
    policy: &KeyframePolicy,
) -> bool {
    translation_ratio(kf_pose, cur_pose, median_depth) > policy.lambda_trans
        || map.inlier_count < policy.lambda_inliers
}
