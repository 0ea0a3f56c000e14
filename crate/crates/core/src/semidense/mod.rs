//! Semi-dense depth estimation by epipolar line search, and the keyframe
//! creation policy.

mod epipolar;
mod image;
mod map;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PixelCoord, Pose, Raster};

pub use epipolar::{
    jacobian_fd, observation_variance, photometric_error_5pt, search_depth, EpipolarObservation,
    EpipolarSegment, Residuals, StereoPair, STENCIL,
};
pub use image::{luminance, texture_mask, IntensityImage};
pub use map::{
    should_create_keyframe, translation_ratio, update_semidense, KeyframePolicy, SemiDenseMap,
    UpdateStats, OUTLIER_GATE_SIGMAS,
};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum StereoError {
    #[error("stencil or reprojection leaves the image")]
    OutOfBounds,
    #[error("reprojected point is behind the camera")]
    BehindCamera,
    #[error("epipolar segment shorter than 2 pixels")]
    DegenerateBaseline,
    #[error("photometric error has no interior minimum along the search segment")]
    NoMinimum,
    #[error("finite-difference step has zero depth extent")]
    ZeroBaselineStep,
    #[error("JᵀJ below 1e-12; match is ambiguous")]
    DegenerateJacobian,
    #[error("texture threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoConfig {
    /// Minimum central-difference gradient magnitude for a pixel to be searched.
    pub texture_threshold: f64,
    /// Longest full-line search, in reference-image pixels.
    pub max_disparity: f64,
    /// Nearest depth considered on a full-line search (trajectory units).
    pub min_depth: f64,
    /// Prior windows shorter than this (pixels) are widened around the prior.
    pub min_prior_window: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            texture_threshold: 0.02,
            max_disparity: 48.0,
            min_depth: 0.05,
            min_prior_window: 4.0,
        }
    }
}

/// Outcome counts for one frame of stereo.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameStereoStats {
    pub searched: usize,
    pub valid: usize,
    pub degenerate_baseline: usize,
    pub no_minimum: usize,
    pub other_failures: usize,
}

/// Runs the epipolar search for every masked keyframe pixel against one
/// reference frame. Pixels are processed in parallel; output order follows
/// raster order.
pub fn estimate_frame(
    pair: &StereoPair<'_>,
    mask: &Raster<bool>,
    prior: &SemiDenseMap,
    cfg: &StereoConfig,
) -> (Vec<EpipolarObservation>, FrameStereoStats) {
    let candidates: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let results: Vec<Result<EpipolarObservation, StereoError>> = candidates
        .par_iter()
        .map(|&i| {
            let (x, y) = mask.coords(i);
            pair.search_depth(PixelCoord::new(x as f64, y as f64), i, prior.prior(i), cfg)
        })
        .collect();
    let mut stats = FrameStereoStats {
        searched: candidates.len(),
        ..Default::default()
    };
    let mut obs = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => {
                stats.valid += 1;
                obs.push(o);
            }
            Err(StereoError::DegenerateBaseline) => stats.degenerate_baseline += 1,
            Err(StereoError::NoMinimum) => stats.no_minimum += 1,
            Err(_) => stats.other_failures += 1,
        }
    }
    (obs, stats)
}

/// Convenience wrapper building the pair from camera-to-world poses.
pub fn estimate_frame_from_poses(
    keyframe: &IntensityImage,
    reference: &IntensityImage,
    kf_pose: &Pose,
    ref_pose: &Pose,
    k: &CameraIntrinsics,
    mask: &Raster<bool>,
    prior: &SemiDenseMap,
    cfg: &StereoConfig,
) -> (Vec<EpipolarObservation>, FrameStereoStats) {
    let pair = StereoPair::new(keyframe, reference, kf_pose, ref_pose, *k);
    estimate_frame(&pair, mask, prior, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    // Smooth aperiodic albedo on the world plane (metres).
    fn albedo(x: f64, y: f64) -> f64 {
        const WAVES: [(f64, f64, f64, f64); 6] = [
            (0.9, 0.4, 0.31, 0.0),
            (-0.3, 0.95, 0.17, 1.3),
            (0.6, -0.8, 0.23, 2.1),
            (0.99, 0.1, 0.13, 0.4),
            (0.2, 0.98, 0.41, 2.9),
            (-0.7, -0.7, 0.53, 0.7),
        ];
        let mut v = 0.5;
        for (dx, dy, wl, ph) in WAVES {
            v += 0.07 * (std::f64::consts::TAU * (dx * x + dy * y) / wl + ph).sin();
        }
        v
    }

    // Exact render of the plane z = `plane_z` seen from a camera translated by `c`.
    fn render_plane(k: &CameraIntrinsics, c: Vector3<f64>, plane_z: f64) -> IntensityImage {
        let depth = plane_z - c.z;
        IntensityImage::new(Raster::from_fn(k.width, k.height, |u, v| {
            let x = c.x + depth * (u as f64 - k.cx) / k.fx;
            let y = c.y + depth * (v as f64 - k.cy) / k.fy;
            albedo(x, y)
        }))
    }

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 128.0, 96.0, 256, 192).unwrap()
    }

    fn two_view(baseline: f64) -> (IntensityImage, IntensityImage, Pose, Pose) {
        let k = k100();
        let t1 = Vector3::new(baseline, 0.0, 0.0);
        (
            render_plane(&k, Vector3::zeros(), 2.0),
            render_plane(&k, t1, 2.0),
            Pose::identity(),
            Pose::from_translation(t1),
        )
    }

    #[test]
    fn identical_views_give_zero_residuals() {
        let k = k100();
        let (i0, _, t0, _) = two_view(0.1);
        for d in [0.5, 2.0, 7.0] {
            let e = photometric_error_5pt(&i0, &i0, PixelCoord::new(100.0, 80.0), d, &t0, &t0, &k).unwrap();
            assert_eq!(e, [0.0; 5]);
        }
    }

    #[test]
    fn residuals_vanish_at_true_depth() {
        let k = k100();
        let (i0, i1, t0, t1) = two_view(0.1);
        for &(x, y) in &[(60.0, 50.0), (128.0, 96.0), (200.0, 150.0)] {
            let e = photometric_error_5pt(&i0, &i1, PixelCoord::new(x, y), 2.0, &t0, &t1, &k).unwrap();
            assert!(e.iter().all(|v| v.abs() < 1e-3), "{e:?}");
            let e = photometric_error_5pt(&i0, &i1, PixelCoord::new(x, y), 2.5, &t0, &t1, &k).unwrap();
            assert!(e.iter().any(|v| v.abs() > 0.01), "{e:?}");
        }
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let k = k100();
        let (i0, _, t0, _) = two_view(0.1);
        let r = search_depth(&i0, &i0, PixelCoord::new(100.0, 90.0), None, &t0, &t0, &k, &StereoConfig::default());
        assert_eq!(r.unwrap_err(), StereoError::DegenerateBaseline);
    }

    #[test]
    fn recovers_plane_depth() {
        let k = k100();
        let (i0, i1, t0, t1) = two_view(0.1);
        let cfg = StereoConfig::default();
        let mask = texture_mask(&i0, cfg.texture_threshold).unwrap();
        let empty = SemiDenseMap::empty(k.width, k.height);
        let (obs, stats) = estimate_frame_from_poses(&i0, &i1, &t0, &t1, &k, &mask, &empty, &cfg);
        let within = obs.iter().filter(|o| (1.95..=2.05).contains(&o.depth)).count();
        let mut rel: Vec<f64> = obs.iter().map(|o| (o.depth - 2.0).abs() / 2.0).collect();
        rel.sort_by(f64::total_cmp);
        assert!(stats.valid as f64 >= 0.9 * stats.searched as f64, "{stats:?}");
        assert!(within as f64 >= 0.9 * obs.len() as f64);
        assert!(rel[rel.len() / 2] < 0.02);
        // A strongly textured pixel.
        let o = search_depth(&i0, &i1, PixelCoord::new(128.0, 96.0), None, &t0, &t1, &k, &cfg).unwrap();
        assert!((1.95..=2.05).contains(&o.depth), "{}", o.depth);
        assert!(o.variance > 0.0 && o.variance.is_finite());
    }

    #[test]
    fn prior_window_spans_two_sigma_depths() {
        let k = k100();
        // Longer baseline so the window exceeds the minimum width.
        let (i0, i1, t0, t1) = two_view(0.5);
        let pair = StereoPair::new(&i0, &i1, &t0, &t1, k);
        let x = PixelCoord::new(150.0, 100.0);
        let seg = pair.epipolar_segment(x, Some((2.0, 0.1)), &StereoConfig::default()).unwrap();
        // Points at depth d in the keyframe land at u - fx·b/d in the reference.
        let far = 150.0 - 100.0 * 0.5 / 2.2;
        let near = 150.0 - 100.0 * 0.5 / 1.8;
        assert!((seg.start.x - far).abs() < 1e-9, "{seg:?}");
        assert!((seg.end.x - near).abs() < 1e-9, "{seg:?}");
        assert!((seg.start.y - 100.0).abs() < 1e-9 && (seg.end.y - 100.0).abs() < 1e-9);
        assert!((1.0 / seg.rho_start - 2.2).abs() < 1e-12);
        assert!((1.0 / seg.rho_end - 1.8).abs() < 1e-12);
    }

    #[test]
    fn narrow_prior_window_is_widened() {
        let k = k100();
        let (i0, i1, t0, t1) = two_view(0.1);
        let pair = StereoPair::new(&i0, &i1, &t0, &t1, k);
        let cfg = StereoConfig::default();
        let seg = pair.epipolar_segment(PixelCoord::new(150.0, 100.0), Some((2.0, 0.01)), &cfg).unwrap();
        assert!((seg.length() - cfg.min_prior_window).abs() < 1e-9);
        let o = pair.search_depth(PixelCoord::new(150.0, 100.0), 0, Some((2.0, 0.01)), &cfg);
        if let Ok(o) = o {
            assert!((o.depth - 2.0).abs() < 0.05);
        }
    }

    #[test]
    fn jacobian_examples() {
        assert_eq!(jacobian_fd(&[0.3; 5], &[0.3; 5], 1.0, 1.1).unwrap(), [0.0; 5]);
        let j = jacobian_fd(&[0.0; 5], &[0.1; 5], 2.0, 2.05).unwrap();
        assert!(j.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert_eq!(jacobian_fd(&[0.0; 5], &[0.1; 5], 2.0, 2.0), Err(StereoError::ZeroBaselineStep));
    }

    #[test]
    fn variance_examples() {
        assert!((observation_variance(&[1.0; 5]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(observation_variance(&[0.0; 5]), Err(StereoError::DegenerateJacobian));
        assert_eq!(observation_variance(&[2.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 0.25);
    }

    #[test]
    fn sharper_texture_never_increases_variance() {
        // Scaling the albedo contrast scales J and therefore shrinks (JᵀJ)⁻¹.
        let k = k100();
        let (i0, i1, t0, t1) = two_view(0.1);
        let cfg = StereoConfig::default();
        let scale = |img: &IntensityImage, s: f64| IntensityImage::new(img.raster().map(|v| 0.5 + s * (v - 0.5)));
        let x = PixelCoord::new(140.0, 70.0);
        let mut last = f64::INFINITY;
        for s in [0.5, 1.0, 1.5, 2.0] {
            let (a, b) = (scale(&i0, s), scale(&i1, s));
            let o = search_depth(&a, &b, x, None, &t0, &t1, &k, &cfg).unwrap();
            assert!(o.variance <= last * (1.0 + 1e-9), "s={s}: {} > {last}", o.variance);
            last = o.variance;
        }
    }

    #[test]
    fn depths_scale_with_trajectory() {
        let k = k100();
        let (i0, i1, t0, t1) = two_view(0.1);
        let cfg = StereoConfig::default();
        let mask = texture_mask(&i0, cfg.texture_threshold).unwrap();
        let empty = SemiDenseMap::empty(k.width, k.height);
        let (a, _) = estimate_frame_from_poses(&i0, &i1, &t0, &t1, &k, &mask, &empty, &cfg);
        for alpha in [0.5, 2.0] {
            let t1a = t1.with_translation(t1.translation() * alpha);
            let (b, _) = estimate_frame_from_poses(&i0, &i1, &t0, &t1a, &k, &mask, &empty, &cfg);
            assert_eq!(a.len(), b.len());
            for (oa, ob) in a.iter().zip(&b) {
                assert_eq!(oa.index, ob.index);
                assert!((ob.depth / (alpha * oa.depth) - 1.0).abs() < 0.01);
            }
        }
    }
}
