//! Invariant suite behind `depthfuse selftest`. Each check is small enough to
//! run in well under a second; failures carry a one-line reason.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::datasets::{associate_timestamps, inject_pose_scale, load_depth_png};
use crate::eval::{pct_within_10, save_depth_png};
use crate::fusion::{
    assemble_normal_equations, cost_gradient, optimize_with, residual_grad, residual_semi, total_cost, Axis,
    FusionMode, FusionState, RobustConfig, ScaleUpdate,
};
use crate::geometry::{backproject, project, PixelCoord, Pose, Raster};
use crate::pipeline::{config_from_manifest, World};
use crate::predictions::{focal_adjust, read_predictions, synth_oracle, write_predictions, OracleParams, PredictionSet};
use crate::semidense::{
    estimate_frame_from_poses, search_depth, should_create_keyframe, texture_mask, update_semidense,
    EpipolarObservation, IntensityImage, KeyframePolicy, SemiDenseMap, StereoConfig,
};
use crate::synth::{synthetic_frames, synthetic_intrinsics, two_view_plane, SequenceParams};

pub type CheckFn = fn() -> Result<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Summary on success, reason on failure.
    pub result: Result<String, String>,
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub const CHECKS: [(&str, CheckFn); 24] = [
    ("geometry.project_roundtrip", project_roundtrip),
    ("geometry.pose_group_laws", pose_group_laws),
    ("geometry.raster_neighbours", raster_neighbours),
    ("semidense.two_view_plane", two_view_coverage),
    ("semidense.variance_monotone", variance_monotone),
    ("semidense.update_keeps_information", update_keeps_information),
    ("semidense.depths_follow_pose_scale", depths_follow_pose_scale),
    ("predictions.log_gradient_ratio", log_gradient_ratio),
    ("predictions.focal_adjust_composes", focal_adjust_composes),
    ("predictions.dfpred_bijection", dfpred_bijection),
    ("fusion.gradient_matches_fd", gradient_matches_fd),
    ("fusion.scale_equivariance", scale_equivariance),
    ("fusion.pairwise_offset_invariance", pairwise_offset_invariance),
    ("fusion.monotone_cost", monotone_cost),
    ("fusion.dense_oracle", dense_oracle_agrees),
    ("fusion.normal_matrix_definite", normal_matrix_definite),
    ("datasets.association_order", association_order),
    ("datasets.depth_png_roundtrip", depth_png_roundtrip),
    ("datasets.pose_scale_inverse", pose_scale_inverse),
    ("eval.scale_sensitivity", metric_scale_sensitivity),
    ("eval.permutation_invariance", metric_permutation_invariance),
    ("eval.monotone_in_pixels", metric_monotone),
    ("pipeline.run_invariants", pipeline_invariants),
    ("pipeline.keyframe_monotone_in_baseline", keyframe_monotone),
];

pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| CheckOutcome { name, result: f() })
        .collect()
}

/// Random fusion problem with every term active somewhere: about half the
/// pixels carry stereo, all variances and targets are drawn independently.
pub fn random_fusion_problem(w: usize, h: usize, rng: &mut impl Rng) -> (FusionState, SemiDenseMap, PredictionSet) {
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let ld = Raster::from_fn(w, h, |_, _| r(-0.5, 1.5));
    let pred = PredictionSet {
        log_depth: ld.map(|v| v + r(-0.4, 0.4)),
        log_depth_var: Raster::from_fn(w, h, |_, _| r(0.05, 2.0)),
        grad_x: Raster::from_fn(w, h, |_, _| r(-0.3, 0.3)),
        grad_x_var: Raster::from_fn(w, h, |_, _| r(0.01, 1.0)),
        grad_y: Raster::from_fn(w, h, |_, _| r(-0.3, 0.3)),
        grad_y_var: Raster::from_fn(w, h, |_, _| r(0.01, 1.0)),
        source_focal: 100.0,
    };
    let mut semi = SemiDenseMap::empty(w, h);
    for i in 0..w * h {
        if r(0.0, 1.0) < 0.5 {
            semi.valid[i] = true;
            semi.depth[i] = r(0.5, 4.0);
            semi.variance[i] = r(0.01, 1.0) * semi.depth[i].powi(2);
        }
    }
    semi.inlier_count = semi.valid.values().iter().filter(|v| **v).count();
    let state = FusionState {
        log_depth: Raster::from_fn(w, h, |_, _| r(-0.5, 1.5)),
        scale: r(0.5, 2.0),
        iteration: 0,
    };
    (state, semi, pred)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut r = |s: f64| rng.random_range(-s..s);
    let q = UnitQuaternion::from_euler_angles(r(3.0), r(1.5), r(3.0));
    Pose::new(q, Vector3::new(r(5.0), r(5.0), r(5.0)))
}

fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let (ma, mb) = (a.matrix3x4(), b.matrix3x4());
    let mut d: f64 = 0.0;
    for r in 0..3 {
        for c in 0..4 {
            d = d.max((ma[r][c] - mb[r][c]).abs());
        }
    }
    d
}

fn project_roundtrip() -> Result<String, String> {
    let k = synthetic_intrinsics();
    let mut rng = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = PixelCoord::new(rng.random_range(0.0..k.width as f64 - 1.0), rng.random_range(0.0..k.height as f64 - 1.0));
        let d = rng.random_range(0.05..50.0);
        let p = backproject(x, d, &k).map_err(|e| e.to_string())?;
        let q = project(&k, &p).map_err(|e| e.to_string())?;
        worst = worst.max((q.x - x.x).abs().max((q.y - x.y).abs()));
    }
    ensure!(worst < 1e-9, "worst reprojection error {worst:e} px");
    Ok(format!("worst {worst:.1e} px"))
}

fn pose_group_laws() -> Result<String, String> {
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        worst = worst.max(pose_distance(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))));
        worst = worst.max(pose_distance(&a.compose(&a.inverse()), &Pose::identity()));
        worst = worst.max(pose_distance(&a.inverse().compose(&a), &Pose::identity()));
        worst = worst.max(pose_distance(&a.compose(&b).inverse(), &b.inverse().compose(&a.inverse())));
    }
    ensure!(worst < 1e-9, "group law violated by {worst:e}");
    Ok(format!("worst {worst:.1e}"))
}

fn raster_neighbours() -> Result<String, String> {
    for (w, h) in [(1, 1), (1, 5), (5, 1), (7, 3), (256, 192)] {
        let r = Raster::filled(w, h, 0u8);
        for i in 0..w * h {
            let (x, y) = r.coords(i);
            match r.right_of(i) {
                Some(j) => ensure!(j == i + 1 && r.coords(j).1 == y, "{w}x{h}: right of {i} is {j}"),
                None => ensure!(x + 1 == w, "{w}x{h}: {i} has no right neighbour"),
            }
            match r.below(i) {
                Some(j) => ensure!(j == i + w && r.coords(j).0 == x, "{w}x{h}: below {i} is {j}"),
                None => ensure!(y + 1 == h, "{w}x{h}: {i} has no lower neighbour"),
            }
        }
    }
    Ok("5 shapes".into())
}

/// Coverage and median relative error of one stereo pass over the textured
/// part of the two-view plane scene.
pub fn two_view_plane_stats(seed: u64, baseline: f64) -> (f64, f64) {
    let k = synthetic_intrinsics();
    let v = two_view_plane(seed, baseline);
    let cfg = StereoConfig::default();
    let mask = texture_mask(&v.keyframe, cfg.texture_threshold).expect("non-negative threshold");
    let searched = mask.values().iter().filter(|m| **m).count();
    let empty = SemiDenseMap::empty(k.width, k.height);
    let (obs, _) = estimate_frame_from_poses(&v.keyframe, &v.reference, &v.kf_pose, &v.ref_pose, &k, &mask, &empty, &cfg);
    let mut rel: Vec<f64> = obs.iter().map(|o| (o.depth - v.depth[o.index]).abs() / v.depth[o.index]).collect();
    rel.sort_by(f64::total_cmp);
    let median = rel.get(rel.len() / 2).copied().unwrap_or(f64::INFINITY);
    (obs.len() as f64 / searched.max(1) as f64, median)
}

fn two_view_coverage() -> Result<String, String> {
    let (coverage, median) = two_view_plane_stats(0, 0.1);
    ensure!(coverage >= 0.9, "coverage {coverage:.3}");
    ensure!(median < 0.02, "median relative error {median:.4}");
    Ok(format!("coverage {coverage:.3}, median rel {median:.4}"))
}

fn variance_monotone() -> Result<String, String> {
    let k = synthetic_intrinsics();
    let v = two_view_plane(0, 0.1);
    let cfg = StereoConfig::default();
    let contrast = |img: &IntensityImage, s: f64| IntensityImage::new(img.raster().map(|v| 0.5 + s * (v - 0.5)));
    let mask = texture_mask(&v.keyframe, 0.05).map_err(|e| e.to_string())?;
    let pixels: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).step_by(97).take(20).collect();
    let mut compared = 0;
    for &i in &pixels {
        let (x, y) = mask.coords(i);
        let x = PixelCoord::new(x as f64, y as f64);
        let mut last = f64::INFINITY;
        for s in [0.5, 1.0, 1.5, 2.0] {
            let (a, b) = (contrast(&v.keyframe, s), contrast(&v.reference, s));
            if let Ok(o) = search_depth(&a, &b, x, None, &v.kf_pose, &v.ref_pose, &k, &cfg) {
                ensure!(o.variance <= last * (1.0 + 1e-9), "pixel {i}, contrast {s}: {} > {last}", o.variance);
                last = o.variance;
                compared += 1;
            }
        }
    }
    ensure!(compared > 0, "no pixel produced a match");
    Ok(format!("{compared} matches"))
}

fn update_keeps_information() -> Result<String, String> {
    let mut rng = rng(3);
    let n = 400;
    let mut map = SemiDenseMap::empty(20, 20);
    let obs = |rng: &mut ChaCha8Rng| -> Vec<EpipolarObservation> {
        (0..n)
            .map(|i| EpipolarObservation {
                pixel: PixelCoord::new((i % 20) as f64, (i / 20) as f64),
                index: i,
                depth: rng.random_range(1.0..3.0),
                error5: [0.0; 5],
                jacobian: [1.0; 5],
                variance: rng.random_range(0.01..1.0),
            })
            .collect()
    };
    update_semidense(&mut map, &obs(&mut rng));
    let mut fused = 0;
    for _ in 0..5 {
        let before = map.clone();
        let batch = obs(&mut rng);
        let stats = update_semidense(&mut map, &batch);
        fused += stats.fused;
        for o in &batch {
            let i = o.index;
            ensure!(map.valid[i], "pixel {i} lost its estimate");
            if map.depth[i] != before.depth[i] || map.variance[i] != before.variance[i] {
                let bound = before.variance[i].min(o.variance);
                ensure!(map.variance[i] <= bound, "pixel {i}: {} > {bound}", map.variance[i]);
            }
        }
    }
    ensure!(fused > 0, "nothing was fused");
    Ok(format!("{fused} fusions"))
}

fn depths_follow_pose_scale() -> Result<String, String> {
    let k = synthetic_intrinsics();
    let v = two_view_plane(0, 0.1);
    let cfg = StereoConfig::default();
    let mask = texture_mask(&v.keyframe, cfg.texture_threshold).map_err(|e| e.to_string())?;
    let empty = SemiDenseMap::empty(k.width, k.height);
    let (a, _) = estimate_frame_from_poses(&v.keyframe, &v.reference, &v.kf_pose, &v.ref_pose, &k, &mask, &empty, &cfg);
    let mut worst: f64 = 0.0;
    for alpha in [0.5, 2.0] {
        let scaled = v.ref_pose.with_translation(v.ref_pose.translation() * alpha);
        let (b, _) = estimate_frame_from_poses(&v.keyframe, &v.reference, &v.kf_pose, &scaled, &k, &mask, &empty, &cfg);
        ensure!(a.len() == b.len(), "alpha {alpha}: {} vs {} matches", a.len(), b.len());
        for (oa, ob) in a.iter().zip(&b) {
            ensure!(oa.index == ob.index, "alpha {alpha}: match sets differ");
            worst = worst.max((ob.depth / (alpha * oa.depth) - 1.0).abs());
        }
    }
    ensure!(worst < 0.01, "depth ratio off by {worst:.4}");
    Ok(format!("{} pixels, worst {worst:.1e}", a.len()))
}

fn test_depth(w: usize, h: usize) -> Raster<f64> {
    Raster::from_fn(w, h, |x, y| 1.0 + 0.1 * x as f64 + 0.05 * y as f64 + 0.3 * ((x * y) as f64).sin().abs())
}

fn log_gradient_ratio() -> Result<String, String> {
    let gt = test_depth(12, 9);
    let params = OracleParams::new(0.0, 0.0, 0).with_focal(100.0);
    let p = synth_oracle(&gt, None, &params).map_err(|e| e.to_string())?;
    for alpha in [0.1, 3.7] {
        let q = synth_oracle(&gt.map(|v| alpha * v), None, &params).map_err(|e| e.to_string())?;
        for i in 0..gt.len() {
            if let Some(j) = gt.right_of(i) {
                let ratio = (gt[j] / gt[i]).ln();
                ensure!((p.grad_x[i] - ratio).abs() < 1e-12, "pixel {i}: {} vs {ratio}", p.grad_x[i]);
                ensure!((q.grad_x[i] - p.grad_x[i]).abs() < 1e-12, "pixel {i} changes under scale {alpha}");
            }
            if let Some(j) = gt.below(i) {
                ensure!((p.grad_y[i] - (gt[j] / gt[i]).ln()).abs() < 1e-12, "pixel {i}: y gradient");
                ensure!((q.grad_y[i] - p.grad_y[i]).abs() < 1e-12, "pixel {i} y changes under scale {alpha}");
            }
        }
    }
    Ok("noiseless oracle".into())
}

fn focal_adjust_composes() -> Result<String, String> {
    let params = OracleParams::new(0.2, 0.05, 4).with_focal(525.0);
    let p = synth_oracle(&test_depth(10, 8), None, &params).map_err(|e| e.to_string())?;
    let err = |e: crate::predictions::PredictionError| e.to_string();
    let two = focal_adjust(&focal_adjust(&p, 200.0).map_err(err)?, 481.5).map_err(err)?;
    let one = focal_adjust(&p, 481.5).map_err(err)?;
    let worst = one
        .log_depth
        .values()
        .iter()
        .zip(two.log_depth.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(worst < 1e-12, "composition off by {worst:e}");
    Ok(format!("worst {worst:.1e}"))
}

fn dfpred_bijection() -> Result<String, String> {
    let params = OracleParams::new(0.3, 0.05, 9).with_focal(200.0);
    let p = synth_oracle(&test_depth(16, 12), None, &params)
        .map_err(|e| e.to_string())?
        .representable();
    let bytes = write_predictions(&p).map_err(|e| e.to_string())?;
    let back = read_predictions(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == p, "decoded set differs");
    let again = write_predictions(&back).map_err(|e| e.to_string())?;
    ensure!(again == bytes, "re-encoding differs");
    Ok(format!("{} bytes", bytes.len()))
}

/// Largest relative error between the analytic gradient and central
/// differences over coordinates away from Huber kinks, and how many were
/// compared.
pub fn gradient_check(state: &FusionState, semi: &SemiDenseMap, pred: &PredictionSet, cfg: &RobustConfig, mode: FusionMode) -> (f64, usize) {
    let (g, _) = cost_gradient(state, semi, pred, cfg, mode).expect("consistent problem");
    let h = 1e-5;
    let ld = &state.log_depth;
    let w = ld.width();
    let ln_s = state.scale.ln();
    let near_kink = |r: f64, d: f64| (r.abs() - d).abs() <= 1e-3;
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for i in 0..ld.len() {
        let mut kink = near_kink(ld[i] - pred.log_depth[i], cfg.delta_net);
        if semi.valid[i] {
            kink |= near_kink(ld[i] - ln_s - semi.depth[i].ln(), cfg.delta_semi);
        }
        let edges = [
            ld.right_of(i).map(|j| (i, j, pred.grad_x[i])),
            ld.below(i).map(|j| (i, j, pred.grad_y[i])),
            (i % w > 0).then(|| (i - 1, i, pred.grad_x[i - 1])),
            i.checked_sub(w).map(|j| (j, i, pred.grad_y[j])),
        ];
        for (a, b, gv) in edges.into_iter().flatten() {
            kink |= near_kink(ld[b] - ld[a] - gv, cfg.delta_grad);
        }
        if kink {
            continue;
        }
        let eval = |delta: f64| {
            let mut s = state.clone();
            s.log_depth[i] += delta;
            total_cost(&s, semi, pred, cfg, mode).expect("consistent problem")
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let abs = (fd - g[i]).abs();
        if abs > 1e-9 {
            worst = worst.max(abs / g[i].abs().max(1e-8));
        }
        checked += 1;
    }
    (worst, checked)
}

fn gradient_matches_fd() -> Result<String, String> {
    let mut rng = rng(5);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for _ in 0..5 {
        let (state, semi, pred) = random_fusion_problem(8, 6, &mut rng);
        for mode in FusionMode::ALL {
            let (w, c) = gradient_check(&state, &semi, &pred, &RobustConfig::default(), mode);
            worst = worst.max(w);
            checked += c;
        }
    }
    ensure!(worst < 1e-4, "relative error {worst:e}");
    ensure!(checked > 100, "only {checked} coordinates away from kinks");
    Ok(format!("{checked} coordinates, worst {worst:.1e}"))
}

fn scale_equivariance() -> Result<String, String> {
    let mut rng = rng(6);
    let (state, semi, pred) = random_fusion_problem(8, 6, &mut rng);
    let alpha = 2.5;
    let mut scaled = semi.clone();
    for i in 0..scaled.valid.len() {
        scaled.depth[i] *= alpha;
        scaled.variance[i] *= alpha * alpha;
    }
    let s_a = state.scale / alpha;
    for i in 0..semi.valid.len() {
        if semi.valid[i] {
            let r0 = residual_semi(state.log_depth[i], state.scale, semi.depth[i]);
            let r1 = residual_semi(state.log_depth[i], s_a, scaled.depth[i]);
            ensure!((r0 - r1).abs() < 1e-12, "pixel {i}: {r0} vs {r1}");
        }
    }
    let cfg = RobustConfig {
        cg_tol: 1e-10,
        cg_max_iters: 1000,
        ..RobustConfig::default()
    };
    let run = |st: &FusionState, sm: &SemiDenseMap| {
        optimize_with(st, sm, &pred, &cfg, FusionMode::Full, ScaleUpdate::Estimate).map(|(s, _)| s)
    };
    let a = run(&state, &semi).map_err(|e| e.to_string())?;
    let b = run(&FusionState { scale: s_a, ..state.clone() }, &scaled).map_err(|e| e.to_string())?;
    let worst = a
        .log_depth
        .values()
        .iter()
        .zip(b.log_depth.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure!(worst < 1e-6, "log-depths differ by {worst:e}");
    ensure!((a.scale / alpha - b.scale).abs() < 1e-6 * a.scale, "scales {} and {}", a.scale, b.scale);
    Ok(format!("worst {worst:.1e}"))
}

fn pairwise_offset_invariance() -> Result<String, String> {
    let mut rng = rng(7);
    let ld = Raster::from_fn(9, 7, |_, _| rng.random_range(-2.0..2.0));
    for c in [0.25, -3.0, 1e3] {
        let shifted = ld.map(|v| v + c);
        for i in 0..ld.len() {
            for axis in [Axis::X, Axis::Y] {
                let (a, b) = (residual_grad(&ld, i, axis, 0.1), residual_grad(&shifted, i, axis, 0.1));
                if let (Ok(a), Ok(b)) = (a, b) {
                    // Exact for offsets that are dyadic relative to the values' magnitude.
                    ensure!((a - b).abs() <= 4.0 * f64::EPSILON * c.abs().max(1.0), "pixel {i}: {a} vs {b}");
                }
            }
        }
    }
    Ok("3 offsets".into())
}

fn monotone_cost() -> Result<String, String> {
    let mut rng = rng(8);
    for _ in 0..3 {
        let (state, semi, pred) = random_fusion_problem(10, 8, &mut rng);
        for mode in FusionMode::ALL {
            let (_, trace) = optimize_with(&state, &semi, &pred, &RobustConfig::default(), mode, ScaleUpdate::Estimate)
                .map_err(|e| e.to_string())?;
            for w in trace.costs.windows(2) {
                ensure!(w[1] <= w[0], "{mode}: cost rose from {} to {}", w[0], w[1]);
            }
        }
    }
    Ok("9 runs".into())
}

/// Closed-form weighted least squares over every residual of the problem
/// with the scale held at `state.scale`.
pub fn dense_least_squares(state: &FusionState, semi: &SemiDenseMap, pred: &PredictionSet) -> DVector<f64> {
    let (w, h) = (pred.width(), pred.height());
    let n = w * h;
    let ln_s = state.scale.ln();
    let mut rows: Vec<(Vec<(usize, f64)>, f64, f64)> = Vec::new();
    for i in 0..n {
        if semi.valid[i] {
            let d = semi.depth[i];
            rows.push((vec![(i, 1.0)], ln_s + d.ln(), d * d / semi.variance[i]));
        }
        rows.push((vec![(i, 1.0)], pred.log_depth[i], 1.0 / pred.log_depth_var[i]));
        if i % w + 1 < w {
            rows.push((vec![(i + 1, 1.0), (i, -1.0)], pred.grad_x[i], 1.0 / pred.grad_x_var[i]));
        }
        if i / w + 1 < h {
            rows.push((vec![(i + w, 1.0), (i, -1.0)], pred.grad_y[i], 1.0 / pred.grad_y_var[i]));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), n);
    let mut y = DVector::zeros(rows.len());
    for (k, (coeffs, target, weight)) in rows.iter().enumerate() {
        let sw = weight.sqrt();
        for &(j, c) in coeffs {
            a[(k, j)] = c * sw;
        }
        y[k] = target * sw;
    }
    let at = a.transpose();
    (&at * &a).cholesky().expect("prediction term makes AᵀA definite").solve(&(at * y))
}

fn dense_oracle_agrees() -> Result<String, String> {
    let mut rng = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let w = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let (state, semi, pred) = random_fusion_problem(w, h, &mut rng);
        let (out, _) = optimize_with(&state, &semi, &pred, &RobustConfig::least_squares(), FusionMode::Full, ScaleUpdate::Hold)
            .map_err(|e| e.to_string())?;
        let exact = dense_least_squares(&state, &semi, &pred);
        for (a, b) in out.log_depth.values().iter().zip(exact.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-8, "fixed point off by {worst:e}");
    Ok(format!("worst {worst:.1e}"))
}

fn normal_matrix_definite() -> Result<String, String> {
    let mut rng = rng(10);
    for _ in 0..10 {
        let (state, semi, pred) = random_fusion_problem(12, 9, &mut rng);
        for mode in [FusionMode::Full, FusionMode::NoPairwise] {
            let (h, _) = assemble_normal_equations(&state, &semi, &pred, &RobustConfig::default(), mode)
                .map_err(|e| e.to_string())?;
            let d = h.to_dense();
            ensure!(d == d.transpose(), "{mode}: H is not symmetric");
            let m = h.gershgorin_margin();
            ensure!(m > 0.0, "{mode}: Gershgorin margin {m}");
        }
    }
    Ok("20 systems".into())
}

fn association_order() -> Result<String, String> {
    let mut rng = rng(11);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..20).map(|_| (rng.random_range(0..40) as f64) * 0.01).collect();
        let mut b: Vec<f64> = (0..20).map(|_| (rng.random_range(0..40) as f64) * 0.01).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let base = associate_timestamps(&a, &b, 0.015).len();
        let swapped = associate_timestamps(&b, &a, 0.015).len();
        ensure!(base == swapped, "{base} pairs one way, {swapped} the other");
        // Equal timestamps are interchangeable: reversing each run of ties
        // is the only reordering that keeps the lists sorted.
        let mut shuffled = a.clone();
        shuffled.reverse();
        shuffled.sort_by(f64::total_cmp);
        ensure!(associate_timestamps(&shuffled, &b, 0.015).len() == base, "count depends on tie order");
    }
    Ok("50 lists".into())
}

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> Result<Self, String> {
        let p = std::env::temp_dir().join(format!("depthfuse-selftest-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&p).map_err(|e| e.to_string())?;
        Ok(Self(p))
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn depth_png_roundtrip() -> Result<String, String> {
    let dir = TempDir::new("png")?;
    let path = dir.0.join("d.png");
    let mut rng = rng(12);
    let d = Raster::from_fn(32, 24, |_, _| rng.random_range(0.2..10.0));
    save_depth_png(&d, None, &path, 5000.0).map_err(|e| e.to_string())?;
    let (back, holes) = load_depth_png(&path, 5000.0).map_err(|e| e.to_string())?;
    ensure!(!holes.values().iter().any(|h| *h), "holes appeared");
    let worst = d.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst <= 0.5 / 5000.0 + 1e-12, "error {worst:e} m");
    Ok(format!("worst {worst:.1e} m"))
}

fn pose_scale_inverse() -> Result<String, String> {
    let frames = synthetic_frames(&SequenceParams {
        frames: 4,
        ..Default::default()
    });
    let there = inject_pose_scale(&frames, 3.0).map_err(|e| e.to_string())?;
    let back = inject_pose_scale(&there, 1.0 / 3.0).map_err(|e| e.to_string())?;
    for (a, b) in frames.iter().zip(&back) {
        let e = (a.pose.translation() - b.pose.translation()).norm();
        ensure!(e < 1e-12, "translation off by {e:e}");
    }
    Ok("4 frames".into())
}

fn metric_scale_sensitivity() -> Result<String, String> {
    let gt = test_depth(10, 10);
    let holes = Raster::filled(10, 10, false);
    for (alpha, want) in [(0.85, 0.0), (0.95, 100.0), (1.0, 100.0), (1.09, 100.0), (1.11, 0.0), (2.0, 0.0)] {
        let p = pct_within_10(&gt.map(|v| alpha * v), &gt, &holes).map_err(|e| e.to_string())?;
        ensure!(p == want, "alpha {alpha}: {p}%");
    }
    Ok("6 scales".into())
}

fn metric_permutation_invariance() -> Result<String, String> {
    let mut rng = rng(13);
    let gt = test_depth(16, 12);
    let est = gt.map(|v| v * rng.random_range(0.8..1.2));
    let holes = Raster::from_fn(16, 12, |_, _| rng.random_range(0.0..1.0) < 0.1);
    let base = pct_within_10(&est, &gt, &holes).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..gt.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let permute = |r: &Raster<f64>| Raster::from_vec(16, 12, order.iter().map(|&i| r[i]).collect()).expect("same size");
    let holes_p = Raster::from_vec(16, 12, order.iter().map(|&i| holes[i]).collect()).expect("same size");
    let p = pct_within_10(&permute(&est), &permute(&gt), &holes_p).map_err(|e| e.to_string())?;
    ensure!(p == base, "{p} after permutation, {base} before");
    Ok(format!("{base:.2}%"))
}

fn metric_monotone() -> Result<String, String> {
    let mut rng = rng(14);
    let n = 50;
    let mut est: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut gt = vec![1.0; n];
    let score = |e: &[f64], g: &[f64]| {
        let m = e.len();
        pct_within_10(
            &Raster::from_vec(m, 1, e.to_vec()).expect("1 row"),
            &Raster::from_vec(m, 1, g.to_vec()).expect("1 row"),
            &Raster::filled(m, 1, false),
        )
    };
    let mut last = score(&est, &gt).map_err(|e| e.to_string())?;
    for k in 0..40 {
        let correct = k % 2 == 0;
        est.push(if correct { 2.05 } else { 3.0 });
        gt.push(2.0);
        let p = score(&est, &gt).map_err(|e| e.to_string())?;
        if correct {
            ensure!(p >= last, "adding a correct pixel lowered {last} to {p}");
        } else {
            ensure!(p <= last, "adding a wrong pixel raised {last} to {p}");
        }
        last = p;
    }
    Ok("40 additions".into())
}

fn pipeline_invariants() -> Result<String, String> {
    let k = synthetic_intrinsics();
    let frames = synthetic_frames(&SequenceParams {
        frames: 5,
        ..Default::default()
    });
    let cfg = PipelineConfig {
        policy: KeyframePolicy {
            lambda_trans: 0.02,
            lambda_inliers: 0,
        },
        ..Default::default()
    };
    let mut world = World::new(cfg.clone(), k).map_err(|e| e.to_string())?;
    for f in frames {
        world.process_frame(f).map_err(|e| e.to_string())?;
        ensure!(world.active.is_some(), "no active keyframe after frame {}", world.frames);
    }
    let t = &world.timings;
    for (name, s) in [("semidense", &t.semidense), ("optimisation", &t.optimisation), ("prediction", &t.prediction), ("frame", &t.frame)] {
        ensure!(s.0.iter().all(|v| *v >= 0.0), "negative {name} time");
    }
    let stages = t.semidense.total() + t.optimisation.total() + t.prediction.total();
    ensure!(stages <= t.frame.total(), "stage times {stages:.3} ms exceed frame time {:.3} ms", t.frame.total());
    let keyframes = world.keyframe_count();
    let result = world.finish("selftest");
    let back = config_from_manifest(&result.manifest()).map_err(|e| e.to_string())?;
    ensure!(back == cfg, "manifest does not reproduce the config");
    Ok(format!("{keyframes} keyframes"))
}

fn keyframe_monotone() -> Result<String, String> {
    let map = SemiDenseMap::empty(4, 4);
    let policy = KeyframePolicy {
        lambda_trans: 0.07,
        lambda_inliers: 0,
    };
    let kf = Pose::identity();
    let mut triggered = false;
    for step in 0..200 {
        let t = step as f64 * 0.001;
        let cur = Pose::from_translation(Vector3::new(t, 0.5 * t, 0.0));
        let create = should_create_keyframe(&kf, &cur, 2.0, &map, &policy);
        ensure!(!triggered || create, "creation stopped at translation {t}");
        triggered |= create;
    }
    ensure!(triggered, "no translation triggered a keyframe");
    Ok("200 baselines".into())
}
