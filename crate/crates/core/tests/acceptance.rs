//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthfuse::cli;
use depthfuse::config::PipelineConfig;
use depthfuse::datasets::{load_depth_png, DEFAULT_DEPTH_SCALE};
use depthfuse::eval::{format_report, parse_report, pct_within_10, save_depth_png, KeyframeScore};
use depthfuse::fusion::{
    cost_gradient, init_state, optimize, optimize_with, total_cost, FusionMode, FusionState, RobustConfig, ScaleUpdate,
};
use depthfuse::geometry::Raster;
use depthfuse::pipeline::{run_frames, RunResult, World};
use depthfuse::predictions::{read_predictions, synth_oracle, write_predictions, OracleParams, PredictionSet};
use depthfuse::selftest::{random_fusion_problem, two_view_plane_stats};
use depthfuse::semidense::{estimate_frame_from_poses, update_semidense, SemiDenseMap};
use depthfuse::datasets::{inject_pose_scale, Frame};
use depthfuse::synth::{synthetic_frames, synthetic_intrinsics, write_tum_sequence, SequenceParams};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within_time(t: Instant, limit_s: f64) -> Result<f64, String> {
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < limit_s, "took {secs:.2} s, limit {limit_s} s");
    Ok(secs)
}

// ---- 1: gradient against central differences ----

/// Every residual of the problem with its Huber threshold, evaluated at
/// `state`; used to skip coordinates near a kink.
fn residuals_touching(i: usize, state: &FusionState, semi: &SemiDenseMap, pred: &PredictionSet, cfg: &RobustConfig, mode: FusionMode) -> Vec<(f64, f64)> {
    let ld = &state.log_depth;
    let (w, h) = (ld.width(), ld.height());
    let mut out = Vec::new();
    if semi.valid[i] {
        out.push((ld[i] - state.scale.ln() - semi.depth[i].ln(), cfg.delta_semi));
    }
    if mode != FusionMode::LeastSquaresScale {
        out.push((ld[i] - pred.log_depth[i], cfg.delta_net));
    }
    if mode != FusionMode::NoPairwise {
        let (x, y) = (i % w, i / w);
        if x + 1 < w {
            out.push((ld[i + 1] - ld[i] - pred.grad_x[i], cfg.delta_grad));
        }
        if x > 0 {
            out.push((ld[i] - ld[i - 1] - pred.grad_x[i - 1], cfg.delta_grad));
        }
        if y + 1 < h {
            out.push((ld[i + w] - ld[i] - pred.grad_y[i], cfg.delta_grad));
        }
        if y > 0 {
            out.push((ld[i] - ld[i - w] - pred.grad_y[i - w], cfg.delta_grad));
        }
    }
    out
}

fn criterion_gradient() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = RobustConfig::default();
    let step = 1e-5;
    let (mut worst, mut checked, mut skipped): (f64, usize, usize) = (0.0, 0, 0);
    for _ in 0..50 {
        let (state, semi, pred) = random_fusion_problem(8, 6, &mut rng);
        for mode in FusionMode::ALL {
            let (g, g_scale) = cost_gradient(&state, &semi, &pred, &cfg, mode).map_err(|e| e.to_string())?;
            let cost = |s: &FusionState| total_cost(s, &semi, &pred, &cfg, mode).expect("consistent problem");
            let mut compare = |analytic: f64, fd: f64| {
                let err = (analytic - fd).abs();
                // Below this both are zero up to rounding of the cost sums.
                if err > 1e-9 {
                    worst = worst.max(err / analytic.abs().max(fd.abs()));
                }
                checked += 1;
            };
            for i in 0..state.log_depth.len() {
                let near_kink = residuals_touching(i, &state, &semi, &pred, &cfg, mode)
                    .iter()
                    .any(|&(r, d)| (r.abs() - d).abs() < 10.0 * step);
                if near_kink {
                    skipped += 1;
                    continue;
                }
                let mut plus = state.clone();
                plus.log_depth[i] += step;
                let mut minus = state.clone();
                minus.log_depth[i] -= step;
                compare(g[i], (cost(&plus) - cost(&minus)) / (2.0 * step));
            }
            let stereo_kink = (0..semi.valid.len()).filter(|&i| semi.valid[i]).any(|i| {
                let r = state.log_depth[i] - state.scale.ln() - semi.depth[i].ln();
                (r.abs() - cfg.delta_semi).abs() < 10.0 * step
            });
            if mode != FusionMode::LeastSquaresScale && !stereo_kink {
                let at = |ln_s: f64| cost(&FusionState { scale: ln_s.exp(), ..state.clone() });
                let ln_s = state.scale.ln();
                compare(g_scale, (at(ln_s + step) - at(ln_s - step)) / (2.0 * step));
            }
        }
    }
    let secs = within_time(t, 10.0)?;
    ensure!(worst < 1e-4, "worst relative error {worst:.2e}");
    ensure!(checked > 1000, "only {checked} coordinates compared");
    Ok(format!("{checked} coordinates ({skipped} near kinks skipped), worst rel err {worst:.1e}, {secs:.2} s"))
}

// ---- 2: fixed point against dense weighted least squares ----

/// Normal equations of the plain weighted least-squares problem over every
/// log-depth with `s` fixed, built row by row and solved densely.
fn weighted_least_squares(state: &FusionState, semi: &SemiDenseMap, pred: &PredictionSet) -> DVector<f64> {
    let (w, h) = (pred.width(), pred.height());
    let n = w * h;
    let mut normal = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut add = |coeffs: &[(usize, f64)], target: f64, weight: f64| {
        for &(a, ca) in coeffs {
            rhs[a] += weight * ca * target;
            for &(b, cb) in coeffs {
                normal[(a, b)] += weight * ca * cb;
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if semi.valid[i] {
                let d = semi.depth[i];
                add(&[(i, 1.0)], state.scale.ln() + d.ln(), d * d / semi.variance[i]);
            }
            add(&[(i, 1.0)], pred.log_depth[i], 1.0 / pred.log_depth_var[i]);
            if x + 1 < w {
                add(&[(i + 1, 1.0), (i, -1.0)], pred.grad_x[i], 1.0 / pred.grad_x_var[i]);
            }
            if y + 1 < h {
                add(&[(i + w, 1.0), (i, -1.0)], pred.grad_y[i], 1.0 / pred.grad_y_var[i]);
            }
        }
    }
    normal.lu().solve(&rhs).expect("prediction term keeps the system regular")
}

fn criterion_dense_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = RobustConfig {
        cg_tol: 1e-12,
        cg_max_iters: 1000,
        ..RobustConfig::least_squares()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let w = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let (state, semi, pred) = random_fusion_problem(w, h, &mut rng);
        let (out, _) = optimize_with(&state, &semi, &pred, &cfg, FusionMode::Full, ScaleUpdate::Hold)
            .map_err(|e| e.to_string())?;
        ensure!(out.scale == state.scale, "scale moved from {} to {}", state.scale, out.scale);
        let exact = weighted_least_squares(&state, &semi, &pred);
        for (a, b) in out.log_depth.values().iter().zip(exact.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = within_time(t, 5.0)?;
    ensure!(worst < 1e-8, "max deviation {worst:.2e}");
    Ok(format!("max deviation {worst:.1e}, {secs:.2} s"))
}

// ---- 3 and 4: scale recovery and fusion gain on the synthetic sequence ----

struct ScaleRun {
    alpha: f64,
    seed: u64,
    result: RunResult,
}

fn run_synthetic(frames: &[Frame], alpha: f64, seed: u64, sigma_depth: f64, mode: FusionMode) -> Result<RunResult, String> {
    let mut cfg = PipelineConfig::default();
    cfg.pose_scale = alpha;
    cfg.oracle.seed = seed;
    cfg.oracle.sigma_depth = sigma_depth;
    cfg.oracle.sigma_grad = 0.05;
    cfg.mode = mode;
    run_frames(&cfg, frames, &synthetic_intrinsics(), "synthetic").map_err(|e| format!("alpha {alpha} seed {seed}: {e}"))
}

fn scale_runs() -> Result<(Vec<ScaleRun>, f64), String> {
    let t = Instant::now();
    let frames = synthetic_frames(&SequenceParams::default());
    let mut runs = Vec::new();
    for alpha in [0.5, 2.0] {
        for seed in 0..10 {
            let result = run_synthetic(&frames, alpha, seed, 0.3, FusionMode::Full)?;
            runs.push(ScaleRun { alpha, seed, result });
        }
    }
    Ok((runs, t.elapsed().as_secs_f64()))
}

fn criterion_scale_recovery(runs: &[ScaleRun], secs: f64) -> Verdict {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for r in runs {
        let kf = r.result.final_keyframe().ok_or("run produced no keyframe")?;
        let target = 1.0 / r.alpha;
        let rel = (kf.scale - target).abs() / target;
        worst = worst.max(rel);
        if rel >= 0.05 {
            failures.push(format!("alpha {} seed {}: s = {:.4}", r.alpha, r.seed, kf.scale));
        }
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    ensure!(secs < 120.0, "took {secs:.1} s, limit 120 s");
    Ok(format!("{} runs, worst |s·α − 1| = {:.2}%, {secs:.1} s", runs.len(), 100.0 * worst))
}

fn criterion_fusion_gain(runs: &[ScaleRun]) -> Verdict {
    let mut lines = Vec::new();
    for alpha in [0.5, 2.0] {
        let mut fused = Vec::new();
        let mut pred = Vec::new();
        let mut semi = Vec::new();
        let mut coverage = Vec::new();
        for r in runs.iter().filter(|r| r.alpha == alpha) {
            let kf = r.result.final_keyframe().ok_or("run produced no keyframe")?;
            let score = |s: Option<depthfuse::eval::DepthScore>, what: &str| {
                s.map(|s| s.pct_correct).ok_or_else(|| format!("seed {}: no {what} score", r.seed))
            };
            fused.push(score(kf.fused, "fused")?);
            pred.push(score(kf.prediction_only, "prediction")?);
            semi.push(score(kf.semidense_only, "semi-dense")?);
            coverage.push(kf.semidense_coverage);
        }
        let (f, p, s, c) = (median(fused), median(pred), median(semi), median(coverage));
        ensure!((c - 0.3).abs() <= 0.1, "alpha {alpha}: median semi-dense coverage {:.1}%", 100.0 * c);
        ensure!(f >= p + 2.0, "alpha {alpha}: fused {f:.2} vs prediction {p:.2}");
        ensure!(f > s, "alpha {alpha}: fused {f:.2} vs semi-dense {s:.2}");
        lines.push(format!("alpha {alpha}: fused {f:.2}, prediction {p:.2}, semi-dense {s:.2}, coverage {:.1}%", 100.0 * c));
    }
    Ok(lines.join("; "))
}

// ---- 5 and 6: ablations on corrupted predictions ----

struct AblationRuns {
    full: Vec<f64>,
    no_pairwise: Vec<f64>,
    ls_scale: Vec<f64>,
    ls_failures: usize,
}

fn ablation_runs() -> Result<AblationRuns, String> {
    let mut out = AblationRuns {
        full: Vec::new(),
        no_pairwise: Vec::new(),
        ls_scale: Vec::new(),
        ls_failures: 0,
    };
    for seed in 0..10 {
        let frames = synthetic_frames(&SequenceParams {
            scene_seed: seed,
            ..SequenceParams::default()
        });
        for mode in FusionMode::ALL {
            let r = run_synthetic(&frames, 0.5, seed, 0.5, mode)?;
            let pct = r
                .final_keyframe()
                .and_then(|k| k.fused)
                .map(|s| s.pct_correct)
                .ok_or_else(|| format!("{mode} seed {seed}: no fused score"))?;
            match mode {
                FusionMode::Full => out.full.push(pct),
                FusionMode::NoPairwise => out.no_pairwise.push(pct),
                FusionMode::LeastSquaresScale => {
                    out.ls_scale.push(pct);
                    out.ls_failures += r.solver_failures;
                }
            }
        }
    }
    Ok(out)
}

fn criterion_ablation(full: &[f64], other: &[f64], name: &str, margin: f64, note: &str) -> Verdict {
    let (f, o) = (median(full.to_vec()), median(other.to_vec()));
    ensure!(f >= o + margin, "median full {f:.2} vs {name} {o:.2}, margin below {margin}");
    Ok(format!("median full {f:.2} vs {name} {o:.2}{note}"))
}

// ---- 7: two-view stereo on a plane ----

fn criterion_two_view() -> Verdict {
    let (coverage, median_rel) = two_view_plane_stats(0, 0.1);
    ensure!(coverage >= 0.9, "coverage {:.1}% of textured pixels", 100.0 * coverage);
    ensure!(median_rel < 0.02, "median relative error {:.2}%", 100.0 * median_rel);
    Ok(format!("coverage {:.1}%, median relative error {:.3}%", 100.0 * coverage, 100.0 * median_rel))
}

// ---- 8: metric examples ----

fn criterion_metric() -> Verdict {
    let row = |v: &[f64]| Raster::from_vec(v.len(), 1, v.to_vec()).expect("one row");
    let no_holes = |n: usize| Raster::from_vec(n, 1, vec![false; n]).expect("one row");
    let gt = row(&[1.0, 1.7, 2.3, 3.9, 0.6]);
    let holes = no_holes(5);
    let scaled = |f: f64| gt.map(|v| v * f);
    let pct = |est: &Raster<f64>, gt: &Raster<f64>, h: &Raster<bool>| pct_within_10(est, gt, h).map_err(|e| e.to_string());

    let same = pct(&gt, &gt, &holes)?;
    ensure!(same == 100.0, "est = gt gives {same}");
    let mixed = pct(&row(&[1.0, 1.05, 1.2]), &row(&[1.0, 1.0, 1.0]), &no_holes(3))?;
    ensure!((mixed - 66.667).abs() < 5e-4, "{{1.0, 1.05, 1.2}} gives {mixed}");
    let off = pct(&scaled(1.11), &gt, &holes)?;
    ensure!(off == 0.0, "1.11·gt gives {off}");
    let edge = pct(&scaled(1.10), &gt, &holes)?;
    ensure!(edge == 100.0, "1.10·gt gives {edge}");
    let past = pct(&scaled(1.101), &gt, &holes)?;
    ensure!(past == 0.0, "1.101·gt gives {past}");
    Ok(format!("100.0 / {mixed:.3} / 0.0, boundary 1.10 → {edge}, 1.101 → {past}"))
}

// ---- 9: file formats ----

fn criterion_round_trips(dir: &Path) -> Verdict {
    let frames = synthetic_frames(&SequenceParams {
        frames: 1,
        ..SequenceParams::default()
    });
    let f = &frames[0];
    let params = OracleParams::new(0.3, 0.05, 9).with_focal(synthetic_intrinsics().fx);
    let pred = synth_oracle(&f.gt_depth, Some(&f.holes), &params).map_err(|e| e.to_string())?.representable();
    let bytes = write_predictions(&pred).map_err(|e| e.to_string())?;
    let back = read_predictions(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == pred, "DFPRED decode differs from the saved set");
    let channels_equal = pred
        .channels()
        .iter()
        .zip(back.channels())
        .all(|(a, b)| a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure!(channels_equal, "DFPRED channels differ bitwise");
    ensure!(write_predictions(&back).map_err(|e| e.to_string())? == bytes, "DFPRED re-encode differs");

    let png = dir.join("depth.png");
    save_depth_png(&f.gt_depth, None, &png, DEFAULT_DEPTH_SCALE).map_err(|e| e.to_string())?;
    let (loaded, holes) = load_depth_png(&png, DEFAULT_DEPTH_SCALE).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..loaded.len() {
        ensure!(!holes[i], "pixel {i} came back as a hole");
        worst = worst.max((loaded[i] - f.gt_depth[i]).abs());
    }
    ensure!(worst <= 1.0 / DEFAULT_DEPTH_SCALE, "depth PNG error {worst:.2e} m");

    let scores: Vec<KeyframeScore> = FusionMode::ALL
        .iter()
        .enumerate()
        .map(|(k, &mode)| KeyframeScore {
            sequence: format!("seq_{k}"),
            keyframe: k,
            mode,
            pct_correct: 100.0 / (k as f64 + 3.0),
            n_evaluated: 1000 + k,
            median_abs_rel: 0.1 * std::f64::consts::PI.powi(k as i32),
        })
        .collect();
    let text = format_report(&scores);
    let parsed = parse_report(&text).map_err(|e| e.to_string())?;
    ensure!(parsed == scores, "CSV parse differs from the written scores");
    ensure!(format_report(&parsed) == text, "CSV re-format differs");
    Ok(format!("DFPRED {} bytes bit-exact, PNG error {:.1e} m, CSV {} rows", bytes.len(), worst, scores.len()))
}

// ---- 10 and 11: throughput and determinism ----

fn cli_run(seq: &Path, out: &Path) -> Result<(), String> {
    let args = [
        "depthfuse".to_string(),
        "run".into(),
        "--sequence".into(),
        seq.display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--seed".into(),
        "7".into(),
        "--max-frames".into(),
        "10".into(),
    ];
    let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
    let code = cli::main_with(args, &mut stdout, &mut stderr);
    ensure!(code == 0, "run exited {code}: {}", String::from_utf8_lossy(&stderr));
    Ok(())
}

fn manifest_ms(manifest: &str, key: &str) -> Result<f64, String> {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim().strip_prefix('=')))
        .ok_or_else(|| format!("manifest has no {key}"))?
        .trim()
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn criterion_throughput(manifest: &str) -> Verdict {
    let k = synthetic_intrinsics();
    let frames = inject_pose_scale(&synthetic_frames(&SequenceParams { frames: 3, ..SequenceParams::default() }), 1.0)
        .map_err(|e| e.to_string())?;
    let mut world = World::new(PipelineConfig::default(), k).map_err(|e| e.to_string())?;
    for f in &frames[..2] {
        world.process_frame(f.clone()).map_err(|e| e.to_string())?;
    }
    let mut kf = world.active.take().ok_or("no active keyframe")?;
    let cfg = &world.cfg;

    let t = Instant::now();
    let (obs, _) = estimate_frame_from_poses(
        &kf.frame.intensity,
        &frames[2].intensity,
        &kf.frame.pose,
        &frames[2].pose,
        &k,
        &kf.mask,
        &kf.semidense,
        &cfg.stereo,
    );
    update_semidense(&mut kf.semidense, &obs);
    let semi_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let state = optimize(&init_state(&kf.predictions), &kf.semidense, &kf.predictions, &cfg.robust, FusionMode::Full)
        .map_err(|e| e.to_string())?;
    let solve_s = t.elapsed().as_secs_f64();
    ensure!(state.iteration == 10, "solve ran {} iterations", state.iteration);
    ensure!(solve_s < 2.0, "10-iteration solve took {solve_s:.2} s");
    ensure!(semi_s < 1.0, "semi-dense update took {semi_s:.2} s");

    let opt_max = manifest_ms(manifest, "timing.optimisation.max_ms")?;
    let semi_max = manifest_ms(manifest, "timing.semidense.max_ms")?;
    ensure!(opt_max < 2000.0, "manifest optimisation max {opt_max} ms");
    ensure!(semi_max < 1000.0, "manifest semi-dense max {semi_max} ms");
    Ok(format!(
        "solve {:.0} ms, semi-dense update {:.0} ms ({} observations); manifest max {opt_max:.0} / {semi_max:.0} ms",
        1e3 * solve_s,
        1e3 * semi_s,
        obs.len()
    ))
}

fn criterion_determinism(a: &Path, b: &Path) -> Verdict {
    let read = |p: &Path| fs::read(p.join("scores.csv")).map_err(|e| format!("{}: {e}", p.display()));
    let (x, y) = (read(a)?, read(b)?);
    ensure!(!x.is_empty(), "empty scores.csv");
    ensure!(x == y, "scores.csv differs between runs");
    Ok(format!("{} bytes identical", x.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, v: Verdict| match v {
        Ok(msg) => println!("PASS {id:>2} {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL {id:>2} {name}: {msg}");
        }
    };
    let tmp = tempfile::tempdir().expect("temp dir");

    report(1, "gradient oracle", criterion_gradient());
    report(2, "dense solver oracle", criterion_dense_oracle());

    match scale_runs() {
        Ok((runs, secs)) => {
            report(3, "scale recovery", criterion_scale_recovery(&runs, secs));
            report(4, "fusion beats either source", criterion_fusion_gain(&runs));
        }
        Err(e) => {
            report(3, "scale recovery", Err(e.clone()));
            report(4, "fusion beats either source", Err(e));
        }
    }

    match ablation_runs() {
        Ok(a) => {
            report(5, "full vs no pairwise", criterion_ablation(&a.full, &a.no_pairwise, "nopairwise", 1.0, ""));
            let note = format!(" ({} failed lsscale solves)", a.ls_failures);
            report(6, "full vs least-squares scale", criterion_ablation(&a.full, &a.ls_scale, "lsscale", 0.5, &note));
        }
        Err(e) => {
            report(5, "full vs no pairwise", Err(e.clone()));
            report(6, "full vs least-squares scale", Err(e));
        }
    }

    report(7, "two-view plane stereo", criterion_two_view());
    report(8, "metric examples", criterion_metric());
    report(9, "format round trips", criterion_round_trips(tmp.path()));

    let seq = tmp.path().join("seq");
    let (out_a, out_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let runs = write_tum_sequence(&seq, &synthetic_frames(&SequenceParams::default()), &synthetic_intrinsics())
        .map_err(|e| e.to_string())
        .and_then(|()| cli_run(&seq, &out_a))
        .and_then(|()| cli_run(&seq, &out_b));
    match runs {
        Ok(()) => {
            let manifest = fs::read_to_string(out_a.join("manifest.txt")).unwrap_or_default();
            report(10, "throughput", criterion_throughput(&manifest));
            report(11, "determinism", criterion_determinism(&out_a, &out_b));
        }
        Err(e) => {
            report(10, "throughput", Err(e.clone()));
            report(11, "determinism", Err(e));
        }
    }

    println!("{} of 11 criteria failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
