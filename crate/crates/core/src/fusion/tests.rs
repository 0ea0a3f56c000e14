use super::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::predictions::{synth_oracle, OracleParams};

fn ln2() -> f64 {
    std::f64::consts::LN_2
}

fn uniform_pred(w: usize, h: usize, ld: f64, var: f64, g: f64, gvar: f64) -> PredictionSet {
    PredictionSet {
        log_depth: Raster::filled(w, h, ld),
        log_depth_var: Raster::filled(w, h, var),
        grad_x: Raster::filled(w, h, g),
        grad_x_var: Raster::filled(w, h, gvar),
        grad_y: Raster::filled(w, h, g),
        grad_y_var: Raster::filled(w, h, gvar),
        source_focal: 100.0,
    }
}

fn random_problem(w: usize, h: usize, rng: &mut ChaCha8Rng) -> (FusionState, SemiDenseMap, PredictionSet) {
    crate::selftest::random_fusion_problem(w, h, rng)
}

#[test]
fn residual_examples() {
    assert_eq!(residual_semi(2f64.ln(), 1.0, 2.0), 0.0);
    assert!(residual_semi(4f64.ln(), 2.0, 2.0).abs() < 1e-15);
    assert_eq!(residual_semi(1.0, 1.0, 1.0), 1.0);
    assert_eq!(residual_net(0.3, 0.3), 0.0);
    assert!((residual_net(0.7, 0.2) - 0.5).abs() < 1e-15);

    let r = Raster::from_vec(2, 2, vec![0.0, 2f64.ln(), 0.0, 0.0]).unwrap();
    assert!((residual_grad(&r, 0, Axis::X, ln2()).unwrap()).abs() < 1e-15);
    assert!((residual_grad(&r, 0, Axis::X, 0.0).unwrap() - 0.693147).abs() < 1e-6);
    assert_eq!(residual_grad(&r, 0, Axis::Y, 0.0).unwrap(), 0.0);
    assert_eq!(
        residual_grad(&r, 1, Axis::X, 0.0),
        Err(FusionError::BorderPixel { index: 1, axis: Axis::X })
    );
    assert_eq!(
        residual_grad(&r, 2, Axis::Y, 0.0),
        Err(FusionError::BorderPixel { index: 2, axis: Axis::Y })
    );
}

#[test]
fn huber_weight_examples() {
    assert_eq!(huber_weight(0.0, 0.3), 1.0);
    assert_eq!(huber_weight(0.3, 0.3), 1.0);
    assert_eq!(huber_weight(-0.3, 0.3), 1.0);
    assert!((huber_weight(0.9, 0.3) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(huber_weight(1e9, f64::INFINITY), 1.0);
}

#[test]
fn huber_cost_is_continuous_at_the_threshold() {
    let d = 0.3;
    assert!((huber_cost(d, d) - huber_cost(d + 1e-12, d)).abs() < 1e-11);
    assert_eq!(huber_cost(0.2, d), 0.2 * 0.2);
}

#[test]
fn single_pixel_net_term() {
    let pred = uniform_pred(1, 1, 0.4, 1.0, 0.0, 1.0);
    let state = FusionState {
        log_depth: Raster::filled(1, 1, 0.1),
        scale: 1.0,
        iteration: 0,
    };
    let semi = SemiDenseMap::empty(1, 1);
    let (h, b) = assemble_normal_equations(&state, &semi, &pred, &RobustConfig::least_squares(), FusionMode::Full).unwrap();
    assert_eq!(h.diagonal(), &[1.0]);
    assert!((b[0] - 0.3).abs() < 1e-15);
}

#[test]
fn anchored_gradient_pair() {
    let eps = 1e-10;
    let mut pred = uniform_pred(2, 1, 0.25, 1.0, ln2(), 1.0);
    pred.log_depth_var = Raster::from_vec(2, 1, vec![eps, 1e12]).unwrap();
    let semi = SemiDenseMap::empty(2, 1);
    let state = init_state(&pred);
    let cfg = RobustConfig {
        cg_tol: 1e-14,
        ..RobustConfig::least_squares()
    };
    let (h, b) = assemble_normal_equations(&state, &semi, &pred, &cfg, FusionMode::Full).unwrap();
    let step = solve_depth_step(&h, &b, &cfg).unwrap();
    let x0 = state.log_depth[0] + step[0];
    let x1 = state.log_depth[1] + step[1];
    assert!((x0 - 0.25).abs() < 1e-8);
    assert!((x1 - (0.25 + ln2())).abs() < 1e-8);
}

#[test]
fn common_variance_scaling_leaves_the_step_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (state, semi, pred) = random_problem(6, 5, &mut rng);
    let c = 7.5;
    let mut pred_c = pred.clone();
    for r in [
        &mut pred_c.log_depth_var,
        &mut pred_c.grad_x_var,
        &mut pred_c.grad_y_var,
    ] {
        r.values_mut().iter_mut().for_each(|v| *v *= c);
    }
    let mut semi_c = semi.clone();
    semi_c.variance.values_mut().iter_mut().for_each(|v| *v *= c);
    let cfg = RobustConfig {
        cg_tol: 1e-13,
        cg_max_iters: 1000,
        ..RobustConfig::default()
    };
    let (h, b) = assemble_normal_equations(&state, &semi, &pred, &cfg, FusionMode::Full).unwrap();
    let (hc, bc) = assemble_normal_equations(&state, &semi_c, &pred_c, &cfg, FusionMode::Full).unwrap();
    let s1 = solve_depth_step(&h, &b, &cfg).unwrap();
    let s2 = solve_depth_step(&hc, &bc, &cfg).unwrap();
    for (a, b) in s1.iter().zip(&s2) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn zero_rhs_gives_zero_step() {
    let h = GridMatrix::zeros(3, 3);
    let step = solve_depth_step(&h, &[0.0; 9], &RobustConfig::default()).unwrap();
    assert!(step.iter().all(|&v| v == 0.0));
}

#[test]
fn assembled_system_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = RobustConfig {
        cg_tol: 1e-10,
        cg_max_iters: 1000,
        ..RobustConfig::default()
    };
    for _ in 0..10 {
        let (state, semi, pred) = random_problem(8, 6, &mut rng);
        for mode in [FusionMode::Full, FusionMode::NoPairwise] {
            let (h, b) = assemble_normal_equations(&state, &semi, &pred, &cfg, mode).unwrap();
            assert!(h.gershgorin_margin() > 0.0);
            let dense = h.to_dense();
            assert_eq!(dense, dense.transpose());
            let exact = dense.cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
            let step = solve_depth_step(&h, &b, &cfg).unwrap();
            let err = (DVector::from_vec(step) - &exact).norm();
            assert!(err <= 1e-6 * exact.norm().max(1e-300));
        }
    }
}

#[test]
fn prediction_only_problem_converges_in_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (state, _, pred) = random_problem(7, 5, &mut rng);
    let semi = SemiDenseMap::empty(7, 5);
    let cfg = RobustConfig {
        gn_iterations: 1,
        cg_tol: 1e-12,
        ..RobustConfig::least_squares()
    };
    let out = optimize(&state, &semi, &pred, &cfg, FusionMode::NoPairwise).unwrap();
    for (a, b) in out.log_depth.values().iter().zip(pred.log_depth.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(out.scale, state.scale);
}

#[test]
fn scale_step_examples() {
    let cfg = RobustConfig::default();
    let gt = Raster::from_fn(4, 3, |x, y| 1.0 + 0.2 * x as f64 + 0.1 * y as f64);
    let mut semi = SemiDenseMap::empty(4, 3);
    for i in 0..12 {
        semi.valid[i] = true;
        semi.depth[i] = gt[i];
        semi.variance[i] = 0.01;
    }
    semi.inlier_count = 12;
    let state = FusionState {
        log_depth: gt.map(|v| v.ln()),
        scale: 1.0,
        iteration: 0,
    };
    assert!((solve_scale_step(&state, &semi, &cfg).unwrap() - 1.0).abs() < 1e-12);

    let mut equal = semi.clone();
    for i in 0..12 {
        equal.depth[i] = gt[i] / 2.0;
        equal.variance[i] = 0.05 * equal.depth[i].powi(2);
    }
    assert!((solve_scale_step(&state, &equal, &cfg).unwrap() - 2.0).abs() < 1e-12);

    // Offsets ln 2 and 0 with log-space information 1 and 3.
    let mut two = SemiDenseMap::empty(2, 1);
    two.valid = Raster::filled(2, 1, true);
    two.depth = Raster::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
    two.variance = Raster::from_vec(2, 1, vec![1.0, 1.0 / 3.0]).unwrap();
    two.inlier_count = 2;
    let st = FusionState {
        log_depth: Raster::from_vec(2, 1, vec![ln2(), 0.0]).unwrap(),
        scale: 1.0,
        iteration: 0,
    };
    let s = solve_scale_step(&st, &two, &RobustConfig::least_squares()).unwrap();
    assert!((s.ln() - ln2() / 4.0).abs() < 1e-12);
    assert!((s - 1.189207).abs() < 1e-6);

    assert_eq!(
        solve_scale_step(&st, &SemiDenseMap::empty(2, 1), &cfg),
        Err(FusionError::NoSemiDenseSupport)
    );
}

#[test]
fn init_state_copies_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, _, pred) = random_problem(5, 4, &mut rng);
    let s = init_state(&pred);
    for (a, b) in s.log_depth.values().iter().zip(pred.log_depth.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(s.scale, 1.0);
    assert_eq!(s.iteration, 0);
}

fn noiseless_setup(alpha: f64) -> (Raster<f64>, SemiDenseMap, PredictionSet) {
    let gt = Raster::from_fn(32, 24, |x, y| 1.5 + 0.03 * x as f64 + 0.02 * y as f64);
    let pred = synth_oracle(&gt, None, &OracleParams::new(0.0, 0.0, 1)).unwrap();
    let mut semi = SemiDenseMap::empty(32, 24);
    for i in (0..gt.len()).step_by(3) {
        semi.valid[i] = true;
        semi.depth[i] = alpha * gt[i];
        semi.variance[i] = 1e-4 * semi.depth[i].powi(2);
    }
    semi.inlier_count = semi.valid.values().iter().filter(|v| **v).count();
    (gt, semi, pred)
}

#[test]
fn noiseless_inputs_are_a_fixed_point() {
    let (gt, semi, pred) = noiseless_setup(1.0);
    let cfg = RobustConfig {
        gn_iterations: 1,
        ..RobustConfig::default()
    };
    let state = init_state(&pred);
    let out = optimize(&state, &semi, &pred, &cfg, FusionMode::Full).unwrap();
    assert!(total_cost(&out, &semi, &pred, &cfg, FusionMode::Full).unwrap() < 1e-10);
    for (a, g) in out.log_depth.values().iter().zip(gt.values()) {
        assert!((a - g.ln()).abs() < 1e-12);
    }
    assert_eq!(out.iteration, 1);
}

#[test]
fn single_pixel_equal_weight_mean() {
    let pred = uniform_pred(1, 1, 1.0, 1.0, 0.0, 1.0);
    let mut semi = SemiDenseMap::empty(1, 1);
    semi.valid[0] = true;
    semi.depth[0] = 1.0;
    semi.variance[0] = 1.0;
    semi.inlier_count = 1;
    let state = init_state(&pred);
    let (out, _) = optimize_with(
        &state,
        &semi,
        &pred,
        &RobustConfig::least_squares(),
        FusionMode::Full,
        ScaleUpdate::Hold,
    )
    .unwrap();
    assert!((out.log_depth[0] - 0.5).abs() < 1e-12);
    assert_eq!(out.scale, 1.0);
}

#[test]
fn recovers_injected_scale() {
    let gt = Raster::from_fn(48, 36, |x, y| 1.5 + 0.02 * x as f64 + 0.01 * y as f64);
    let pred = synth_oracle(&gt, None, &OracleParams::new(0.3, 0.05, 21)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alpha = 0.5;
    let mut semi = SemiDenseMap::empty(48, 36);
    for i in 0..gt.len() {
        if rng.random_range(0.0..1.0) < 0.3 {
            let noise: f64 = rng.random_range(-0.02..0.02);
            semi.valid[i] = true;
            semi.depth[i] = alpha * gt[i] * (1.0 + noise);
            // Stereo about as informative per pixel as the prediction.
            semi.variance[i] = (0.3 * semi.depth[i]).powi(2);
        }
    }
    semi.inlier_count = semi.valid.values().iter().filter(|v| **v).count();
    let out = optimize(&init_state(&pred), &semi, &pred, &RobustConfig::default(), FusionMode::Full).unwrap();
    assert!((out.scale - 2.0).abs() < 0.1, "s = {}", out.scale);
}

#[test]
fn least_squares_scale_mode_fits_offset() {
    let (gt, semi, mut pred) = noiseless_setup(0.5);
    pred.grad_x_var.values_mut().iter_mut().for_each(|v| *v = 0.0025);
    pred.grad_y_var.values_mut().iter_mut().for_each(|v| *v = 0.0025);
    let out = optimize(&init_state(&pred), &semi, &pred, &RobustConfig::default(), FusionMode::LeastSquaresScale).unwrap();
    assert!((out.scale - 2.0).abs() < 1e-3, "s = {}", out.scale);
    for (a, g) in out.log_depth.values().iter().zip(gt.values()) {
        assert!((a - g.ln()).abs() < 1e-3);
    }
    // Starting from its own output is stable.
    let again = optimize(&out, &semi, &pred, &RobustConfig::default(), FusionMode::LeastSquaresScale).unwrap();
    assert!((again.scale - out.scale).abs() < 1e-6);
}

#[test]
fn least_squares_scale_needs_stereo() {
    let pred = uniform_pred(4, 4, 0.0, 1.0, 0.0, 1.0);
    let r = optimize(
        &init_state(&pred),
        &SemiDenseMap::empty(4, 4),
        &pred,
        &RobustConfig::default(),
        FusionMode::LeastSquaresScale,
    );
    assert_eq!(r, Err(FusionError::NoSemiDenseSupport));
}

#[test]
fn missing_stereo_keeps_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut state, _, pred) = random_problem(6, 4, &mut rng);
    state.scale = 1.7;
    let out = optimize(&state, &SemiDenseMap::empty(6, 4), &pred, &RobustConfig::default(), FusionMode::Full).unwrap();
    assert_eq!(out.scale, 1.7);
}

#[test]
fn dimension_mismatch_is_reported() {
    let pred = uniform_pred(4, 4, 0.0, 1.0, 0.0, 1.0);
    let semi = SemiDenseMap::empty(4, 3);
    assert!(matches!(
        optimize(&init_state(&pred), &semi, &pred, &RobustConfig::default(), FusionMode::Full),
        Err(FusionError::DimensionMismatch(_))
    ));
}

#[test]
fn invalid_config_is_rejected() {
    let pred = uniform_pred(2, 2, 0.0, 1.0, 0.0, 1.0);
    let bad = RobustConfig {
        delta_grad: 0.0,
        ..RobustConfig::default()
    };
    assert!(matches!(
        optimize(&init_state(&pred), &SemiDenseMap::empty(2, 2), &pred, &bad, FusionMode::Full),
        Err(FusionError::InvalidConfig(_))
    ));
}

/// Central differences of the total cost, compared coordinate-wise with the
/// analytic gradient wherever no residual sits within `1e-3` of a kink.
fn check_gradient(seed: u64, mode: FusionMode) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (state, semi, pred) = random_problem(8, 6, &mut rng);
    let cfg = RobustConfig::default();
    let (g, g_s) = cost_gradient(&state, &semi, &pred, &cfg, mode).unwrap();
    let h = 1e-5;
    let near_kink = |r: f64, d: f64| (r.abs() - d).abs() <= 1e-3;
    let ld = &state.log_depth;
    let ln_s = state.scale.ln();
    let mut checked = 0;
    for i in 0..ld.len() {
        let mut kink = near_kink(ld[i] - pred.log_depth[i], cfg.delta_net);
        if semi.valid[i] {
            kink |= near_kink(ld[i] - ln_s - semi.depth[i].ln(), cfg.delta_semi);
        }
        let w = ld.width();
        let left = (i % w > 0).then(|| i - 1);
        let above = i.checked_sub(w);
        let edges = [
            ld.right_of(i).map(|j| (i, j, pred.grad_x[i])),
            ld.below(i).map(|j| (i, j, pred.grad_y[i])),
            left.map(|j| (j, i, pred.grad_x[j])),
            above.map(|j| (j, i, pred.grad_y[j])),
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
            total_cost(&s, &semi, &pred, &cfg, mode).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
        assert!(rel < 1e-4 || (fd - g[i]).abs() < 1e-8, "pixel {i}: fd {fd} analytic {}", g[i]);
        checked += 1;
    }
    let semi_kink = (0..ld.len())
        .any(|i| semi.valid[i] && near_kink(ld[i] - ln_s - semi.depth[i].ln(), cfg.delta_semi));
    if !semi_kink {
        let eval = |delta: f64| {
            let mut s = state.clone();
            s.scale = (ln_s + delta).exp();
            total_cost(&s, &semi, &pred, &cfg, mode).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - g_s).abs() / g_s.abs().max(1e-8) < 1e-4, "scale: fd {fd} analytic {g_s}");
        checked += 1;
    }
    checked
}

#[test]
fn gradient_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..10 {
        for mode in FusionMode::ALL {
            checked += check_gradient(seed, mode);
        }
    }
    assert!(checked > 1000);
}

#[test]
fn cost_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let (state, semi, pred) = random_problem(10, 8, &mut rng);
        for mode in FusionMode::ALL {
            let (_, trace) = optimize_with(&state, &semi, &pred, &RobustConfig::default(), mode, ScaleUpdate::Estimate).unwrap();
            for w in trace.costs.windows(2) {
                assert!(w[1] <= w[0], "{mode}: {} then {}", w[0], w[1]);
            }
        }
    }
}

/// Weighted least squares over all residuals, built row by row.
fn dense_oracle(state: &FusionState, semi: &SemiDenseMap, pred: &PredictionSet) -> DVector<f64> {
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
    (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * y))
}

#[test]
fn least_squares_fixed_point_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for _ in 0..20 {
        let w = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let (state, semi, pred) = random_problem(w, h, &mut rng);
        let (out, _) = optimize_with(
            &state,
            &semi,
            &pred,
            &RobustConfig::least_squares(),
            FusionMode::Full,
            ScaleUpdate::Hold,
        )
        .unwrap();
        let exact = dense_oracle(&state, &semi, &pred);
        for (a, b) in out.log_depth.values().iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn scale_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (state, semi, pred) = random_problem(8, 6, &mut rng);
    let alpha = 2.5;
    let mut scaled = semi.clone();
    for i in 0..scaled.valid.len() {
        scaled.depth[i] *= alpha;
        scaled.variance[i] *= alpha * alpha;
    }
    let mut state_a = state.clone();
    state_a.scale /= alpha;
    for i in 0..semi.valid.len() {
        if semi.valid[i] {
            let r0 = residual_semi(state.log_depth[i], state.scale, semi.depth[i]);
            let r1 = residual_semi(state.log_depth[i], state_a.scale, scaled.depth[i]);
            assert!((r0 - r1).abs() < 1e-12);
        }
    }
    let cfg = RobustConfig {
        cg_tol: 1e-10,
        cg_max_iters: 1000,
        ..RobustConfig::default()
    };
    let a = optimize(&state, &semi, &pred, &cfg, FusionMode::Full).unwrap();
    let b = optimize(&state_a, &scaled, &pred, &cfg, FusionMode::Full).unwrap();
    for (x, y) in a.log_depth.values().iter().zip(b.log_depth.values()) {
        assert!((x - y).abs() < 1e-6);
    }
    assert!((a.scale / alpha - b.scale).abs() < 1e-6 * a.scale);
}

proptest! {
    #[test]
    fn pairwise_residuals_ignore_constant_offsets(
        vals in prop::collection::vec(-4096i32..4096, 12),
        c in -4096i32..4096,
        g in -64i32..64,
    ) {
        // Dyadic values keep every sum exact.
        let r = Raster::from_vec(4, 3, vals.iter().map(|&v| v as f64 / 1024.0).collect()).unwrap();
        let shifted = r.map(|v| v + c as f64 / 1024.0);
        let g = g as f64 / 1024.0;
        for i in 0..12 {
            for axis in [Axis::X, Axis::Y] {
                prop_assert_eq!(residual_grad(&r, i, axis, g), residual_grad(&shifted, i, axis, g));
            }
        }
    }

    #[test]
    fn huber_weight_in_unit_interval(r in -1e6f64..1e6, delta in 1e-6f64..1e3) {
        let w = huber_weight(r, delta);
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert!((w * r.abs() - r.abs().min(delta)).abs() <= 1e-9 * r.abs().max(1.0));
    }

    #[test]
    fn assembled_matrix_is_diagonally_dominant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, semi, pred) = random_problem(6, 5, &mut rng);
        for mode in [FusionMode::Full, FusionMode::NoPairwise] {
            let (h, _) = assemble_normal_equations(&state, &semi, &pred, &RobustConfig::default(), mode).unwrap();
            prop_assert!(h.gershgorin_margin() > 0.0);
        }
    }
}
