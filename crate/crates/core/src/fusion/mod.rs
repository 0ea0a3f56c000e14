//! Dense keyframe depth fusion.
//!
//! The state is a log-depth raster plus a scale factor `s` mapping the
//! scale-ambiguous stereo depths onto the metric predictions. The cost is a sum
//! of Huber-robustified, inverse-variance-weighted terms:
//!
//! * stereo: `ln d_i − ln s − ln d_semi,i` on valid semi-dense pixels,
//! * prediction: `ln d_i − ln d_net,i` on every pixel,
//! * gradient: `ln d_j − ln d_i − g_i` for the right and lower neighbour `j`.
//!
//! It is minimised by Gauss-Newton with IRLS weights, alternating a depth step
//! (sparse solve) and a closed-form scale step.

mod grid;

use thiserror::Error;

use crate::geometry::Raster;
use crate::predictions::PredictionSet;
use crate::semidense::SemiDenseMap;

pub use grid::{pcg, CgReport, GridMatrix, CG_DIVERGENCE_RUN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel {index} has no neighbour along {axis:?}")]
    BorderPixel { index: usize, axis: Axis },
    #[error("conjugate gradient diverged at iteration {iteration}")]
    CgDivergence { iteration: usize },
    #[error("no valid semi-dense pixels")]
    NoSemiDenseSupport,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionMode {
    /// Stereo, prediction and gradient terms with joint scale.
    Full,
    /// Gradient terms dropped.
    NoPairwise,
    /// Scale-free solve on stereo and gradient terms, then a single
    /// least-squares fit of the result to the predicted log-depths.
    LeastSquaresScale,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Full, FusionMode::NoPairwise, FusionMode::LeastSquaresScale];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::NoPairwise => "nopairwise",
            FusionMode::LeastSquaresScale => "lsscale",
        }
    }

    fn uses_prediction(self) -> bool {
        self != FusionMode::LeastSquaresScale
    }

    fn uses_gradients(self) -> bool {
        self != FusionMode::NoPairwise
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(FusionMode::Full),
            "nopairwise" => Ok(FusionMode::NoPairwise),
            "lsscale" => Ok(FusionMode::LeastSquaresScale),
            other => Err(format!("unknown mode '{other}' (expected full, nopairwise or lsscale)")),
        }
    }
}

/// Huber thresholds (log-depth units) and solver limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub delta_semi: f64,
    pub delta_net: f64,
    pub delta_grad: f64,
    pub gn_iterations: usize,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            delta_semi: 0.3,
            delta_net: 0.3,
            delta_grad: 0.1,
            gn_iterations: 10,
            cg_tol: 1e-6,
            cg_max_iters: 200,
        }
    }
}

impl RobustConfig {
    /// Huber disabled on every term.
    pub fn least_squares() -> Self {
        Self {
            delta_semi: f64::INFINITY,
            delta_net: f64::INFINITY,
            delta_grad: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        for (name, d) in [
            ("delta_semi", self.delta_semi),
            ("delta_net", self.delta_net),
            ("delta_grad", self.delta_grad),
        ] {
            if !(d > 0.0) {
                return Err(FusionError::InvalidConfig(format!("{name} must be positive, got {d}")));
            }
        }
        if self.gn_iterations == 0 {
            return Err(FusionError::InvalidConfig("gn_iterations must be at least 1".into()));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return Err(FusionError::InvalidConfig("cg_tol and cg_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Current estimate for one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub log_depth: Raster<f64>,
    pub scale: f64,
    /// Gauss-Newton iterations run so far.
    pub iteration: usize,
}

impl FusionState {
    pub fn depth(&self) -> Raster<f64> {
        self.log_depth.map(|v| v.exp())
    }
}

pub fn init_state(pred: &PredictionSet) -> FusionState {
    FusionState {
        log_depth: pred.log_depth.clone(),
        scale: 1.0,
        iteration: 0,
    }
}

pub fn residual_semi(log_depth: f64, scale: f64, semi_depth: f64) -> f64 {
    log_depth - scale.ln() - semi_depth.ln()
}

pub fn residual_net(log_depth: f64, predicted: f64) -> f64 {
    log_depth - predicted
}

/// `ln d_j − ln d_i − g` where `j` is the right (x) or lower (y) neighbour.
pub fn residual_grad(log_depth: &Raster<f64>, i: usize, axis: Axis, g: f64) -> Result<f64, FusionError> {
    let j = match axis {
        Axis::X => log_depth.right_of(i),
        Axis::Y => log_depth.below(i),
    }
    .ok_or(FusionError::BorderPixel { index: i, axis })?;
    Ok(log_depth[j] - log_depth[i] - g)
}

/// IRLS weight of the Huber loss.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Huber loss scaled to agree with `r²` inside the threshold.
pub fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        2.0 * delta * a - delta * delta
    }
}

/// Stereo term data in log space.
struct SemiTerm {
    index: usize,
    log_depth: f64,
    info: f64,
}

/// The terms of one problem instance, preprocessed for repeated evaluation.
struct Problem<'a> {
    width: usize,
    height: usize,
    semi: Vec<SemiTerm>,
    pred: &'a PredictionSet,
    net_info: Vec<f64>,
    gx_info: Vec<f64>,
    gy_info: Vec<f64>,
    use_net: bool,
    use_grad: bool,
}

impl<'a> Problem<'a> {
    fn new(
        log_depth: &Raster<f64>,
        semi: &SemiDenseMap,
        pred: &'a PredictionSet,
        mode: FusionMode,
    ) -> Result<Self, FusionError> {
        let (w, h) = (pred.width(), pred.height());
        if !log_depth.same_shape(&pred.log_depth) {
            return Err(FusionError::DimensionMismatch(format!(
                "state {}x{} vs predictions {w}x{h}",
                log_depth.width(),
                log_depth.height()
            )));
        }
        if semi.width() != w || semi.height() != h {
            return Err(FusionError::DimensionMismatch(format!(
                "semi-dense map {}x{} vs predictions {w}x{h}",
                semi.width(),
                semi.height()
            )));
        }
        for r in pred.channels() {
            if !r.same_shape(&pred.log_depth) {
                return Err(FusionError::DimensionMismatch("prediction channels differ in size".into()));
            }
        }
        let semi_terms = semi_terms(semi);
        let inv = |r: &Raster<f64>| r.values().iter().map(|v| 1.0 / v).collect();
        Ok(Self {
            width: w,
            height: h,
            semi: semi_terms,
            pred,
            net_info: inv(&pred.log_depth_var),
            gx_info: inv(&pred.grad_x_var),
            gy_info: inv(&pred.grad_y_var),
            use_net: mode.uses_prediction(),
            use_grad: mode.uses_gradients(),
        })
    }

    fn cost(&self, x: &[f64], ln_s: f64, cfg: &RobustConfig) -> f64 {
        let mut total = 0.0;
        for t in &self.semi {
            total += huber_cost(x[t.index] - ln_s - t.log_depth, cfg.delta_semi) * t.info;
        }
        if self.use_net {
            let ld = self.pred.log_depth.values();
            for i in 0..x.len() {
                total += huber_cost(x[i] - ld[i], cfg.delta_net) * self.net_info[i];
            }
        }
        if self.use_grad {
            self.for_each_edge(|i, j, g, info| {
                total += huber_cost(x[j] - x[i] - g, cfg.delta_grad) * info;
            });
        }
        total
    }

    /// Calls `f(i, j, g, info)` for every gradient constraint.
    #[inline]
    fn for_each_edge(&self, mut f: impl FnMut(usize, usize, f64, f64)) {
        let w = self.width;
        let gx = self.pred.grad_x.values();
        let gy = self.pred.grad_y.values();
        for y in 0..self.height {
            let row = y * w;
            for x in 0..w {
                let i = row + x;
                if x + 1 < w {
                    f(i, i + 1, gx[i], self.gx_info[i]);
                }
                if y + 1 < self.height {
                    f(i, i + w, gy[i], self.gy_info[i]);
                }
            }
        }
    }

    /// IRLS normal equations for the depth step at fixed scale.
    fn normal_equations(&self, x: &[f64], ln_s: f64, cfg: &RobustConfig) -> (GridMatrix, Vec<f64>) {
        let n = x.len();
        let mut a = GridMatrix::zeros(self.width, self.height);
        let mut b = vec![0.0; n];
        for t in &self.semi {
            let r = x[t.index] - ln_s - t.log_depth;
            let wgt = huber_weight(r, cfg.delta_semi) * t.info;
            a.diag[t.index] += wgt;
            b[t.index] -= wgt * r;
        }
        if self.use_net {
            let ld = self.pred.log_depth.values();
            for i in 0..n {
                let r = x[i] - ld[i];
                let wgt = huber_weight(r, cfg.delta_net) * self.net_info[i];
                a.diag[i] += wgt;
                b[i] -= wgt * r;
            }
        }
        if self.use_grad {
            let w = self.width;
            self.for_each_edge(|i, j, g, info| {
                let r = x[j] - x[i] - g;
                let wgt = huber_weight(r, cfg.delta_grad) * info;
                a.diag[i] += wgt;
                a.diag[j] += wgt;
                if j == i + 1 {
                    a.right[i] -= wgt;
                } else {
                    debug_assert_eq!(j, i + w);
                    a.down[i] -= wgt;
                }
                b[i] += wgt * r;
                b[j] -= wgt * r;
            });
        }
        (a, b)
    }

    /// Gradient of [`Problem::cost`] over `x` and `ln s`.
    fn gradient(&self, x: &[f64], ln_s: f64, cfg: &RobustConfig) -> (Vec<f64>, f64) {
        let mut g = vec![0.0; x.len()];
        let mut g_s = 0.0;
        for t in &self.semi {
            let r = x[t.index] - ln_s - t.log_depth;
            let d = 2.0 * huber_weight(r, cfg.delta_semi) * r * t.info;
            g[t.index] += d;
            g_s -= d;
        }
        if self.use_net {
            let ld = self.pred.log_depth.values();
            for i in 0..x.len() {
                let r = x[i] - ld[i];
                g[i] += 2.0 * huber_weight(r, cfg.delta_net) * r * self.net_info[i];
            }
        }
        if self.use_grad {
            self.for_each_edge(|i, j, gv, info| {
                let r = x[j] - x[i] - gv;
                let d = 2.0 * huber_weight(r, cfg.delta_grad) * r * info;
                g[j] += d;
                g[i] -= d;
            });
        }
        (g, g_s)
    }
}

fn semi_terms(semi: &SemiDenseMap) -> Vec<SemiTerm> {
    (0..semi.valid.len())
        .filter(|&i| semi.valid[i])
        .map(|i| {
            let d = semi.depth[i];
            SemiTerm {
                index: i,
                log_depth: d.ln(),
                // First-order propagation of the depth variance to log space.
                info: d * d / semi.variance[i],
            }
        })
        .collect()
}

/// IRLS estimate of `ln s` with the depths fixed.
fn scale_irls(terms: &[SemiTerm], x: &[f64], ln_s0: f64, delta: f64) -> Result<f64, FusionError> {
    if terms.is_empty() {
        return Err(FusionError::NoSemiDenseSupport);
    }
    let mut ln_s = ln_s0;
    for _ in 0..SCALE_IRLS_ROUNDS {
        let (mut num, mut den) = (0.0, 0.0);
        for t in terms {
            let offset = x[t.index] - t.log_depth;
            let wgt = huber_weight(offset - ln_s, delta) * t.info;
            num += wgt * offset;
            den += wgt;
        }
        ln_s = num / den;
    }
    Ok(ln_s)
}

/// Reweighting rounds in the scale step.
pub const SCALE_IRLS_ROUNDS: usize = 3;
/// Step halvings tried before a depth step is rejected.
pub const MAX_STEP_HALVINGS: usize = 5;

/// Whether the alternation updates the scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleUpdate {
    #[default]
    Estimate,
    Hold,
}

/// The H and b of `H δ = b` for one depth step (scale fixed at `state.scale`).
pub fn assemble_normal_equations(
    state: &FusionState,
    semi: &SemiDenseMap,
    pred: &PredictionSet,
    cfg: &RobustConfig,
    mode: FusionMode,
) -> Result<(GridMatrix, Vec<f64>), FusionError> {
    let p = Problem::new(&state.log_depth, semi, pred, mode)?;
    Ok(p.normal_equations(state.log_depth.values(), state.scale.ln(), cfg))
}

pub fn solve_depth_step(h: &GridMatrix, b: &[f64], cfg: &RobustConfig) -> Result<Vec<f64>, FusionError> {
    if b.len() != h.len() {
        return Err(FusionError::DimensionMismatch(format!("b has {} entries, H {}", b.len(), h.len())));
    }
    let (x, report) = pcg(h, b, cfg.cg_tol, cfg.cg_max_iters)?;
    if !report.converged {
        log::debug!(
            "cg stopped after {} iterations at relative residual {:.3e}",
            report.iterations,
            report.relative_residual
        );
    }
    Ok(x)
}

/// Scale that minimises the robust stereo term with the depths held fixed.
pub fn solve_scale_step(state: &FusionState, semi: &SemiDenseMap, cfg: &RobustConfig) -> Result<f64, FusionError> {
    if semi.width() != state.log_depth.width() || semi.height() != state.log_depth.height() {
        return Err(FusionError::DimensionMismatch("semi-dense map vs state".into()));
    }
    scale_irls(&semi_terms(semi), state.log_depth.values(), state.scale.ln(), cfg.delta_semi).map(f64::exp)
}

/// Total robust cost of `state` for `mode`.
pub fn total_cost(
    state: &FusionState,
    semi: &SemiDenseMap,
    pred: &PredictionSet,
    cfg: &RobustConfig,
    mode: FusionMode,
) -> Result<f64, FusionError> {
    let p = Problem::new(&state.log_depth, semi, pred, mode)?;
    Ok(p.cost(state.log_depth.values(), state.scale.ln(), cfg))
}

/// Gradient of [`total_cost`] with respect to each log-depth and to `ln s`.
pub fn cost_gradient(
    state: &FusionState,
    semi: &SemiDenseMap,
    pred: &PredictionSet,
    cfg: &RobustConfig,
    mode: FusionMode,
) -> Result<(Raster<f64>, f64), FusionError> {
    let p = Problem::new(&state.log_depth, semi, pred, mode)?;
    let (g, g_s) = p.gradient(state.log_depth.values(), state.scale.ln(), cfg);
    let g = Raster::from_vec(p.width, p.height, g).expect("same size as state");
    Ok((g, g_s))
}

/// Per-call diagnostics of [`optimize_with`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrace {
    /// Cost after each accepted update, starting with the initial cost.
    pub costs: Vec<f64>,
    pub rejected_depth_steps: usize,
    pub rejected_scale_steps: usize,
    pub cg_iterations: usize,
}

/// Runs `cfg.gn_iterations` alternations of depth and scale steps.
pub fn optimize(
    state: &FusionState,
    semi: &SemiDenseMap,
    pred: &PredictionSet,
    cfg: &RobustConfig,
    mode: FusionMode,
) -> Result<FusionState, FusionError> {
    optimize_with(state, semi, pred, cfg, mode, ScaleUpdate::Estimate).map(|(s, _)| s)
}

pub fn optimize_with(
    state: &FusionState,
    semi: &SemiDenseMap,
    pred: &PredictionSet,
    cfg: &RobustConfig,
    mode: FusionMode,
    scale_update: ScaleUpdate,
) -> Result<(FusionState, FusionTrace), FusionError> {
    cfg.validate()?;
    if !(state.scale > 0.0) || !state.scale.is_finite() {
        return Err(FusionError::InvalidConfig(format!("scale must be positive, got {}", state.scale)));
    }
    let problem = Problem::new(&state.log_depth, semi, pred, mode)?;
    let mut trace = FusionTrace::default();
    let mut x = state.log_depth.values().to_vec();
    let mut ln_s = state.scale.ln();

    if mode == FusionMode::LeastSquaresScale {
        // Work on the stereo scale: undo the previous metric shift, aligning
        // the start with the stereo depths as well as possible.
        let shift = match scale_update {
            ScaleUpdate::Estimate => scale_irls(&problem.semi, &x, ln_s, cfg.delta_semi)?,
            ScaleUpdate::Hold => ln_s,
        };
        x.iter_mut().for_each(|v| *v -= shift);
        gauss_newton(&problem, &mut x, 0.0, cfg, ScaleUpdate::Hold, &mut trace)?;
        let ln_s = match scale_update {
            ScaleUpdate::Estimate => {
                let ld = pred.log_depth.values();
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..x.len() {
                    num += problem.net_info[i] * (ld[i] - x[i]);
                    den += problem.net_info[i];
                }
                num / den
            }
            ScaleUpdate::Hold => state.scale.ln(),
        };
        x.iter_mut().for_each(|v| *v += ln_s);
        return Ok((finish(state, x, ln_s, cfg, problem.width, problem.height), trace));
    }

    gauss_newton(&problem, &mut x, ln_s, cfg, scale_update, &mut trace).map(|ln| ln_s = ln)?;
    Ok((finish(state, x, ln_s, cfg, problem.width, problem.height), trace))
}

fn finish(state: &FusionState, x: Vec<f64>, ln_s: f64, cfg: &RobustConfig, w: usize, h: usize) -> FusionState {
    FusionState {
        log_depth: Raster::from_vec(w, h, x).expect("state size"),
        scale: ln_s.exp(),
        iteration: state.iteration + cfg.gn_iterations,
    }
}

/// Alternating Gauss-Newton with step halving; returns the final `ln s`.
fn gauss_newton(
    problem: &Problem,
    x: &mut Vec<f64>,
    mut ln_s: f64,
    cfg: &RobustConfig,
    scale_update: ScaleUpdate,
    trace: &mut FusionTrace,
) -> Result<f64, FusionError> {
    let mut cost = problem.cost(x, ln_s, cfg);
    trace.costs.push(cost);
    let mut trial = vec![0.0; x.len()];
    for _ in 0..cfg.gn_iterations {
        let (h, b) = problem.normal_equations(x, ln_s, cfg);
        let (step, report) = pcg(&h, &b, cfg.cg_tol, cfg.cg_max_iters)?;
        trace.cg_iterations += report.iterations;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            for ((tv, xv), dv) in trial.iter_mut().zip(x.iter()).zip(&step) {
                *tv = xv + t * dv;
            }
            let c = problem.cost(&trial, ln_s, cfg);
            if c <= cost {
                std::mem::swap(x, &mut trial);
                cost = c;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if accepted {
            trace.costs.push(cost);
        } else {
            trace.rejected_depth_steps += 1;
        }

        if scale_update == ScaleUpdate::Estimate {
            match scale_irls(&problem.semi, x, ln_s, cfg.delta_semi) {
                Ok(candidate) => {
                    let c = problem.cost(x, candidate, cfg);
                    if c <= cost {
                        ln_s = candidate;
                        cost = c;
                        trace.costs.push(cost);
                    } else {
                        trace.rejected_scale_steps += 1;
                    }
                }
                Err(FusionError::NoSemiDenseSupport) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ln_s)
}

#[cfg(test)]
mod tests;
