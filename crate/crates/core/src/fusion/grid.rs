//! Symmetric matrices with the sparsity of the 4-connected pixel grid, and a
//! Jacobi-preconditioned conjugate-gradient solver for them.

use nalgebra::DMatrix;

use super::FusionError;

/// Increases in a row of the preconditioned residual norm `√(rᵀM⁻¹r)` after
/// which CG gives up.
pub const CG_DIVERGENCE_RUN: usize = 10;

/// Symmetric `n × n` matrix over a `width × height` grid. Row `i` couples to
/// `i ± 1` (same row) and `i ± width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrix {
    width: usize,
    height: usize,
    pub(crate) diag: Vec<f64>,
    /// `right[i]` is entry `(i, i+1)`; zero in the last column.
    pub(crate) right: Vec<f64>,
    /// `down[i]` is entry `(i, i+width)`; zero in the last row.
    pub(crate) down: Vec<f64>,
}

impl GridMatrix {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            diag: vec![0.0; n],
            right: vec![0.0; n],
            down: vec![0.0; n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// `y = A x`.
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        let w = self.width;
        let n = self.len();
        assert!(x.len() == n && y.len() == n);
        // Couplings are stored once per pair; the last column and last row
        // hold zeros, so rows need no column boundary cases.
        let row = |i: usize| -> f64 {
            let mut v = self.diag[i] * x[i];
            if i + 1 < n {
                v += self.right[i] * x[i + 1];
            }
            if i >= 1 {
                v += self.right[i - 1] * x[i - 1];
            }
            if i + w < n {
                v += self.down[i] * x[i + w];
            }
            if i >= w {
                v += self.down[i - w] * x[i - w];
            }
            v
        };
        if n <= 2 * w + 2 {
            for (i, yv) in y.iter_mut().enumerate() {
                *yv = row(i);
            }
            return;
        }
        let (lo, hi) = (w + 1, n - w - 1);
        for (i, yv) in y[..lo].iter_mut().enumerate() {
            *yv = row(i);
        }
        for (i, yv) in y[hi..].iter_mut().enumerate() {
            *yv = row(hi + i);
        }
        // Interior: every neighbour exists; equal-length shifted views let
        // the loop vectorise without bounds checks.
        let m = hi - lo;
        let ys = &mut y[lo..hi];
        let (xc, xr, xl, xd, xu) = (&x[lo..hi], &x[lo + 1..hi + 1], &x[lo - 1..hi - 1], &x[lo + w..hi + w], &x[lo - w..hi - w]);
        let (dg, rc, rl, dc, du) = (
            &self.diag[lo..hi],
            &self.right[lo..hi],
            &self.right[lo - 1..hi - 1],
            &self.down[lo..hi],
            &self.down[lo - w..hi - w],
        );
        for j in 0..m {
            ys[j] = dg[j] * xc[j] + rc[j] * xr[j] + rl[j] * xl[j] + dc[j] * xd[j] + du[j] * xu[j];
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        self.mul_into(x, &mut y);
        y
    }

    /// Smallest Gershgorin margin `a_ii − Σ_j≠i |a_ij|` over all rows. A
    /// positive value proves positive definiteness of a symmetric matrix.
    pub fn gershgorin_margin(&self) -> f64 {
        let w = self.width;
        let n = self.len();
        let mut margin = f64::INFINITY;
        for i in 0..n {
            let mut off = 0.0;
            if i + 1 < n {
                off += self.right[i].abs();
            }
            if i >= 1 {
                off += self.right[i - 1].abs();
            }
            if i + w < n {
                off += self.down[i].abs();
            }
            if i >= w {
                off += self.down[i - w].abs();
            }
            margin = margin.min(self.diag[i] - off);
        }
        margin
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let w = self.width;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n && self.right[i] != 0.0 {
                m[(i, i + 1)] = self.right[i];
                m[(i + 1, i)] = self.right[i];
            }
            if i + w < n && self.down[i] != 0.0 {
                m[(i, i + w)] = self.down[i];
                m[(i + w, i)] = self.down[i];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final `‖b − A x‖ / ‖b‖` (0 when `b = 0`).
    pub relative_residual: f64,
    pub converged: bool,
}

const LANES: usize = 8;

/// Dot product with independent partial sums, so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Couplings of `D^{-1/2} A D^{-1/2}`, whose diagonal is all ones. Plain CG
/// on this system produces the Jacobi-preconditioned iterates of `A` while
/// streaming fewer arrays per iteration.
struct UnitGrid {
    width: usize,
    right: Vec<f64>,
    down: Vec<f64>,
}

impl UnitGrid {
    fn new(a: &GridMatrix, scale: &[f64]) -> Self {
        let w = a.width;
        let n = a.len();
        let mut right = vec![0.0; n];
        let mut down = vec![0.0; n];
        for i in 0..n {
            if i + 1 < n {
                right[i] = a.right[i] * scale[i] * scale[i + 1];
            }
            if i + w < n {
                down[i] = a.down[i] * scale[i] * scale[i + w];
            }
        }
        Self { width: w, right, down }
    }

    /// Sets `p ← r + βp` and `y = Â p`; returns `p·y`. The direction update
    /// runs one grid row ahead of the product so both share a single pass.
    fn step_dot(&self, r: &[f64], beta: f64, p: &mut [f64], y: &mut [f64]) -> f64 {
        let w = self.width;
        let n = p.len();
        let advance = |p: &mut [f64], from: usize, to: usize| {
            for (pv, rv) in p[from..to].iter_mut().zip(&r[from..to]) {
                *pv = rv + beta * *pv;
            }
        };
        let row = |p: &[f64], i: usize| -> f64 {
            let mut v = p[i];
            if i + 1 < n {
                v += self.right[i] * p[i + 1];
            }
            if i >= 1 {
                v += self.right[i - 1] * p[i - 1];
            }
            if i + w < n {
                v += self.down[i] * p[i + w];
            }
            if i >= w {
                v += self.down[i - w] * p[i - w];
            }
            v
        };
        let mut edge = 0.0;
        if n <= 3 * w + 2 + LANES {
            advance(p, 0, n);
            for i in 0..n {
                y[i] = row(p, i);
                edge += p[i] * y[i];
            }
            return edge;
        }
        let lo = w + 1;
        let hi = lo + (n - w - 1 - lo) / LANES * LANES;
        let mut done = lo + w;
        advance(p, 0, done);
        for i in 0..lo {
            y[i] = row(p, i);
            edge += p[i] * y[i];
        }
        let mut acc = [0.0; LANES];
        for c in (lo..hi).step_by(LANES) {
            let need = (c + LANES + w).min(n);
            advance(p, done, need);
            done = need;
            let ys = &mut y[c..c + LANES];
            let (pc, pr, pl, pd, pu) = (&p[c..c + LANES], &p[c + 1..c + 1 + LANES], &p[c - 1..c - 1 + LANES], &p[c + w..c + w + LANES], &p[c - w..c - w + LANES]);
            let (rc, rl, dc, du) = (
                &self.right[c..c + LANES],
                &self.right[c - 1..c - 1 + LANES],
                &self.down[c..c + LANES],
                &self.down[c - w..c - w + LANES],
            );
            for l in 0..LANES {
                let v = pc[l] + rc[l] * pr[l] + rl[l] * pl[l] + dc[l] * pd[l] + du[l] * pu[l];
                ys[l] = v;
                acc[l] += pc[l] * v;
            }
        }
        advance(p, done, n);
        for i in hi..n {
            y[i] = row(p, i);
            edge += p[i] * y[i];
        }
        acc.iter().sum::<f64>() + edge
    }
}

/// One CG update on the scaled system: `y += αp`, `r̂ −= αÂp`. Returns
/// `(r̂·r̂, Σ r̂²·a_ii)`; the latter is the squared residual norm of the
/// original system.
fn cg_update(y: &mut [f64], r: &mut [f64], p: &[f64], ap: &[f64], diag: &[f64], alpha: f64) -> (f64, f64) {
    let mut rr = [0.0; LANES];
    let mut orig = [0.0; LANES];
    let n = y.len();
    let body = n - n % LANES;
    for c in (0..body).step_by(LANES) {
        let (ys, rs) = (&mut y[c..c + LANES], &mut r[c..c + LANES]);
        let (ps, aps, ds) = (&p[c..c + LANES], &ap[c..c + LANES], &diag[c..c + LANES]);
        for l in 0..LANES {
            ys[l] += alpha * ps[l];
            rs[l] -= alpha * aps[l];
            let sq = rs[l] * rs[l];
            rr[l] += sq;
            orig[l] += sq * ds[l];
        }
    }
    let (mut rr_t, mut orig_t) = (0.0, 0.0);
    for i in body..n {
        y[i] += alpha * p[i];
        r[i] -= alpha * ap[i];
        let sq = r[i] * r[i];
        rr_t += sq;
        orig_t += sq * diag[i];
    }
    (rr.iter().sum::<f64>() + rr_t, orig.iter().sum::<f64>() + orig_t)
}

/// Solves `A x = b` from `x = 0`. Stops at `‖r‖ ≤ tol·‖b‖` or after
/// `max_iters`; a non-positive diagonal or a residual that grows for
/// [`CG_DIVERGENCE_RUN`] consecutive iterations is reported as divergence.
pub fn pcg(a: &GridMatrix, b: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, CgReport), FusionError> {
    let n = a.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            CgReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let mut scale = Vec::with_capacity(n);
    for &d in &a.diag {
        if !(d > 0.0) || !d.is_finite() {
            return Err(FusionError::CgDivergence { iteration: 0 });
        }
        scale.push(1.0 / d.sqrt());
    }
    let unit = UnitGrid::new(a, &scale);
    let mut y = vec![0.0; n];
    let mut r: Vec<f64> = b.iter().zip(&scale).map(|(b, s)| b * s).collect();
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut beta = 0.0;
    let mut r_norm = b_norm;
    let mut rising = 0;
    let mut it = 0;
    while it < max_iters && r_norm > tol * b_norm {
        let pap = unit.step_dot(&r, beta, &mut p, &mut ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(FusionError::CgDivergence { iteration: it });
        }
        let alpha = rr / pap;
        let (rr_new, orig) = cg_update(&mut y, &mut r, &p, &ap, &a.diag, alpha);
        it += 1;
        if rr_new > rr {
            rising += 1;
            if rising >= CG_DIVERGENCE_RUN {
                return Err(FusionError::CgDivergence { iteration: it });
            }
        } else {
            rising = 0;
        }
        r_norm = orig.sqrt();
        beta = rr_new / rr;
        rr = rr_new;
    }
    for (yv, s) in y.iter_mut().zip(&scale) {
        *yv *= s;
    }
    Ok((
        y,
        CgReport {
            iterations: it,
            relative_residual: r_norm / b_norm,
            converged: r_norm <= tol * b_norm,
        },
    ))
}
