//! Epipolar line search for a single keyframe pixel.
//!
//! Depth hypotheses are walked in 1-pixel steps along the epipolar line in
//! the reference image. Internally each hypothesis is an inverse depth `ρ`,
//! so that the point at infinity (`ρ = 0`) is representable and the stepping
//! is independent of the (arbitrary) scale of the trajectory.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{CameraIntrinsics, PixelCoord, Pose};

use super::image::IntensityImage;
use super::{StereoConfig, StereoError};

/// Number of samples in the photometric stencil.
pub const STENCIL: usize = 5;

pub type Residuals = [f64; STENCIL];

/// One semi-dense depth measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarObservation {
    pub pixel: PixelCoord,
    /// Raster index of `pixel` in the keyframe.
    pub index: usize,
    pub depth: f64,
    pub error5: Residuals,
    pub jacobian: Residuals,
    pub variance: f64,
}

/// Straight segment in the reference image, parameterised by inverse depth at
/// both ends (`rho_start < rho_end`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarSegment {
    pub start: PixelCoord,
    pub end: PixelCoord,
    pub rho_start: f64,
    pub rho_end: f64,
}

impl EpipolarSegment {
    pub fn length(&self) -> f64 {
        (self.end.x - self.start.x).hypot(self.end.y - self.start.y)
    }
}

/// Keyframe / reference image pair with the relative pose precomputed.
pub struct StereoPair<'a> {
    pub keyframe: &'a IntensityImage,
    pub reference: &'a IntensityImage,
    pub k: CameraIntrinsics,
    /// Rotation taking keyframe coordinates into reference coordinates.
    rot: Matrix3<f64>,
    /// Translation of the same transform.
    trans: Vector3<f64>,
    /// Reference camera centre in keyframe coordinates.
    centre: Vector3<f64>,
}

impl<'a> StereoPair<'a> {
    /// `kf_pose` and `ref_pose` are camera-to-world poses.
    pub fn new(
        keyframe: &'a IntensityImage,
        reference: &'a IntensityImage,
        kf_pose: &Pose,
        ref_pose: &Pose,
        k: CameraIntrinsics,
    ) -> Self {
        let rel = ref_pose.inverse().compose(kf_pose);
        let centre = kf_pose.inverse().compose(ref_pose).translation();
        Self {
            keyframe,
            reference,
            k,
            rot: rel.rotation_matrix(),
            trans: rel.translation(),
            centre,
        }
    }

    pub fn baseline(&self) -> f64 {
        self.centre.norm()
    }

    /// Unit direction of the epipolar line through `x` in the keyframe.
    pub fn keyframe_epipolar_dir(&self, x: PixelCoord) -> Result<(f64, f64), StereoError> {
        let c = &self.centre;
        let k = &self.k;
        let dx = c.z * (x.x - k.cx) - k.fx * c.x;
        let dy = c.z * (x.y - k.cy) - k.fy * c.y;
        let n = dx.hypot(dy);
        if !(n > 1e-12 * (1.0 + c.norm())) || self.baseline() < 1e-12 {
            return Err(StereoError::DegenerateBaseline);
        }
        Ok((dx / n, dy / n))
    }

    /// Keyframe intensities and rotated rays of the five stencil points.
    /// Without a usable epipolar direction (no relative motion) the stencil
    /// falls back to the image x axis.
    fn stencil(&self, x: PixelCoord) -> Result<Stencil, StereoError> {
        let (ux, uy) = self.keyframe_epipolar_dir(x).unwrap_or((1.0, 0.0));
        let mut s = Stencil {
            values: [0.0; STENCIL],
            rays: [Vector3::zeros(); STENCIL],
        };
        for j in 0..STENCIL {
            let o = j as f64 - 2.0;
            let p = PixelCoord::new(x.x + o * ux, x.y + o * uy);
            s.values[j] = self
                .keyframe
                .sample(p.x, p.y)
                .ok_or(StereoError::OutOfBounds)?;
            s.rays[j] = self.rot * self.k.unproject_ray(p);
        }
        Ok(s)
    }

    #[inline]
    fn project_rho(&self, ray: &Vector3<f64>, rho: f64) -> Result<PixelCoord, StereoError> {
        let p = ray + self.trans * rho;
        if !(p.z > 0.0) {
            return Err(StereoError::BehindCamera);
        }
        Ok(PixelCoord::new(
            self.k.fx * p.x / p.z + self.k.cx,
            self.k.fy * p.y / p.z + self.k.cy,
        ))
    }

    fn residuals_rho(&self, s: &Stencil, rho: f64) -> Result<Residuals, StereoError> {
        let mut e = [0.0; STENCIL];
        for j in 0..STENCIL {
            let q = self.project_rho(&s.rays[j], rho)?;
            let v = self
                .reference
                .sample(q.x, q.y)
                .ok_or(StereoError::OutOfBounds)?;
            e[j] = v - s.values[j];
        }
        Ok(e)
    }

    /// Inverse depth of the reference-image point `q`, assumed to lie on the
    /// epipolar line of `ray`. `along_x` selects the better-conditioned axis.
    fn rho_at(&self, ray: &Vector3<f64>, q: PixelCoord, along_x: bool) -> f64 {
        let (n, a, az, t, tz) = if along_x {
            ((q.x - self.k.cx) / self.k.fx, ray.x, ray.z, self.trans.x, self.trans.z)
        } else {
            ((q.y - self.k.cy) / self.k.fy, ray.y, ray.z, self.trans.y, self.trans.z)
        };
        (a - n * az) / (n * tz - t)
    }

    /// Full search segment (`ρ` from 0 up to `1/min_depth`, capped at
    /// `max_disparity` pixels) and, if a prior is given, the sub-segment for
    /// depths in `[d − 2σ, d + 2σ]`.
    pub fn epipolar_segment(
        &self,
        x: PixelCoord,
        prior: Option<(f64, f64)>,
        cfg: &StereoConfig,
    ) -> Result<EpipolarSegment, StereoError> {
        let ray = self.rot * self.k.unproject_ray(x);
        self.segment_for_ray(&ray, prior, cfg)
    }

    fn segment_for_ray(
        &self,
        ray: &Vector3<f64>,
        prior: Option<(f64, f64)>,
        cfg: &StereoConfig,
    ) -> Result<EpipolarSegment, StereoError> {
        if self.baseline() < 1e-12 {
            return Err(StereoError::DegenerateBaseline);
        }
        let p_inf = self.project_rho(ray, 0.0)?;
        let rho_cap = 1.0 / cfg.min_depth;
        let p_cap = self.project_rho(ray, rho_cap)?;
        let full_len = (p_cap.x - p_inf.x).hypot(p_cap.y - p_inf.y);
        if full_len < 2.0 {
            return Err(StereoError::DegenerateBaseline);
        }
        let ux = (p_cap.x - p_inf.x) / full_len;
        let uy = (p_cap.y - p_inf.y) / full_len;
        let along_x = ux.abs() >= uy.abs();
        let (rho_end, p_end) = if full_len > cfg.max_disparity {
            let q = PixelCoord::new(p_inf.x + cfg.max_disparity * ux, p_inf.y + cfg.max_disparity * uy);
            (self.rho_at(ray, q, along_x), q)
        } else {
            (rho_cap, p_cap)
        };
        let full = EpipolarSegment {
            start: p_inf,
            end: p_end,
            rho_start: 0.0,
            rho_end,
        };
        let Some((d, sigma)) = prior else {
            return Ok(full);
        };

        let lo = (1.0 / (d + 2.0 * sigma)).max(0.0);
        let hi = if d - 2.0 * sigma > 0.0 {
            (1.0 / (d - 2.0 * sigma)).min(rho_end)
        } else {
            rho_end
        };
        if !(lo < hi) {
            return Ok(full);
        }
        let mut seg = EpipolarSegment {
            start: self.project_rho(ray, lo)?,
            end: self.project_rho(ray, hi)?,
            rho_start: lo,
            rho_end: hi,
        };
        if seg.length() < cfg.min_prior_window {
            // Widen around the prior's projection, staying on the full segment.
            let centre = self.project_rho(ray, 1.0 / d)?;
            let pos = (centre.x - p_inf.x) * ux + (centre.y - p_inf.y) * uy;
            let len_full = full.length();
            let half = 0.5 * cfg.min_prior_window;
            let (a, b) = if pos - half < 0.0 {
                (0.0, cfg.min_prior_window.min(len_full))
            } else if pos + half > len_full {
                ((len_full - cfg.min_prior_window).max(0.0), len_full)
            } else {
                (pos - half, pos + half)
            };
            let qa = PixelCoord::new(p_inf.x + a * ux, p_inf.y + a * uy);
            let qb = PixelCoord::new(p_inf.x + b * ux, p_inf.y + b * uy);
            seg = EpipolarSegment {
                start: qa,
                end: qb,
                rho_start: if a == 0.0 { 0.0 } else { self.rho_at(ray, qa, along_x) },
                rho_end: self.rho_at(ray, qb, along_x),
            };
        }
        Ok(seg)
    }

    /// Searches the epipolar line for the depth of keyframe pixel `x`.
    pub fn search_depth(
        &self,
        x: PixelCoord,
        index: usize,
        prior: Option<(f64, f64)>,
        cfg: &StereoConfig,
    ) -> Result<EpipolarObservation, StereoError> {
        let stencil = self.stencil(x)?;
        let centre_ray = stencil.rays[2];
        let seg = self.segment_for_ray(&centre_ray, prior, cfg)?;
        let len = seg.length();
        if len < 2.0 && prior.is_none() {
            return Err(StereoError::DegenerateBaseline);
        }
        let ux = (seg.end.x - seg.start.x) / len;
        let uy = (seg.end.y - seg.start.y) / len;
        let along_x = ux.abs() >= uy.abs();
        let steps = len.floor() as usize + 1;

        let mut rhos = Vec::with_capacity(steps);
        let mut errs: Vec<Option<(Residuals, f64)>> = Vec::with_capacity(steps);
        for k in 0..steps {
            let q = PixelCoord::new(seg.start.x + k as f64 * ux, seg.start.y + k as f64 * uy);
            let rho = if k == 0 {
                seg.rho_start
            } else {
                self.rho_at(&centre_ray, q, along_x)
            };
            rhos.push(rho);
            let e = if rho >= 0.0 {
                self.residuals_rho(&stencil, rho).ok()
            } else {
                None
            };
            errs.push(e.map(|e| (e, ssd(&e))));
        }

        let best = errs
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.as_ref().map(|(_, s)| (k, *s)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or(StereoError::NoMinimum)?
            .0;
        if best == 0 || best + 1 >= steps {
            return Err(StereoError::NoMinimum);
        }

        // Sub-step refinement: residuals are taken as linear between two
        // neighbouring steps, and the SSD of that model is minimised on each
        // bracket around a local minimum. Every local minimum is refined and
        // the one whose actual SSD at the refined position is lowest wins, so
        // a true match falling between two steps is not lost to a coarse
        // near-miss elsewhere.
        struct Candidate {
            ssd: f64,
            rho: f64,
            error5: Residuals,
            ka: usize,
            ea: Residuals,
            kb: usize,
            eb: Residuals,
        }
        let mut chosen: Option<Candidate> = None;
        for k in 1..steps - 1 {
            let (Some((e_prev, s_prev)), Some((e_k, s_k)), Some((e_next, s_next))) = (errs[k - 1], errs[k], errs[k + 1])
            else {
                continue;
            };
            if s_k > s_prev || s_k > s_next {
                continue;
            }
            let lower = bracket_min(&e_prev, &e_k);
            let upper = bracket_min(&e_k, &e_next);
            let (pos, ka, ea, kb, eb) = if upper.1 <= lower.1 {
                (k as f64 + upper.0, k, e_k, k + 1, e_next)
            } else {
                (k as f64 + lower.0 - 1.0, k - 1, e_prev, k, e_k)
            };
            let q = PixelCoord::new(seg.start.x + pos * ux, seg.start.y + pos * uy);
            let rho = self.rho_at(&centre_ray, q, along_x);
            if !(rho > 0.0) || !rho.is_finite() {
                continue;
            }
            let Ok(error5) = self.residuals_rho(&stencil, rho) else {
                continue;
            };
            let cand = Candidate {
                ssd: ssd(&error5),
                rho,
                error5,
                ka,
                ea,
                kb,
                eb,
            };
            if chosen.as_ref().is_none_or(|c| cand.ssd < c.ssd) {
                chosen = Some(cand);
            }
        }
        let Some(Candidate {
            rho,
            error5,
            ka,
            ea,
            kb,
            eb,
            ..
        }) = chosen
        else {
            return Err(StereoError::NoMinimum);
        };
        let depth = 1.0 / rho;

        // Larger ρ is the nearer depth.
        let (d_lo, e_lo, d_hi, e_hi) = (1.0 / rhos[kb], eb, 1.0 / rhos[ka], ea);
        if !d_hi.is_finite() {
            return Err(StereoError::DegenerateJacobian);
        }
        let jacobian = jacobian_fd(&e_lo, &e_hi, d_lo, d_hi)?;
        let variance = observation_variance(&jacobian)?;
        Ok(EpipolarObservation {
            pixel: x,
            index,
            depth,
            error5,
            jacobian,
            variance,
        })
    }

    /// Photometric residuals of the 5-point stencil at depth `d`.
    pub fn photometric_error(&self, x: PixelCoord, depth: f64) -> Result<Residuals, StereoError> {
        if !(depth > 0.0) {
            return Err(StereoError::BehindCamera);
        }
        let s = self.stencil(x)?;
        self.residuals_rho(&s, 1.0 / depth)
    }
}

struct Stencil {
    values: [f64; STENCIL],
    rays: [Vector3<f64>; STENCIL],
}

/// Minimiser `t ∈ [0, 1]` of `|a + t(b − a)|²` and the value there.
fn bracket_min(a: &Residuals, b: &Residuals) -> (f64, f64) {
    let mut da = 0.0;
    let mut dd = 0.0;
    for k in 0..STENCIL {
        let d = b[k] - a[k];
        da += a[k] * d;
        dd += d * d;
    }
    let t = if dd > 0.0 { (-da / dd).clamp(0.0, 1.0) } else { 0.0 };
    let mut v = 0.0;
    for k in 0..STENCIL {
        let e = a[k] + t * (b[k] - a[k]);
        v += e * e;
    }
    (t, v)
}

#[inline]
fn ssd(e: &Residuals) -> f64 {
    e.iter().map(|v| v * v).sum()
}

/// `I1(π(K·T1⁻¹T0·ρ(xⱼ, d))) − I0(xⱼ)` for the five points `xⱼ` spaced one
/// pixel apart along the keyframe epipolar line through `x`.
#[allow(clippy::too_many_arguments)]
pub fn photometric_error_5pt(
    i0: &IntensityImage,
    i1: &IntensityImage,
    x: PixelCoord,
    depth: f64,
    t0: &Pose,
    t1: &Pose,
    k: &CameraIntrinsics,
) -> Result<Residuals, StereoError> {
    StereoPair::new(i0, i1, t0, t1, *k).photometric_error(x, depth)
}

/// Epipolar search for a single pixel; see [`StereoPair::search_depth`].
#[allow(clippy::too_many_arguments)]
pub fn search_depth(
    i0: &IntensityImage,
    i1: &IntensityImage,
    x: PixelCoord,
    prior: Option<(f64, f64)>,
    t0: &Pose,
    t1: &Pose,
    k: &CameraIntrinsics,
    cfg: &StereoConfig,
) -> Result<EpipolarObservation, StereoError> {
    let index = x.y.round() as usize * i0.width() + x.x.round() as usize;
    StereoPair::new(i0, i1, t0, t1, *k).search_depth(x, index, prior, cfg)
}

/// Forward finite-difference Jacobian of the residuals w.r.t. depth.
pub fn jacobian_fd(
    e_lo: &Residuals,
    e_hi: &Residuals,
    d_lo: f64,
    d_hi: f64,
) -> Result<Residuals, StereoError> {
    let dd = d_hi - d_lo;
    if dd == 0.0 || !dd.is_finite() {
        return Err(StereoError::ZeroBaselineStep);
    }
    let mut j = [0.0; STENCIL];
    for (k, v) in j.iter_mut().enumerate() {
        *v = (e_hi[k] - e_lo[k]) / dd;
    }
    Ok(j)
}

/// `(JᵀJ)⁻¹`, in depth² units.
pub fn observation_variance(j: &Residuals) -> Result<f64, StereoError> {
    let jtj: f64 = j.iter().map(|v| v * v).sum();
    if !(jtj >= 1e-12) || !jtj.is_finite() {
        return Err(StereoError::DegenerateJacobian);
    }
    Ok(1.0 / jtj)
}
