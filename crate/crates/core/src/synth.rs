//! Analytic test scenes: a slanted plane with patches of noise texture on a
//! flat background, rendered by exact ray casting.

use std::fs;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::Frame;
use crate::eval::save_depth_png;
use crate::geometry::{CameraIntrinsics, Pose, Raster};
use crate::semidense::IntensityImage;

/// Camera used by the synthetic sequences.
pub fn synthetic_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 200.0,
        fy: 200.0,
        cx: 127.5,
        cy: 95.5,
        width: 256,
        height: 192,
    }
}

/// One octave of value noise: hashed lattice values, smoothly interpolated.
#[derive(Debug, Clone, PartialEq)]
struct Octave {
    /// Lattice spacing (metres).
    cell: f64,
    amp: f64,
    salt: u64,
}

impl Octave {
    fn lattice(&self, i: i64, j: i64) -> f64 {
        // splitmix64 finaliser over the lattice coordinates.
        let mut z = self
            .salt
            .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn value(&self, u: f64, v: f64) -> f64 {
        let (fu, fv) = (u / self.cell, v / self.cell);
        let (iu, iv) = (fu.floor(), fv.floor());
        let (tu, tv) = (smoothstep(fu - iu), smoothstep(fv - iv));
        let (i, j) = (iu as i64, iv as i64);
        let a = self.lattice(i, j) * (1.0 - tu) + self.lattice(i + 1, j) * tu;
        let b = self.lattice(i, j + 1) * (1.0 - tu) + self.lattice(i + 1, j + 1) * tu;
        self.amp * (a * (1.0 - tv) + b * tv)
    }
}

/// World plane `n · X = offset` with in-plane coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneScene {
    normal: Vector3<f64>,
    offset: f64,
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    background: f64,
    detail: Vec<Octave>,
    envelope: Option<Octave>,
    /// Envelope level where texture starts to appear.
    threshold: f64,
}

/// Envelope range over which texture fades in.
const FADE: f64 = 0.15;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl PlaneScene {
    /// Untextured plane through `(0, 0, z0)` whose depth seen from the
    /// origin camera is `z0 / (1 − slope_x·u − slope_y·v)` for normalised
    /// image coordinates.
    pub fn slanted(z0: f64, slope_x: f64, slope_y: f64) -> Self {
        let normal = Vector3::new(-slope_x, -slope_y, 1.0);
        let origin = Vector3::new(0.0, 0.0, z0);
        let e1 = Vector3::new(1.0, 0.0, slope_x).normalize();
        let e2 = normal.cross(&e1).normalize();
        Self {
            normal,
            offset: z0,
            origin,
            e1,
            e2,
            background: 0.5,
            detail: Vec::new(),
            envelope: None,
            threshold: 0.0,
        }
    }

    /// Adds two-octave value-noise texture in patches. A coarse noise field
    /// switches texture on where it exceeds `threshold` (in `[-1, 1]`); the
    /// mean intensity is the same everywhere, so patches have no edges.
    pub fn with_texture(mut self, seed: u64, threshold: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.detail = [(0.06, 0.25), (0.15, 0.15)]
            .iter()
            .map(|&(cell, amp)| Octave {
                cell,
                amp,
                salt: rng.random(),
            })
            .collect();
        self.envelope = Some(Octave {
            cell: 0.4,
            amp: 1.0,
            salt: rng.random(),
        });
        self.threshold = threshold;
        self
    }

    /// Reflectance in `[0, 1]` at plane coordinates `(u, v)`.
    pub fn albedo(&self, u: f64, v: f64) -> f64 {
        let gain = match &self.envelope {
            Some(e) => smoothstep((e.value(u, v) - self.threshold) / FADE),
            None => 1.0,
        };
        if gain == 0.0 {
            return self.background;
        }
        let t: f64 = self.detail.iter().map(|o| o.value(u, v)).sum();
        (self.background + gain * t).clamp(0.0, 1.0)
    }

    /// Ray-casts one view. Returns intensities and metric z-depth; pixels
    /// whose ray misses the plane get intensity 0 and depth 0.
    pub fn render(&self, k: &CameraIntrinsics, pose: &Pose) -> (Raster<f64>, Raster<f64>) {
        let r = pose.rotation_matrix();
        let o = pose.translation();
        let n_dot_o = self.normal.dot(&o);
        let mut img = Raster::filled(k.width, k.height, 0.0);
        let mut depth = Raster::filled(k.width, k.height, 0.0);
        for y in 0..k.height {
            for x in 0..k.width {
                let ray_c = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let ray = r * ray_c;
                let denom = self.normal.dot(&ray);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let lambda = (self.offset - n_dot_o) / denom;
                if lambda <= 0.0 {
                    continue;
                }
                let p = o + ray * lambda - self.origin;
                let i = y * k.width + x;
                img[i] = self.albedo(self.e1.dot(&p), self.e2.dot(&p));
                depth[i] = lambda;
            }
        }
        (img, depth)
    }
}

/// Two exact renders of the standard scene: the keyframe at the origin and a
/// reference view shifted by `baseline` along x, with keyframe ground truth.
#[derive(Debug, Clone)]
pub struct TwoView {
    pub keyframe: IntensityImage,
    pub reference: IntensityImage,
    pub kf_pose: Pose,
    pub ref_pose: Pose,
    pub depth: Raster<f64>,
}

pub fn two_view_plane(seed: u64, baseline: f64) -> TwoView {
    let k = synthetic_intrinsics();
    let scene = standard_scene(seed, SequenceParams::default().texture_threshold);
    let kf_pose = Pose::identity();
    let ref_pose = Pose::from_translation(Vector3::new(baseline, 0.0, 0.0));
    let (i0, depth) = scene.render(&k, &kf_pose);
    let (i1, _) = scene.render(&k, &ref_pose);
    TwoView {
        keyframe: IntensityImage::new(i0),
        reference: IntensityImage::new(i1),
        kf_pose,
        ref_pose,
        depth,
    }
}

/// Layout of the standard synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    pub frames: usize,
    pub scene_seed: u64,
    /// Radius of the circular camera path (metres).
    pub radius: f64,
    /// Angle advanced per frame along the path (radians).
    pub step: f64,
    /// Texture patch threshold (see [`PlaneScene::with_texture`]).
    pub texture_threshold: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            frames: 20,
            scene_seed: 0,
            radius: 0.033,
            step: 51f64.to_radians(),
            texture_threshold: 0.3,
        }
    }
}

/// The standard scene: a plane 2 m away tilted so depths span about
/// 1.4–3.3 m across the view.
pub fn standard_scene(seed: u64, texture_threshold: f64) -> PlaneScene {
    PlaneScene::slanted(2.0, 0.4, 0.3).with_texture(seed, texture_threshold)
}

/// Camera-to-world pose of frame `k`: a circle in the image plane starting
/// at the origin, with a slight yaw wobble.
pub fn trajectory_pose(params: &SequenceParams, k: usize) -> Pose {
    let th = params.step * k as f64;
    let t = Vector3::new(params.radius * (th.cos() - 1.0), params.radius * th.sin(), 0.0);
    let yaw = 0.004 * th.sin();
    Pose::new(UnitQuaternion::from_euler_angles(0.0, yaw, 0.0), t)
}

/// Renders a sequence into frames with 8-bit colour, like a real camera.
pub fn synthetic_frames(params: &SequenceParams) -> Vec<Frame> {
    let k = synthetic_intrinsics();
    let scene = standard_scene(params.scene_seed, params.texture_threshold);
    (0..params.frames)
        .map(|i| {
            let pose = trajectory_pose(params, i);
            let (img, depth) = scene.render(&k, &pose);
            let rgb = img.map(|&v| {
                let q = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                [q, q, q]
            });
            let holes = depth.map(|&d| !(d > 0.0));
            Frame {
                timestamp: i as f64 / 30.0,
                token: format!("{:.6}", i as f64 / 30.0),
                intensity: IntensityImage::from_rgb8(&rgb),
                rgb,
                gt_depth: depth,
                holes,
                pose,
            }
        })
        .collect()
}

/// Writes frames as a TUM-format sequence directory (with `intrinsics.txt`).
pub fn write_tum_sequence(dir: impl AsRef<Path>, frames: &[Frame], k: &CameraIntrinsics) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let mut rgb_list = String::from("# color images\n# timestamp filename\n");
    let mut depth_list = String::from("# depth maps\n# timestamp filename\n");
    let mut gt = String::from("# ground truth trajectory\n# timestamp tx ty tz qx qy qz qw\n");
    for f in frames {
        let name = &f.token;
        let rgb_rel = format!("rgb/{name}.png");
        let depth_rel = format!("depth/{name}.png");
        let flat: Vec<u8> = f.rgb.values().iter().flatten().copied().collect();
        image::RgbImage::from_vec(f.rgb.width() as u32, f.rgb.height() as u32, flat)
            .expect("buffer matches dimensions")
            .save(dir.join(&rgb_rel))
            .map_err(std::io::Error::other)?;
        save_depth_png(&f.gt_depth, Some(&f.holes), dir.join(&depth_rel), crate::datasets::DEFAULT_DEPTH_SCALE)
            .map_err(std::io::Error::other)?;
        rgb_list.push_str(&format!("{name} {rgb_rel}\n"));
        depth_list.push_str(&format!("{name} {depth_rel}\n"));
        let t = f.pose.translation();
        let q = f.pose.rotation().quaternion();
        gt.push_str(&format!(
            "{name} {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    fs::write(dir.join("rgb.txt"), rgb_list)?;
    fs::write(dir.join("depth.txt"), depth_list)?;
    fs::write(dir.join("groundtruth.txt"), gt)?;
    fs::write(
        dir.join("intrinsics.txt"),
        format!(
            "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ),
    )
}
