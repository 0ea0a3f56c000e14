//! TUM RGB-D format sequences: list files, trajectory, timestamp
//! association and frame loading.
//!
//! A sequence directory holds `rgb.txt`, `depth.txt` and `groundtruth.txt`
//! (lines `timestamp payload`, `#` comments), plus the images they name.
//! An optional `intrinsics.txt` holding `fx fy cx cy width height` overrides
//! the default Kinect calibration.

mod images;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose, Raster};
use crate::semidense::IntensityImage;

pub use images::{downsample_area, downsample_nearest, load_depth_png, load_rgb_png, DEFAULT_DEPTH_SCALE};

pub const DEFAULT_TOLERANCE: f64 = 0.02;
pub const QUATERNION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {reason}")]
    MalformedLine { file: String, line: usize, reason: String },
    #[error("{file}:{line}: quaternion norm {norm} is not within 1e-3 of 1")]
    NonUnitQuaternion { file: String, line: usize, norm: f64 },
    #[error("{path}: {reason}")]
    BadImageFormat { path: PathBuf, reason: String },
    #[error("pose scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Error from a single trajectory line, before file context is attached.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseLineError {
    #[error("{0}")]
    Malformed(String),
    #[error("quaternion norm {0} is not within 1e-3 of 1")]
    NonUnitQuaternion(f64),
}

/// One line of a list file. `token` is the timestamp exactly as written.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamped<T> {
    pub timestamp: f64,
    pub token: String,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceIndex {
    pub root: PathBuf,
    pub rgb: Vec<Stamped<PathBuf>>,
    pub depth: Vec<Stamped<PathBuf>>,
    pub poses: Vec<Stamped<Pose>>,
    pub intrinsics: CameraIntrinsics,
}

/// Calibration used when a sequence carries no `intrinsics.txt`.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 525.0,
        fy: 525.0,
        cx: 319.5,
        cy: 239.5,
        width: 640,
        height: 480,
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_timestamp(tok: &str) -> Result<f64, String> {
    tok.parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .ok_or_else(|| format!("bad timestamp '{tok}'"))
}

/// Sorts by timestamp and drops repeated timestamps (first occurrence wins).
fn sort_dedup<T>(mut v: Vec<Stamped<T>>) -> Vec<Stamped<T>> {
    v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    v.dedup_by(|b, a| a.timestamp == b.timestamp);
    v
}

/// Parses an image list (`timestamp path`).
pub fn parse_list(text: &str, file: &str) -> Result<Vec<Stamped<String>>, DatasetError> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let malformed = |reason: String| DatasetError::MalformedLine {
            file: file.to_string(),
            line,
            reason,
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(malformed(format!("expected 2 fields, found {}", toks.len())));
        }
        let timestamp = parse_timestamp(toks[0]).map_err(malformed)?;
        out.push(Stamped {
            timestamp,
            token: toks[0].to_string(),
            payload: toks[1].to_string(),
        });
    }
    Ok(sort_dedup(out))
}

/// Parses `timestamp tx ty tz qx qy qz qw` into a camera-to-world pose.
pub fn parse_pose_line(line: &str) -> Result<(f64, Pose), PoseLineError> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 8 {
        return Err(PoseLineError::Malformed(format!("expected 8 fields, found {}", toks.len())));
    }
    let mut v = [0.0; 8];
    for (slot, tok) in v.iter_mut().zip(&toks) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| PoseLineError::Malformed(format!("bad number '{tok}'")))?;
    }
    let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
    if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
        return Err(PoseLineError::NonUnitQuaternion(norm));
    }
    let pose = Pose::from_quaternion_xyzw(Vector3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7]);
    Ok((v[0], pose))
}

pub fn parse_trajectory(text: &str, file: &str) -> Result<Vec<Stamped<Pose>>, DatasetError> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let (timestamp, pose) = parse_pose_line(l).map_err(|e| match e {
            PoseLineError::Malformed(reason) => DatasetError::MalformedLine {
                file: file.to_string(),
                line,
                reason,
            },
            PoseLineError::NonUnitQuaternion(norm) => DatasetError::NonUnitQuaternion {
                file: file.to_string(),
                line,
                norm,
            },
        })?;
        let token = l.split_whitespace().next().unwrap_or_default().to_string();
        out.push(Stamped {
            timestamp,
            token,
            payload: pose,
        });
    }
    Ok(sort_dedup(out))
}

/// Parses `fx fy cx cy width height`.
pub fn parse_intrinsics(text: &str, file: &str) -> Result<CameraIntrinsics, DatasetError> {
    let (line, l) = content_lines(text).next().ok_or_else(|| DatasetError::MalformedLine {
        file: file.to_string(),
        line: 1,
        reason: "no calibration line".into(),
    })?;
    let malformed = |reason: String| DatasetError::MalformedLine {
        file: file.to_string(),
        line,
        reason,
    };
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(malformed(format!("expected 6 fields, found {}", toks.len())));
    }
    let num = |i: usize| toks[i].parse::<f64>().map_err(|_| malformed(format!("bad number '{}'", toks[i])));
    let size = |i: usize| toks[i].parse::<usize>().map_err(|_| malformed(format!("bad size '{}'", toks[i])));
    let k = CameraIntrinsics {
        fx: num(0)?,
        fy: num(1)?,
        cx: num(2)?,
        cy: num(3)?,
        width: size(4)?,
        height: size(5)?,
    };
    k.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(k)
}

fn read_required(path: &Path) -> Result<String, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_index(dir: impl AsRef<Path>) -> Result<SequenceIndex, DatasetError> {
    let root = dir.as_ref().to_path_buf();
    let list = |name: &str| -> Result<Vec<Stamped<PathBuf>>, DatasetError> {
        let text = read_required(&root.join(name))?;
        Ok(parse_list(&text, name)?
            .into_iter()
            .map(|e| Stamped {
                timestamp: e.timestamp,
                token: e.token,
                payload: root.join(e.payload),
            })
            .collect())
    };
    let rgb = list("rgb.txt")?;
    let depth = list("depth.txt")?;
    let poses = parse_trajectory(&read_required(&root.join("groundtruth.txt"))?, "groundtruth.txt")?;
    let calib = root.join("intrinsics.txt");
    let intrinsics = if calib.is_file() {
        parse_intrinsics(&read_required(&calib)?, "intrinsics.txt")?
    } else {
        default_intrinsics()
    };
    Ok(SequenceIndex {
        root,
        rgb,
        depth,
        poses,
        intrinsics,
    })
}

/// Greedy one-to-one matching of two sorted timestamp lists: all pairs within
/// `tolerance` are taken in order of increasing time difference (ties by
/// position), skipping pairs whose entries are already used.
pub fn associate_timestamps(a: &[f64], b: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    let mut lo = 0;
    for (i, &ta) in a.iter().enumerate() {
        while lo < b.len() && ta - b[lo] > tolerance {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] - ta <= tolerance {
            candidates.push(((b[j] - ta).abs(), i, j));
            j += 1;
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// A fully associated frame before its images are read.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptor {
    /// RGB timestamp.
    pub timestamp: f64,
    /// RGB timestamp as written in `rgb.txt`; names prediction files.
    pub token: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub pose: Pose,
}

/// Matches rgb to depth, then the matched pairs (by rgb time) to poses.
pub fn associate(index: &SequenceIndex, tolerance: f64) -> Vec<FrameDescriptor> {
    let times = |v: &[Stamped<PathBuf>]| v.iter().map(|e| e.timestamp).collect::<Vec<_>>();
    let rgb_t = times(&index.rgb);
    let rd = associate_timestamps(&rgb_t, &times(&index.depth), tolerance);
    let pair_t: Vec<f64> = rd.iter().map(|&(i, _)| rgb_t[i]).collect();
    let pose_t: Vec<f64> = index.poses.iter().map(|e| e.timestamp).collect();
    associate_timestamps(&pair_t, &pose_t, tolerance)
        .into_iter()
        .map(|(k, p)| {
            let (i, j) = rd[k];
            FrameDescriptor {
                timestamp: index.rgb[i].timestamp,
                token: index.rgb[i].token.clone(),
                rgb_path: index.rgb[i].payload.clone(),
                depth_path: index.depth[j].payload.clone(),
                pose: index.poses[p].payload,
            }
        })
        .collect()
}

/// Anything carrying a camera pose.
pub trait HasPose {
    fn pose_mut(&mut self) -> &mut Pose;
}

impl HasPose for FrameDescriptor {
    fn pose_mut(&mut self) -> &mut Pose {
        &mut self.pose
    }
}

impl HasPose for Frame {
    fn pose_mut(&mut self) -> &mut Pose {
        &mut self.pose
    }
}

impl HasPose for Pose {
    fn pose_mut(&mut self) -> &mut Pose {
        self
    }
}

/// Multiplies every translation by `alpha`, emulating the unknown scale of a
/// monocular trajectory. Rotations are untouched.
pub fn inject_pose_scale<T: HasPose + Clone>(frames: &[T], alpha: f64) -> Result<Vec<T>, DatasetError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DatasetError::NonPositiveScale(alpha));
    }
    Ok(frames
        .iter()
        .cloned()
        .map(|mut f| {
            let p = f.pose_mut();
            *p = p.with_translation(p.translation() * alpha);
            f
        })
        .collect())
}

/// A loaded frame at working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub token: String,
    pub rgb: Raster<[u8; 3]>,
    pub intensity: IntensityImage,
    /// Metres; holes hold 0.
    pub gt_depth: Raster<f64>,
    pub holes: Raster<bool>,
    pub pose: Pose,
}

/// Working resolution and depth encoding for [`load_frame`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            width: crate::predictions::DEFAULT_WIDTH,
            height: crate::predictions::DEFAULT_HEIGHT,
            depth_scale: DEFAULT_DEPTH_SCALE,
        }
    }
}

/// Reads both images of a frame and resamples them to the working size:
/// colour by area averaging, depth by nearest neighbour.
pub fn load_frame(desc: &FrameDescriptor, opts: &LoadOptions) -> Result<Frame, DatasetError> {
    let rgb = load_rgb_png(&desc.rgb_path)?;
    let (depth, holes) = load_depth_png(&desc.depth_path, opts.depth_scale)?;
    if !rgb.same_shape(&depth) {
        return Err(DatasetError::BadImageFormat {
            path: desc.depth_path.clone(),
            reason: format!(
                "depth {}x{} does not match rgb {}x{}",
                depth.width(),
                depth.height(),
                rgb.width(),
                rgb.height()
            ),
        });
    }
    let rgb = downsample_area(&rgb, opts.width, opts.height);
    let gt_depth = downsample_nearest(&depth, opts.width, opts.height);
    let holes = downsample_nearest(&holes, opts.width, opts.height);
    Ok(Frame {
        timestamp: desc.timestamp,
        token: desc.token.clone(),
        intensity: IntensityImage::from_rgb8(&rgb),
        rgb,
        gt_depth,
        holes,
        pose: desc.pose,
    })
}

/// Indexes, associates and loads a whole sequence. Returns the frames and the
/// intrinsics at working resolution.
pub fn load_sequence(
    dir: impl AsRef<Path>,
    opts: &LoadOptions,
    tolerance: f64,
) -> Result<(Vec<Frame>, CameraIntrinsics), DatasetError> {
    let index = parse_index(dir)?;
    let frames = associate(&index, tolerance)
        .iter()
        .map(|d| load_frame(d, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((frames, index.intrinsics.rescaled(opts.width, opts.height)))
}
