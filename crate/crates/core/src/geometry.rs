//! Pinhole camera model, rigid poses and row-major rasters.
//!
//! Depth at this layer is metric depth along the optical axis. Integer pixel
//! coordinates address pixel centres.

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("raster has {got} values, expected {width}x{height}")]
    RasterSize {
        width: usize,
        height: usize,
        got: usize,
    },
}

/// Homogeneous 3D point `(x, y, z, w)`.
pub type HomPoint = Vector4<f64>;

/// Continuous pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (width as f64 - 1.0)
            && self.y <= (height as f64 - 1.0)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "raster dimensions must be non-zero".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for the same camera sampled at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Ray through `x` with unit z component.
    pub fn unproject_ray(&self, x: PixelCoord) -> Vector3<f64> {
        Vector3::new((x.x - self.cx) / self.fx, (x.y - self.cy) / self.fy, 1.0)
    }

    /// Mean focal length, used to normalise depth predictions.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Back-projects pixel `x` at depth `d` to the homogeneous point `(d·ray, 1)`.
pub fn backproject(
    x: PixelCoord,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<HomPoint, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let ray = k.unproject_ray(x);
    Ok(Vector4::new(depth * ray.x, depth * ray.y, depth, 1.0))
}

/// Projects and dehomogenises a point in camera coordinates.
pub fn project(k: &CameraIntrinsics, p: &HomPoint) -> Result<PixelCoord, GeometryError> {
    // A homogeneous point with w < 0 is the same point with every sign flipped.
    let (px, py, pz) = if p.w < 0.0 {
        (-p.x, -p.y, -p.z)
    } else {
        (p.x, p.y, p.z)
    };
    if !(pz > 0.0) {
        return Err(GeometryError::BehindCamera(pz));
    }
    Ok(PixelCoord::new(
        k.fx * px / pz + k.cx,
        k.fy * py / pz + k.cy,
    ))
}

/// Rigid transform, stored as the map from the local frame into the parent
/// frame (for a camera pose `T_WC`: camera coordinates into world).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    iso: Isometry3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            iso: Isometry3::identity(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            iso: Isometry3::from_parts(Translation3::from(translation), rotation),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from raw quaternion components, normalising them.
    pub fn from_quaternion_xyzw(t: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(q, t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.iso.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    pub fn with_translation(&self, t: Vector3<f64>) -> Self {
        Self::new(self.iso.rotation, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.iso.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self {
            iso: self.iso.inverse(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            iso: self.iso * other.iso,
        }
    }

    /// The 3x4 matrix `[R | t]`.
    pub fn matrix3x4(&self) -> [[f64; 4]; 3] {
        let r = self.rotation_matrix();
        let t = self.translation();
        let mut m = [[0.0; 4]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = r[(i, j)];
            }
            row[3] = t[i];
        }
        m
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.iso.rotation * v + self.iso.translation.vector
    }
}

/// Applies `R·p + w·t`, preserving the homogeneous coordinate.
pub fn transform(pose: &Pose, p: &HomPoint) -> HomPoint {
    let xyz = pose.iso.rotation * Vector3::new(p.x, p.y, p.z) + pose.iso.translation.vector * p.w;
    Vector4::new(xyz.x, xyz.y, xyz.z, p.w)
}

/// Row-major 2D grid. Pixel `i` sits at `(i % width, i / width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<V> {
    width: usize,
    height: usize,
    values: Vec<V>,
}

impl<V: Clone> Raster<V> {
    pub fn filled(width: usize, height: usize, value: V) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }
}

impl<V> Raster<V> {
    pub fn from_vec(width: usize, height: usize, values: Vec<V>) -> Result<Self, GeometryError> {
        if values.len() != width * height {
            return Err(GeometryError::RasterSize {
                width,
                height,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    /// Index of the pixel to the right, if it is on the same row.
    #[inline]
    pub fn right_of(&self, i: usize) -> Option<usize> {
        (i % self.width + 1 < self.width).then_some(i + 1)
    }

    /// Index of the pixel below, if it exists.
    #[inline]
    pub fn below(&self, i: usize) -> Option<usize> {
        (i + self.width < self.values.len()).then_some(i + self.width)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &V {
        &self.values[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut V {
        &mut self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [V] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<V> {
        self.values
    }

    pub fn map<U>(&self, f: impl FnMut(&V) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<V> std::ops::Index<usize> for Raster<V> {
    type Output = V;
    #[inline]
    fn index(&self, i: usize) -> &V {
        &self.values[i]
    }
}

impl<V> std::ops::IndexMut<usize> for Raster<V> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut V {
        &mut self.values[i]
    }
}
