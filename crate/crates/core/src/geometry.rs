//! Spatial types and the pinhole projection that aligns LiDAR points with
//! image pixels.
//!
//! A [`CalibratedCamera`] owns the 3×4 projection `K·[R|t]`. Points are
//! carried through the camera frame explicitly so the depth of every
//! projected point is available downstream without recomputation.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::mask::Mask2D;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

/// Sub-pixel image location plus camera-frame depth of the source point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFrame {
    Sensor,
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_id: u32,
    pub source_frame: SourceFrame,
}

impl PointCloud {
    pub fn new(frame_id: u32, points: Vec<Point3>) -> Self {
        Self {
            points,
            frame_id,
            source_frame: SourceFrame::Sensor,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a world←sensor pose. Point order is preserved.
    pub fn to_world(&self, world_from_sensor: &Matrix4<f64>) -> PointCloud {
        let rot = world_from_sensor.fixed_view::<3, 3>(0, 0).into_owned();
        let trans = world_from_sensor.fixed_view::<3, 1>(0, 3).into_owned();
        let points = self
            .points
            .iter()
            .map(|p| Point3::from_vector(&(rot * p.to_vector() + trans)))
            .collect();
        PointCloud {
            points,
            frame_id: self.frame_id,
            source_frame: SourceFrame::World,
        }
    }
}

/// Pinhole camera with validated intrinsics and rigid extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedCamera {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix3x4<f64>,
    width: u32,
    height: u32,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    intrinsics_inv: Matrix3<f64>,
    projection: Matrix3x4<f64>,
}

impl CalibratedCamera {
    /// `extrinsics` maps the cloud's frame into the camera frame.
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix3x4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidCamera(msg));
        if intrinsics.iter().chain(extrinsics.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite calibration entry".into());
        }
        if width == 0 || height == 0 {
            return bad(format!("image size {width}x{height}"));
        }
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return bad("intrinsics must be upper triangular with K[2][2] = 1".into());
        }
        let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        if !(fx > 0.0 && fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={fx}, fy={fy})"));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return bad(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            ));
        }
        let intrinsics_inv = match intrinsics.try_inverse() {
            Some(inv) => inv,
            None => return bad("intrinsics not invertible".into()),
        };
        let rotation: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let orth_err = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if orth_err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return bad(format!(
                "extrinsic rotation invalid (|R·Rᵀ − I| = {orth_err:e}, det = {det})"
            ));
        }
        let translation = extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
            rotation,
            translation,
            intrinsics_inv,
            projection: intrinsics * extrinsics,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix3x4<f64> {
        &self.extrinsics
    }

    /// `K·[R|t]`.
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Camera for clouds that have been moved to world coordinates with
    /// `world_from_sensor`.
    pub fn for_world_frame(&self, world_from_sensor: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let inv = world_from_sensor
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidArgument("pose not invertible".into()))?;
        let mut ext4 = Matrix4::identity();
        ext4.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.extrinsics);
        let composed = ext4 * inv;
        Self::new(
            self.intrinsics,
            composed.fixed_view::<3, 4>(0, 0).into_owned(),
            self.width,
            self.height,
        )
    }

    /// Projects one point; `None` when it is behind the camera or outside
    /// the half-open image rectangle.
    #[inline]
    pub fn project(&self, p: &Point3) -> Option<Pixel> {
        let pc = self.rotation * p.to_vector() + self.translation;
        let depth = pc.z;
        if !(depth > 0.0) {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[(0, 0)] * pc.x + k[(0, 1)] * pc.y) / depth + k[(0, 2)];
        let v = k[(1, 1)] * pc.y / depth + k[(1, 2)];
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Pixel { u, v, depth })
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Result of projecting a whole cloud: every input index lands in exactly
/// one of `entries` or `culled`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedCloud {
    pub width: u32,
    pub height: u32,
    pub entries: Vec<(usize, Pixel)>,
    pub culled: Vec<usize>,
}

impl ProjectedCloud {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }
}

/// Projects a cloud through the camera, keeping in-frustum points in input
/// order.
pub fn project_points(cloud: &PointCloud, cam: &CalibratedCamera) -> ProjectedCloud {
    project_points_with(cloud, cam, Exec::default())
}

pub fn project_points_with(cloud: &PointCloud, cam: &CalibratedCamera, exec: Exec) -> ProjectedCloud {
    let pts = &cloud.points;
    let entries = exec.filter_map_range(pts.len(), |i| cam.project(&pts[i]).map(|px| (i, px)));
    let mut culled = Vec::with_capacity(pts.len() - entries.len());
    let mut next = entries.iter().map(|(i, _)| *i).peekable();
    for i in 0..pts.len() {
        if next.peek() == Some(&i) {
            next.next();
        } else {
            culled.push(i);
        }
    }
    ProjectedCloud {
        width: cam.width,
        height: cam.height,
        entries,
        culled,
    }
}

/// Back-projects a pixel at its recorded depth into the cloud's frame.
pub fn lift_pixel(px: &Pixel, cam: &CalibratedCamera) -> Result<Point3, GeometryError> {
    if !(px.depth > 0.0) || !px.depth.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "depth must be positive, got {}",
            px.depth
        )));
    }
    let ray = cam.intrinsics_inv * Vector3::new(px.u, px.v, 1.0);
    let pc = ray * (px.depth / ray.z);
    let world = cam.rotation.transpose() * (pc - cam.translation);
    Ok(Point3::from_vector(&world))
}

/// Indices whose `(floor(u), floor(v))` cell is set in `mask`, ascending.
pub fn points_in_mask(projected: &ProjectedCloud, mask: &Mask2D) -> Result<Vec<usize>, GeometryError> {
    if mask.width() != projected.width || mask.height() != projected.height {
        return Err(GeometryError::InvalidArgument(format!(
            "mask is {}x{} but camera image is {}x{}",
            mask.width(),
            mask.height(),
            projected.width,
            projected.height
        )));
    }
    let mut out: Vec<usize> = projected
        .entries
        .iter()
        .filter(|(_, px)| mask.get(px.u.floor() as u32, px.v.floor() as u32))
        .map(|(i, _)| *i)
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
