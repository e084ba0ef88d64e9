//! Rigid transforms and the pinhole camera.
//!
//! Axis conventions used throughout the crate:
//!
//! ```text
//! ego frame     x forward, y left,  z up
//! camera frame  z forward, x right, y down
//! ```
//!
//! A camera looking straight ahead along ego +x therefore has the
//! camera-to-ego rotation
//!
//! ```text
//!     | 0  0  1 |
//! R = |-1  0  0 |
//!     | 0 -1  0 |
//! ```
//!
//! No lens distortion is modelled; images are assumed rectified.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform mapping sensor-frame coordinates into the ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if !(off <= ORTHONORMAL_TOL) {
            return Err(Error::Precondition(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::Precondition(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Precondition("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `yaw` radians about the z axis.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: t,
        }
    }

    /// Camera at `position` looking along ego +x with no roll or pitch.
    pub fn forward_camera(position: Vec3) -> Self {
        Self {
            rotation: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            translation: position,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a pose from a homogeneous 4×4 matrix; the bottom row must be
    /// exactly `(0, 0, 0, 1)`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Precondition(format!(
                "homogeneous bottom row must be (0,0,0,1), got {bottom:?}"
            )));
        }
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

pub fn transform_point(pose: &Pose, p: &Vec3) -> Vec3 {
    pose.transform_point(p)
}

pub fn invert_pose(pose: &Pose) -> Pose {
    pose.inverse()
}

/// Image coordinates and camera-frame depth of a visible point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole intrinsics plus the camera-to-ego pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pose: Pose,
    ego_to_cam: Pose,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, pose: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Precondition(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::Precondition(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
            ego_to_cam: pose.inverse(),
        })
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    /// Ego-frame point to pixel coordinates, or `None` when the point is
    /// behind the camera or falls outside `[0, width) × [0, height)`.
    pub fn project(&self, p_ego: &Vec3) -> Option<Projection> {
        let p = self.ego_to_cam.transform_point(p_ego);
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Projection { u, v, depth: p.z })
    }

    /// Pixel plus camera-frame depth back to an ego-frame point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::Precondition(format!(
                "unproject needs positive depth, got {depth}"
            )));
        }
        let p_cam = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        Ok(self.pose.transform_point(&p_cam))
    }

    /// Ego-frame direction of the ray through pixel `(u, v)`, scaled so its
    /// camera-frame forward component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.pose.rotation() * d_cam
    }

    pub fn center(&self) -> Vec3 {
        *self.pose.translation()
    }

    pub fn read_calib(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let calib: CalibFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        calib.into_camera()
    }

    pub fn write_calib(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&CalibFile::from_camera(self))
            .map_err(|e| Error::json(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn project(cam: &CameraModel, p_ego: &Vec3) -> Option<Projection> {
    cam.project(p_ego)
}

pub fn unproject(cam: &CameraModel, u: f64, v: f64, depth: f64) -> Result<Vec3> {
    cam.unproject(u, v, depth)
}

/// On-disk calibration record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major homogeneous camera-to-ego transform.
    #[serde(rename = "T_cam_to_ego")]
    pub t_cam_to_ego: Vec<f64>,
}

impl CalibFile {
    pub fn from_camera(cam: &CameraModel) -> Self {
        let m = cam.pose.to_matrix();
        let t_cam_to_ego = (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect();
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            t_cam_to_ego,
        }
    }

    pub fn into_camera(self) -> Result<CameraModel> {
        if self.t_cam_to_ego.len() != 16 {
            return Err(Error::Precondition(format!(
                "T_cam_to_ego needs 16 numbers, got {}",
                self.t_cam_to_ego.len()
            )));
        }
        let m = Matrix4::from_row_slice(&self.t_cam_to_ego);
        let pose = Pose::from_matrix(&m)?;
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)
    }
}
