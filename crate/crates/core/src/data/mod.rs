//! Synthetic multi-modal frames and their on-disk formats.

mod io;
mod scene;

pub use io::{
    list_scenes, read_boxes, read_dataset, read_frame, read_image, read_pointcloud, scene_dir, write_boxes,
    write_dataset, write_frame, write_image, write_pointcloud, POINT_RECORD_BYTES,
};
pub use scene::{generate_dataset, generate_scene, CameraConfig, LidarConfig, SceneConfig};

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, Vec3};

/// One LiDAR return. Coordinates are kept in double precision in memory and
/// stored as `f32` on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f32,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[(y * self.width + x) as usize] = value;
    }
}

/// Oriented box resting in the ego frame. `size` is (length, width, height)
/// along the box's local x, y, z axes; `yaw` rotates local x towards ego y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3 {
    pub fn center(&self) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], self.center[2])
    }

    pub fn half_extents(&self) -> Vec3 {
        Vec3::new(self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0)
    }

    /// Ego point expressed in the box frame.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.center();
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, d: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Whether the x–y footprint contains `(x, y)`.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(&Vec3::new(x, y, self.center[2]));
        l.x.abs() <= self.size[0] / 2.0 && l.y.abs() <= self.size[1] / 2.0
    }

    /// Footprint corners in ego x–y, counter-clockwise.
    pub fn corners_xy(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| (self.center[0] + c * a - s * b, self.center[1] + s * a + c * b))
    }

    /// Nearest positive ray parameter `t` at which `origin + t·dir` enters
    /// the box, with the local-frame outward normal axis hit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        let o = self.to_local(origin);
        let d = self.dir_to_local(dir);
        let h = self.half_extents();
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a].abs() > h[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-h[a] - o[a]) / d[a];
            let t2 = (h[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                axis = a;
            }
            t_far = t_far.min(hi);
        }
        (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis))
    }

    /// Distance from a point to the box surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let l = self.to_local(p);
        let h = self.half_extents();
        let q = Vec3::new(l.x.abs() - h.x, l.y.abs() - h.y, l.z.abs() - h.z);
        let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        (outside + inside).abs()
    }
}

/// One multi-modal sample: raw LiDAR points, the front camera image, its
/// calibration and the ground-truth object boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub points: Vec<LidarPoint>,
    pub image: GrayImage,
    pub cam: CameraModel,
    pub boxes: Vec<Box3>,
    /// Static structures (facades) that produce returns but are not objects.
    /// Only known for freshly generated frames; not persisted.
    pub walls: Vec<Box3>,
    /// Generation seed; `None` for frames loaded from disk.
    pub seed: Option<u64>,
}
