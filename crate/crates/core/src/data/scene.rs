use serde::{Deserialize, Serialize};

use super::{Box3, GrayImage, LidarPoint, SceneFrame};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Vec3};
use crate::rng::SceneRng;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const PLACEMENT_MARGIN: f64 = 0.3;

const SKY_LUMA: u8 = 30;
const GROUND_LUMA: [f64; 2] = [70.0, 95.0];
const WALL_LUMA: f64 = 125.0;
const BOX_LUMA_NEAR: f64 = 240.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// Lowest and highest beam elevation in degrees.
    pub elevation_deg: [f64; 2],
    pub max_range: f64,
    pub noise_sigma: f64,
    pub origin: [f64; 3],
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            n_azimuth: 512,
            n_elevation: 32,
            elevation_deg: [-25.0, 5.0],
            max_range: 40.0,
            noise_sigma: 0.01,
            origin: [0.0, 0.0, 0.0],
        }
    }
}

/// Front camera looking along ego +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub position: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fx: 32.0,
            fy: 32.0,
            position: [0.0, 0.0, 0.0],
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
            Pose::forward_camera(Vec3::from(self.position)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Inclusive range of object counts.
    pub n_boxes: [usize; 2],
    pub box_length: [f64; 2],
    pub box_width: [f64; 2],
    pub box_height: [f64; 2],
    /// Planar distance band in which object centers are placed.
    pub placement_range: [f64; 2],
    /// Objects are placed within ±this azimuth (degrees) of ego +x.
    pub placement_half_angle_deg: f64,
    pub ground_z: f64,
    pub wall_probability: f64,
    pub wall_range: [f64; 2],
    pub wall_length: [f64; 2],
    pub wall_thickness: f64,
    pub wall_height: f64,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_boxes: [2, 5],
            box_length: [2.5, 4.5],
            box_width: [1.5, 2.0],
            box_height: [1.2, 1.6],
            placement_range: [3.5, 11.0],
            placement_half_angle_deg: 38.0,
            ground_z: -1.9,
            wall_probability: 0.5,
            wall_range: [11.6, 12.2],
            wall_length: [4.0, 9.0],
            wall_thickness: 0.4,
            wall_height: 3.0,
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_boxes[0] > self.n_boxes[1] {
            return bad("n_boxes range is inverted");
        }
        for (name, r) in [
            ("box_length", self.box_length),
            ("box_width", self.box_width),
            ("box_height", self.box_height),
            ("placement_range", self.placement_range),
            ("wall_range", self.wall_range),
            ("wall_length", self.wall_length),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} must be a positive, ordered range")));
            }
        }
        if self.lidar.n_azimuth < 1 || self.lidar.n_elevation < 1 {
            return bad("LiDAR ray counts must be at least 1");
        }
        if !(self.lidar.noise_sigma >= 0.0) {
            return bad("LiDAR noise sigma must be non-negative");
        }
        if !(self.lidar.max_range > 0.0) {
            return bad("LiDAR max range must be positive");
        }
        if !(0.0..=1.0).contains(&self.wall_probability) {
            return bad("wall probability must be in [0, 1]");
        }
        if self.camera.width < 1 || self.camera.height < 1 {
            return bad("camera dims must be at least 1");
        }
        Ok(())
    }
}

/// Surface hit by a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Object { axis: usize },
    Wall,
    Ground,
}

struct Scene<'a> {
    cfg: &'a SceneConfig,
    boxes: &'a [Box3],
    walls: &'a [Box3],
}

impl Scene<'_> {
    fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Surface)> {
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |t: f64, s: Surface| {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, s));
            }
        };
        for b in self.boxes {
            if let Some((t, axis)) = b.intersect(origin, dir) {
                consider(t, Surface::Object { axis });
            }
        }
        for w in self.walls {
            if let Some((t, _)) = w.intersect(origin, dir) {
                consider(t, Surface::Wall);
            }
        }
        if dir.z < 0.0 {
            let t = (self.cfg.ground_z - origin.z) / dir.z;
            if t > 0.0 {
                consider(t, Surface::Ground);
            }
        }
        best
    }
}

fn ground_checker(p: &Vec3) -> usize {
    ((p.x.floor() as i64 + p.y.floor() as i64).rem_euclid(2)) as usize
}

fn rects_overlap(a: &Box3, b: &Box3, margin: f64) -> bool {
    let inflate = |bx: &Box3| Box3 {
        size: [bx.size[0] + 2.0 * margin, bx.size[1] + 2.0 * margin, bx.size[2]],
        ..*bx
    };
    let (a, b) = (inflate(a), inflate(b));
    let (ca, cb) = (a.corners_xy(), b.corners_xy());
    // separating axis test over the four edge normals
    for yaw in [a.yaw, b.yaw] {
        for (nx, ny) in [(yaw.cos(), yaw.sin()), (-yaw.sin(), yaw.cos())] {
            let proj = |cs: &[(f64, f64); 4]| {
                cs.iter()
                    .map(|(x, y)| x * nx + y * ny)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let ((alo, ahi), (blo, bhi)) = (proj(&ca), proj(&cb));
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

fn sample_box(rng: &mut SceneRng, cfg: &SceneConfig) -> Box3 {
    let half = cfg.placement_half_angle_deg.to_radians();
    let range = rng.range(cfg.placement_range[0], cfg.placement_range[1]);
    let az = rng.range(-half, half);
    let l = rng.range(cfg.box_length[0], cfg.box_length[1]);
    let w = rng.range(cfg.box_width[0], cfg.box_width[1]);
    let h = rng.range(cfg.box_height[0], cfg.box_height[1]);
    let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
    Box3 {
        center: [range * az.cos(), range * az.sin(), cfg.ground_z + h / 2.0],
        size: [l, w, h],
        yaw,
    }
}

fn sample_wall(rng: &mut SceneRng, cfg: &SceneConfig) -> Box3 {
    let half = cfg.placement_half_angle_deg.to_radians();
    let range = rng.range(cfg.wall_range[0], cfg.wall_range[1]);
    let az = rng.range(-half, half);
    let l = rng.range(cfg.wall_length[0], cfg.wall_length[1]);
    Box3 {
        center: [range * az.cos(), range * az.sin(), cfg.ground_z + cfg.wall_height / 2.0],
        size: [cfg.wall_thickness, l, cfg.wall_height],
        yaw: az,
    }
}

fn place<F>(rng: &mut SceneRng, placed: &[Box3], seed: u64, what: &str, mut sample: F) -> Result<Box3>
where
    F: FnMut(&mut SceneRng) -> Box3,
{
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let candidate = sample(rng);
        let clear_of_ego = candidate
            .corners_xy()
            .iter()
            .all(|(x, y)| x.hypot(*y) > 2.0);
        if clear_of_ego && placed.iter().all(|p| !rects_overlap(p, &candidate, PLACEMENT_MARGIN)) {
            return Ok(candidate);
        }
    }
    Err(Error::Placement {
        seed,
        reason: format!("no free spot for {what} after {MAX_PLACEMENT_ATTEMPTS} attempts"),
    })
}

/// Generates one frame; the result is a pure function of `(cfg, seed)`.
///
/// Objects are rejection-sampled on the ground plane inside the front
/// sector, an optional facade wall is placed behind them, LiDAR returns come
/// from ray casting against boxes, walls and the ground with Gaussian range
/// noise, and the camera image is a ray-cast rendering with depth-shaded
/// objects, a checkered ground and a uniform sky.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneFrame> {
    cfg.validate()?;
    let cam = cfg.camera.camera()?;
    let mut rng = SceneRng::new(seed);

    let n_boxes = cfg.n_boxes[0] + rng.below(cfg.n_boxes[1] - cfg.n_boxes[0] + 1);
    let mut boxes: Vec<Box3> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let b = place(&mut rng, &boxes, seed, "object box", |r| sample_box(r, cfg))?;
        boxes.push(b);
    }
    let mut walls = Vec::new();
    if rng.uniform() < cfg.wall_probability {
        let w = place(&mut rng, &boxes, seed, "wall", |r| sample_wall(r, cfg))?;
        walls.push(w);
    }

    let scene = Scene {
        cfg,
        boxes: &boxes,
        walls: &walls,
    };
    let points = cast_lidar(&scene, &mut rng);
    let image = render_camera(&scene, &cam);

    Ok(SceneFrame {
        points,
        image,
        cam,
        boxes,
        walls,
        seed: Some(seed),
    })
}

fn cast_lidar(scene: &Scene<'_>, rng: &mut SceneRng) -> Vec<LidarPoint> {
    let lc = &scene.cfg.lidar;
    let origin = Vec3::from(lc.origin);
    let mut points = Vec::new();
    for i in 0..lc.n_azimuth {
        let az = std::f64::consts::TAU * i as f64 / lc.n_azimuth as f64;
        for j in 0..lc.n_elevation {
            let frac = if lc.n_elevation == 1 {
                0.5
            } else {
                j as f64 / (lc.n_elevation - 1) as f64
            };
            let el = (lc.elevation_deg[0] + frac * (lc.elevation_deg[1] - lc.elevation_deg[0])).to_radians();
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let Some((t, surface)) = scene.cast(&origin, &dir) else {
                continue;
            };
            if t > lc.max_range {
                continue;
            }
            // draw noise unconditionally so the stream does not depend on sigma
            let noise = rng.normal() * lc.noise_sigma;
            let p = origin + dir * (t + noise);
            let intensity = match surface {
                Surface::Object { .. } => 0.8,
                Surface::Wall => 0.1,
                Surface::Ground => 0.15 + 0.1 * ground_checker(&p) as f32,
            };
            points.push(LidarPoint::new(p.x, p.y, p.z, intensity));
        }
    }
    points
}

fn render_camera(scene: &Scene<'_>, cam: &CameraModel) -> GrayImage {
    let mut img = GrayImage::new(cam.width, cam.height);
    let origin = cam.center();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.ray_direction(u as f64 + 0.5, v as f64 + 0.5);
            let luma = match scene.cast(&origin, &dir) {
                None => SKY_LUMA as f64,
                Some((t, surface)) => {
                    let depth = t; // camera-frame depth: dir has unit forward component
                    match surface {
                        Surface::Object { axis } => {
                            let face = [0.0, -8.0, 8.0][axis];
                            (BOX_LUMA_NEAR - 6.0 * depth + face).clamp(150.0, 250.0)
                        }
                        Surface::Wall => WALL_LUMA - 0.5 * depth,
                        Surface::Ground => GROUND_LUMA[ground_checker(&(origin + dir * t))],
                    }
                }
            };
            img.set(u, v, luma.round() as u8);
        }
    }
    img
}

/// `n` frames with per-frame seeds derived from `cfg.seed`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<SceneFrame>> {
    (0..n)
        .map(|i| generate_scene(cfg, frame_seed(cfg.seed, i)))
        .collect()
}

pub(crate) fn frame_seed(seed: u64, index: usize) -> u64 {
    SceneRng::derive(seed, index as u64 + 1).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneConfig {
        SceneConfig {
            lidar: LidarConfig {
                noise_sigma: 0.0,
                ..LidarConfig::default()
            },
            ..SceneConfig::default()
        }
    }

    #[test]
    fn determinism() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 9).unwrap(), generate_scene(&cfg, 9).unwrap());
        assert_ne!(generate_scene(&cfg, 9).unwrap().points, generate_scene(&cfg, 10).unwrap().points);
    }

    #[test]
    fn noiseless_single_box_points_lie_on_its_surface() {
        let cfg = SceneConfig {
            n_boxes: [1, 1],
            wall_probability: 0.0,
            placement_half_angle_deg: 10.0,
            ..quiet()
        };
        let frame = generate_scene(&cfg, 1).unwrap();
        let b = frame.boxes[0];
        let on_box: Vec<_> = frame
            .points
            .iter()
            .filter(|p| (p.z - cfg.ground_z).abs() > 1e-6)
            .collect();
        assert!(!on_box.is_empty());
        for p in on_box {
            assert!(b.surface_distance(&p.position()) < 1e-9);
        }
    }

    #[test]
    fn empty_scene_points_on_ground() {
        let cfg = SceneConfig {
            n_boxes: [0, 0],
            wall_probability: 0.0,
            ..SceneConfig::default()
        };
        let frame = generate_scene(&cfg, 3).unwrap();
        assert!(!frame.points.is_empty());
        let bound = 6.0 * cfg.lidar.noise_sigma;
        for p in &frame.points {
            assert!((p.z - cfg.ground_z).abs() <= bound, "z = {}", p.z);
        }
    }

    #[test]
    fn boxes_do_not_overlap() {
        let cfg = SceneConfig::default();
        for s in 0..20 {
            let f = generate_scene(&cfg, s).unwrap();
            let all: Vec<_> = f.boxes.iter().chain(&f.walls).collect();
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    assert!(!rects_overlap(all[i], all[j], 0.0));
                }
            }
        }
    }

    #[test]
    fn impossible_placement_names_the_seed() {
        let cfg = SceneConfig {
            n_boxes: [30, 30],
            ..SceneConfig::default()
        };
        match generate_scene(&cfg, 77) {
            Err(Error::Placement { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn intensities_in_unit_range_and_image_has_sky() {
        let f = generate_scene(&SceneConfig::default(), 5).unwrap();
        assert!(f.points.iter().all(|p| (0.0..=1.0).contains(&p.intensity)));
        assert_eq!(f.image.get(32, 0), SKY_LUMA);
    }
}
