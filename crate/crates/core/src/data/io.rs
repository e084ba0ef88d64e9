//! Bit-exact file formats:
//!
//! * `points.bin` little-endian `f32` quadruples `(x, y, z, intensity)`, no header
//! * `image.pgm`  binary PGM (`P5`, maxval 255)
//! * `calib.json` see [`crate::geometry::CalibFile`]
//! * `boxes.json` JSON list of `{center, size, yaw}`
//!
//! A dataset is a directory of `scene_%05d/` folders holding those four files.

use std::path::{Path, PathBuf};

use super::{Box3, GrayImage, LidarPoint, SceneFrame};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;

pub const POINT_RECORD_BYTES: usize = 16;

pub fn write_pointcloud(path: impl AsRef<Path>, points: &[LidarPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(points.len() * POINT_RECORD_BYTES);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, p.intensity] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pointcloud(path: impl AsRef<Path>) -> Result<Vec<LidarPoint>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let whole = bytes.len() - bytes.len() % POINT_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::malformed(
            path,
            whole as u64,
            format!(
                "{} trailing bytes do not form a {POINT_RECORD_BYTES}-byte record",
                bytes.len() - whole
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(POINT_RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
            LidarPoint::new(f(0) as f64, f(1) as f64, f(2) as f64, f(3))
        })
        .collect())
}

pub fn write_image(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.pixels);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed(path, pos as u64, "truncated PGM header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::malformed(path, 0, "not a binary PGM (P5)"));
    }
    let num = |k: usize| {
        fields[k]
            .1
            .parse::<u32>()
            .map_err(|_| Error::malformed(path, fields[k].0 as u64, "bad PGM header number"))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::malformed(path, fields[3].0 as u64, "only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = (width * height) as usize;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::malformed(
            path,
            (pos + raster.len().min(need)) as u64,
            format!("raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[Box3]) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(boxes).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<Box3>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:05}"))
}

pub fn write_frame(dir: impl AsRef<Path>, frame: &SceneFrame) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pointcloud(dir.join("points.bin"), &frame.points)?;
    write_image(dir.join("image.pgm"), &frame.image)?;
    frame.cam.write_calib(dir.join("calib.json"))?;
    write_boxes(dir.join("boxes.json"), &frame.boxes)
}

pub fn read_frame(dir: impl AsRef<Path>) -> Result<SceneFrame> {
    let dir = dir.as_ref();
    let cam = CameraModel::read_calib(dir.join("calib.json"))?;
    let image = read_image(dir.join("image.pgm"))?;
    if image.width != cam.width || image.height != cam.height {
        return Err(Error::Dimension(format!(
            "{}: image is {}x{} but calibration says {}x{}",
            dir.display(),
            image.width,
            image.height,
            cam.width,
            cam.height
        )));
    }
    Ok(SceneFrame {
        points: read_pointcloud(dir.join("points.bin"))?,
        image,
        cam,
        boxes: read_boxes(dir.join("boxes.json"))?,
        walls: Vec::new(),
        seed: None,
    })
}

/// Scene directories under `root`, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        if entry.path().is_dir() && name.to_string_lossy().starts_with("scene_") {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Writes `frames` as `scene_00000/`, `scene_00001/`, ... under `root`.
pub fn write_dataset(root: &Path, frames: &[SceneFrame]) -> Result<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let dir = scene_dir(root, i);
            write_frame(&dir, f)?;
            Ok(dir)
        })
        .collect()
}

/// Every scene under `root`, in directory-name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SceneFrame>> {
    if !root.is_dir() {
        return Err(Error::Prerequisite(format!("dataset directory {} does not exist", root.display())));
    }
    let dirs = list_scenes(root)?;
    if dirs.is_empty() {
        return Err(Error::Prerequisite(format!("no scene_* directories under {}", root.display())));
    }
    dirs.iter().map(read_frame).collect()
}
