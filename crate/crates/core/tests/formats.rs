use std::path::{Path, PathBuf};

use mjp::data::{read_image, read_pointcloud, write_image, write_pointcloud};
use mjp::geometry::{CameraModel, Vec3};
use mjp::voxelgrid::{Dims3, MaskGrid};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden").join(name)
}

fn expected() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(golden("expected.json")).unwrap()).unwrap()
}

fn usizes(v: &serde_json::Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}

fn rewrite(name: &str, write: impl FnOnce(&Path)) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join(name);
    write(&out);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(golden(name)).unwrap(), "{name}");
}

#[test]
fn mask_with_scores() {
    let m = MaskGrid::read(golden("mask.mjpm")).unwrap();
    let e = expected();
    assert_eq!(m.dims(), Dims3::new(5, 3, 2));
    assert_eq!(m.threshold(), 0.5);
    assert!(m.scores().is_some());
    let kept: Vec<usize> = (0..m.len()).filter(|&j| m.is_kept(j)).collect();
    assert_eq!(kept, usizes(&e["mask_kept"]));
    rewrite("mask.mjpm", |p| m.write(p).unwrap());
}

#[test]
fn mask_bits_only() {
    let m = MaskGrid::read(golden("mask_bits.mjpm")).unwrap();
    assert!(m.scores().is_none());
    let kept: Vec<usize> = (0..m.len()).filter(|&j| m.is_kept(j)).collect();
    assert_eq!(kept, usizes(&expected()["mask_bits_kept"]));
    rewrite("mask_bits.mjpm", |p| m.write(p).unwrap());
}

#[test]
fn point_cloud() {
    let pts = read_pointcloud(golden("points.bin")).unwrap();
    let e = expected();
    let want = e["points"].as_array().unwrap();
    assert_eq!(pts.len(), want.len());
    for (p, w) in pts.iter().zip(want) {
        let w: Vec<f32> = w.as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32).collect();
        assert_eq!([p.x as f32, p.y as f32, p.z as f32, p.intensity], [w[0], w[1], w[2], w[3]]);
    }
    rewrite("points.bin", |p| write_pointcloud(p, &pts).unwrap());
}

#[test]
fn pgm_image() {
    let img = read_image(golden("image.pgm")).unwrap();
    let e = expected();
    assert_eq!(vec![img.width as usize, img.height as usize], usizes(&e["image_size"]));
    assert_eq!(img.pixels.iter().map(|&p| p as u64).sum::<u64>(), e["image_sum"].as_u64().unwrap());
    assert_eq!(img.get(6, 3) as u64, e["image_corner"].as_u64().unwrap());
    rewrite("image.pgm", |p| write_image(p, &img).unwrap());
}

#[test]
fn calibration() {
    let cam = CameraModel::read_calib(golden("calib.json")).unwrap();
    assert_eq!((cam.width, cam.height), (320, 240));
    assert_eq!(cam.center(), Vec3::new(0.25, 0.5, 1.6));
    // optical axis is ego +x yawed by 30 degrees
    let ahead = cam.center() + Vec3::new(30f64.to_radians().cos(), 30f64.to_radians().sin(), 0.0) * 10.0;
    let p = cam.project(&ahead).unwrap();
    assert!((p.u - cam.cx).abs() < 1e-9 && (p.v - cam.cy).abs() < 1e-9);
    rewrite("calib.json", |p| cam.write_calib(p).unwrap());
}

#[test]
fn corrupt_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(golden("mask.mjpm")).unwrap();
    bytes[0] = b'X';
    let bad = dir.path().join("bad.mjpm");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(MaskGrid::read(&bad), Err(mjp::Error::Malformed { offset: 0, .. })));

    let mut pts = std::fs::read(golden("points.bin")).unwrap();
    pts.pop();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, &pts).unwrap();
    assert!(read_pointcloud(&bad).is_err());
}
