//! Toy sparse backbones and the BEV encoder.
//!
//! LiDAR channels are per-column point statistics, camera channels are patch
//! descriptors splatted along the lifted patch rays, and the encoder stacks
//! both and applies one 3×3 mean filter. Pruned inputs are skipped: a pruned
//! mask cell contributes nothing and costs nothing.
//!
//! | channel | meaning                                   |
//! |---------|-------------------------------------------|
//! | 0       | `ln(1 + point count)`                     |
//! | 1       | mean z                                    |
//! | 2       | max z                                     |
//! | 3       | z variance (population)                   |
//! | 4       | mean intensity                            |
//! | 5       | splatted patch mean luminance (0..1)      |
//! | 6       | splatted patch gradient energy (0..1)     |
//! | 7       | camera hit count (`1/D` per entry)        |

use std::io::Write;
use std::path::Path;

use crate::data::{GrayImage, LidarPoint};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::projection::{FrustumFootprint, PatchGrid};
use crate::voxelgrid::{BlockMap, MaskGrid, VoxelGridSpec};

pub const LIDAR_CHANNELS: usize = 5;
pub const CAMERA_CHANNELS: usize = 3;
pub const BEV_CHANNELS: usize = LIDAR_CHANNELS + CAMERA_CHANNELS;

/// Dense `W × H × channels` map; cell `(ix, iy)` channel `c` lives at
/// `(iy * W + ix) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl BevFeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, col: usize) -> &[f64] {
        &self.values[col * self.channels..(col + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, col: usize) -> &mut [f64] {
        &mut self.values[col * self.channels..(col + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &BevFeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn scaled(&self, a: f64) -> BevFeatureMap {
        BevFeatureMap {
            values: self.values.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Header `{W, H, channels}` as little-endian `u32`, then `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::malformed(path, bytes.len() as u64, "truncated BEV header"));
        }
        let d = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (d(0), d(4), d(8));
        let n = width * height * channels;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::malformed(
                path,
                bytes.len().min(12 + 4 * n) as u64,
                format!("expected {n} f32 values"),
            ));
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Exact tallies of backbone work, incremented by the extractors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpCounts {
    /// Mask cells (voxel blocks) swept by the LiDAR backbone.
    pub voxel_blocks: u64,
    /// Kept patches times depth bins processed by the camera lift.
    pub patch_bins: u64,
    /// Mask cells scored by the predictor.
    pub predictor_cells: u64,
}

impl OpCounts {
    pub fn add(&mut self, other: &OpCounts) {
        self.voxel_blocks += other.voxel_blocks;
        self.patch_bins += other.patch_bins;
        self.predictor_cells += other.predictor_cells;
    }
}

/// Per-column LiDAR statistics over `points` (a slice of z values and
/// intensities in aggregation order).
fn column_stats(zs: &[f64], intensities: &[f64]) -> [f64; LIDAR_CHANNELS] {
    let n = zs.len();
    if n == 0 {
        return [0.0; LIDAR_CHANNELS];
    }
    let nf = n as f64;
    let mean = zs.iter().sum::<f64>() / nf;
    let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / nf;
    let mean_i = intensities.iter().sum::<f64>() / nf;
    [(nf).ln_1p(), mean, max, var, mean_i]
}

fn check_grid(spec: &VoxelGridSpec, bm: &BlockMap) -> Result<()> {
    if spec.dims() != bm.voxel_dims() {
        return Err(Error::Dimension(format!(
            "grid dims {} do not match block map voxel dims {}",
            spec.dims(),
            bm.voxel_dims()
        )));
    }
    Ok(())
}

/// Point indices grouped by mask cell, each group in input order.
fn bucket_by_cell(
    spec: &VoxelGridSpec,
    bm: &BlockMap,
    points: &[LidarPoint],
    kept: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    let mut cells = vec![Vec::new(); bm.mask_dims().len()];
    let mut push = |i: usize| -> Result<()> {
        let p = points.get(i).ok_or_else(|| {
            Error::Precondition(format!("kept index {i} out of range for {} points", points.len()))
        })?;
        if let Some((x, y, z)) = spec.voxel_index(&p.position()) {
            cells[bm.block_of(x, y, z)?].push(i);
        }
        Ok(())
    };
    match kept {
        Some(idx) => idx.iter().try_for_each(|&i| push(i))?,
        None => (0..points.len()).try_for_each(&mut push)?,
    }
    Ok(cells)
}

/// LiDAR BEV channels from the kept points (all points when `kept` is
/// `None`). Cells pruned by `retained` are skipped entirely.
pub fn extract_lidar_bev(
    spec: &VoxelGridSpec,
    bm: &BlockMap,
    points: &[LidarPoint],
    kept: Option<&[usize]>,
    retained: Option<&MaskGrid>,
    ops: &mut OpCounts,
) -> Result<BevFeatureMap> {
    check_grid(spec, bm)?;
    if let Some(m) = retained {
        bm.check_mask(m)?;
    }
    let md = bm.mask_dims();
    let cells = bucket_by_cell(spec, bm, points, kept)?;
    let mut map = BevFeatureMap::zeros(md.x, md.y, LIDAR_CHANNELS);
    let mut zs = Vec::new();
    let mut intensities = Vec::new();
    for col in 0..md.columns() {
        zs.clear();
        intensities.clear();
        for iz in 0..md.z {
            let j = col * md.z + iz;
            if retained.is_some_and(|m| !m.is_kept(j)) {
                continue;
            }
            ops.voxel_blocks += 1;
            for &i in &cells[j] {
                zs.push(points[i].z);
                intensities.push(points[i].intensity as f64);
            }
        }
        map.cell_mut(col).copy_from_slice(&column_stats(&zs, &intensities));
    }
    Ok(map)
}

/// Sobel gradient magnitude per pixel, normalized to `[0, 1]`, with
/// replicated borders.
pub fn sobel_magnitude(image: &GrayImage) -> Vec<f64> {
    let (w, h) = (image.width as i64, image.height as i64);
    let px = |x: i64, y: i64| image.get(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32) as f64;
    let norm = 4.0 * 255.0 * std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x - 1, y)
                - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x, y - 1)
                - px(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt() / norm);
        }
    }
    out
}

/// `(mean luminance, mean gradient energy)` per patch, both in `[0, 1]`.
pub fn patch_descriptors(image: &GrayImage, pg: &PatchGrid) -> Vec<[f64; 2]> {
    let grad = sobel_magnitude(image);
    let area = (pg.patch_size * pg.patch_size) as f64;
    (0..pg.len())
        .map(|p| {
            let (u0, v0, u1, v1) = pg.rect(p);
            let (mut lum, mut g) = (0.0, 0.0);
            for v in v0..v1 {
                for u in u0..u1 {
                    lum += image.get(u, v) as f64;
                    g += grad[(v * image.width + u) as usize];
                }
            }
            [lum / area / 255.0, g / area]
        })
        .collect()
}

fn check_image(cam: &CameraModel, image: &GrayImage) -> Result<()> {
    if image.width != cam.width || image.height != cam.height {
        return Err(Error::Dimension(format!(
            "image is {}x{} but the camera expects {}x{}",
            image.width, image.height, cam.width, cam.height
        )));
    }
    Ok(())
}

/// Camera contribution of every mask cell, accumulated over `patches` in order.
fn camera_cells(
    fp: &FrustumFootprint,
    bm: &BlockMap,
    desc: &[[f64; 2]],
    patches: impl IntoIterator<Item = usize>,
    ops: &mut OpCounts,
) -> Result<Vec<[f64; CAMERA_CHANNELS]>> {
    let n = bm.mask_dims().len();
    let w = 1.0 / fp.depth_bins() as f64;
    let mut cells = vec![[0.0; CAMERA_CHANNELS]; n];
    for p in patches {
        let entries = fp
            .entries
            .get(p)
            .ok_or_else(|| Error::Precondition(format!("patch {p} out of range")))?;
        ops.patch_bins += fp.depth_bins() as u64;
        let [lum, grad] = desc[p];
        for e in entries {
            let c = &mut cells[bm.block_of_flat(e.voxel)?];
            c[0] += w * lum;
            c[1] += w * grad;
            c[2] += w;
        }
    }
    Ok(cells)
}

/// Collapses per-cell camera contributions into columns, skipping pruned cells.
fn collapse_camera(
    cells: &[[f64; CAMERA_CHANNELS]],
    bm: &BlockMap,
    weight: impl Fn(usize) -> Option<f64>,
) -> BevFeatureMap {
    let md = bm.mask_dims();
    let mut map = BevFeatureMap::zeros(md.x, md.y, CAMERA_CHANNELS);
    for col in 0..md.columns() {
        let out = map.cell_mut(col);
        for iz in 0..md.z {
            let j = col * md.z + iz;
            if let Some(s) = weight(j) {
                for (o, v) in out.iter_mut().zip(&cells[j]) {
                    *o += s * v;
                }
            }
        }
    }
    map
}

/// Camera BEV channels: every kept patch splats its descriptor with weight
/// `1/D` into the column of each footprint voxel whose cell is retained.
#[allow(clippy::too_many_arguments)]
pub fn extract_camera_bev(
    cam: &CameraModel,
    fp: &FrustumFootprint,
    bm: &BlockMap,
    image: &GrayImage,
    kept_patches: &[usize],
    retained: Option<&MaskGrid>,
    ops: &mut OpCounts,
) -> Result<BevFeatureMap> {
    check_image(cam, image)?;
    if let Some(m) = retained {
        bm.check_mask(m)?;
    }
    let desc = patch_descriptors(image, &fp.patches);
    let cells = camera_cells(fp, bm, &desc, kept_patches.iter().copied(), ops)?;
    Ok(collapse_camera(&cells, bm, |j| match retained {
        Some(m) if !m.is_kept(j) => None,
        _ => Some(1.0),
    }))
}

/// Channel concatenation without smoothing.
pub fn stack_bev(lidar: &BevFeatureMap, camera: &BevFeatureMap) -> Result<BevFeatureMap> {
    if lidar.width != camera.width || lidar.height != camera.height {
        return Err(Error::Dimension(format!(
            "cannot fuse {}x{} with {}x{}",
            lidar.width, lidar.height, camera.width, camera.height
        )));
    }
    let channels = lidar.channels + camera.channels;
    let mut out = BevFeatureMap::zeros(lidar.width, lidar.height, channels);
    for col in 0..lidar.cells() {
        let dst = out.cell_mut(col);
        dst[..lidar.channels].copy_from_slice(lidar.cell(col));
        dst[lidar.channels..].copy_from_slice(camera.cell(col));
    }
    Ok(out)
}

/// Per-channel 3×3 mean filter with zero padding (always divides by 9).
/// The operator is self-adjoint.
pub fn smooth3x3(map: &BevFeatureMap) -> BevFeatureMap {
    let (w, h, c) = (map.width as i64, map.height as i64, map.channels);
    let mut out = BevFeatureMap::zeros(map.width, map.height, c);
    for y in 0..h {
        for x in 0..w {
            let dst = ((y * w + x) as usize) * c;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        continue;
                    }
                    let src = ((sy * w + sx) as usize) * c;
                    for k in 0..c {
                        out.values[dst + k] += map.values[src + k];
                    }
                }
            }
            for k in 0..c {
                out.values[dst + k] /= 9.0;
            }
        }
    }
    out
}

/// The BEV encoder: stack LiDAR and camera channels, then smooth.
pub fn fuse_bev(lidar: &BevFeatureMap, camera: &BevFeatureMap) -> Result<BevFeatureMap> {
    Ok(smooth3x3(&stack_bev(lidar, camera)?))
}

/// Linear decomposition of one frame's pre-smoothing BEV features over the
/// mask cells, used for the differentiable soft-pruning relaxation.
///
/// With per-cell weights `s`, column features are
///
/// ```text
/// lidar(col)  = (Σ_z s_z · n_z / n) · lidar_full(col)
/// camera(col) = Σ_z s_z · camera_cell(col, z)
/// ```
///
/// where `n_z` is the point count of cell `z`. All-ones weights reproduce the
/// unpruned features bit-for-bit, all-zeros give zero, and any binary mask
/// reproduces the hard path on every column that is fully kept or fully
/// pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBev {
    width: usize,
    height: usize,
    depth: usize,
    lidar_cols: Vec<[f64; LIDAR_CHANNELS]>,
    cell_points: Vec<f64>,
    col_points: Vec<f64>,
    camera_cells: Vec<[f64; CAMERA_CHANNELS]>,
}

impl SoftBev {
    pub fn new(
        spec: &VoxelGridSpec,
        bm: &BlockMap,
        fp: &FrustumFootprint,
        cam: &CameraModel,
        points: &[LidarPoint],
        image: &GrayImage,
    ) -> Result<Self> {
        check_grid(spec, bm)?;
        check_image(cam, image)?;
        let md = bm.mask_dims();
        let lidar = extract_lidar_bev(spec, bm, points, None, None, &mut OpCounts::default())?;
        let buckets = bucket_by_cell(spec, bm, points, None)?;
        let cell_points: Vec<f64> = buckets.iter().map(|b| b.len() as f64).collect();
        let col_points = (0..md.columns())
            .map(|c| cell_points[c * md.z..(c + 1) * md.z].iter().sum())
            .collect();
        let desc = patch_descriptors(image, &fp.patches);
        let camera_cells = camera_cells(fp, bm, &desc, 0..fp.patches.len(), &mut OpCounts::default())?;
        Ok(Self {
            width: md.x,
            height: md.y,
            depth: md.z,
            lidar_cols: (0..md.columns())
                .map(|c| lidar.cell(c).try_into().unwrap())
                .collect(),
            cell_points,
            col_points,
            camera_cells,
        })
    }

    pub fn cells(&self) -> usize {
        self.camera_cells.len()
    }

    /// Pre-smoothing fused features for per-cell weights.
    pub fn forward(&self, weights: &[f64]) -> BevFeatureMap {
        assert_eq!(weights.len(), self.cells());
        let z = self.depth;
        let mut map = BevFeatureMap::zeros(self.width, self.height, BEV_CHANNELS);
        for col in 0..self.width * self.height {
            let ws = &weights[col * z..(col + 1) * z];
            let out = map.cell_mut(col);
            if self.col_points[col] > 0.0 {
                let kept: f64 = ws
                    .iter()
                    .zip(&self.cell_points[col * z..(col + 1) * z])
                    .map(|(w, n)| w * n)
                    .sum();
                let gate = kept / self.col_points[col];
                for (o, v) in out[..LIDAR_CHANNELS].iter_mut().zip(&self.lidar_cols[col]) {
                    *o = gate * v;
                }
            }
            for (iz, &w) in ws.iter().enumerate() {
                for (o, v) in out[LIDAR_CHANNELS..]
                    .iter_mut()
                    .zip(&self.camera_cells[col * z + iz])
                {
                    *o += w * v;
                }
            }
        }
        map
    }

    /// Gradient of a scalar with respect to the cell weights, given its
    /// gradient with respect to the pre-smoothing features.
    pub fn backward(&self, grad_features: &BevFeatureMap) -> Vec<f64> {
        let z = self.depth;
        let mut grad = vec![0.0; self.cells()];
        for col in 0..self.width * self.height {
            let g = grad_features.cell(col);
            let lidar_dot = if self.col_points[col] > 0.0 {
                g[..LIDAR_CHANNELS]
                    .iter()
                    .zip(&self.lidar_cols[col])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / self.col_points[col]
            } else {
                0.0
            };
            for iz in 0..z {
                let j = col * z + iz;
                let cam: f64 = g[LIDAR_CHANNELS..]
                    .iter()
                    .zip(&self.camera_cells[j])
                    .map(|(a, b)| a * b)
                    .sum();
                grad[j] = lidar_dot * self.cell_points[j] + cam;
            }
        }
        grad
    }

    /// Per-cell weights that scale each cell's input contributions; the
    /// identity on scores.
    pub fn soft_prune_weights(scores: &[f64]) -> Vec<f64> {
        scores.to_vec()
    }
}
