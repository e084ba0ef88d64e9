//! Forward (lift) and backward (index multiplier) mappings between the
//! camera image and the BEV voxel grid.
//!
//! The lift casts one ray per image patch through the patch center and
//! samples it at `D` uniformly spaced camera-frame depths; every sample that
//! lands inside the grid is recorded as a footprint entry. The footprint only
//! depends on the calibration and the grid, so it is built once and reused
//! for every frame.
//!
//! The index multiplier runs the other way: it takes a BEV mask and decides
//! which LiDAR points and which image patches survive.

use crate::data::LidarPoint;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::voxelgrid::{BlockMap, Dims3, MaskGrid, VoxelGridSpec};

/// Square patch tiling of the image. Patch ids are row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub cols: u32,
    pub rows: u32,
}

impl PatchGrid {
    pub fn new(width: u32, height: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 || width % patch_size != 0 || height % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {width}x{height} is not tiled by {patch_size}-pixel patches"
            )));
        }
        Ok(Self {
            patch_size,
            cols: width / patch_size,
            rows: height / patch_size,
        })
    }

    pub fn for_camera(cam: &CameraModel, patch_size: u32) -> Result<Self> {
        Self::new(cam.width, cam.height, patch_size)
    }

    pub fn len(&self) -> usize {
        (self.cols * self.rows) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, patch: usize) -> (f64, f64) {
        let (col, row) = (patch as u32 % self.cols, patch as u32 / self.cols);
        let half = self.patch_size as f64 / 2.0;
        (
            (col * self.patch_size) as f64 + half,
            (row * self.patch_size) as f64 + half,
        )
    }

    /// Pixel rectangle `[u0, u1) × [v0, v1)` of a patch.
    pub fn rect(&self, patch: usize) -> (u32, u32, u32, u32) {
        let (col, row) = (patch as u32 % self.cols, patch as u32 / self.cols);
        let s = self.patch_size;
        (col * s, row * s, (col + 1) * s, (row + 1) * s)
    }

    /// Patch containing pixel `(u, v)`.
    pub fn patch_at(&self, u: f64, v: f64) -> Option<usize> {
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (col, row) = ((u / self.patch_size as f64) as u32, (v / self.patch_size as f64) as u32);
        (col < self.cols && row < self.rows).then(|| (row * self.cols + col) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootprintEntry {
    /// Flattened voxel index.
    pub voxel: usize,
    pub bin: usize,
}

/// Per-patch list of voxels hit by the lifted patch ray, sorted by depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumFootprint {
    pub patches: PatchGrid,
    pub depths: Vec<f64>,
    pub voxel_dims: Dims3,
    pub entries: Vec<Vec<FootprintEntry>>,
}

impl FrustumFootprint {
    pub fn depth_bins(&self) -> usize {
        self.depths.len()
    }

    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    fn check(&self, bm: &BlockMap) -> Result<()> {
        if self.voxel_dims != bm.voxel_dims() {
            return Err(Error::Dimension(format!(
                "footprint built for voxel dims {} but block map uses {}",
                self.voxel_dims,
                bm.voxel_dims()
            )));
        }
        Ok(())
    }

    /// Mask cell of every entry, in entry order.
    pub fn entry_cells(&self, bm: &BlockMap) -> Result<Vec<Vec<usize>>> {
        self.check(bm)?;
        self.entries
            .iter()
            .map(|es| es.iter().map(|e| bm.block_of_flat(e.voxel)).collect())
            .collect()
    }
}

/// Depths `d_k` linearly spaced over `[d_min, d_max]`; a single bin sits at `d_min`.
pub fn depth_bins(count: usize, d_min: f64, d_max: f64) -> Vec<f64> {
    if count == 1 {
        return vec![d_min];
    }
    (0..count)
        .map(|k| d_min + (d_max - d_min) * k as f64 / (count - 1) as f64)
        .collect()
}

pub fn lift_patches(
    cam: &CameraModel,
    pg: &PatchGrid,
    spec: &VoxelGridSpec,
    bins: usize,
    d_min: f64,
    d_max: f64,
) -> Result<FrustumFootprint> {
    if bins < 1 || !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::Precondition(format!(
            "lift needs D >= 1 and 0 < d_min < d_max, got D={bins}, [{d_min}, {d_max}]"
        )));
    }
    if pg.cols * pg.patch_size != cam.width || pg.rows * pg.patch_size != cam.height {
        return Err(Error::Dimension("patch grid does not tile the camera image".into()));
    }
    let depths = depth_bins(bins, d_min, d_max);
    let dims = spec.dims();
    let mut entries = Vec::with_capacity(pg.len());
    for patch in 0..pg.len() {
        let (u, v) = pg.center(patch);
        let mut list = Vec::new();
        for (bin, &d) in depths.iter().enumerate() {
            let p = cam.unproject(u, v, d)?;
            if let Some((x, y, z)) = spec.voxel_index(&p) {
                list.push(FootprintEntry {
                    voxel: dims.flatten(x, y, z),
                    bin,
                });
            }
        }
        entries.push(list);
    }
    Ok(FrustumFootprint {
        patches: *pg,
        depths,
        voxel_dims: dims,
        entries,
    })
}

fn check_mask(mask: &MaskGrid, bm: &BlockMap, spec: Option<&VoxelGridSpec>) -> Result<()> {
    bm.check_mask(mask)?;
    if let Some(spec) = spec {
        if spec.dims() != bm.voxel_dims() {
            return Err(Error::Dimension(format!(
                "grid dims {} do not match block map voxel dims {}",
                spec.dims(),
                bm.voxel_dims()
            )));
        }
    }
    Ok(())
}

/// Indices of points that are inside the grid and whose block is kept, in
/// input order.
pub fn index_multiply_lidar(
    mask: &MaskGrid,
    bm: &BlockMap,
    spec: &VoxelGridSpec,
    points: &[LidarPoint],
) -> Result<Vec<usize>> {
    check_mask(mask, bm, Some(spec))?;
    let mut kept = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if let Some((x, y, z)) = spec.voxel_index(&p.position()) {
            if mask.is_kept(bm.block_of(x, y, z)?) {
                kept.push(i);
            }
        }
    }
    Ok(kept)
}

/// Indices of patches with at least one footprint voxel in a kept block.
/// Patches whose ray never enters the grid are dropped.
pub fn index_multiply_camera(mask: &MaskGrid, bm: &BlockMap, fp: &FrustumFootprint) -> Result<Vec<usize>> {
    check_mask(mask, bm, None)?;
    fp.check(bm)?;
    let mut kept = Vec::new();
    for (patch, entries) in fp.entries.iter().enumerate() {
        let mut any = false;
        for e in entries {
            if mask.is_kept(bm.block_of_flat(e.voxel)?) {
                any = true;
                break;
            }
        }
        if any {
            kept.push(patch);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};

    fn desk_setup() -> (CameraModel, PatchGrid, VoxelGridSpec, BlockMap) {
        let cam = CameraModel::new(32.0, 32.0, 32.0, 32.0, 64, 64, Pose::forward_camera(Vec3::zeros())).unwrap();
        let pg = PatchGrid::for_camera(&cam, 8).unwrap();
        let spec = VoxelGridSpec::desk();
        let bm = BlockMap::new(spec.dims(), Dims3::new(32, 32, 4)).unwrap();
        (cam, pg, spec, bm)
    }

    #[test]
    fn patch_grid_requires_exact_tiling() {
        assert!(PatchGrid::new(64, 60, 8).is_err());
        let pg = PatchGrid::new(64, 32, 8).unwrap();
        assert_eq!((pg.cols, pg.rows, pg.len()), (8, 4, 32));
        assert_eq!(pg.patch_at(9.0, 17.0), Some(2 * 8 + 1));
        assert_eq!(pg.patch_at(64.0, 0.0), None);
    }

    #[test]
    fn single_ray_single_bin() {
        // one 2x2 patch whose center is the principal point
        let cam = CameraModel::new(10.0, 10.0, 1.0, 1.0, 2, 2, Pose::forward_camera(Vec3::zeros())).unwrap();
        let pg = PatchGrid::new(2, 2, 2).unwrap();
        let spec = VoxelGridSpec::desk();
        let fp = lift_patches(&cam, &pg, &spec, 1, 5.0, 6.0).unwrap();
        let expected = spec.flat_voxel_index(&Vec3::new(5.0, 0.0, 0.0)).unwrap();
        assert_eq!(fp.entries, vec![vec![FootprintEntry { voxel: expected, bin: 0 }]]);
    }

    #[test]
    fn ray_leaving_grid_before_d_min_has_empty_footprint() {
        let (cam, pg, spec, _) = desk_setup();
        let fp = lift_patches(&cam, &pg, &spec, 4, 20.0, 30.0).unwrap();
        assert!(fp.entries.iter().all(Vec::is_empty));
    }

    #[test]
    fn lift_rejects_bad_depths() {
        let (cam, pg, spec, _) = desk_setup();
        assert!(lift_patches(&cam, &pg, &spec, 0, 1.0, 2.0).is_err());
        assert!(lift_patches(&cam, &pg, &spec, 4, 2.0, 1.0).is_err());
        assert!(lift_patches(&cam, &pg, &spec, 4, 0.0, 1.0).is_err());
    }

    #[test]
    fn footprint_sorted_by_bin() {
        let (cam, pg, spec, _) = desk_setup();
        let fp = lift_patches(&cam, &pg, &spec, 16, 1.0, 12.0).unwrap();
        for es in &fp.entries {
            assert!(es.windows(2).all(|w| w[0].bin < w[1].bin));
        }
    }

    #[test]
    fn footprint_voxels_project_back_into_their_patch() {
        let (cam, pg, spec, _) = desk_setup();
        let fp = lift_patches(&cam, &pg, &spec, 16, 1.0, 12.0).unwrap();
        let dims = spec.dims();
        let half_diag = (spec.voxel_size() * 0.5).norm();
        let mut checked = 0;
        for (patch, es) in fp.entries.iter().enumerate() {
            let (u0, v0, u1, v1) = pg.rect(patch);
            for e in es {
                let (x, y, z) = dims.unflatten(e.voxel);
                let c = spec.voxel_center(x, y, z);
                let p_cam = cam.pose().inverse().transform_point(&c);
                // half-voxel tolerance expressed in pixels at this depth
                let tol = cam.fx * half_diag / p_cam.z;
                let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
                let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
                assert!(u >= u0 as f64 - tol && u <= u1 as f64 + tol, "patch {patch} u {u}");
                assert!(v >= v0 as f64 - tol && v <= v1 as f64 + tol, "patch {patch} v {v}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn all_ones_and_all_zeros_masks() {
        let (cam, pg, spec, bm) = desk_setup();
        let fp = lift_patches(&cam, &pg, &spec, 16, 1.0, 12.0).unwrap();
        let pts = vec![
            LidarPoint::new(1.0, 1.0, 0.0, 0.1),
            LidarPoint::new(50.0, 1.0, 0.0, 0.1),
            LidarPoint::new(-3.0, 2.0, -1.9, 0.1),
        ];
        let ones = MaskGrid::all_ones(bm.mask_dims());
        let zeros = MaskGrid::all_zeros(bm.mask_dims());
        assert_eq!(index_multiply_lidar(&ones, &bm, &spec, &pts).unwrap(), vec![0, 2]);
        assert!(index_multiply_lidar(&zeros, &bm, &spec, &pts).unwrap().is_empty());
        let non_empty: Vec<usize> = (0..pg.len()).filter(|&p| !fp.entries[p].is_empty()).collect();
        assert_eq!(index_multiply_camera(&ones, &bm, &fp).unwrap(), non_empty);
        assert!(index_multiply_camera(&zeros, &bm, &fp).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (_, _, spec, bm) = desk_setup();
        let wrong = MaskGrid::all_ones(Dims3::new(16, 16, 4));
        assert!(matches!(
            index_multiply_lidar(&wrong, &bm, &spec, &[]),
            Err(Error::Dimension(_))
        ));
    }
}
