//! BEV-anchored voxel grid, the coarser pruning mask, and the block mapping
//! between them.
//!
//! Every dense array in the crate (voxels, mask cells) is flattened with z
//! fastest, then x, then y:
//!
//! ```text
//! j = (iy * W + ix) * Z + iz
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::data::LidarPoint;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Points within this fraction of a voxel below a boundary snap to the upper
/// voxel, so decimal-exact coordinates such as `0.0` on a `-51.2 / 0.1` grid
/// land where the arithmetic says they should.
const BOUNDARY_SNAP: f64 = 1e-9;
const INTEGRAL_TOL: f64 = 1e-9;

/// Integer extents of a dense 3-D array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims3 {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims3 {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub const fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn columns(&self) -> usize {
        self.x * self.y
    }

    pub fn flatten(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.x && iy < self.y && iz < self.z);
        (iy * self.x + ix) * self.z + iz
    }

    pub fn unflatten(&self, j: usize) -> (usize, usize, usize) {
        let iz = j % self.z;
        let col = j / self.z;
        (col % self.x, col / self.x, iz)
    }

    pub fn contains(&self, ix: usize, iy: usize, iz: usize) -> bool {
        ix < self.x && iy < self.y && iz < self.z
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    min_corner: Vec3,
    max_corner: Vec3,
    voxel_size: Vec3,
    dims: Dims3,
}

impl VoxelGridSpec {
    pub fn new(min_corner: Vec3, max_corner: Vec3, voxel_size: Vec3) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = max_corner[a] - min_corner[a];
            if !(extent > 0.0) {
                return Err(Error::Config(format!(
                    "grid max corner must exceed min corner on axis {a}"
                )));
            }
            if !(voxel_size[a] > 0.0) {
                return Err(Error::Config(format!("voxel size must be positive on axis {a}")));
            }
            let ratio = extent / voxel_size[a];
            let rounded = ratio.round();
            if (ratio - rounded).abs() > INTEGRAL_TOL * rounded.max(1.0) || rounded < 1.0 {
                return Err(Error::Config(format!(
                    "extent {extent} is not an integral multiple of voxel size {} on axis {a}",
                    voxel_size[a]
                )));
            }
            dims[a] = rounded as usize;
        }
        Ok(Self {
            min_corner,
            max_corner,
            voxel_size,
            dims: Dims3::new(dims[0], dims[1], dims[2]),
        })
    }

    /// Desk-scale grid: (−12.8, −12.8, −2)..(12.8, 12.8, 2) at 0.2 m, 128×128×20 voxels.
    pub fn desk() -> Self {
        Self::new(Vec3::new(-12.8, -12.8, -2.0), Vec3::new(12.8, 12.8, 2.0), Vec3::new(0.2, 0.2, 0.2))
            .expect("desk grid is valid")
    }

    /// Full-scale grid: (−51.2, −51.2, −8)..(51.2, 51.2, 8) at (0.1, 0.1, 0.2), 1024×1024×80 voxels.
    pub fn full_size() -> Self {
        Self::new(Vec3::new(-51.2, -51.2, -8.0), Vec3::new(51.2, 51.2, 8.0), Vec3::new(0.1, 0.1, 0.2))
            .expect("full-scale grid is valid")
    }

    pub fn min_corner(&self) -> &Vec3 {
        &self.min_corner
    }

    pub fn max_corner(&self) -> &Vec3 {
        &self.max_corner
    }

    pub fn voxel_size(&self) -> &Vec3 {
        &self.voxel_size
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn voxel_index(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let n = [self.dims.x, self.dims.y, self.dims.z];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let q = ((p[a] - self.min_corner[a]) / self.voxel_size[a] + BOUNDARY_SNAP).floor();
            if !(q >= 0.0 && q < n[a] as f64) {
                return None;
            }
            idx[a] = q as usize;
        }
        Some((idx[0], idx[1], idx[2]))
    }

    pub fn flat_voxel_index(&self, p: &Vec3) -> Option<usize> {
        self.voxel_index(p).map(|(x, y, z)| self.dims.flatten(x, y, z))
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        Vec3::new(
            self.min_corner.x + (ix as f64 + 0.5) * self.voxel_size.x,
            self.min_corner.y + (iy as f64 + 0.5) * self.voxel_size.y,
            self.min_corner.z + (iz as f64 + 0.5) * self.voxel_size.z,
        )
    }
}

pub fn grid_dims(spec: &VoxelGridSpec) -> Dims3 {
    spec.dims()
}

pub fn voxel_index(spec: &VoxelGridSpec, p: &Vec3) -> Option<(usize, usize, usize)> {
    spec.voxel_index(p)
}

/// Correspondence between the fine voxel grid and the coarse mask grid:
/// each mask cell governs a contiguous `block` of voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMap {
    voxel_dims: Dims3,
    mask_dims: Dims3,
    block: Dims3,
}

impl BlockMap {
    pub fn new(voxel_dims: Dims3, mask_dims: Dims3) -> Result<Self> {
        let pairs = [
            (voxel_dims.x, mask_dims.x),
            (voxel_dims.y, mask_dims.y),
            (voxel_dims.z, mask_dims.z),
        ];
        for (axis, (v, m)) in pairs.iter().enumerate() {
            if *m == 0 || v % m != 0 {
                return Err(Error::Config(format!(
                    "voxel dims {voxel_dims} are not a multiple of mask dims {mask_dims} on axis {axis}"
                )));
            }
        }
        Ok(Self {
            voxel_dims,
            mask_dims,
            block: Dims3::new(
                voxel_dims.x / mask_dims.x,
                voxel_dims.y / mask_dims.y,
                voxel_dims.z / mask_dims.z,
            ),
        })
    }

    pub fn voxel_dims(&self) -> Dims3 {
        self.voxel_dims
    }

    pub fn mask_dims(&self) -> Dims3 {
        self.mask_dims
    }

    pub fn block(&self) -> Dims3 {
        self.block
    }

    /// Voxels per mask cell.
    pub fn block_volume(&self) -> usize {
        self.block.len()
    }

    pub fn block_of(&self, ix: usize, iy: usize, iz: usize) -> Result<usize> {
        if !self.voxel_dims.contains(ix, iy, iz) {
            return Err(Error::Dimension(format!(
                "voxel ({ix}, {iy}, {iz}) outside {}",
                self.voxel_dims
            )));
        }
        Ok(self
            .mask_dims
            .flatten(ix / self.block.x, iy / self.block.y, iz / self.block.z))
    }

    /// Mask cell of a flattened voxel index.
    pub fn block_of_flat(&self, voxel: usize) -> Result<usize> {
        if voxel >= self.voxel_dims.len() {
            return Err(Error::Dimension(format!(
                "voxel index {voxel} outside {}",
                self.voxel_dims
            )));
        }
        let (x, y, z) = self.voxel_dims.unflatten(voxel);
        self.block_of(x, y, z)
    }

    /// Ego-frame center of mask cell `j`.
    pub fn cell_center(&self, spec: &VoxelGridSpec, j: usize) -> Vec3 {
        let (cx, cy, cz) = self.mask_dims.unflatten(j);
        let size = spec.voxel_size();
        let min = spec.min_corner();
        Vec3::new(
            min.x + (cx as f64 + 0.5) * size.x * self.block.x as f64,
            min.y + (cy as f64 + 0.5) * size.y * self.block.y as f64,
            min.z + (cz as f64 + 0.5) * size.z * self.block.z as f64,
        )
    }

    pub fn check_mask(&self, mask: &MaskGrid) -> Result<()> {
        if mask.dims() != self.mask_dims {
            return Err(Error::Dimension(format!(
                "mask dims {} do not match block map mask dims {}",
                mask.dims(),
                self.mask_dims
            )));
        }
        Ok(())
    }
}

pub fn block_of(bm: &BlockMap, ix: usize, iy: usize, iz: usize) -> Result<usize> {
    bm.block_of(ix, iy, iz)
}

/// Sparse voxelization result: buckets keyed by flattened voxel index
/// (iteration is therefore sorted), point indices in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Voxelization {
    pub buckets: BTreeMap<usize, Vec<usize>>,
    pub discarded: Vec<usize>,
}

impl Voxelization {
    pub fn bucketed_points(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }
}

pub fn voxelize(spec: &VoxelGridSpec, points: &[LidarPoint]) -> Voxelization {
    let mut out = Voxelization::default();
    for (i, p) in points.iter().enumerate() {
        match spec.flat_voxel_index(&p.position()) {
            Some(v) => out.buckets.entry(v).or_default().push(i),
            None => out.discarded.push(i),
        }
    }
    out
}

pub const MASK_MAGIC: [u8; 4] = *b"MJPM";
pub const MASK_VERSION: u8 = 1;
const MASK_HEADER_LEN: usize = 4 + 1 + 12 + 4;

/// The pruning index: per-cell importance scores `s_i`, the threshold θ and
/// the binary mask `M` (1 = keep, 0 = prune).
///
/// When scores are present the mask is always `scores[j] >= threshold`.
/// Hard masks built directly from bits (top-k, random baselines) carry no
/// scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    dims: Dims3,
    threshold: f32,
    scores: Option<Vec<f32>>,
    mask: Vec<bool>,
}

impl MaskGrid {
    pub fn from_scores(dims: Dims3, scores: Vec<f32>, threshold: f32) -> Result<Self> {
        check_threshold(threshold)?;
        if scores.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "{} scores for a {dims} mask",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Precondition(format!(
                "score {} at cell {bad} is outside [0, 1]",
                scores[bad]
            )));
        }
        let mask = scores.iter().map(|&s| s >= threshold).collect();
        Ok(Self {
            dims,
            threshold,
            scores: Some(scores),
            mask,
        })
    }

    pub fn from_bits(dims: Dims3, bits: Vec<bool>, threshold: f32) -> Result<Self> {
        check_threshold(threshold)?;
        if bits.len() != dims.len() {
            return Err(Error::Dimension(format!("{} bits for a {dims} mask", bits.len())));
        }
        Ok(Self {
            dims,
            threshold,
            scores: None,
            mask: bits,
        })
    }

    pub fn all_ones(dims: Dims3) -> Self {
        Self::from_bits(dims, vec![true; dims.len()], 0.5).expect("valid")
    }

    pub fn all_zeros(dims: Dims3) -> Self {
        Self::from_bits(dims, vec![false; dims.len()], 0.5).expect("valid")
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn scores(&self) -> Option<&[f32]> {
        self.scores.as_deref()
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_kept(&self, j: usize) -> bool {
        self.mask[j]
    }

    /// Replaces the scores and re-derives the mask.
    pub fn update_scores(&mut self, scores: Vec<f32>) -> Result<()> {
        *self = Self::from_scores(self.dims, scores, self.threshold)?;
        Ok(())
    }

    pub fn zero_count(&self) -> usize {
        self.mask.iter().filter(|&&b| !b).count()
    }

    /// Fraction of cells set to 0, the actual drop ratio of the mask.
    pub fn zero_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.len() as f64
    }

    /// Bitwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.dims == other.dims && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// True if every bit equals `scores >= threshold` (vacuous without scores).
    pub fn is_consistent(&self) -> bool {
        match &self.scores {
            Some(s) => s.iter().zip(&self.mask).all(|(&s, &m)| (s >= self.threshold) == m),
            None => true,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASK_HEADER_LEN + self.len().div_ceil(8));
        out.extend_from_slice(&MASK_MAGIC);
        out.push(MASK_VERSION);
        for d in [self.dims.x, self.dims.y, self.dims.z] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.threshold.to_le_bytes());
        out.extend_from_slice(&pack_bits(&self.mask));
        if let Some(scores) = &self.scores {
            for s in scores {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |offset: usize, why: String| Error::malformed(path, offset as u64, why);
        if bytes.len() < MASK_HEADER_LEN {
            return Err(bad(bytes.len(), "truncated mask header".into()));
        }
        if bytes[0..4] != MASK_MAGIC {
            return Err(bad(0, "bad magic, expected MJPM".into()));
        }
        if bytes[4] != MASK_VERSION {
            return Err(bad(4, format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let dims = Dims3::new(u32_at(5), u32_at(9), u32_at(13));
        if dims.is_empty() {
            return Err(bad(5, format!("empty mask dims {dims}")));
        }
        let threshold = f32::from_le_bytes(bytes[17..21].try_into().unwrap());
        let n = dims.len();
        let packed = n.div_ceil(8);
        let body = &bytes[MASK_HEADER_LEN..];
        if body.len() < packed {
            return Err(bad(bytes.len(), format!("truncated mask bits, need {packed} bytes")));
        }
        let bits = unpack_bits(&body[..packed], n);
        let rest = &body[packed..];
        let grid = match rest.len() {
            0 => Self::from_bits(dims, bits, threshold),
            len if len == 4 * n => {
                let scores: Vec<f32> = rest
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let grid = Self::from_scores(dims, scores, threshold)?;
                if grid.mask != bits {
                    return Err(bad(
                        MASK_HEADER_LEN,
                        "stored mask disagrees with scores and threshold".into(),
                    ));
                }
                Ok(grid)
            }
            len => Err(bad(
                MASK_HEADER_LEN + packed,
                format!("trailing {len} bytes are neither empty nor {n} f32 scores"),
            )),
        }?;
        Ok(grid)
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

fn check_threshold(t: f32) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Precondition(format!("threshold {t} must lie in (0, 1)")));
    }
    Ok(())
}

/// LSB-first bit packing.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_grid_origin_index() {
        let spec = VoxelGridSpec::full_size();
        assert_eq!(spec.voxel_index(&Vec3::zeros()), Some((512, 512, 40)));
    }

    #[test]
    fn boundaries() {
        let spec = VoxelGridSpec::full_size();
        assert_eq!(spec.voxel_index(spec.min_corner()), Some((0, 0, 0)));
        assert_eq!(spec.voxel_index(spec.max_corner()), None);
        let desk = VoxelGridSpec::desk();
        assert_eq!(desk.voxel_index(desk.max_corner()), None);
        assert_eq!(desk.voxel_index(&Vec3::new(0.0, 0.0, -2.01)), None);
    }

    #[test]
    fn dims_examples() {
        assert_eq!(VoxelGridSpec::full_size().dims(), Dims3::new(1024, 1024, 80));
        assert_eq!(VoxelGridSpec::desk().dims(), Dims3::new(128, 128, 20));
        let one = VoxelGridSpec::new(Vec3::zeros(), Vec3::new(2.0, 3.0, 4.0), Vec3::new(2.0, 3.0, 4.0)).unwrap();
        assert_eq!(one.dims(), Dims3::new(1, 1, 1));
    }

    #[test]
    fn non_integral_ratio_rejected() {
        let r = VoxelGridSpec::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), Vec3::new(0.3, 0.5, 0.5));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn block_examples() {
        let bm = BlockMap::new(Dims3::new(1024, 1024, 80), Dims3::new(128, 128, 16)).unwrap();
        assert_eq!(bm.block(), Dims3::new(8, 8, 5));
        assert_eq!(bm.block_of(15, 8, 9).unwrap(), bm.mask_dims().flatten(1, 1, 1));
        assert_eq!(bm.block_of(0, 0, 0).unwrap(), 0);
        assert!(bm.block_of(1024, 0, 0).is_err());

        let id = BlockMap::new(Dims3::new(4, 3, 2), Dims3::new(4, 3, 2)).unwrap();
        for v in 0..24 {
            assert_eq!(id.block_of_flat(v).unwrap(), v);
        }
    }

    #[test]
    fn block_map_rejects_non_multiple() {
        assert!(BlockMap::new(Dims3::new(10, 10, 10), Dims3::new(3, 5, 5)).is_err());
    }

    #[test]
    fn block_of_is_surjective_and_monotone() {
        let bm = BlockMap::new(Dims3::new(12, 8, 10), Dims3::new(3, 4, 2)).unwrap();
        let mut hit = vec![false; bm.mask_dims().len()];
        for iy in 0..8 {
            for ix in 0..12 {
                for iz in 0..10 {
                    hit[bm.block_of(ix, iy, iz).unwrap()] = true;
                }
            }
        }
        assert!(hit.iter().all(|&h| h));
        let md = bm.mask_dims();
        let mut prev = 0;
        for ix in 0..12 {
            let (cx, _, _) = md.unflatten(bm.block_of(ix, 5, 3).unwrap());
            assert!(cx >= prev);
            prev = cx;
        }
    }

    #[test]
    fn voxelize_examples() {
        let spec = VoxelGridSpec::desk();
        assert!(voxelize(&spec, &[]).buckets.is_empty());
        let pts = vec![
            LidarPoint::new(1.01, 1.01, 0.01, 0.5),
            LidarPoint::new(1.02, 1.03, 0.05, 0.1),
            LidarPoint::new(100.0, 0.0, 0.0, 0.2),
        ];
        let vox = voxelize(&spec, &pts);
        assert_eq!(vox.buckets.len(), 1);
        assert_eq!(vox.buckets.values().next().unwrap(), &vec![0, 1]);
        assert_eq!(vox.discarded, vec![2]);
    }

    #[test]
    fn mask_binarization() {
        let dims = Dims3::new(2, 1, 2);
        let mut m = MaskGrid::from_scores(dims, vec![0.1, 0.5, 0.49, 0.9], 0.5).unwrap();
        assert_eq!(m.bits(), &[false, true, false, true]);
        m.update_scores(vec![0.6, 0.2, 0.5, 0.0]).unwrap();
        assert_eq!(m.bits(), &[true, false, true, false]);
        assert!(m.is_consistent());
        assert!(MaskGrid::from_scores(dims, vec![0.1, 1.5, 0.0, 0.0], 0.5).is_err());
        assert!(MaskGrid::from_scores(dims, vec![0.0; 4], 1.0).is_err());
    }

    #[test]
    fn bit_packing_is_lsb_first() {
        let bits = [true, false, false, false, false, false, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0b0000_0001, 0b0000_0010]);
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn mask_file_errors() {
        let p = Path::new("mem");
        let m = MaskGrid::all_ones(Dims3::new(3, 3, 3));
        let bytes = m.to_bytes();
        assert!(MaskGrid::from_bytes(&bytes[..10], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(MaskGrid::from_bytes(&wrong, p), Err(Error::Malformed { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(MaskGrid::from_bytes(&extra, p).is_err());
        assert_eq!(MaskGrid::from_bytes(&bytes, p).unwrap(), m);
    }
}
