//! Joint pruning of one frame: the mask is applied to the LiDAR points and
//! the camera patches before any feature extraction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_pointcloud, write_pointcloud, LidarPoint, SceneFrame};
use crate::error::{Error, Result};
use crate::projection::{index_multiply_camera, index_multiply_lidar, FrustumFootprint};
use crate::voxelgrid::{pack_bits, unpack_bits, BlockMap, MaskGrid, VoxelGridSpec};

/// Retained inputs of one frame plus exact pruning ratios.
///
/// Points outside the grid are dropped by geometry alone; they are counted
/// in `out_of_range_points` and excluded from `prune_ratio_points`, which
/// only measures what the mask removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub kept_point_indices: Vec<usize>,
    pub kept_patch_indices: Vec<usize>,
    pub total_points: usize,
    pub out_of_range_points: usize,
    pub total_patches: usize,
    /// Fraction of mask cells that are 0.
    pub prune_ratio_voxels: f64,
    /// `1 - kept / in-range points` (0 when no point is in range).
    pub prune_ratio_points: f64,
    /// `1 - kept / all patches`; sky patches always count as removed.
    pub prune_ratio_patches: f64,
}

impl PruneOutcome {
    pub fn in_range_points(&self) -> usize {
        self.total_points - self.out_of_range_points
    }
}

fn ratio_removed(kept: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        1.0 - kept as f64 / total as f64
    }
}

pub fn prune_frame(
    frame: &SceneFrame,
    mask: &MaskGrid,
    spec: &VoxelGridSpec,
    bm: &BlockMap,
    fp: &FrustumFootprint,
) -> Result<PruneOutcome> {
    if frame.cam.width != fp.patches.cols * fp.patches.patch_size
        || frame.cam.height != fp.patches.rows * fp.patches.patch_size
    {
        return Err(Error::Dimension(
            "frame camera does not match the footprint's patch grid".into(),
        ));
    }
    let kept_point_indices = index_multiply_lidar(mask, bm, spec, &frame.points)?;
    let kept_patch_indices = index_multiply_camera(mask, bm, fp)?;
    let in_range = frame
        .points
        .iter()
        .filter(|p| spec.voxel_index(&p.position()).is_some())
        .count();
    let total_patches = fp.patches.len();
    Ok(PruneOutcome {
        prune_ratio_voxels: mask.zero_fraction(),
        prune_ratio_points: ratio_removed(kept_point_indices.len(), in_range),
        prune_ratio_patches: ratio_removed(kept_patch_indices.len(), total_patches),
        total_points: frame.points.len(),
        out_of_range_points: frame.points.len() - in_range,
        total_patches,
        kept_point_indices,
        kept_patch_indices,
    })
}

/// `manifest.json` of a pruned frame directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneManifest {
    pub kept_points: usize,
    pub kept_point_indices_file: PathBuf,
    pub kept_patches: Vec<usize>,
    pub mask_file: PathBuf,
    pub patch_bitmap_file: PathBuf,
    pub total_patches: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `points.bin` (kept points only, source order), `kept_points.u32`,
/// `patch_keep.bits` (LSB-first, one bit per patch), `mask.mjpm` and the
/// manifest.
pub fn write_pruned_frame(
    outcome: &PruneOutcome,
    frame: &SceneFrame,
    mask: &MaskGrid,
    out_dir: impl AsRef<Path>,
) -> Result<PruneManifest> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let kept: Vec<LidarPoint> = outcome
        .kept_point_indices
        .iter()
        .map(|&i| frame.points[i])
        .collect();
    write_pointcloud(dir.join("points.bin"), &kept)?;

    let mut idx = Vec::with_capacity(4 * kept.len());
    for &i in &outcome.kept_point_indices {
        let i = u32::try_from(i).map_err(|_| Error::Precondition(format!("point index {i} exceeds u32")))?;
        idx.extend_from_slice(&i.to_le_bytes());
    }
    let idx_path = dir.join("kept_points.u32");
    std::fs::write(&idx_path, idx).map_err(|e| Error::io(&idx_path, e))?;

    let mut bits = vec![false; outcome.total_patches];
    for &p in &outcome.kept_patch_indices {
        bits[p] = true;
    }
    let bm_path = dir.join("patch_keep.bits");
    std::fs::write(&bm_path, pack_bits(&bits)).map_err(|e| Error::io(&bm_path, e))?;

    mask.write(dir.join("mask.mjpm"))?;

    let manifest = PruneManifest {
        kept_points: kept.len(),
        kept_point_indices_file: "kept_points.u32".into(),
        kept_patches: outcome.kept_patch_indices.clone(),
        mask_file: "mask.mjpm".into(),
        patch_bitmap_file: "patch_keep.bits".into(),
        total_patches: outcome.total_patches,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A pruned frame directory read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedFrame {
    pub manifest: PruneManifest,
    pub points: Vec<LidarPoint>,
    pub kept_point_indices: Vec<usize>,
    pub kept_patch_indices: Vec<usize>,
    pub mask: MaskGrid,
}

pub fn read_pruned_frame(dir: impl AsRef<Path>) -> Result<PrunedFrame> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PruneManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;

    let points = read_pointcloud(dir.join("points.bin"))?;

    let idx_path = dir.join(&manifest.kept_point_indices_file);
    let bytes = std::fs::read(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::malformed(&idx_path, (bytes.len() / 4 * 4) as u64, "truncated u32 record"));
    }
    let kept_point_indices: Vec<usize> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();

    let bits_path = dir.join(&manifest.patch_bitmap_file);
    let bits = std::fs::read(&bits_path).map_err(|e| Error::io(&bits_path, e))?;
    if bits.len() != manifest.total_patches.div_ceil(8) {
        return Err(Error::malformed(&bits_path, bits.len() as u64, "bitmap length does not match patch count"));
    }
    let kept_patch_indices: Vec<usize> = unpack_bits(&bits, manifest.total_patches)
        .into_iter()
        .enumerate()
        .filter_map(|(i, b)| b.then_some(i))
        .collect();

    if kept_point_indices.len() != manifest.kept_points || points.len() != manifest.kept_points {
        return Err(Error::Malformed {
            path,
            offset: 0,
            reason: format!(
                "manifest says {} kept points, found {} indices and {} points",
                manifest.kept_points,
                kept_point_indices.len(),
                points.len()
            ),
        });
    }
    if kept_patch_indices != manifest.kept_patches {
        return Err(Error::Malformed {
            path,
            offset: 0,
            reason: "patch bitmap disagrees with kept_patches".into(),
        });
    }
    let mask = MaskGrid::read(dir.join(&manifest.mask_file))?;
    Ok(PrunedFrame {
        manifest,
        points,
        kept_point_indices,
        kept_patch_indices,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::projection::{lift_patches, PatchGrid};
    use crate::voxelgrid::Dims3;

    fn setup() -> (SceneFrame, VoxelGridSpec, BlockMap, FrustumFootprint) {
        let frame = generate_scene(&SceneConfig::default(), 7).unwrap();
        let spec = VoxelGridSpec::desk();
        let bm = BlockMap::new(spec.dims(), Dims3::new(32, 32, 4)).unwrap();
        let pg = PatchGrid::for_camera(&frame.cam, 8).unwrap();
        let fp = lift_patches(&frame.cam, &pg, &spec, 16, 1.0, 12.0).unwrap();
        (frame, spec, bm, fp)
    }

    #[test]
    fn all_ones_and_all_zeros() {
        let (frame, spec, bm, fp) = setup();
        let ones = prune_frame(&frame, &MaskGrid::all_ones(bm.mask_dims()), &spec, &bm, &fp).unwrap();
        assert_eq!(ones.prune_ratio_voxels, 0.0);
        assert_eq!(ones.prune_ratio_points, 0.0);
        assert_eq!(ones.kept_point_indices.len(), ones.in_range_points());
        assert!(ones.out_of_range_points > 0);

        let zeros = prune_frame(&frame, &MaskGrid::all_zeros(bm.mask_dims()), &spec, &bm, &fp).unwrap();
        assert_eq!(zeros.prune_ratio_voxels, 1.0);
        assert_eq!(zeros.prune_ratio_points, 1.0);
        assert_eq!(zeros.prune_ratio_patches, 1.0);
        assert!(zeros.kept_point_indices.is_empty());
    }

    #[test]
    fn idempotent_on_pruned_points() {
        let (frame, spec, bm, fp) = setup();
        let bits = (0..bm.mask_dims().len()).map(|j| j % 3 != 0).collect();
        let mask = MaskGrid::from_bits(bm.mask_dims(), bits, 0.5).unwrap();
        let first = prune_frame(&frame, &mask, &spec, &bm, &fp).unwrap();
        let pruned = SceneFrame {
            points: first.kept_point_indices.iter().map(|&i| frame.points[i]).collect(),
            ..frame.clone()
        };
        let second = prune_frame(&pruned, &mask, &spec, &bm, &fp).unwrap();
        assert_eq!(second.kept_point_indices, (0..pruned.points.len()).collect::<Vec<_>>());
        assert_eq!(second.kept_patch_indices, first.kept_patch_indices);
    }

    #[test]
    fn write_read_round_trip() {
        let (frame, spec, bm, fp) = setup();
        let dir = tempfile::tempdir().unwrap();
        for mask in [MaskGrid::all_ones(bm.mask_dims()), MaskGrid::all_zeros(bm.mask_dims())] {
            let outcome = prune_frame(&frame, &mask, &spec, &bm, &fp).unwrap();
            write_pruned_frame(&outcome, &frame, &mask, dir.path()).unwrap();
            let back = read_pruned_frame(dir.path()).unwrap();
            assert_eq!(back.kept_point_indices, outcome.kept_point_indices);
            assert_eq!(back.kept_patch_indices, outcome.kept_patch_indices);
            assert_eq!(back.mask, mask);
            assert_eq!(back.points.len(), outcome.kept_point_indices.len());
        }
    }
}
