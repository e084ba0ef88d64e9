//! Run configuration and the derived pipeline context.
//!
//! Every field has a default, so `{}` is a valid config file. Unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SceneConfig, SceneFrame};
use crate::error::{Error, Result};
use crate::features::{extract_camera_bev, extract_lidar_bev, fuse_bev, BevFeatureMap, OpCounts, SoftBev};
use crate::geometry::{CameraModel, Vec3};
use crate::predictor::{CellFeatures, CellGeometry, TrainConfig};
use crate::projection::{lift_patches, FrustumFootprint, PatchGrid};
use crate::pruning::{prune_frame, PruneOutcome};
use crate::taskproxy::OccupancyTruth;
use crate::voxelgrid::{BlockMap, Dims3, MaskGrid, VoxelGridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
    pub voxel_size: [f64; 3],
    /// Predictor output `(W, H, Z)`.
    pub mask_dims: [usize; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            min_corner: [-12.8, -12.8, -2.0],
            max_corner: [12.8, 12.8, 2.0],
            voxel_size: [0.2, 0.2, 0.2],
            mask_dims: [32, 32, 4],
        }
    }
}

impl GridConfig {
    /// Full-scale grid: 1024×1024×80 voxels under a 128×128×16 mask.
    pub fn full_size() -> Self {
        Self {
            min_corner: [-51.2, -51.2, -8.0],
            max_corner: [51.2, 51.2, 8.0],
            voxel_size: [0.1, 0.1, 0.2],
            mask_dims: [128, 128, 16],
        }
    }

    pub fn spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(
            Vec3::from(self.min_corner),
            Vec3::from(self.max_corner),
            Vec3::from(self.voxel_size),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub patch_size: u32,
    pub depth_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            depth_bins: 16,
            d_min: 1.0,
            d_max: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub ratios: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ratios: (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub grid: GridConfig,
    pub lift: LiftConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Sets the scene and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.bench.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("bench ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        self.validate()?;
        let spec = self.grid.spec().map_err(|e| Error::Config(e.to_string()))?;
        let [w, h, z] = self.grid.mask_dims;
        let bm = BlockMap::new(spec.dims(), Dims3::new(w, h, z)).map_err(|e| Error::Config(e.to_string()))?;
        let cam = self.scene.camera.camera().map_err(|e| Error::Config(e.to_string()))?;
        let pg = PatchGrid::for_camera(&cam, self.lift.patch_size).map_err(|e| Error::Config(e.to_string()))?;
        let l = &self.lift;
        let fp = lift_patches(&cam, &pg, &spec, l.depth_bins, l.d_min, l.d_max)
            .map_err(|e| Error::Config(e.to_string()))?;
        let geometry = CellGeometry::new(&spec, &bm, &cam, &fp)?;
        Ok(Setup {
            spec,
            bm,
            cam,
            fp,
            geometry,
        })
    }
}

/// Grid, block map, camera and frustum footprint shared by every frame.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: VoxelGridSpec,
    pub bm: BlockMap,
    pub cam: CameraModel,
    pub fp: FrustumFootprint,
    pub geometry: CellGeometry,
}

/// A frame pushed through mask, pruning and feature extraction.
#[derive(Debug, Clone)]
pub struct PrunedFeatures {
    pub outcome: PruneOutcome,
    pub fused: BevFeatureMap,
    pub ops: OpCounts,
}

impl Setup {
    pub fn mask_dims(&self) -> Dims3 {
        self.bm.mask_dims()
    }

    pub fn check_frame(&self, frame: &SceneFrame) -> Result<()> {
        if frame.cam != self.cam {
            return Err(Error::Dimension(
                "frame calibration differs from the configured camera".into(),
            ));
        }
        Ok(())
    }

    pub fn truth(&self, frame: &SceneFrame) -> OccupancyTruth {
        OccupancyTruth::from_boxes(&frame.boxes, &self.spec, &self.bm)
    }

    pub fn cell_features(&self, frame: &SceneFrame) -> Result<CellFeatures> {
        self.check_frame(frame)?;
        Ok(self.geometry.features(&frame.image, &self.fp))
    }

    pub fn soft_bev(&self, frame: &SceneFrame) -> Result<SoftBev> {
        self.check_frame(frame)?;
        SoftBev::new(&self.spec, &self.bm, &self.fp, &self.cam, &frame.points, &frame.image)
    }

    /// Prunes with `mask`, then runs both backbones on the retained inputs
    /// and fuses.
    pub fn pruned_features(&self, frame: &SceneFrame, mask: &MaskGrid) -> Result<PrunedFeatures> {
        self.check_frame(frame)?;
        let outcome = prune_frame(frame, mask, &self.spec, &self.bm, &self.fp)?;
        let mut ops = OpCounts::default();
        let lidar = extract_lidar_bev(
            &self.spec,
            &self.bm,
            &frame.points,
            Some(&outcome.kept_point_indices),
            Some(mask),
            &mut ops,
        )?;
        let camera = extract_camera_bev(
            &self.cam,
            &self.fp,
            &self.bm,
            &frame.image,
            &outcome.kept_patch_indices,
            Some(mask),
            &mut ops,
        )?;
        let fused = fuse_bev(&lidar, &camera)?;
        Ok(PrunedFeatures { outcome, fused, ops })
    }

    pub fn unpruned_features(&self, frame: &SceneFrame) -> Result<PrunedFeatures> {
        self.pruned_features(frame, &MaskGrid::all_ones(self.mask_dims()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"alpah": 1}}"#).is_err());
    }

    #[test]
    fn full_size_grid_dims() {
        let spec = GridConfig::full_size().spec().unwrap();
        assert_eq!(spec.dims(), Dims3::new(1024, 1024, 80));
    }
}
