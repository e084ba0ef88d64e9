//! The mask predictor: seven hand-built features per mask cell, a logistic
//! scorer `s = σ(w · f)`, and the four-stage training protocol in [`train`].
//!
//! | index | feature                                                         |
//! |-------|-----------------------------------------------------------------|
//! | 0     | bias (1)                                                        |
//! | 1     | planar range of the cell center / grid radius, in `[0, 1]`      |
//! | 2     | cell center height, mapped to `[-1, 1]` over the grid z extent   |
//! | 3     | 1 if the cell center projects into the front image, else 0      |
//! | 4     | mean luminance of the patch it projects into, in `[0, 1]`       |
//! | 5     | gradient energy of that patch, in `[0, 1]`                      |
//! | 6     | `n / (1 + n)` for the number `n` of patch rays crossing the cell |

pub mod gradcheck;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::features::patch_descriptors;
use crate::geometry::CameraModel;
use crate::projection::FrustumFootprint;
use crate::rng::SceneRng;
use crate::taskproxy::sigmoid;
use crate::voxelgrid::{BlockMap, Dims3, MaskGrid, VoxelGridSpec};

pub use train::{
    prepare_frames, train_stage1_task, train_stage2_consistency, train_stage3_joint,
    train_stage4_finetune, EpochLog, FinetuneSummary, SparsityMode, TrainConfig, TrainFrame,
};

pub const N_FEATURES: usize = 7;
pub const FEATURE_VERSION: u32 = 1;

pub type CellFeature = [f64; N_FEATURES];

/// Features of every mask cell, in flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub dims: Dims3,
    pub cells: Vec<CellFeature>,
}

/// Calibration-only part of the features (everything but the two image
/// channels), shared by all frames with the same camera and grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    dims: Dims3,
    range: Vec<f64>,
    height: Vec<f64>,
    patch: Vec<Option<usize>>,
    rays: Vec<f64>,
}

impl CellGeometry {
    pub fn new(spec: &VoxelGridSpec, bm: &BlockMap, cam: &CameraModel, fp: &FrustumFootprint) -> Result<Self> {
        let md = bm.mask_dims();
        let (lo, hi) = (spec.min_corner(), spec.max_corner());
        let radius = [lo.x.abs(), hi.x.abs()]
            .iter()
            .flat_map(|x| [lo.y.abs(), hi.y.abs()].map(|y| x.hypot(y)))
            .fold(0.0, f64::max);
        let (zmid, zhalf) = ((lo.z + hi.z) / 2.0, (hi.z - lo.z) / 2.0);

        let mut rays = vec![0.0; md.len()];
        for cells in fp.entry_cells(bm)? {
            let mut seen: Vec<usize> = cells;
            seen.sort_unstable();
            seen.dedup();
            for j in seen {
                rays[j] += 1.0;
            }
        }
        rays.iter_mut().for_each(|r| *r /= 1.0 + *r);

        let mut range = Vec::with_capacity(md.len());
        let mut height = Vec::with_capacity(md.len());
        let mut patch = Vec::with_capacity(md.len());
        for j in 0..md.len() {
            let c = bm.cell_center(spec, j);
            range.push((c.x.hypot(c.y) / radius).min(1.0));
            height.push(((c.z - zmid) / zhalf).clamp(-1.0, 1.0));
            patch.push(cam.project(&c).and_then(|p| fp.patches.patch_at(p.u, p.v)));
        }
        Ok(Self {
            dims: md,
            range,
            height,
            patch,
            rays,
        })
    }

    pub fn features(&self, image: &GrayImage, fp: &FrustumFootprint) -> CellFeatures {
        let desc = patch_descriptors(image, &fp.patches);
        let cells = (0..self.dims.len())
            .map(|j| {
                let (flag, lum, grad) = match self.patch[j] {
                    Some(p) => (1.0, desc[p][0], desc[p][1]),
                    None => (0.0, 0.0, 0.0),
                };
                [1.0, self.range[j], self.height[j], flag, lum, grad, self.rays[j]]
            })
            .collect();
        CellFeatures { dims: self.dims, cells }
    }
}

pub fn cell_features(
    image: &GrayImage,
    spec: &VoxelGridSpec,
    bm: &BlockMap,
    cam: &CameraModel,
    fp: &FrustumFootprint,
) -> Result<CellFeatures> {
    if image.width != cam.width || image.height != cam.height {
        return Err(Error::Dimension("image does not match the camera".into()));
    }
    Ok(CellGeometry::new(spec, bm, cam, fp)?.features(image, fp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorWeights {
    pub w: [f64; N_FEATURES],
    pub theta: f64,
    pub feature_version: u32,
}

impl PredictorWeights {
    pub fn zeros(theta: f64) -> Self {
        Self {
            w: [0.0; N_FEATURES],
            theta,
            feature_version: FEATURE_VERSION,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|w| w.is_finite())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: PredictorWeights = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if w.feature_version != FEATURE_VERSION {
            return Err(Error::malformed(
                path,
                0,
                format!("feature_version {} (expected {FEATURE_VERSION})", w.feature_version),
            ));
        }
        if !w.is_finite() || !(w.theta > 0.0 && w.theta < 1.0) {
            return Err(Error::malformed(path, 0, "non-finite weights or theta outside (0, 1)"));
        }
        Ok(w)
    }
}

pub fn dot(w: &[f64; N_FEATURES], f: &CellFeature) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Raw scores `σ(w · f)` in double precision.
pub fn scores(w: &PredictorWeights, feats: &CellFeatures) -> Vec<f64> {
    feats.cells.iter().map(|f| sigmoid(dot(&w.w, f))).collect()
}

/// Scores written into a mask with bit `s >= θ`.
pub fn score_cells(w: &PredictorWeights, feats: &CellFeatures) -> Result<MaskGrid> {
    let s = scores(w, feats).into_iter().map(|s| s as f32).collect();
    MaskGrid::from_scores(feats.dims, s, w.theta as f32)
}

/// `∂ s_j / ∂ w` for one cell.
pub fn score_grad(w: &PredictorWeights, f: &CellFeature) -> CellFeature {
    let s = sigmoid(dot(&w.w, f));
    f.map(|x| s * (1.0 - s) * x)
}

/// Number of zeros a drop ratio asks for, rounded to the nearest cell.
pub fn zeros_for_ratio(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Hard mask keeping the highest-scoring cells and zeroing
/// `round(r · N)` of them. Ties keep the lower flattened index.
pub fn topk_mask(dims: Dims3, scores: &[f64], ratio: f64, theta: f64) -> Result<MaskGrid> {
    if scores.len() != dims.len() {
        return Err(Error::Dimension(format!("{} scores for a {dims} mask", scores.len())));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Precondition(format!("drop ratio {ratio} is outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let keep = scores.len() - zeros_for_ratio(scores.len(), ratio);
    let mut bits = vec![false; scores.len()];
    for &j in &order[..keep] {
        bits[j] = true;
    }
    MaskGrid::from_bits(dims, bits, theta as f32)
}

/// Cells ordered by ascending priority: zeroing a prefix of this order
/// gives the top-k masks for every ratio at once.
pub fn drop_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    order
}

/// Uniformly random drop order from a seeded shuffle.
pub fn random_drop_order(n: usize, rng: &mut SceneRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Mask zeroing the first `round(r · N)` cells of `order`.
pub fn mask_from_order(dims: Dims3, order: &[usize], ratio: f64, theta: f64) -> Result<MaskGrid> {
    if order.len() != dims.len() {
        return Err(Error::Dimension(format!("drop order of {} cells for a {dims} mask", order.len())));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Precondition(format!("drop ratio {ratio} is outside [0, 1]")));
    }
    let mut bits = vec![true; dims.len()];
    for &j in &order[..zeros_for_ratio(dims.len(), ratio)] {
        bits[j] = false;
    }
    MaskGrid::from_bits(dims, bits, theta as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use crate::projection::{lift_patches, PatchGrid};

    fn setup() -> (VoxelGridSpec, BlockMap, CameraModel, FrustumFootprint) {
        let spec = VoxelGridSpec::desk();
        let bm = BlockMap::new(spec.dims(), Dims3::new(32, 32, 4)).unwrap();
        let cam = CameraModel::new(32.0, 32.0, 32.0, 32.0, 64, 64, Pose::forward_camera(Vec3::zeros())).unwrap();
        let pg = PatchGrid::for_camera(&cam, 8).unwrap();
        let fp = lift_patches(&cam, &pg, &spec, 16, 1.0, 12.0).unwrap();
        (spec, bm, cam, fp)
    }

    fn cell_at(spec: &VoxelGridSpec, bm: &BlockMap, p: Vec3) -> usize {
        let (x, y, z) = spec.voxel_index(&p).unwrap();
        bm.block_of(x, y, z).unwrap()
    }

    #[test]
    fn front_and_back_cells() {
        let (spec, bm, cam, fp) = setup();
        let mut img = GrayImage::filled(64, 64, 0);
        for v in 24..32 {
            for u in 32..40 {
                img.set(u, v, 255);
            }
        }
        let f = cell_features(&img, &spec, &bm, &cam, &fp).unwrap();
        let front = &f.cells[cell_at(&spec, &bm, Vec3::new(6.0, -0.2, 0.2))];
        assert_eq!(front[3], 1.0);
        let c = bm.cell_center(&spec, cell_at(&spec, &bm, Vec3::new(6.0, -0.2, 0.2)));
        let p = cam.project(&c).unwrap();
        let patch = fp.patches.patch_at(p.u, p.v).unwrap();
        assert_eq!(front[4], patch_descriptors(&img, &fp.patches)[patch][0]);
        let back = &f.cells[cell_at(&spec, &bm, Vec3::new(-6.0, 0.0, 0.0))];
        assert_eq!(&back[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_weights_keep_everything() {
        let (spec, bm, cam, fp) = setup();
        let f = cell_features(&GrayImage::filled(64, 64, 90), &spec, &bm, &cam, &fp).unwrap();
        let m = score_cells(&PredictorWeights::zeros(0.5), &f).unwrap();
        assert!(m.scores().unwrap().iter().all(|&s| s == 0.5));
        assert_eq!(m.zero_count(), 0);
        let mut w = PredictorWeights::zeros(0.5);
        w.w[0] = 10.0;
        assert!(scores(&w, &f).iter().all(|&s| s > 0.9999));
    }

    #[test]
    fn topk_ties_keep_lower_index() {
        let dims = Dims3::new(2, 1, 2);
        let m = topk_mask(dims, &[0.5, 0.5, 0.5, 0.5], 0.5, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
        let m = topk_mask(dims, &[0.1, 0.9, 0.3, 0.7], 0.25, 0.5).unwrap();
        assert_eq!(m.bits(), &[false, true, true, true]);
        let order = drop_order(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(mask_from_order(dims, &order, 0.5, 0.5).unwrap(), m_topk(dims));
    }

    fn m_topk(dims: Dims3) -> MaskGrid {
        topk_mask(dims, &[0.5, 0.5, 0.5, 0.5], 0.5, 0.5).unwrap()
    }
}
