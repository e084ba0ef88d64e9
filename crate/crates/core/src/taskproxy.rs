//! Occupancy proxy task: a logistic head predicts, for every BEV column,
//! whether an object covers the column center. Its IoU is the quality
//! metric `P`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Box3;
use crate::error::{Error, Result};
use crate::features::BevFeatureMap;
use crate::voxelgrid::{BlockMap, VoxelGridSpec};

/// Per-column ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyTruth {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl OccupancyTruth {
    /// A column is occupied iff its center lies inside some box footprint.
    pub fn from_boxes(boxes: &[Box3], spec: &VoxelGridSpec, bm: &BlockMap) -> Self {
        let md = bm.mask_dims();
        let (min, vs, b) = (spec.min_corner(), spec.voxel_size(), bm.block());
        let (cw, ch) = (vs.x * b.x as f64, vs.y * b.y as f64);
        let mut cells = Vec::with_capacity(md.columns());
        for iy in 0..md.y {
            for ix in 0..md.x {
                let x = min.x + (ix as f64 + 0.5) * cw;
                let y = min.y + (iy as f64 + 0.5) * ch;
                cells.push(boxes.iter().any(|bx| bx.contains_xy(x, y)));
            }
        }
        Self {
            width: md.x,
            height: md.y,
            cells,
        }
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Logistic head over whitened channels:
/// `p = σ(bias + weights · W (F − mean))` per column, with `W` a fixed
/// symmetric whitening matrix (row-major, `channels × channels`).
///
/// `mean` and `whiten` are fixed when the head is created; only `weights`
/// and `bias` are trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub whiten: Vec<f64>,
}

impl TaskHead {
    /// Zero head on raw channels (identity transform).
    pub fn zeros(channels: usize) -> Self {
        let mut whiten = vec![0.0; channels * channels];
        for k in 0..channels {
            whiten[k * channels + k] = 1.0;
        }
        Self::with_transform(vec![0.0; channels], whiten)
    }

    pub fn with_transform(mean: Vec<f64>, whiten: Vec<f64>) -> Self {
        Self {
            weights: vec![0.0; mean.len()],
            bias: 0.0,
            mean,
            whiten,
        }
    }

    /// Zero head whose transform is the ZCA whitening of every cell of
    /// `maps`: `W = Σ^{-1/2}`, with directions of (near) zero variance
    /// mapped to zero.
    pub fn fit_whitening(maps: &[&BevFeatureMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Precondition("no feature maps to whiten".into()))?;
        let c = first.channels;
        let (mut sum, mut count) = (vec![0.0; c], 0usize);
        for m in maps {
            if m.channels != c {
                return Err(Error::Dimension("feature maps have different channel counts".into()));
            }
            for col in 0..m.cells() {
                for (s, v) in sum.iter_mut().zip(m.cell(col)) {
                    *s += v;
                }
            }
            count += m.cells();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for m in maps {
            for col in 0..m.cells() {
                let d: Vec<f64> = m.cell(col).iter().zip(&mean).map(|(v, mu)| v - mu).collect();
                for a in 0..c {
                    for b in 0..c {
                        cov[(a, b)] += d[a] * d[b];
                    }
                }
            }
        }
        cov /= count as f64;
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let inv_sqrt = eig.eigenvalues.map(|l| if l > 1e-12 * top.max(1e-300) { 1.0 / l.sqrt() } else { 0.0 });
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        let whiten = (0..c).flat_map(|a| (0..c).map(move |b| (a, b))).map(|(a, b)| w[(a, b)]).collect();
        Ok(Self::with_transform(mean, whiten))
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    /// Trainable parameters: `weights` followed by `bias`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    /// Same transform, new trainable parameters.
    pub fn with_params(&self, p: &[f64]) -> Self {
        let (w, b) = p.split_at(p.len() - 1);
        Self {
            weights: w.to_vec(),
            bias: b[0],
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite()
            && self
                .weights
                .iter()
                .chain(&self.mean)
                .chain(&self.whiten)
                .all(|w| w.is_finite())
    }

    /// `W (f − mean)`.
    fn transform(&self, f: &[f64]) -> Vec<f64> {
        let c = self.channels();
        (0..c)
            .map(|a| {
                (0..c)
                    .map(|b| self.whiten[a * c + b] * (f[b] - self.mean[b]))
                    .sum()
            })
            .collect()
    }

    /// Effective per-channel weight on the raw features, `Wᵀ weights`.
    fn raw_weights(&self) -> Vec<f64> {
        let c = self.channels();
        (0..c)
            .map(|b| (0..c).map(|a| self.whiten[a * c + b] * self.weights[a]).sum())
            .collect()
    }

    pub fn logits(&self, bev: &BevFeatureMap) -> Vec<f64> {
        let raw = self.raw_weights();
        let offset: f64 = raw.iter().zip(&self.mean).map(|(w, m)| w * m).sum();
        (0..bev.cells())
            .map(|c| self.bias - offset + raw.iter().zip(bev.cell(c)).map(|(w, f)| w * f).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, bev: &BevFeatureMap) -> Vec<f64> {
        self.logits(bev).into_iter().map(sigmoid).collect()
    }

    pub fn predict(&self, bev: &BevFeatureMap) -> Vec<bool> {
        self.probabilities(bev).into_iter().map(|p| p >= 0.5).collect()
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
        let head: TaskHead = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if !head.is_finite() {
            return Err(Error::malformed(path, 0, "non-finite head parameters"));
        }
        Ok(head)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<()> {
    if head.weights.len() != bev.channels || head.mean.len() != bev.channels || head.whiten.len() != bev.channels * bev.channels {
        return Err(Error::Dimension(format!(
            "head has {} weights for {} channels",
            head.weights.len(),
            bev.channels
        )));
    }
    if bev.width != truth.width || bev.height != truth.height {
        return Err(Error::Dimension(format!(
            "features are {}x{} but truth is {}x{}",
            bev.width, bev.height, truth.width, truth.height
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over columns.
pub fn task_loss(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<f64> {
    check(head, bev, truth)?;
    let z = head.logits(bev);
    let sum: f64 = z
        .iter()
        .zip(&truth.cells)
        .map(|(&z, &t)| softplus(z) - if t { z } else { 0.0 })
        .sum();
    Ok(sum / z.len() as f64)
}

/// Gradients of a scalar with respect to the head parameters and the
/// features it was evaluated on. `head` carries the gradient in its
/// `weights` and `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub value: f64,
    pub head: TaskHead,
    pub features: BevFeatureMap,
}

/// Back-propagates per-column logit gradients.
fn backprop_logits(head: &TaskHead, bev: &BevFeatureMap, dz: &[f64], value: f64) -> HeadGrad {
    let mut gh = TaskHead {
        weights: vec![0.0; bev.channels],
        bias: 0.0,
        ..head.clone()
    };
    let raw = head.raw_weights();
    let mut gf = BevFeatureMap::zeros(bev.width, bev.height, bev.channels);
    for (c, &d) in dz.iter().enumerate() {
        gh.bias += d;
        for (g, x) in gh.weights.iter_mut().zip(head.transform(bev.cell(c))) {
            *g += d * x;
        }
        for (g, w) in gf.cell_mut(c).iter_mut().zip(&raw) {
            *g = d * w;
        }
    }
    HeadGrad {
        value,
        head: gh,
        features: gf,
    }
}

pub fn task_loss_grad(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<HeadGrad> {
    let value = task_loss(head, bev, truth)?;
    let n = bev.cells() as f64;
    let dz: Vec<f64> = head
        .logits(bev)
        .into_iter()
        .zip(&truth.cells)
        .map(|(z, &t)| (sigmoid(z) - if t { 1.0 } else { 0.0 }) / n)
        .collect();
    Ok(backprop_logits(head, bev, &dz, value))
}

/// Intersection over union of two binary grids; both empty gives 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hard IoU of the thresholded (0.5) prediction against the truth.
pub fn performance(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<f64> {
    check(head, bev, truth)?;
    Ok(iou(&head.predict(bev), &truth.cells))
}

/// `Σ min(p, t) / Σ max(p, t)`; 1 when both sums vanish.
pub fn soft_iou(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<f64> {
    Ok(soft_iou_grad(head, bev, truth)?.value)
}

pub fn soft_iou_grad(head: &TaskHead, bev: &BevFeatureMap, truth: &OccupancyTruth) -> Result<HeadGrad> {
    check(head, bev, truth)?;
    let p = head.probabilities(bev);
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &t) in p.iter().zip(&truth.cells) {
        if t {
            inter += p;
            union += 1.0;
        } else {
            union += p;
        }
    }
    if union == 0.0 {
        return Ok(backprop_logits(head, bev, &vec![0.0; p.len()], 1.0));
    }
    let value = inter / union;
    let dz: Vec<f64> = p
        .iter()
        .zip(&truth.cells)
        .map(|(&p, &t)| {
            let dp = if t { 1.0 / union } else { -inter / (union * union) };
            dp * p * (1.0 - p)
        })
        .collect();
    Ok(backprop_logits(head, bev, &dz, value))
}
