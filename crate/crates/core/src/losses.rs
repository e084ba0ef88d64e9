//! Training objectives for the mask predictor.
//!
//! ```text
//! total   = task + α·cons + β·sparse + γ·penalty
//! cons    = Σ (F_orig − F_pruned)² / element count
//! sparse  = (Σ (1 − M_j) / N − r)²
//! penalty = λ · max(0, P_orig − P_masked)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BevFeatureMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub cons: f64,
    pub sparse: f64,
    pub penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.task, self.cons, self.sparse, self.penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_maps(a: &BevFeatureMap, b: &BevFeatureMap) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "feature maps {}x{}x{} and {}x{}x{} differ",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean squared element difference.
pub fn consistency_loss(original: &BevFeatureMap, pruned: &BevFeatureMap) -> Result<f64> {
    check_maps(original, pruned)?;
    let n = original.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = original
        .values
        .iter()
        .zip(&pruned.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

/// Gradient of [`consistency_loss`] with respect to the pruned map.
pub fn consistency_grad(original: &BevFeatureMap, pruned: &BevFeatureMap) -> Result<BevFeatureMap> {
    check_maps(original, pruned)?;
    let scale = 2.0 / original.values.len().max(1) as f64;
    Ok(BevFeatureMap {
        values: original
            .values
            .iter()
            .zip(&pruned.values)
            .map(|(a, b)| scale * (b - a))
            .collect(),
        ..pruned.clone()
    })
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Precondition(format!("target ratio {r} is outside [0, 1]")));
    }
    Ok(())
}

/// Works on hard bits (as 0/1) and on soft scores alike.
pub fn sparsity_loss(mask: &[f64], r: f64) -> Result<f64> {
    check_ratio(r)?;
    if mask.is_empty() {
        return Err(Error::Precondition("sparsity loss of an empty mask".into()));
    }
    let dropped = mask.iter().map(|m| 1.0 - m).sum::<f64>() / mask.len() as f64;
    Ok((dropped - r) * (dropped - r))
}

/// `∂ sparse / ∂ m_j`, identical for every cell.
pub fn sparsity_grad(mask: &[f64], r: f64) -> Result<f64> {
    check_ratio(r)?;
    if mask.is_empty() {
        return Err(Error::Precondition("sparsity loss of an empty mask".into()));
    }
    let n = mask.len() as f64;
    let dropped = mask.iter().map(|m| 1.0 - m).sum::<f64>() / n;
    Ok(-2.0 * (dropped - r) / n)
}

pub fn bits_as_f64(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

pub fn penalty_loss(p_original: f64, p_masked: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!("penalty scale {lambda} must be >= 0")));
    }
    Ok(lambda * (p_original - p_masked).max(0.0))
}

pub fn total_loss(
    task: f64,
    cons: f64,
    sparse: f64,
    penalty: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> LossBreakdown {
    LossBreakdown {
        task,
        cons,
        sparse,
        penalty,
        total: task + alpha * cons + beta * sparse + gamma * penalty,
    }
}
