//! Operation-count cost model and the ratio sweep.
//!
//! Costs are exact tallies from the extractors' [`OpCounts`], weighted by a
//! fixed per-unit cost. Wall-clock is measured too but kept out of the report
//! so that the report bytes only depend on inputs and seed.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Setup;
use crate::error::{Error, Result};
use crate::features::OpCounts;
use crate::losses::{bits_as_f64, consistency_loss, penalty_loss, sparsity_loss, total_loss, LossBreakdown};
use crate::predictor::{
    drop_order, mask_from_order, random_drop_order, scores, PredictorWeights, TrainConfig, TrainFrame, N_FEATURES,
};
use crate::rng::SceneRng;
use crate::taskproxy::{performance, task_loss, TaskHead};
use crate::voxelgrid::MaskGrid;

/// RNG stream offset for the random-mask baseline.
const RANDOM_STREAM: u64 = 0x5eed_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Voxels swept per retained block.
    pub c_voxel: u64,
    /// Pixels touched per kept patch and depth bin.
    pub c_patch: u64,
    /// Fixed predictor work per frame.
    pub c_predictor: u64,
}

impl CostModel {
    pub fn for_setup(setup: &Setup) -> Self {
        let ps = setup.fp.patches.patch_size as u64;
        Self {
            c_voxel: setup.bm.block_volume() as u64,
            c_patch: ps * ps,
            c_predictor: setup.mask_dims().len() as u64 * N_FEATURES as u64,
        }
    }

    /// LiDAR plus camera backbone work, predictor excluded.
    pub fn backbone_cost(&self, ops: &OpCounts) -> u64 {
        ops.voxel_blocks * self.c_voxel + ops.patch_bins * self.c_patch
    }

    pub fn total_cost(&self, ops: &OpCounts) -> u64 {
        self.backbone_cost(ops) + self.c_predictor
    }
}

/// Recomputes the tallies from the mask and the footprint alone, without
/// running any extractor.
pub fn recount(setup: &Setup, mask: &MaskGrid) -> Result<OpCounts> {
    setup.bm.check_mask(mask)?;
    let kept_patches = setup
        .fp
        .entry_cells(&setup.bm)?
        .iter()
        .filter(|cells| cells.iter().any(|&j| mask.is_kept(j)))
        .count();
    Ok(OpCounts {
        voxel_blocks: (mask.len() - mask.zero_count()) as u64,
        patch_bins: (kept_patches * setup.fp.depth_bins()) as u64,
        predictor_cells: mask.len() as u64,
    })
}

/// Means over frames at one ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub zero_fraction: f64,
    pub mean_cost: f64,
    pub mean_backbone_cost: f64,
    /// `1 - backbone / backbone at full retention`.
    pub cost_reduction: f64,
    pub prune_ratio_points: f64,
    pub prune_ratio_patches: f64,
    /// Anchor head on predictor-pruned features.
    pub performance: f64,
    /// Finetuned head on the same features, when one was supplied.
    pub performance_finetuned: Option<f64>,
    /// Anchor head on features pruned by a seeded random mask.
    pub random_performance: f64,
    pub random_cost_reduction: f64,
    pub loss: LossBreakdown,
    /// Every frame's extractor tallies equal the recount.
    pub recount_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub frames: usize,
    pub seed: u64,
    pub cost_model: CostModel,
    /// Full-retention backbone cost per frame, averaged.
    pub full_backbone_cost: f64,
    pub anchor_performance: f64,
    pub rows: Vec<RatioRow>,
    /// Mean cost never increases with the ratio.
    pub cost_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTiming {
    pub ratios: Vec<f64>,
    pub wall_clock_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct FrameEval {
    cost: f64,
    backbone: f64,
    zero_fraction: f64,
    points: f64,
    patches: f64,
    p: f64,
    p_ft: f64,
    p_rand: f64,
    backbone_rand: f64,
    task: f64,
    cons: f64,
    sparse: f64,
    penalty: f64,
    recount_ok: bool,
}

struct Eval<'a> {
    setup: &'a Setup,
    cost: CostModel,
    anchor: &'a TaskHead,
    finetuned: Option<&'a TaskHead>,
    cfg: &'a TrainConfig,
}

impl Eval<'_> {
    fn frame(&self, tf: &TrainFrame, anchor_p: f64, order: &[usize], rand: &[usize], r: f64) -> Result<FrameEval> {
        let dims = tf.feats.dims;
        let theta = self.cfg.theta;
        let mask = mask_from_order(dims, order, r, theta)?;
        let mut pf = self.setup.pruned_features(&tf.frame, &mask)?;
        pf.ops.predictor_cells = mask.len() as u64;
        let recount_ok = recount(self.setup, &mask)? == pf.ops;
        let bev = &pf.fused;
        let p = performance(self.anchor, bev, &tf.truth)?;
        let p_ft = match self.finetuned {
            Some(h) => performance(h, bev, &tf.truth)?,
            None => 0.0,
        };
        let task = task_loss(self.anchor, bev, &tf.truth)?;
        let cons = consistency_loss(&tf.original, bev)?;
        let sparse = sparsity_loss(&bits_as_f64(mask.bits()), r)?;
        let penalty = penalty_loss(anchor_p, p, self.cfg.lambda)?;

        let rmask = mask_from_order(dims, rand, r, theta)?;
        let rf = self.setup.pruned_features(&tf.frame, &rmask)?;
        Ok(FrameEval {
            cost: self.cost.total_cost(&pf.ops) as f64,
            backbone: self.cost.backbone_cost(&pf.ops) as f64,
            zero_fraction: mask.zero_fraction(),
            points: pf.outcome.prune_ratio_points,
            patches: pf.outcome.prune_ratio_patches,
            p,
            p_ft,
            p_rand: performance(self.anchor, &rf.fused, &tf.truth)?,
            backbone_rand: self.cost.backbone_cost(&rf.ops) as f64,
            task,
            cons,
            sparse,
            penalty,
            recount_ok,
        })
    }
}

fn mean(evals: &[FrameEval], f: impl Fn(&FrameEval) -> f64) -> f64 {
    evals.iter().map(f).sum::<f64>() / evals.len() as f64
}

/// Sweeps `ratios`: per frame, a top-k mask from the predictor scores and a
/// seeded random mask at the same ratio, both pruned, extracted and scored
/// with the anchor head. Masks for increasing ratios are nested.
pub fn run_sweep(
    setup: &Setup,
    frames: &[TrainFrame],
    ratios: &[f64],
    weights: &PredictorWeights,
    anchor: &TaskHead,
    finetuned: Option<&TaskHead>,
    cfg: &TrainConfig,
) -> Result<(SweepReport, SweepTiming)> {
    if frames.is_empty() {
        return Err(Error::Prerequisite("sweep needs at least one frame".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("sweep ratio {r} is outside [0, 1]")));
    }
    let start = Instant::now();
    let eval = Eval {
        setup,
        cost: CostModel::for_setup(setup),
        anchor,
        finetuned,
        cfg,
    };
    let anchor_p: Vec<f64> = frames
        .par_iter()
        .map(|tf| performance(anchor, &tf.original, &tf.truth))
        .collect::<Result<_>>()?;
    let orders: Vec<(Vec<usize>, Vec<usize>)> = frames
        .par_iter()
        .enumerate()
        .map(|(i, tf)| {
            let order = drop_order(&scores(weights, &tf.feats));
            let mut rng = SceneRng::derive(cfg.seed, RANDOM_STREAM + i as u64);
            (order, random_drop_order(tf.feats.dims.len(), &mut rng))
        })
        .collect();
    let full = MaskGrid::all_ones(setup.mask_dims());
    let full_backbone = eval.cost.backbone_cost(&recount(setup, &full)?) as f64;

    let mut rows = Vec::with_capacity(ratios.len());
    let mut ms = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let t = Instant::now();
        let evals: Vec<FrameEval> = frames
            .par_iter()
            .enumerate()
            .map(|(i, tf)| eval.frame(tf, anchor_p[i], &orders[i].0, &orders[i].1, r))
            .collect::<Result<_>>()?;
        let reduction = |b: f64| if full_backbone > 0.0 { 1.0 - b / full_backbone } else { 0.0 };
        let (task, cons, sparse, penalty) = (
            mean(&evals, |e| e.task),
            mean(&evals, |e| e.cons),
            mean(&evals, |e| e.sparse),
            mean(&evals, |e| e.penalty),
        );
        rows.push(RatioRow {
            ratio: r,
            zero_fraction: mean(&evals, |e| e.zero_fraction),
            mean_cost: mean(&evals, |e| e.cost),
            mean_backbone_cost: mean(&evals, |e| e.backbone),
            cost_reduction: reduction(mean(&evals, |e| e.backbone)),
            prune_ratio_points: mean(&evals, |e| e.points),
            prune_ratio_patches: mean(&evals, |e| e.patches),
            performance: mean(&evals, |e| e.p),
            performance_finetuned: finetuned.map(|_| mean(&evals, |e| e.p_ft)),
            random_performance: mean(&evals, |e| e.p_rand),
            random_cost_reduction: reduction(mean(&evals, |e| e.backbone_rand)),
            loss: total_loss(task, cons, sparse, penalty, cfg.alpha, cfg.beta, cfg.gamma),
            recount_matches: evals.iter().all(|e| e.recount_ok),
        });
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }

    let mut by_ratio: Vec<&RatioRow> = rows.iter().collect();
    by_ratio.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let cost_monotone = by_ratio.windows(2).all(|w| w[1].mean_cost <= w[0].mean_cost);
    let report = SweepReport {
        frames: frames.len(),
        seed: cfg.seed,
        cost_model: eval.cost,
        full_backbone_cost: full_backbone,
        anchor_performance: anchor_p.iter().sum::<f64>() / frames.len() as f64,
        rows,
        cost_monotone,
    };
    let timing = SweepTiming {
        ratios: ratios.to_vec(),
        wall_clock_ms: ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((report, timing))
}

/// Pretty JSON with object keys in sorted order.
pub fn to_sorted_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::json(path, e))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_sorted_json(value, path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SweepReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn row(&self, ratio: f64) -> Option<&RatioRow> {
        self.rows.iter().find(|r| (r.ratio - ratio).abs() < 1e-9)
    }

    /// Increases of mean P between consecutive ratios in `[0, up_to]`.
    pub fn inversions(&self, up_to: f64) -> Vec<(f64, f64)> {
        let mut rows: Vec<&RatioRow> = self.rows.iter().filter(|r| r.ratio <= up_to + 1e-9).collect();
        rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        rows.windows(2)
            .filter(|w| w[1].performance > w[0].performance)
            .map(|w| (w[1].ratio, w[1].performance - w[0].performance))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::generate_dataset;
    use crate::predictor::prepare_frames;

    fn small() -> (Setup, Vec<TrainFrame>) {
        let cfg = RunConfig::default();
        let setup = cfg.setup().unwrap();
        let frames = generate_dataset(&cfg.scene, 2).unwrap();
        let tf = prepare_frames(&setup, &frames).unwrap();
        (setup, tf)
    }

    #[test]
    fn recount_extremes() {
        let (setup, tf) = small();
        let cost = CostModel::for_setup(&setup);
        let zeros = MaskGrid::all_zeros(setup.mask_dims());
        let ops = recount(&setup, &zeros).unwrap();
        assert_eq!(cost.total_cost(&ops), cost.c_predictor);
        let mut pf = setup.pruned_features(&tf[0].frame, &zeros).unwrap();
        pf.ops.predictor_cells = zeros.len() as u64;
        assert_eq!(pf.ops, ops);
        let ones = MaskGrid::all_ones(setup.mask_dims());
        let mut pf = setup.pruned_features(&tf[0].frame, &ones).unwrap();
        pf.ops.predictor_cells = ones.len() as u64;
        assert_eq!(pf.ops, recount(&setup, &ones).unwrap());
    }

    #[test]
    fn sweep_zero_ratio_is_anchor() {
        let (setup, tf) = small();
        let cfg = TrainConfig::default();
        let head = TaskHead::zeros(crate::features::BEV_CHANNELS);
        let w = PredictorWeights::zeros(cfg.theta);
        let (rep, timing) = run_sweep(&setup, &tf, &[0.0, 0.5], &w, &head, None, &cfg).unwrap();
        assert_eq!(timing.wall_clock_ms.len(), 2);
        let r0 = rep.row(0.0).unwrap();
        assert_eq!(r0.cost_reduction, 0.0);
        assert_eq!(r0.performance, rep.anchor_performance);
        assert!(rep.cost_monotone);
        assert!(rep.rows.iter().all(|r| r.recount_matches));
        assert!(rep.row(0.5).unwrap().cost_reduction > 0.0);
    }
}
