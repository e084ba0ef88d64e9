//! Four-stage training with full-batch gradient descent.
//!
//! 1. `task`: fit the occupancy head on unpruned features (the anchor).
//! 2. `cons`: fit the predictor to keep soft-pruned features close to the
//!    unpruned ones, head frozen.
//! 3. `joint`: predictor and head together on the total loss.
//! 4. `finetune`: fix a top-k mask at the target ratio and finetune the head
//!    on hard-pruned features.
//!
//! During stages 2 and 3 the scores weight every cell's input contributions
//! (see [`SoftBev`]). Per-frame work runs on the rayon pool and is reduced in
//! frame order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{scores, topk_mask, CellFeatures, PredictorWeights, N_FEATURES};
use crate::config::Setup;
use crate::data::SceneFrame;
use crate::error::{Error, Result};
use crate::features::{smooth3x3, BevFeatureMap, SoftBev};
use crate::losses::{
    bits_as_f64, consistency_grad, consistency_loss, penalty_loss, sparsity_grad, sparsity_loss,
    total_loss, LossBreakdown,
};
use crate::taskproxy::{performance, soft_iou, soft_iou_grad, task_loss_grad, OccupancyTruth, TaskHead};

/// How the sparsity term sees the mask during joint training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// Loss on the thresholded mask, gradient passed straight through to
    /// the scores.
    #[default]
    Hard,
    /// Loss and gradient on the scores themselves.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Target drop ratio `r`.
    pub ratio: f64,
    pub theta: f64,
    /// Step size for the predictor weights.
    pub lr: f64,
    /// Step size for the task head (stages 1, 3 and 4).
    pub head_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub sparsity: SparsityMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            ratio: 0.5,
            theta: 0.5,
            lr: 0.1,
            head_lr: 3.0,
            epochs: 200,
            seed: 42,
            sparsity: SparsityMode::Hard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        for (name, v) in [("ratio", self.ratio), ("theta", self.theta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        for (name, v) in [("lr", self.lr), ("head_lr", self.head_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One JSON line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub task: f64,
    pub cons: f64,
    pub sparse: f64,
    pub penalty: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zero_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub performance: Option<f64>,
}

impl EpochLog {
    fn new(stage: &str, epoch: usize, l: &LossBreakdown) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            task: l.task,
            cons: l.cons,
            sparse: l.sparse,
            penalty: l.penalty,
            total: l.total,
            zero_fraction: None,
            performance: None,
        }
    }
}

/// Everything a frame contributes to training, computed once.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub frame: SceneFrame,
    pub feats: CellFeatures,
    pub soft: SoftBev,
    pub truth: OccupancyTruth,
    /// Fused features of the unpruned frame.
    pub original: BevFeatureMap,
}

pub fn prepare_frames(setup: &Setup, frames: &[SceneFrame]) -> Result<Vec<TrainFrame>> {
    frames
        .par_iter()
        .map(|frame| {
            Ok(TrainFrame {
                feats: setup.cell_features(frame)?,
                soft: setup.soft_bev(frame)?,
                truth: setup.truth(frame),
                original: setup.unpruned_features(frame)?.fused,
                frame: frame.clone(),
            })
        })
        .collect()
}

fn require_frames(frames: &[TrainFrame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Precondition("training needs at least one frame".into()));
    }
    Ok(())
}

fn diverged(stage: &str, epoch: usize) -> Error {
    Error::Divergence(format!("stage {stage}, epoch {epoch}: non-finite loss"))
}

/// Per-frame value and gradients, averaged in frame order.
struct Step {
    loss: LossBreakdown,
    grad_w: [f64; N_FEATURES],
    grad_head: Vec<f64>,
    zero_fraction: f64,
    performance: f64,
}

fn average(steps: Vec<Step>) -> Step {
    let n = steps.len() as f64;
    let mut it = steps.into_iter();
    let mut acc = it.next().expect("non-empty");
    for s in it {
        acc.loss.task += s.loss.task;
        acc.loss.cons += s.loss.cons;
        acc.loss.sparse += s.loss.sparse;
        acc.loss.penalty += s.loss.penalty;
        acc.loss.total += s.loss.total;
        for (a, b) in acc.grad_w.iter_mut().zip(&s.grad_w) {
            *a += b;
        }
        for (a, b) in acc.grad_head.iter_mut().zip(&s.grad_head) {
            *a += b;
        }
        acc.zero_fraction += s.zero_fraction;
        acc.performance += s.performance;
    }
    acc.loss.task /= n;
    acc.loss.cons /= n;
    acc.loss.sparse /= n;
    acc.loss.penalty /= n;
    acc.loss.total /= n;
    acc.grad_w.iter_mut().for_each(|g| *g /= n);
    acc.grad_head.iter_mut().for_each(|g| *g /= n);
    acc.zero_fraction /= n;
    acc.performance /= n;
    acc
}

fn add_scaled(dst: &mut BevFeatureMap, src: &BevFeatureMap, a: f64) {
    for (d, s) in dst.values.iter_mut().zip(&src.values) {
        *d += a * s;
    }
}

/// Chains a per-score gradient through `s = σ(w·f)`.
fn chain_scores(feats: &CellFeatures, s: &[f64], grad_s: &[f64]) -> [f64; N_FEATURES] {
    let mut g = [0.0; N_FEATURES];
    for ((f, &s), &gs) in feats.cells.iter().zip(s).zip(grad_s) {
        let d = gs * s * (1.0 - s);
        for (gk, fk) in g.iter_mut().zip(f) {
            *gk += d * fk;
        }
    }
    g
}

fn stage1_step(head: &TaskHead, tf: &TrainFrame) -> Result<Step> {
    let g = task_loss_grad(head, &tf.original, &tf.truth)?;
    Ok(Step {
        loss: total_loss(g.value, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        grad_w: [0.0; N_FEATURES],
        grad_head: g.head.params(),
        zero_fraction: 0.0,
        performance: 0.0,
    })
}

fn map_frames<F>(frames: &[TrainFrame], f: F) -> Result<Step>
where
    F: Fn(&TrainFrame) -> Result<Step> + Sync + Send,
{
    let steps = frames.par_iter().map(f).collect::<Result<Vec<_>>>()?;
    Ok(average(steps))
}

/// Log-odds of the occupied-column rate, clamped away from 0 and 1.
fn prior_logit(frames: &[TrainFrame]) -> f64 {
    let (pos, all) = frames.iter().fold((0usize, 0usize), |(p, a), tf| {
        (p + tf.truth.occupied(), a + tf.truth.cells.len())
    });
    let rate = ((pos as f64 + 0.5) / (all as f64 + 1.0)).clamp(1e-6, 1.0 - 1e-6);
    (rate / (1.0 - rate)).ln()
}

/// Stage 1: the anchor head on unpruned features. Weights start at zero,
/// the bias at the log-odds of the occupied rate.
pub fn train_stage1_task(frames: &[TrainFrame], cfg: &TrainConfig) -> Result<(TaskHead, Vec<EpochLog>)> {
    require_frames(frames)?;
    let maps: Vec<&BevFeatureMap> = frames.iter().map(|tf| &tf.original).collect();
    let mut head = TaskHead::fit_whitening(&maps)?;
    head.bias = prior_logit(frames);
    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let step = map_frames(frames, |tf| stage1_step(&head, tf))?;
        if !step.loss.is_finite() {
            return Err(diverged("task", epoch));
        }
        logs.push(EpochLog::new("task", epoch, &step.loss));
        if epoch == cfg.epochs {
            break;
        }
        let p: Vec<f64> = head
            .params()
            .iter()
            .zip(&step.grad_head)
            .map(|(p, g)| p - cfg.head_lr * g)
            .collect();
        head = head.with_params(&p);
    }
    Ok((head, logs))
}

/// Consistency loss of one frame and its gradient with respect to `w`.
pub fn consistency_objective(w: &PredictorWeights, tf: &TrainFrame) -> Result<(f64, [f64; N_FEATURES])> {
    let s = scores(w, &tf.feats);
    let pruned = smooth3x3(&tf.soft.forward(&s));
    let cons = consistency_loss(&tf.original, &pruned)?;
    let g_pre = smooth3x3(&consistency_grad(&tf.original, &pruned)?);
    let grad_s = tf.soft.backward(&g_pre);
    Ok((cons, chain_scores(&tf.feats, &s, &grad_s)))
}

/// Stage 2: predictor from `w = 0` on the consistency loss alone.
pub fn train_stage2_consistency(
    frames: &[TrainFrame],
    cfg: &TrainConfig,
) -> Result<(PredictorWeights, Vec<EpochLog>)> {
    require_frames(frames)?;
    let mut w = PredictorWeights::zeros(cfg.theta);
    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let step = map_frames(frames, |tf| {
            let (cons, grad_w) = consistency_objective(&w, tf)?;
            let zero_fraction = zero_fraction(&scores(&w, &tf.feats), cfg.theta);
            Ok(Step {
                loss: total_loss(0.0, cons, 0.0, 0.0, 1.0, 0.0, 0.0),
                grad_w,
                grad_head: Vec::new(),
                zero_fraction,
                performance: 0.0,
            })
        })?;
        if !step.loss.is_finite() {
            return Err(diverged("cons", epoch));
        }
        let mut log = EpochLog::new("cons", epoch, &step.loss);
        log.zero_fraction = Some(step.zero_fraction);
        logs.push(log);
        if epoch == cfg.epochs {
            break;
        }
        for (wk, g) in w.w.iter_mut().zip(&step.grad_w) {
            *wk -= cfg.lr * g;
        }
    }
    Ok((w, logs))
}

fn zero_fraction(s: &[f64], theta: f64) -> f64 {
    s.iter().filter(|&&s| s < theta).count() as f64 / s.len() as f64
}

/// Loss components and gradients of the joint objective for one frame.
///
/// `anchor_p` is the anchor head's soft IoU on the unpruned frame.
pub fn joint_objective(
    w: &PredictorWeights,
    head: &TaskHead,
    tf: &TrainFrame,
    anchor_p: f64,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, [f64; N_FEATURES], TaskHead)> {
    let s = scores(w, &tf.feats);
    let pruned = smooth3x3(&tf.soft.forward(&s));

    let task = task_loss_grad(head, &pruned, &tf.truth)?;
    let mut g_feat = task.features;
    let mut g_head = task.head.params();

    let cons = consistency_loss(&tf.original, &pruned)?;
    add_scaled(&mut g_feat, &consistency_grad(&tf.original, &pruned)?, cfg.alpha);

    let p = soft_iou_grad(head, &pruned, &tf.truth)?;
    let penalty = penalty_loss(anchor_p, p.value, cfg.lambda)?;
    if anchor_p > p.value {
        let a = -cfg.gamma * cfg.lambda;
        add_scaled(&mut g_feat, &p.features, a);
        for (g, d) in g_head.iter_mut().zip(p.head.params()) {
            *g += a * d;
        }
    }

    let (sparse, g_sparse) = match cfg.sparsity {
        SparsityMode::Hard => {
            let bits = bits_as_f64(&s.iter().map(|&s| s >= cfg.theta).collect::<Vec<_>>());
            (sparsity_loss(&bits, cfg.ratio)?, sparsity_grad(&bits, cfg.ratio)?)
        }
        SparsityMode::Soft => (sparsity_loss(&s, cfg.ratio)?, sparsity_grad(&s, cfg.ratio)?),
    };

    let mut grad_s = tf.soft.backward(&smooth3x3(&g_feat));
    grad_s.iter_mut().for_each(|g| *g += cfg.beta * g_sparse);
    let grad_w = chain_scores(&tf.feats, &s, &grad_s);
    let loss = total_loss(task.value, cons, sparse, penalty, cfg.alpha, cfg.beta, cfg.gamma);
    Ok((loss, grad_w, head.with_params(&g_head)))
}

fn anchor_scores(anchor: &TaskHead, frames: &[TrainFrame]) -> Result<Vec<f64>> {
    frames
        .par_iter()
        .map(|tf| soft_iou(anchor, &tf.original, &tf.truth))
        .collect()
}

/// Stage 3: predictor and head on the total loss. Starts from the stage-2
/// predictor and a copy of the anchor head.
pub fn train_stage3_joint(
    frames: &[TrainFrame],
    w0: &PredictorWeights,
    anchor: &TaskHead,
    cfg: &TrainConfig,
) -> Result<(PredictorWeights, TaskHead, Vec<EpochLog>)> {
    require_frames(frames)?;
    let anchor_p = anchor_scores(anchor, frames)?;
    let mut w = w0.clone();
    w.theta = cfg.theta;
    let mut head = anchor.clone();
    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let indexed: Vec<(usize, &TrainFrame)> = frames.iter().enumerate().collect();
        let steps = indexed
            .par_iter()
            .map(|&(i, tf)| {
                let (loss, grad_w, gh) = joint_objective(&w, &head, tf, anchor_p[i], cfg)?;
                Ok(Step {
                    loss,
                    grad_w,
                    grad_head: gh.params(),
                    zero_fraction: zero_fraction(&scores(&w, &tf.feats), cfg.theta),
                    performance: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let step = average(steps);
        if !step.loss.is_finite() {
            return Err(diverged("joint", epoch));
        }
        let mut log = EpochLog::new("joint", epoch, &step.loss);
        log.zero_fraction = Some(step.zero_fraction);
        logs.push(log);
        if epoch == cfg.epochs {
            break;
        }
        for (wk, g) in w.w.iter_mut().zip(&step.grad_w) {
            *wk -= cfg.lr * g;
        }
        let p: Vec<f64> = head
            .params()
            .iter()
            .zip(&step.grad_head)
            .map(|(p, g)| p - cfg.head_lr * g)
            .collect();
        head = head.with_params(&p);
    }
    Ok((w, head, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub ratio: f64,
    /// Mean actual zero fraction of the fixed masks.
    pub zero_fraction: f64,
    /// Mean hard IoU of the starting head on the pruned training frames.
    pub p_before: f64,
    /// Mean hard IoU of the returned head.
    pub p_after: f64,
    pub best_epoch: usize,
}

/// Stage 4: top-k masks at `cfg.ratio` from the predictor, then the head is
/// finetuned on hard-pruned features with the task loss plus the penalty.
/// The epoch with the best hard IoU on the training frames is returned.
pub fn train_stage4_finetune(
    setup: &Setup,
    frames: &[TrainFrame],
    w: &PredictorWeights,
    head0: &TaskHead,
    anchor: &TaskHead,
    cfg: &TrainConfig,
) -> Result<(TaskHead, FinetuneSummary, Vec<EpochLog>)> {
    require_frames(frames)?;
    let anchor_p = anchor_scores(anchor, frames)?;
    let pruned: Vec<(BevFeatureMap, f64)> = frames
        .par_iter()
        .map(|tf| {
            let mask = topk_mask(tf.feats.dims, &scores(w, &tf.feats), cfg.ratio, cfg.theta)?;
            let zf = mask.zero_fraction();
            Ok((setup.pruned_features(&tf.frame, &mask)?.fused, zf))
        })
        .collect::<Result<_>>()?;
    let mean_zero = pruned.iter().map(|(_, z)| z).sum::<f64>() / pruned.len() as f64;

    let mut head = head0.clone();
    let mut best = (f64::NEG_INFINITY, 0, head.clone());
    let mut p_before = 0.0;
    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let steps = (0..frames.len())
            .into_par_iter()
            .map(|i| {
                let (bev, _) = &pruned[i];
                let truth = &frames[i].truth;
                let task = task_loss_grad(&head, bev, truth)?;
                let mut g_head = task.head.params();
                let p = soft_iou_grad(&head, bev, truth)?;
                let penalty = penalty_loss(anchor_p[i], p.value, cfg.lambda)?;
                if anchor_p[i] > p.value {
                    for (g, d) in g_head.iter_mut().zip(p.head.params()) {
                        *g -= cfg.gamma * cfg.lambda * d;
                    }
                }
                Ok(Step {
                    loss: total_loss(task.value, 0.0, 0.0, penalty, cfg.alpha, cfg.beta, cfg.gamma),
                    grad_w: [0.0; N_FEATURES],
                    grad_head: g_head,
                    zero_fraction: 0.0,
                    performance: performance(&head, bev, truth)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let step = average(steps);
        if !step.loss.is_finite() {
            return Err(diverged("finetune", epoch));
        }
        if epoch == 0 {
            p_before = step.performance;
        }
        if step.performance > best.0 {
            best = (step.performance, epoch, head.clone());
        }
        let mut log = EpochLog::new("finetune", epoch, &step.loss);
        log.zero_fraction = Some(mean_zero);
        log.performance = Some(step.performance);
        logs.push(log);
        if epoch == cfg.epochs {
            break;
        }
        let p: Vec<f64> = head
            .params()
            .iter()
            .zip(&step.grad_head)
            .map(|(p, g)| p - cfg.head_lr * g)
            .collect();
        head = head.with_params(&p);
    }
    let (p_after, best_epoch, head) = best;
    Ok((
        head,
        FinetuneSummary {
            ratio: cfg.ratio,
            zero_fraction: mean_zero,
            p_before,
            p_after,
            best_epoch,
        },
        logs,
    ))
}
