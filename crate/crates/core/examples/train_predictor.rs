//! Run the four training stages on a handful of scenes.
use mjp::config::RunConfig;
use mjp::data::generate_dataset;
use mjp::predictor::{
    prepare_frames, train_stage1_task, train_stage2_consistency, train_stage3_joint, train_stage4_finetune,
};

fn main() -> mjp::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 60;
    let s = cfg.setup()?;
    let frames = prepare_frames(&s, &generate_dataset(&cfg.scene, 12)?)?;

    let (anchor, logs) = train_stage1_task(&frames, &cfg.train)?;
    println!("task head: loss {:.4}", logs.last().unwrap().task);
    let (w0, logs) = train_stage2_consistency(&frames, &cfg.train)?;
    println!("consistency: loss {:.4}", logs.last().unwrap().cons);
    let (w, head, logs) = train_stage3_joint(&frames, &w0, &anchor, &cfg.train)?;
    let last = logs.last().unwrap();
    println!("joint: total {:.4}, zero fraction {:.3}", last.total, last.zero_fraction.unwrap_or(0.0));
    let (_, summary, _) = train_stage4_finetune(&s, &frames, &w, &head, &anchor, &cfg.train)?;
    println!(
        "finetune at r={}: IoU {:.3} -> {:.3} (epoch {})",
        summary.ratio, summary.p_before, summary.p_after, summary.best_epoch
    );
    println!("predictor weights {:?}", w.w);
    Ok(())
}
