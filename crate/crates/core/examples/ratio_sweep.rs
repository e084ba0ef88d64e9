//! Sweep drop ratios against a random-mask baseline and plot the result.
use mjp::bench::run_sweep;
use mjp::config::RunConfig;
use mjp::data::generate_dataset;
use mjp::predictor::{prepare_frames, train_stage1_task, train_stage2_consistency, train_stage3_joint};
use mjp::viz::render_sweep;

fn main() -> mjp::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 60;
    let s = cfg.setup()?;
    let frames = prepare_frames(&s, &generate_dataset(&cfg.scene, 12)?)?;
    let (anchor, _) = train_stage1_task(&frames, &cfg.train)?;
    let (w0, _) = train_stage2_consistency(&frames, &cfg.train)?;
    let (w, _, _) = train_stage3_joint(&frames, &w0, &anchor, &cfg.train)?;

    let ratios = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8];
    let (report, timing) = run_sweep(&s, &frames, &ratios, &w, &anchor, None, &cfg.train)?;
    println!("ratio  IoU    random  cost cut");
    for r in &report.rows {
        println!(
            "{:<5}  {:.3}  {:.3}   {:>5.1}%",
            r.ratio,
            r.performance,
            r.random_performance,
            100.0 * r.cost_reduction
        );
    }
    println!("{} ms total", timing.total_ms);

    let path = std::env::temp_dir().join("mjp_sweep.ppm");
    render_sweep(&report).write_ppm(&path)?;
    println!("plot written to {}", path.display());
    Ok(())
}
