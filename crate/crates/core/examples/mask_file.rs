//! Score a frame, write the mask file, read it back and compare.
use mjp::config::RunConfig;
use mjp::data::generate_scene;
use mjp::predictor::{score_cells, PredictorWeights};
use mjp::voxelgrid::MaskGrid;

fn main() -> mjp::Result<()> {
    let cfg = RunConfig::default();
    let s = cfg.setup()?;
    let frame = generate_scene(&cfg.scene, 9)?;

    // keep cells that fall inside the image or carry LiDAR rays
    let mut w = PredictorWeights::zeros(0.5);
    w.w[0] = -1.0;
    w.w[3] = 2.0;
    w.w[6] = 3.0;
    let mask = score_cells(&w, &s.cell_features(&frame)?)?;

    let path = std::env::temp_dir().join("mjp_example.mjpm");
    mask.write(&path)?;
    let back = MaskGrid::read(&path)?;
    println!(
        "{}: {:?} cells, {} dropped at threshold {}, {} bytes, round trip equal: {}",
        path.display(),
        back.dims(),
        back.zero_count(),
        back.threshold(),
        mask.to_bytes().len(),
        back == mask
    );
    Ok(())
}
