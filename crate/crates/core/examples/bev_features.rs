//! Extract fused BEV features with and without pruning and count the work.
use mjp::bench::CostModel;
use mjp::config::RunConfig;
use mjp::data::generate_scene;
use mjp::voxelgrid::MaskGrid;

fn main() -> mjp::Result<()> {
    let cfg = RunConfig::default();
    let s = cfg.setup()?;
    let frame = generate_scene(&cfg.scene, 5)?;
    let cost = CostModel::for_setup(&s);

    let full = s.unpruned_features(&frame)?;
    let bits = (0..s.mask_dims().len()).map(|j| j % 3 != 0).collect();
    let pruned = s.pruned_features(&frame, &MaskGrid::from_bits(s.mask_dims(), bits, 0.5)?)?;

    let map = &full.fused;
    println!("BEV map {}x{} with {} channels", map.width, map.height, map.channels);
    for (name, pf) in [("full", &full), ("pruned", &pruned)] {
        let energy: f64 = pf.fused.values.iter().map(|v| v * v).sum();
        println!("{name:>6}: {:?}, backbone cost {}, energy {energy:.1}", pf.ops, cost.backbone_cost(&pf.ops));
    }
    Ok(())
}
