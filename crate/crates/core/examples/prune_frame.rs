//! Drop the far half of the mask grid and prune a frame with it.
use mjp::config::RunConfig;
use mjp::data::generate_scene;
use mjp::pruning::{prune_frame, read_pruned_frame, write_pruned_frame};
use mjp::voxelgrid::MaskGrid;

fn main() -> mjp::Result<()> {
    let cfg = RunConfig::default();
    let s = cfg.setup()?;
    let frame = generate_scene(&cfg.scene, 3)?;

    let md = s.mask_dims();
    let bits = (0..md.len()).map(|j| s.bm.cell_center(&s.spec, j).x < 6.0).collect();
    let mask = MaskGrid::from_bits(md, bits, 0.5)?;

    let out = prune_frame(&frame, &mask, &s.spec, &s.bm, &s.fp)?;
    println!(
        "mask drops {:.0}% of cells: kept {} of {} in-range points, {} of {} patches",
        100.0 * out.prune_ratio_voxels,
        out.kept_point_indices.len(),
        out.in_range_points(),
        out.kept_patch_indices.len(),
        out.total_patches
    );

    let dir = std::env::temp_dir().join("mjp_prune_frame");
    write_pruned_frame(&out, &frame, &mask, &dir)?;
    let back = read_pruned_frame(&dir)?;
    println!("wrote {} ({} points)", dir.display(), back.manifest.kept_points);
    Ok(())
}
