//! Bucket a generated LiDAR sweep into the voxel grid and the coarser mask grid.
use mjp::config::RunConfig;
use mjp::data::generate_scene;
use mjp::voxelgrid::voxelize;

fn main() -> mjp::Result<()> {
    let cfg = RunConfig::default();
    let setup = cfg.setup()?;
    let frame = generate_scene(&cfg.scene, 1)?;

    let vox = voxelize(&setup.spec, &frame.points);
    println!(
        "{} points: {} in {} occupied voxels, {} outside the grid",
        frame.points.len(),
        vox.bucketed_points(),
        vox.buckets.len(),
        vox.discarded.len()
    );

    let mut cells = std::collections::BTreeSet::new();
    for &v in vox.buckets.keys() {
        cells.insert(setup.bm.block_of_flat(v)?);
    }
    let md = setup.mask_dims();
    println!(
        "voxel grid {:?}, mask grid {:?} ({} voxels per cell), {} of {} cells hit",
        setup.spec.dims(),
        md,
        setup.bm.block_volume(),
        cells.len(),
        md.len()
    );
    Ok(())
}
