//! Lift image patches along depth bins and see which mask cells they touch.
use mjp::config::RunConfig;

fn main() -> mjp::Result<()> {
    let setup = RunConfig::default().setup()?;
    let fp = &setup.fp;
    let cells = fp.entry_cells(&setup.bm)?;

    let sky = cells.iter().filter(|c| c.is_empty()).count();
    let widest = cells.iter().map(Vec::len).max().unwrap_or(0);
    println!(
        "{} patches of {}px, {} depth bins, {} footprint entries",
        fp.patches.len(),
        fp.patches.patch_size,
        fp.depth_bins(),
        fp.total_entries()
    );
    println!("{sky} patches never enter the grid, the widest touches {widest} bins");

    let centre = fp.patches.patch_at(setup.cam.cx, setup.cam.cy).expect("principal point inside image");
    println!("centre patch {centre} lands in mask cells {:?}", cells[centre]);
    Ok(())
}
