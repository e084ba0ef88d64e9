//! Project a few ego-frame points into the default camera and lift one back.
use mjp::data::SceneConfig;
use mjp::geometry::Vec3;

fn main() -> mjp::Result<()> {
    let cam = SceneConfig::default().camera.camera()?;
    println!("camera at {:?}, {}x{} px", cam.center(), cam.width, cam.height);

    for p in [Vec3::new(8.0, 0.0, 0.0), Vec3::new(6.0, 2.5, -1.0), Vec3::new(-3.0, 0.0, 0.0)] {
        match cam.project(&p) {
            Some(px) => {
                let back = cam.unproject(px.u, px.v, px.depth)?;
                println!("{p:?} -> u={:.2} v={:.2} depth={:.2}, back off by {:.1e}", px.u, px.v, px.depth, (back - p).norm());
            }
            None => println!("{p:?} is behind the camera"),
        }
    }
    Ok(())
}
