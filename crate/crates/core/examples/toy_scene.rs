//! Writes a synthetic scene: `cargo run --example toy_scene -- <dir> [seed]`.

use lavatar_core::assets::{make_toy_scene, ToySceneOptions};

fn main() -> lavatar_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "toy_scene".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let t = std::time::Instant::now();
    let m = make_toy_scene(&dir, &ToySceneOptions { seed, ..Default::default() })?;
    println!("{} views written to {dir} in {:.1?}", m.views.len(), t.elapsed());
    Ok(())
}
