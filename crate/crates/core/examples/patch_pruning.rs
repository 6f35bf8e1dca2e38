//! Which patches survive pruning for each pair, and what that saves in the
//! neck.

use sgflash::mask_embed::ratios_pooled;
use sgflash::neck::{flop_estimate, surviving_patches, NeckConfig};
use sgflash::synth::{synth_scene, SceneConfig};

fn main() -> sgflash::Result<()> {
    let scene = synth_scene(11, &SceneConfig::new(5, 6, 8))?;
    let grid = (8, 8);
    let ratios = ratios_pooled(&scene.panoptic.masks, grid)?;
    let cfg = NeckConfig::desk();
    let full = flop_estimate(grid.0 * grid.1, &cfg);
    let n = ratios.len();
    let mut total = 0u64;
    println!("pair   kept  neck GFLOP");
    for s in 0..n {
        for o in s + 1..n {
            let kept = surviving_patches(&ratios[s], &ratios[o]);
            let f = flop_estimate(kept.len(), &cfg);
            total += f;
            println!("{s}-{o}    {:>4}  {:.4}", kept.len(), f as f64 * 1e-9);
        }
    }
    let pairs = (n * (n - 1) / 2) as u64;
    println!(
        "\nunpruned {:.4} GFLOP per pair, pruned mean {:.4} ({:.1}% saved)",
        full as f64 * 1e-9,
        total as f64 / pairs as f64 * 1e-9,
        100.0 * (1.0 - total as f64 / (pairs * full) as f64)
    );
    Ok(())
}
