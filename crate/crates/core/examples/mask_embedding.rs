//! Overlap ratios for every instance pair: pool each mask once and reuse
//! the result, versus re-pooling both masks per pair.

use sgflash::counters;
use sgflash::mask_embed::{ratios_per_pair, ratios_pooled};
use sgflash::synth::{synth_scene, SceneConfig};

fn main() -> sgflash::Result<()> {
    let scene = synth_scene(7, &SceneConfig::new(6, 6, 8))?;
    let masks = &scene.panoptic.masks;
    let grid = (8, 8);
    let n = masks.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect();

    let t0 = counters::snapshot();
    let pooled = ratios_pooled(masks, grid)?;
    let t1 = counters::snapshot();
    let per_pair = ratios_per_pair(masks, &pairs, grid)?;
    let t2 = counters::snapshot();

    let identical = pairs
        .iter()
        .zip(&per_pair)
        .all(|(&(s, o), (rs, ro))| pooled[s] == *rs && pooled[o] == *ro);
    println!("{n} instances, {} ordered pairs", pairs.len());
    println!("pooled path:   {} pool calls", (t1 - t0).pool_calls);
    println!("per-pair path: {} pool calls", (t2 - t1).pool_calls);
    println!("bit-identical: {identical}");

    let r = &pooled[0];
    println!("\ninstance 0 coverage on the {}x{} grid:", r.grid_h, r.grid_w);
    for row in r.values.chunks(r.grid_w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:4.2}")).collect();
        println!("  {}", line.join(" "));
    }
    Ok(())
}
