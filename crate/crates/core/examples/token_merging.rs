//! Merge similar tokens before attention and restore the sequence after.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgflash::numerics::{randn, Tensor};
use sgflash::tome::{build_plan, merge, unmerge, wrapped_attention};

fn main() -> sgflash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = randn(&mut rng, &[17, 8], 1.0);
    // Mean-pooling stand-in for attention: every row becomes the mean.
    let attn = |t: &Tensor| {
        let (l, d) = (t.shape()[0], t.shape()[1]);
        let mut mean = vec![0.0; d];
        for r in t.data().chunks(d) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / l as f64);
        }
        Tensor::new(vec![l, d], mean.repeat(l))
    };
    for ratio in [0.0, 0.3, 0.5, 0.6] {
        let plan = build_plan(&tokens, ratio, &[0])?;
        let out = wrapped_attention(&tokens, ratio, &[0], attn)?;
        let merged = merge(&tokens, &plan)?;
        let back = merge(&unmerge(&merged, &plan)?, &plan)?;
        println!(
            "ratio {ratio:.1}: {} -> {} tokens, output rows {}, merge(unmerge(y)) == y: {}",
            plan.len,
            plan.merged_len(),
            out.shape()[0],
            back == merged
        );
    }
    Ok(())
}
