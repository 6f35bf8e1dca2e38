//! The gated split of one pair feature into forward and backward parts,
//! and the consistency loss between an ordering and its swap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgflash::bidir_head::{predict_bidirectional, training_losses, GateParams, RelHeadParams};
use sgflash::layers::Bound;
use sgflash::numerics::{randn, ParamSet, Tape};

fn main() -> sgflash::Result<()> {
    let (d, c) = (16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let gate = GateParams::init(&mut ps, d, &mut rng);
    let head = RelHeadParams::init(&mut ps, d, c, &mut rng);
    let x = randn(&mut rng, &[d], 1.0);
    let x_swapped = randn(&mut rng, &[d], 1.0);

    let tape = Tape::new();
    let b = Bound::new(&tape, &ps);
    let xv = tape.leaf(&x);
    let out = predict_bidirectional(&b, xv, &gate, &head)?;
    let sum: Vec<f64> = out
        .split
        .t_fwd
        .data()
        .iter()
        .zip(out.split.t_bwd.data())
        .map(|(f, b)| f + b)
        .collect();
    let err = sum.iter().zip(x.data()).map(|(s, x)| (s - x).abs()).fold(0.0, f64::max);
    println!("max |t_fwd + t_bwd - x| = {err:.2e}");
    println!("z_fwd = {:?}", out.z_fwd.data());
    println!("z_bwd = {:?}", out.z_bwd.data());

    let y_fwd = [1.0, 0.0, 0.0, 0.0];
    let y_bwd = [0.0, 1.0, 0.0, 0.0];
    let l = training_losses(&b, xv, tape.leaf(&x_swapped), &y_fwd, &y_bwd, &gate, &head, 1.0)?;
    println!(
        "bce {:.4}  consistency {:.4}  combined {:.4}",
        l.bce_total.item(),
        l.consistency.item(),
        l.combined.item()
    );
    Ok(())
}
