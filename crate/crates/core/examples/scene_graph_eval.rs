//! Recall and mean recall on a hand-made image, with and without
//! duplicate suppression.

use sgflash::mask_embed::BinaryMask;
use sgflash::sgeval::{
    mean_recall_at_k, mr_inf, recall_at_k, EvalOptions, GTSceneGraph, PredSceneGraph, PredTriplet, Relation,
};

fn square(y: usize, x: usize, id: usize) -> BinaryMask {
    BinaryMask::from_fn(16, 16, |r, c| (y..y + 4).contains(&r) && (x..x + 4).contains(&c)).with_identity(id, 0)
}

fn main() -> sgflash::Result<()> {
    let gt = GTSceneGraph {
        instances: vec![square(0, 0, 0), square(0, 8, 1), square(8, 0, 2)],
        relations: vec![
            Relation { subject: 0, object: 1, predicate: 0 },
            Relation { subject: 0, object: 2, predicate: 1 },
        ],
    };
    // Instance 3 duplicates instance 0; both claim the same GT pair.
    let pred = PredSceneGraph {
        instances: vec![square(0, 0, 0), square(0, 8, 1), square(8, 0, 2), square(0, 0, 3)],
        triplets: vec![
            PredTriplet::new(0, 1, 1, 0.9),
            PredTriplet::new(3, 1, 0, 0.8),
            PredTriplet::new(0, 2, 1, 0.7),
        ],
    };
    let gts = [gt];
    let preds = [pred];
    for dedup in [true, false] {
        let opts = EvalOptions { dedup, ..EvalOptions::default() };
        println!(
            "dedup {dedup:5}: R@20 {:5.1}  mR@20 {:5.1}  mR@inf {:5.1}",
            recall_at_k(&gts, &preds, 20, &opts)?,
            mean_recall_at_k(&gts, &preds, 20, &opts)?,
            mr_inf(&gts, &preds, &opts)?
        );
    }
    Ok(())
}
