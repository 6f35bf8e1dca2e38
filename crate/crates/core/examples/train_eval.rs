//! Train on a small synthetic set, checkpoint, reload and evaluate under
//! both protocols.
//!
//! `cargo run --release --example train_eval -- 30` trains for 30 epochs.

use sgflash::harness::checkpoint::Checkpoint;
use sgflash::harness::dataset::Vocabulary;
use sgflash::harness::eval::{evaluate, write_csv, EvalConfig};
use sgflash::harness::train::{train, TrainConfig};
use sgflash::model::{ModelConfig, RelationModel};
use sgflash::sgeval::Protocol;
use sgflash::synth::{synth_scene, SceneConfig};

fn main() -> sgflash::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = SceneConfig::new(5, 6, 8);
    let scenes = (0..16).map(|i| synth_scene(i, &cfg)).collect::<sgflash::Result<Vec<_>>>()?;
    let mut model = RelationModel::new(ModelConfig::desk(cfg.n_predicates))?;
    let tc = TrainConfig {
        epochs,
        lr: 1e-3,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &scenes, &tc, |l| {
        let mr = l.train_mr50.map_or_else(String::new, |m| format!("  train mR@50 {m:.1}"));
        println!("epoch {:>3}  loss {:.4}  consistency {:.2e}{mr}", l.epoch, l.loss, l.consistency);
    })?;
    println!("probe consistency {:.3e} -> {:.3e}", report.initial_consistency, report.final_consistency);

    let vocab = Vocabulary::synthetic(cfg.n_classes, cfg.n_predicates);
    let path = std::env::temp_dir().join("sgflash-example-ckpt.json");
    Checkpoint::from_model(&model, &vocab).save(&path)?;
    let model = Checkpoint::load(&path)?.to_model()?;

    let mut rows = Vec::new();
    for (protocol, jitter) in [(Protocol::PredCls, 0.0), (Protocol::SgDet, 0.15)] {
        let ec = EvalConfig {
            protocol,
            mask_jitter: jitter,
            ..EvalConfig::default()
        };
        rows.extend(evaluate(&model, &scenes, &ec)?.rows);
    }
    write_csv(&rows, std::io::stdout())
}
