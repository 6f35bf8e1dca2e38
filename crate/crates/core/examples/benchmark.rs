//! Latency, throughput and FLOPs for the inference switches, plus an SVG
//! of latency against mR@50.

use sgflash::harness::bench::{bench, BenchOptions, BenchVariant};
use sgflash::harness::eval::{evaluate, EvalConfig};
use sgflash::harness::plot::{scatter_svg, PlotPoint};
use sgflash::model::{ModelConfig, RelationModel};
use sgflash::synth::{synth_scene, SceneConfig};

fn main() -> sgflash::Result<()> {
    let cfg = SceneConfig::new(6, 6, 8);
    let scenes = (0..8).map(|i| synth_scene(100 + i, &cfg)).collect::<sgflash::Result<Vec<_>>>()?;
    let model = RelationModel::new(ModelConfig::desk(cfg.n_predicates))?;
    let variants = [
        BenchVariant::new("baseline").prune(false),
        BenchVariant::new("prune"),
        BenchVariant::new("prune+tome").tome(0.5),
        BenchVariant::new("upsampled").lowres(false),
        BenchVariant::new("unidir").bidirectional(false),
    ];
    let opts = BenchOptions {
        warmup: 20,
        passes: 100,
        ..BenchOptions::default()
    };
    let report = bench(&model, &scenes, &variants, &opts)?;
    print!("{}", report.to_table());

    let mut points = Vec::new();
    for v in &variants {
        let m = v.apply(&model)?;
        let mr50 = evaluate(&m, &scenes, &EvalConfig::default())?.mean_recall(50)?;
        let row = report.row(&v.name).expect("benchmarked variant");
        points.push(PlotPoint {
            label: v.name.clone(),
            latency_ms: row.latency.mean_ms,
            mr50,
        });
    }
    let path = std::env::temp_dir().join("sgflash-latency.svg");
    std::fs::write(&path, scatter_svg(&points, "untrained model")?)?;
    println!("wrote {}", path.display());
    Ok(())
}
