mod common;

use std::process::Command;
use std::thread::sleep;
use std::time::Duration;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgflash::harness::bench::{bench, summarize, time_passes, BenchOptions, BenchVariant};
use sgflash::harness::checkpoint::Checkpoint;
use sgflash::harness::dataset::{generate, DatasetFile, Vocabulary, SCHEMA_VERSION};
use sgflash::harness::eval::{evaluate, read_csv, write_csv, EvalConfig, MetricsRow, CSV_HEADER};
use sgflash::harness::plot::{scatter_svg, PlotPoint};
use sgflash::harness::rle;
use sgflash::harness::train::{negative_count, sample_pairs, train, TrainConfig};
use sgflash::model::{InferenceOptions, ModelConfig, RelationModel};
use sgflash::sgeval::Protocol;
use sgflash::synth::{synth_scene, Scene, SceneConfig};

fn scenes(n: usize, inst: usize) -> Vec<Scene> {
    (0..n as u64).map(|s| synth_scene(s, &SceneConfig::new(inst, 4, 8)).unwrap()).collect()
}

fn quick() -> BenchOptions {
    BenchOptions {
        warmup: 1,
        passes: 10,
        rps_batch: 8,
        rps_batches: 2,
    }
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let cfg = SceneConfig::new(6, 6, 8);
    let a = generate(0, 32, &cfg).unwrap();
    let b = generate(0, 32, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.schema, SCHEMA_VERSION);
    assert_eq!(a.scenes.len(), 32);
    a.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    a.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(r#"{"schema":1,"#));
    let back = DatasetFile::load(&path).unwrap();
    assert_eq!(back, a);
    let decoded = back.decode().unwrap();
    for (i, s) in decoded.iter().enumerate() {
        assert_eq!(s, &synth_scene(sgflash::harness::dataset::scene_seed(0, i), &cfg).unwrap());
    }
}

#[test]
fn dataset_rejects_bad_schema() {
    let mut d = generate(1, 2, &SceneConfig::new(3, 3, 8)).unwrap();
    d.schema = 2;
    assert!(d.validate().is_err());
    let mut d = generate(1, 2, &SceneConfig::new(3, 3, 8)).unwrap();
    d.scenes[0].instances[0].rle.push(3);
    assert!(d.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(4, 8);
    let mut model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    train(&mut model, &scenes(2, 3), &TrainConfig { epochs: 1, lr: 1e-3, ..TrainConfig::default() }, |_| {}).unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    Checkpoint::from_model(&model, &vocab).save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap().to_model_for(&vocab).unwrap();
    Checkpoint::from_model(&loaded, &vocab).save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let err = Checkpoint::load(&p1).unwrap().to_model_for(&Vocabulary::synthetic(5, 8));
    assert!(err.is_err());
    let mut bad = Checkpoint::load(&p1).unwrap();
    bad.tensors[0].shape.push(1);
    assert!(bad.to_model().is_err());
}

#[test]
fn zero_epochs_keeps_initialization() {
    let model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let mut trained = model.clone();
    let report = train(&mut trained, &scenes(2, 3), &TrainConfig { epochs: 0, ..TrainConfig::default() }, |_| {}).unwrap();
    assert_eq!(report.steps, 0);
    for ((_, a), (_, b)) in model.params.iter().zip(trained.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn negatives_are_a_fifth_of_relations() {
    assert_eq!(negative_count(10, 5), 2);
    assert_eq!(negative_count(11, 5), 3);
    assert_eq!(negative_count(0, 5), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in scenes(10, 6) {
        let (pairs, n_neg) = sample_pairs(&s, 8, 5, &mut rng);
        assert_eq!(n_neg, negative_count(s.graph.relations.len(), 5));
        for p in &pairs {
            assert!(s.graph.instances[p.s0].instance_id < s.graph.instances[p.s1].instance_id);
        }
        let positives = &pairs[..pairs.len() - n_neg];
        assert!(positives.iter().all(|p| p.y_fwd.iter().chain(&p.y_bwd).any(|&y| y == 1.0)));
        assert!(pairs[pairs.len() - n_neg..].iter().all(|p| p.y_fwd.iter().chain(&p.y_bwd).all(|&y| y == 0.0)));
    }
}

#[test]
fn eval_without_jitter_equals_predcls() {
    let model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let data = scenes(4, 4);
    let sg = evaluate(&model, &data, &EvalConfig::default()).unwrap();
    let pc = evaluate(&model, &data, &EvalConfig { protocol: Protocol::PredCls, ..EvalConfig::default() }).unwrap();
    for k in [20, 50, 100] {
        let (a, b) = (sg.row(k).unwrap(), pc.row(k).unwrap());
        assert_eq!((a.r_at_k, a.mr_at_k, a.mr_inf), (b.r_at_k, b.mr_at_k, b.mr_inf));
    }
    assert_eq!(sg.row(50).unwrap().mr_inf, 100.0);
    let rows = &sg.rows;
    assert!(rows.windows(2).all(|w| w[0].r_at_k <= w[1].r_at_k && w[0].mr_at_k <= w[1].mr_at_k));
    // Four instances: 6 unordered pairs per scene.
    assert_eq!(rows[0].head_passes, 4 * 6);
}

#[test]
fn predcls_at_least_sgdet_on_a_memorized_model() {
    let data = scenes(4, 4);
    let mut model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        lr: 1e-3,
        eval_every: 40,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, |_| {}).unwrap();
    let pc = evaluate(&model, &data, &EvalConfig { protocol: Protocol::PredCls, ..EvalConfig::default() }).unwrap();
    let sg = evaluate(&model, &data, &EvalConfig { mask_jitter: 0.3, ..EvalConfig::default() }).unwrap();
    assert_eq!(pc.mean_recall(50).unwrap(), 100.0);
    assert!(pc.mean_recall(50).unwrap() >= sg.mean_recall(50).unwrap());
}

#[test]
fn metrics_csv_round_trip() {
    let row = MetricsRow {
        protocol: "sgdet".into(),
        k: 50,
        r_at_k: 12.5,
        mr_at_k: 33.3333,
        mr_inf: 100.0,
        latency_ms_mean: 1.25,
        rps: 300.5,
        head_passes: 42,
        flops: 123456,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_csv(&[row.clone()], std::fs::File::create(&path).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(CSV_HEADER, "protocol,k,R@k,mR@k,mR@inf,latency_ms_mean,rps,head_passes,flops");
    assert_eq!(read_csv(&path).unwrap(), vec![row]);
    assert!(MetricsRow::from_csv("sgdet,50,1").is_err());
}

#[test]
fn bench_counts_and_flops() {
    let model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let data = scenes(3, 4);
    let variants = [
        BenchVariant::new("baseline").prune(false),
        BenchVariant::new("prune"),
        BenchVariant::new("unidir").bidirectional(false),
        BenchVariant::new("upsampled").lowres(false),
    ];
    let r = bench(&model, &data, &variants, &quick()).unwrap();
    let row = |n| r.row(n).unwrap();
    assert_eq!(row("prune").head_passes, 3 * 6);
    assert_eq!(row("unidir").head_passes, 2 * row("prune").head_passes);
    assert!(row("prune").flops < row("baseline").flops);
    assert_eq!(row("prune").upsample_calls, 0);
    assert!(row("upsampled").upsample_calls > 0);
    assert!(r.rows.iter().all(|x| x.latency.mean_ms > 0.0 && x.rps > 0.0));
    assert!(r.to_table().lines().count() == 5);
}

#[test]
fn bench_needs_enough_passes() {
    let model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let opts = BenchOptions { passes: 9, ..quick() };
    assert!(bench(&model, &scenes(1, 3), &[BenchVariant::new("x")], &opts).is_err());
    assert!(summarize(&[1.0; 9]).is_err());
}

#[test]
fn warmup_passes_do_not_count() {
    let stats = time_passes(1, 10, |i| {
        if i == 0 {
            sleep(Duration::from_millis(200));
        }
        Ok(())
    })
    .unwrap();
    assert!(stats.mean_ms < 50.0, "{stats:?}");
    let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
    assert_eq!((s.mean_ms, s.median_ms, s.p95_ms), (5.5, 5.5, 10.0));
}

#[test]
fn swapped_order_keeps_pass_count() {
    let model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let s = &scenes(1, 4)[0];
    let ctx = model.prepare(&s.image, &s.panoptic).unwrap();
    let a = model.infer_pairs(&ctx, InferenceOptions::default()).unwrap();
    let b = model.infer_pairs(&ctx, InferenceOptions { swap_order: true, ..InferenceOptions::default() }).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().all(|p| s.graph.instances[p.s0].instance_id < s.graph.instances[p.s1].instance_id));
    assert!(b.iter().all(|p| s.graph.instances[p.s0].instance_id > s.graph.instances[p.s1].instance_id));
}

#[test]
fn plot_writes_svg() {
    let pts = [
        PlotPoint { label: "a<b".into(), latency_ms: 1.0, mr50: 20.0 },
        PlotPoint { label: "c".into(), latency_ms: 2.0, mr50: 30.0 },
    ];
    let svg = scatter_svg(&pts, "t").unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.matches("<circle").count() == 2);
    assert!(scatter_svg(&[], "t").is_err());
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_sgflash");
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    let (d1, d2) = (p("d1.json"), p("d2.json"));
    run(&["gen-data", "--seed", "3", "--scenes", "3", "--instances", "3", "--out", &d1]);
    run(&["gen-data", "--seed", "3", "--scenes", "3", "--instances", "3", "--out", &d2]);
    assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());
    let ck = p("ck.json");
    let log = p("log.jsonl");
    run(&["train", "--data", &d1, "--epochs", "1", "--ckpt-out", &ck, "--log", &log]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);
    let csv = p("m.csv");
    run(&["eval", "--data", &d1, "--ckpt", &ck, "--report", &csv]);
    assert_eq!(read_csv(std::path::Path::new(&csv)).unwrap().len(), 3);
    let out = run(&["bench", "--ckpt", &ck, "--data", &d1, "--warmup", "1", "--passes", "10", "--rps-batch", "4"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("flagged"));
    let bad = Command::new(bin).args(["bench", "--ckpt", &ck, "--data", &d1, "--batch", "2"]).output().unwrap();
    assert!(!bad.status.success());
    let svg = p("p.svg");
    run(&["plot", "--input", &csv, "--out", &svg]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<circle"));
}

proptest! {
    #[test]
    fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
        let runs = rle::encode(&bits);
        prop_assert_eq!(rle::decode(&runs, bits.len()).unwrap(), bits.clone());
        prop_assert!(runs.iter().skip(1).all(|&r| r > 0));
        prop_assert!(rle::decode(&runs, bits.len() + 1).is_err());
    }
}
