use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sgflash::harness::bench::{bench, BenchOptions, BenchVariant};
use sgflash::harness::checkpoint::Checkpoint;
use sgflash::harness::dataset::{generate, DatasetFile};
use sgflash::harness::eval::{evaluate, read_csv, write_csv, EvalConfig};
use sgflash::harness::plot::{scatter_svg, PlotPoint};
use sgflash::harness::train::{train, TrainConfig};
use sgflash::model::{InferenceOptions, ModelConfig, RelationModel};
use sgflash::neck::NeckConfig;
use sgflash::sgeval::Protocol;
use sgflash::synth::SceneConfig;
use sgflash::{Error, Result};

#[derive(Parser)]
#[command(name = "sgflash", version, about = "Panoptic scene graph toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NeckSize {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, default_value_t = 6)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        predicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the relation model on ground-truth masks.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 0.02)]
        wd: f64,
        #[arg(long, default_value_t = 5)]
        neg_ratio: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda_cons: f64,
        #[arg(long, default_value_t = 0.0)]
        tome_ratio: f64,
        #[arg(long, value_enum, default_value = "on")]
        prune: Switch,
        #[arg(long, value_enum, default_value = "desk")]
        neck: NeckSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// JSON-lines metrics log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the metrics CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "sgdet")]
        protocol: Protocol,
        #[arg(long, default_value_t = 0.0)]
        mask_jitter: f64,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value = "on")]
        bidir: Switch,
        #[arg(long, value_enum, default_value = "on")]
        dedup: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time forward passes at batch size 1 and measure pair throughput.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        warmup: usize,
        #[arg(long, default_value_t = 1000)]
        passes: usize,
        #[arg(long, value_enum, default_value = "on")]
        prune: Switch,
        #[arg(long, default_value_t = 0.0)]
        tome_ratio: f64,
        #[arg(long, value_enum, default_value = "on")]
        lowres: Switch,
        #[arg(long, value_enum, default_value = "on")]
        bidir: Switch,
        #[arg(long, default_value_t = 64)]
        rps_batch: usize,
        /// Run the standard ablation set instead of the single flagged variant.
        #[arg(long)]
        suite: bool,
        /// JSON report; a table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter mean latency against mR@50 from metrics CSVs.
    Plot {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "latency vs mR@50")]
        title: String,
    },
}

fn load_scenes(path: &PathBuf) -> Result<(DatasetFile, Vec<sgflash::synth::Scene>)> {
    let file = DatasetFile::load(path)?;
    let scenes = file.decode()?;
    Ok((file, scenes))
}

fn load_model(ckpt: &PathBuf, data: &DatasetFile) -> Result<RelationModel> {
    Checkpoint::load(ckpt)?.to_model_for(&data.vocabulary)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            seed,
            scenes,
            instances,
            classes,
            predicates,
            out,
        } => {
            let file = generate(seed, scenes, &SceneConfig::new(instances, classes, predicates))?;
            file.save(&out)?;
            eprintln!("wrote {} scenes to {}", file.scenes.len(), out.display());
        }
        Cmd::Train {
            data,
            epochs,
            lr,
            wd,
            neg_ratio,
            lambda_cons,
            tome_ratio,
            prune,
            neck,
            seed,
            ckpt_out,
            log,
        } => {
            let (file, scenes) = load_scenes(&data)?;
            let mut cfg = ModelConfig::desk(file.vocabulary.predicates.len());
            if matches!(neck, NeckSize::Full) {
                cfg.neck = NeckConfig::full();
            }
            cfg.lambda_cons = lambda_cons;
            cfg.tome_ratio = tome_ratio;
            cfg.prune = prune.on();
            cfg.seed = seed;
            let mut model = RelationModel::new(cfg)?;
            let tc = TrainConfig {
                epochs,
                lr,
                weight_decay: wd,
                neg_ratio,
                seed,
                ..TrainConfig::default()
            };
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::stdout()),
            };
            let mut io_err = None;
            let report = train(&mut model, &scenes, &tc, |l| {
                let line = serde_json::to_string(l).map_err(Error::from);
                if let Err(e) = line.and_then(|s| writeln!(sink, "{s}").map_err(Error::from)) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            sink.flush()?;
            Checkpoint::from_model(&model, &file.vocabulary).save(&ckpt_out)?;
            eprintln!(
                "{} steps, consistency {:.3e} -> {:.3e}, checkpoint {}",
                report.steps,
                report.initial_consistency,
                report.final_consistency,
                ckpt_out.display()
            );
        }
        Cmd::Eval {
            data,
            ckpt,
            protocol,
            mask_jitter,
            k,
            bidir,
            dedup,
            seed,
            report,
        } => {
            let (file, scenes) = load_scenes(&data)?;
            let model = load_model(&ckpt, &file)?;
            let cfg = EvalConfig {
                protocol,
                mask_jitter,
                ks: k,
                seed,
                inference: InferenceOptions {
                    bidirectional: bidir.on(),
                    swap_order: false,
                },
                dedup: dedup.on(),
            };
            let outcome = evaluate(&model, &scenes, &cfg)?;
            match &report {
                Some(p) => write_csv(&outcome.rows, BufWriter::new(File::create(p)?))?,
                None => write_csv(&outcome.rows, std::io::stdout())?,
            }
        }
        Cmd::Bench {
            ckpt,
            data,
            batch,
            warmup,
            passes,
            prune,
            tome_ratio,
            lowres,
            bidir,
            rps_batch,
            suite,
            out,
        } => {
            if batch != 1 {
                return Err(Error::InvalidArgument(
                    "latency is measured at batch size 1; use --rps-batch for throughput".into(),
                ));
            }
            let (file, scenes) = load_scenes(&data)?;
            let model = load_model(&ckpt, &file)?;
            let variants = if suite {
                standard_variants()
            } else {
                vec![BenchVariant::new("flagged")
                    .prune(prune.on())
                    .tome(tome_ratio)
                    .lowres(lowres.on())
                    .bidirectional(bidir.on())]
            };
            let opts = BenchOptions {
                warmup,
                passes,
                rps_batch,
                ..BenchOptions::default()
            };
            let report = bench(&model, &scenes, &variants, &opts)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Cmd::Plot { inputs, out, title } => {
            let mut points = Vec::new();
            for path in &inputs {
                let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into());
                for row in read_csv(path)?.into_iter().filter(|r| r.k == 50) {
                    points.push(PlotPoint {
                        label: format!("{label} ({})", row.protocol),
                        latency_ms: row.latency_ms_mean,
                        mr50: row.mr_at_k,
                    });
                }
            }
            if points.is_empty() {
                return Err(Error::Data("no k=50 rows in the inputs".into()));
            }
            std::fs::write(&out, scatter_svg(&points, &title)?)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn standard_variants() -> Vec<BenchVariant> {
    vec![
        BenchVariant::new("baseline").prune(false),
        BenchVariant::new("prune"),
        BenchVariant::new("prune+tome").tome(0.5),
        BenchVariant::new("upsampled").lowres(false),
        BenchVariant::new("unidir").bidirectional(false),
    ]
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
