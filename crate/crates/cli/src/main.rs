use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgs_core::data::{draw_box, load_dataset, load_image, save_ppm, write_synthetic, Split};
use dgs_core::detect::{coco_thresholds, detection_line, MetricsReport};
use dgs_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use dgs_core::nn::gradcheck::block_suite;
use dgs_core::pipeline::{bench, bench_image, BenchReport, Detector};
use dgs_core::tensor::gradcheck::{op_suite, GradcheckReport};
use dgs_core::train::{train_tiny, LossBreakdown, TrainConfig};
use dgs_core::Shape;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] dgs_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0} gradient check(s) failed")]
    Gradcheck(usize),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) if e.is_numeric() => 2,
            Self::Gradcheck(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Grouped-shuffle / conv-transformer YOLO detector.
#[derive(Debug, Parser)]
#[command(name = "dgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Model config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: default, dgsm-only or baseline.
    #[arg(long)]
    preset: Option<String>,
    /// Override the square network input size.
    #[arg(long)]
    size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ModelConfig::load(path)?,
            (None, Some(name)) => ModelConfig::preset(name)?,
            (None, None) => ModelConfig::default(),
        };
        if let Some(s) = self.size {
            cfg.input_size = [s, s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a model config as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-layer output shapes, parameters and MACs.
    Summary {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a freshly initialised checkpoint.
    Init {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "DGS_SEED", default_value_t = 0)]
        seed: u64,
        /// Zero every conv weight and bias.
        #[arg(long)]
        zero: bool,
    },
    /// Detect objects in one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        /// Write the image with 2px box outlines as PPM.
        #[arg(long)]
        annotate: Option<PathBuf>,
    },
    /// Precision, recall, mAP and F1 on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// all, train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, env = "DGS_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.001)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
    },
    /// Time letterbox + forward and decode + NMS, single-threaded.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 640)]
        size: usize,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[arg(long, env = "DGS_SEED", default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// SGD on a small dataset; writes the loss curve and final checkpoint.
    TrainTiny {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, env = "DGS_SEED", default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for `loss_curve.txt` and `model.dgsd`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic rectangles dataset in `images/` + `labels/` layout.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, env = "DGS_SEED", default_value_t = 7)]
        seed: u64,
    },
}

/// Outline colour per class.
const PALETTE: [[f32; 3]; 4] = [[0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];

/// Input size used by train-tiny when no config or size is given.
const TRAIN_TINY_SIZE: usize = 128;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

fn summary(config: &ConfigArgs) -> Result<()> {
    let cfg = config.resolve()?;
    let model = Model::<f32>::build(&cfg, 0)?;
    let [h, w] = cfg.input_size;
    let rows = model.summary(Shape::new(1, 3, h, w));
    println!("{:<14} {:<10} {:>20} {:>10} {:>14}", "layer", "kind", "output", "params", "MACs");
    for r in &rows {
        println!(
            "{:<14} {:<10} {:>20} {:>10} {:>14}",
            r.name,
            r.kind,
            r.out_shape.to_string(),
            r.params,
            r.macs
        );
    }
    let params = model.count_params();
    let macs: u64 = rows.iter().map(|r| r.macs).sum();
    println!(
        "total: {params} params ({:.3} M), {macs} MACs ({:.3} G), {} heads, input {h}x{w}",
        params as f64 / 1e6,
        macs as f64 / 1e9,
        model.num_heads()
    );
    Ok(())
}

fn check_thresholds(conf: f64, iou: f64) -> Result<()> {
    if !conf.is_finite() || conf < 0.0 {
        return Err(CliError::Usage(format!("--conf must be a non-negative number, got {conf}")));
    }
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(CliError::Usage(format!("--iou must be in (0, 1], got {iou}")));
    }
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, conf: f64, iou: f64, annotate: Option<&Path>) -> Result<()> {
    check_thresholds(conf, iou)?;
    let model = load_checkpoint(ckpt)?;
    let img = load_image(image)?;
    let dets = Detector::new(&model).with_thresholds(conf, iou).detect(&img)?;
    for d in &dets {
        println!("{}", detection_line(d));
    }
    if let Some(out) = annotate {
        let mut canvas = img;
        for d in &dets {
            draw_box(&mut canvas, &d.bbox, PALETTE[d.class_id % PALETTE.len()], 2);
        }
        save_ppm(&canvas, out)?;
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: &str, seed: u64, conf: f64, iou: f64) -> Result<()> {
    check_thresholds(conf, iou)?;
    let split: Split = split.parse()?;
    let model = load_checkpoint(ckpt)?;
    let samples = load_dataset(data, split, seed, model.config.num_classes)?;
    let report = Detector::new(&model)
        .with_thresholds(conf, iou)
        .evaluate(&samples, &coco_thresholds())?;
    println!("{}", MetricsReport::HEADER);
    println!("{}", report.row());
    Ok(())
}

fn run_bench(ckpt: &Path, runs: usize, warmup: usize, size: usize) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let detector = Detector::new(&model).with_input_size(size)?;
    let report = bench(&detector, &bench_image(size), runs, warmup)?;
    println!("{}", BenchReport::HEADER);
    println!("{}", report.row());
    Ok(())
}

fn gradcheck(seed: u64, seeds: u64) -> Result<()> {
    println!("{:<6} {:<28} {:>12} {:>10} result", "seed", "check", "max_rel_err", "tolerance");
    let mut failed = 0;
    for s in seed..seed.saturating_add(seeds.max(1)) {
        let mut reports: Vec<GradcheckReport> = op_suite(s)?;
        reports.extend(block_suite(s)?);
        for r in reports {
            let ok = r.passed();
            failed += usize::from(!ok);
            println!(
                "{s:<6} {:<28} {:>12.3e} {:>10.0e} {}",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    if failed > 0 {
        return Err(CliError::Gradcheck(failed));
    }
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    train: TrainConfig,
    config: &'a ConfigArgs,
    out: &'a Path,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if args.config.size.is_none() && args.config.config.is_none() {
        cfg.input_size = [TRAIN_TINY_SIZE, TRAIN_TINY_SIZE];
    }
    let [h, w] = cfg.input_size;
    let samples = load_dataset(args.data, Split::All, args.train.seed, cfg.num_classes)?;
    let data = samples
        .iter()
        .map(|s| s.to_train(w, h).map(|(t, _)| t))
        .collect::<dgs_core::Result<Vec<_>>>()?;
    let mut model = Model::<f32>::build(&cfg, args.train.seed)?;
    std::fs::create_dir_all(args.out).map_err(|source| CliError::Io {
        context: format!("creating {}", args.out.display()),
        source,
    })?;

    let mut lines = vec![LossBreakdown::HEADER.to_string()];
    println!("{}", LossBreakdown::HEADER);
    let result = train_tiny(&mut model, &data, &args.train, |step, loss| {
        let line = loss.line(step);
        println!("{line}");
        lines.push(line);
    });
    let curve_path = args.out.join("loss_curve.txt");
    write_file(&curve_path, lines.join("\n") + "\n")?;
    let curve = result?;
    let ckpt = args.out.join("model.dgsd");
    save_checkpoint(&model, &ckpt)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        eprintln!(
            "total loss {:.6e} -> {:.6e} ({:.1}x); wrote {} and {}",
            first.total,
            last.total,
            first.total / last.total,
            curve_path.display(),
            ckpt.display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { config } => {
            print!("{}", config.resolve()?.to_toml());
            Ok(())
        }
        Command::Summary { config } => summary(&config),
        Command::Init {
            config,
            out,
            seed,
            zero,
        } => {
            let mut model = Model::<f32>::build(&config.resolve()?, seed)?;
            if zero {
                model.zero_weights();
            }
            save_checkpoint(&model, &out)?;
            Ok(())
        }
        Command::Infer {
            ckpt,
            image,
            conf,
            iou,
            annotate,
        } => infer(&ckpt, &image, conf, iou, annotate.as_deref()),
        Command::Eval {
            ckpt,
            data,
            split,
            seed,
            conf,
            iou,
        } => eval(&ckpt, &data, &split, seed, conf, iou),
        Command::Bench {
            ckpt,
            runs,
            warmup,
            size,
        } => run_bench(&ckpt, runs, warmup, size),
        Command::Gradcheck { seed, seeds } => gradcheck(seed, seeds),
        Command::TrainTiny {
            data,
            steps,
            lr,
            momentum,
            batch_size,
            seed,
            config,
            out,
        } => {
            if !(lr.is_finite() && lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
                return Err(CliError::Usage("--lr must be >= 0 and --momentum in [0, 1)".into()));
            }
            train(TrainArgs {
                data: &data,
                train: TrainConfig {
                    steps,
                    lr,
                    momentum,
                    batch_size,
                    seed,
                },
                config: &config,
                out: &out,
            })
        }
        Command::MakeSynthetic { out, n, size, seed } => {
            let paths = write_synthetic(&out, n, size, seed)?;
            eprintln!("wrote {} images under {}", paths.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
