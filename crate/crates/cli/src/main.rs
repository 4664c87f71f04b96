use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pacgnet_core::ablation::{self, ground_truth};
use pacgnet_core::detect::dataset::{read_ppm, read_split, synth_meta, write_split};
use pacgnet_core::detect::predict::predict_all;
use pacgnet_core::detect::synth::{generate, Scene};
use pacgnet_core::detect::train::{loss_trace_csv, train};
use pacgnet_core::detect::{Detector, ModelConfig};
use pacgnet_core::eval::map50;
use pacgnet_core::gradcheck;
use pacgnet_core::heatmap::{fused_magnitudes, to_csv, to_pgm};
use pacgnet_core::{Error, OpKind, ParameterSet, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.txt";
const LOSS_TRACE_FILE: &str = "loss_trace.csv";
const RESOLVED_FILE: &str = "config.resolved";

#[derive(Parser)]
#[command(name = "pacgnet", version, about = "Cross-gated RGB/IR fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB/IR split.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one op (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train a detector on a split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the mAP50 report of a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and score baseline, +pfmg, +scg and full for every seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with `train/` and `test/` splits; synthesized per seed
        /// when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write fused-level activation heatmaps for one scene.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        /// RGB and IR images of the scene.
        #[arg(long, num_args = 2, value_names = ["RGB", "IR"])]
        scene: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    /// A check ran and did not pass.
    Verification(String),
    Usage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth { config, out, count } => synth(config.as_deref(), &out, count),
        Command::Gradcheck { seed, inject_fault } => check_gradients(seed, inject_fault.as_deref()),
        Command::Train { config, data, out } => train_cmd(config.as_deref(), &data, out),
        Command::Eval { ckpt, data, config } => eval_cmd(&ckpt, &data, config.as_deref()),
        Command::Ablate { config, data, out } => ablate_cmd(config.as_deref(), data.as_deref(), out),
        Command::Heatmap { ckpt, scene, out } => heatmap_cmd(&ckpt, &scene[0], &scene[1], &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Echoes the configuration to stderr and `<dir>/config.resolved`.
fn publish_config(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    let text = cfg.resolved();
    eprint!("{text}");
    create_dir(dir)?;
    write(&dir.join(RESOLVED_FILE), text)
}

fn synth(config: Option<&Path>, out: &Path, count: usize) -> CmdResult {
    let mut cfg = load_config(config)?;
    cfg.out = out.to_path_buf();
    publish_config(&cfg, out)?;
    let scenes = generate(&cfg.synth, count)?;
    write_split(out, &synth_meta(&cfg.synth, &scenes), &scenes)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn check_gradients(seed: u64, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        Some(name) => Some(
            OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown op `{name}` for fault injection")))?,
        ),
        None => None,
    };
    eprintln!("seed={seed}");
    let checks = gradcheck::run_all(seed, 4, 32, fault)?;
    print!("{}", gradcheck::report(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component.as_str()).collect();
    if failed.is_empty() {
        println!("all {} components within {:e}", checks.len(), gradcheck::REL_TOLERANCE);
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn model_for(cfg: &RunConfig) -> Result<Detector, Error> {
    Detector::new(ModelConfig {
        pyramid: cfg.pyramid_config(),
        num_classes: cfg.synth.num_classes,
    })
}

/// Rejects a split whose images or classes disagree with the configuration.
fn check_split(cfg: &RunConfig, scenes: &[Scene], num_classes: usize) -> Result<(), Error> {
    let s = cfg.synth.image_size;
    if let Some(bad) = scenes.iter().find(|sc| sc.rgb.shape().h != s || sc.rgb.shape().w != s) {
        return Err(Error::Dataset(format!(
            "scene of size {} does not match image_size={s}",
            bad.rgb.shape()
        )));
    }
    if num_classes != cfg.synth.num_classes {
        return Err(Error::Dataset(format!(
            "split has {num_classes} classes, config has num_classes={}",
            cfg.synth.num_classes
        )));
    }
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    publish_config(&cfg, &cfg.out)?;
    let split = read_split(data)?;
    check_split(&cfg, &split.scenes, split.num_classes()?)?;
    let det = model_for(&cfg)?;
    let mut ps = det.init_params(cfg.seed)?;
    let trace = train(&det, &mut ps, &split.scenes, &cfg.train)?;
    ps.save(&cfg.out.join(CHECKPOINT_FILE))?;
    write(&cfg.out.join(LOSS_TRACE_FILE), loss_trace_csv(&trace))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("loss {:.6} -> {:.6} over {} epochs", first.total(), last.total(), trace.len());
    }
    Ok(())
}

fn load_detector(ckpt: &Path, input_size: usize) -> Result<(Detector, ParameterSet), Error> {
    Detector::from_checkpoint(&ParameterSet::read(ckpt)?, input_size)
}

fn eval_cmd(ckpt: &Path, data: &Path, config: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    eprint!("{}", cfg.resolved());
    let split = read_split(data)?;
    let size = split.scenes.first().map_or(cfg.synth.image_size, |s| s.rgb.shape().h);
    let (det, ps) = load_detector(ckpt, size)?;
    let k = det.config.num_classes;
    if split.num_classes()? != k {
        return Err(Error::Checkpoint(format!(
            "checkpoint predicts {k} classes, split has {}",
            split.num_classes()?
        ))
        .into());
    }
    let dets = predict_all(&det, &ps, &split.scenes, cfg.score_threshold, cfg.nms_iou, cfg.train.batch_size)?;
    let report = map50(&dets, &ground_truth(&split.scenes), k)?;
    print!("{}", report.to_text());
    Ok(())
}

fn ablate_cmd(config: Option<&Path>, data: Option<&Path>, out: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    publish_config(&cfg, &cfg.out)?;
    let fixed = match data {
        Some(dir) => {
            let tr = read_split(&dir.join("train"))?;
            let te = read_split(&dir.join("test"))?;
            check_split(&cfg, &tr.scenes, tr.num_classes()?)?;
            check_split(&cfg, &te.scenes, te.num_classes()?)?;
            Some((tr.scenes, te.scenes))
        }
        None => None,
    };
    let start = std::time::Instant::now();
    let rows = ablation::ablate(
        &cfg,
        |seed| match &fixed {
            Some(splits) => Ok(splits.clone()),
            None => ablation::synth_splits(&cfg, seed),
        },
        |r| {
            eprintln!(
                "seed {} {:<8} map50 {:.4} params {} ({:.0?})",
                r.seed,
                r.variant.name(),
                r.map50,
                r.params,
                start.elapsed()
            )
        },
    )?;
    let table = ablation::table(&rows);
    write(&cfg.out.join("ablation.csv"), &table)?;
    write(&cfg.out.join("ablation_seeds.csv"), ablation::per_seed_csv(&rows))?;
    print!("{table}");
    for &seed in &cfg.ablate_seeds {
        let ok = ablation::ordered(&rows, seed, 0.0);
        println!("seed {seed}: ordering {}", if ok { "holds" } else { "violated" });
    }
    Ok(())
}

fn heatmap_cmd(ckpt: &Path, rgb: &Path, ir: &Path, out: &Path) -> CmdResult {
    let rgb = read_ppm(rgb)?;
    let ir = read_ppm(ir)?;
    let (det, ps) = load_detector(ckpt, rgb.shape().h)?;
    eprintln!("input_size={}", det.config.pyramid.input_size);
    let maps = fused_magnitudes(&det, &ps, &rgb, &ir)?;
    create_dir(out)?;
    for (l, m) in (3..=5).zip(&maps) {
        write(&out.join(format!("p{l}.pgm")), to_pgm(m))?;
        write(&out.join(format!("p{l}.csv")), to_csv(m))?;
    }
    println!("wrote P3, P4, P5 heatmaps to {}", out.display());
    Ok(())
}
