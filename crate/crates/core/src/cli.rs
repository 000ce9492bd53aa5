//! Command-line front end: `gen`, `train`, `eval`, `bench` and `replay`.
//!
//! Every command writes a JSON run manifest holding the fully resolved
//! configuration; `bfcn replay MANIFEST` re-runs it. Options can also come
//! from a TOML file of `key = value` pairs given with `--config FILE`;
//! command-line flags override the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchConfig, BenchShape};
use crate::dataset::{mean_iou, Dataset, SceneConfig, Split};
use crate::error::{Error, Result};
use crate::graph::{load_model, save_model, BitWidths, ConvBackend, NetConfig, ReconVariant};
use crate::quantize::FULL_PRECISION;
use crate::trainer::{decay_steps, evaluate, run_experiment, Experiment, Route, RouteAssets, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "bfcn", version, about = "Low bit-width segmentation networks on bit-plane kernels")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Gen(GenArgs),
    /// Train a network and write model, log and manifest.
    Train(TrainArgs),
    /// Score a model: per-class IoU and mean IoU.
    Eval(EvalArgs),
    /// Time bit kernels against the float reference convolution.
    Bench(BenchArgs),
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 128)]
    val: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weight bit-width (32 = full precision).
    #[arg(long, default_value_t = 2)]
    kw: u32,
    /// Activation bit-width (32 = full precision).
    #[arg(long, default_value_t = 2)]
    ka: u32,
    /// p1, p2 or p1-8bit.
    #[arg(long, default_value = "p1-8bit")]
    route: String,
    /// Bits removed per decay step; 0 quantizes directly.
    #[arg(long, default_value_t = 1)]
    decay_rate: u32,
    /// Fine-tuning iterations per decay step (default: three epochs of the default dataset).
    #[arg(long, default_value_t = 192)]
    decay_iters: usize,
    /// single, wide or residual.
    #[arg(long, default_value = "residual")]
    variant: String,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// FCN training iterations (full precision for the p1 routes).
    #[arg(long, default_value_t = 400)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    pretrain_iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Random reflection of training samples.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train or val.
    #[arg(long, default_value = "val")]
    split: String,
    /// bit, float or reference.
    #[arg(long, default_value = "bit")]
    backend: String,
    /// Report path; defaults to the model path with `.eval.tsv` appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, default_value = "1x1,1x2,2x2,4x4,8x8,fp")]
    configs: String,
    /// Input shape N,C,H,W.
    #[arg(long, default_value = "1,64,32,32")]
    shape: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value = "bench-report")]
    out: PathBuf,
}

/// What a run did and with which settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, args: &impl Serialize, seed: Option<u64>, artifacts: &[&Path]) -> Result<Self> {
        let config = match serde_json::to_value(args).map_err(|e| Error::Format(e.to_string()))? {
            serde_json::Value::Object(map) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Ok(RunManifest {
            command: command.into(),
            config,
            seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Command line that reproduces the run.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec!["bfcn".to_string(), self.command.clone()];
        for (key, value) in &self.config {
            let value = match value {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            args.push(format!("--{}", key.replace('_', "-")));
            args.push(value);
        }
        args
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::DivergenceDetected { .. } => EXIT_DIVERGED,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_BAD_CONFIG,
    }
}

/// Expands `--config FILE` into flags placed right after the subcommand, so
/// explicit flags (which come later) win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let (path, consumed) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (args.get(pos + 1).cloned().ok_or_else(|| Error::BadConfig("--config needs a file".into()))?, 2),
    };
    let mut rest: Vec<String> = args[..pos].iter().chain(&args[pos + consumed..]).cloned().collect();
    let table: toml::Table =
        fs::read_to_string(&path)?.parse().map_err(|e| Error::BadConfig(format!("{path}: {e}")))?;
    let mut file_args = Vec::new();
    for (key, value) in table {
        let value = match value {
            toml::Value::String(s) => s,
            toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_) => value.to_string(),
            other => return Err(Error::BadConfig(format!("{path}: {key} has unsupported value {other}"))),
        };
        file_args.push(format!("--{}", key.replace('_', "-")));
        file_args.push(value);
    }
    let sub = rest.iter().skip(1).position(|a| !a.starts_with('-')).map_or(rest.len(), |i| i + 2);
    rest.splice(sub.min(rest.len())..sub.min(rest.len()), file_args);
    Ok(rest)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Replay { manifest } => {
            let m = at_path(&manifest, RunManifest::read(&manifest))?;
            if m.command == "replay" {
                return Err(Error::BadConfig("manifest records a replay".into()));
            }
            let cli = Cli::try_parse_from(m.to_args()).map_err(|e| Error::BadConfig(e.to_string()))?;
            dispatch(cli.command)
        }
    }
}

/// Prefixes I/O errors with the path involved.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::BadConfig(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let (h, w) = parse_size(&a.size)?;
    if a.classes < 2 {
        return Err(Error::BadConfig(format!("--classes {} < 2", a.classes)));
    }
    let data = Dataset::generate(a.seed, a.train, a.val, &SceneConfig::new(h, w, a.classes))?;
    at_path(&a.out, data.save(&a.out))?;
    let manifest = a.out.join("run_manifest.json");
    RunManifest::new("gen", a, Some(a.seed), &[&a.out])?.write(&manifest)?;
    eprintln!("wrote {} train / {} val samples to {}", a.train, a.val, a.out.display());
    Ok(())
}

fn bits_arg(k: u32) -> Result<u32> {
    match k {
        1..=8 | FULL_PRECISION => Ok(k),
        other => Err(Error::BadBitWidth(other)),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = at_path(&a.data, Dataset::load(&a.data))?;
    let bits = BitWidths::new(bits_arg(a.kw)?, bits_arg(a.ka)?);
    let net = NetConfig {
        in_ch: 3,
        num_classes: data.num_classes,
        base_width: a.width,
        variant: ReconVariant::parse(&a.variant)?,
        bits,
    };
    let exp = Experiment {
        net,
        route: Route::parse(&a.route)?,
        decay_rate: (a.decay_rate > 0).then_some(a.decay_rate),
        pretrain_iters: a.pretrain_iters,
        fcn_iters: a.iters,
        fine_tune_iters: a.decay_iters,
        train: TrainConfig { lr: a.lr, batch: a.batch, augment: a.augment, seed: a.seed, ..TrainConfig::default() },
    };
    if !bits.is_full_precision() {
        if let Some(s) = exp.route.decay_schedule(bits.k_w.min(bits.k_a), exp.decay_rate, a.decay_iters) {
            let steps: Vec<String> = decay_steps(&s, bits)?.iter().map(|b| b.to_string()).collect();
            eprintln!("decay sequence: {}", steps.join(" "));
        }
    }
    let report = run_experiment(&exp, &data, &mut RouteAssets::default())?;
    if let Some(d) = &report.decay {
        for s in &d.steps {
            eprintln!("step {}: loss {:.4}, val mIoU {:.4}", s.bits, s.train_loss, s.val_miou);
        }
    }
    let velocity = report.decay.as_ref().map(|d| &d.velocity);
    save_model(&a.out, &report.net, velocity)?;
    let log = with_suffix(&a.out, ".log.tsv");
    fs::write(&log, report.full_log().to_tsv())?;
    let manifest = with_suffix(&a.out, ".manifest.json");
    RunManifest::new("train", a, Some(a.seed), &[&a.out, &log])?.write(&manifest)?;
    println!("val mIoU {:.4}", report.val_miou);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = at_path(&a.model, load_model(&a.model))?.net;
    let data = at_path(&a.data, Dataset::load(&a.data))?;
    if data.num_classes != model.num_classes {
        return Err(Error::BadConfig(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes, data.num_classes
        )));
    }
    let backend = match a.backend.as_str() {
        "bit" => ConvBackend::Bit,
        "float" => ConvBackend::Float,
        "reference" => ConvBackend::Reference,
        other => return Err(Error::BadConfig(format!("unknown backend {other:?}"))),
    };
    let cm = evaluate(&model, data.split(Split::parse(&a.split)?), backend)?;
    let miou = mean_iou(&cm)?;
    let mut tsv = String::from("class\tiou\n");
    for (c, iou) in cm.class_iou().iter().enumerate() {
        tsv += &match iou {
            Some(v) => format!("{c}\t{v:.6}\n"),
            None => format!("{c}\t-\n"),
        };
    }
    tsv += &format!("mean\t{miou:.6}\n");
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.model, ".eval.tsv"));
    fs::write(&out, &tsv)?;
    let manifest = with_suffix(&out, ".manifest.json");
    RunManifest::new("eval", a, None, &[&out])?.write(&manifest)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let shape = BenchShape::parse(&a.shape)?;
    let configs = BenchConfig::parse_list(&a.configs)?;
    let report = run_bench(&shape, &configs, a.reps)?;
    fs::create_dir_all(&a.out)?;
    let tsv = a.out.join("report.tsv");
    let table = a.out.join("report.txt");
    fs::write(&tsv, report.to_tsv())?;
    fs::write(&table, report.to_table())?;
    RunManifest::new("bench", a, None, &[&tsv, &table])?.write(&a.out.join("run_manifest.json"))?;
    print!("{}", report.to_table());
    Ok(())
}
