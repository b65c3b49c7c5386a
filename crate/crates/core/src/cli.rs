//! The `fapnet` command line: `train`, `predict`, `eval`, `ablate`, `make-toy`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::archive::Archive;
use crate::checkpoint::{model_from_archive, training_input_size};
use crate::config::RunConfig;
use crate::data::{list_files, read_gray, scan_dataset, toy::write_toy_dataset, write_gray_png, Split, IMAGE_EXTS};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, evaluate_pair, EvalPair, MetricReport};
use crate::network::Variant;
use crate::tensor::resize_bilinear;
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "fapnet", version, about = "Camouflaged object detection: train, predict, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Write one grayscale prediction PNG per input image.
    Predict(PredictArgs),
    /// Score prediction maps against ground-truth masks.
    Eval(EvalArgs),
    /// Train and evaluate several ablation variants with one shared seed.
    Ablate(AblateArgs),
    /// Write a small synthetic dataset and a matching run config.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct RunOptions {
    #[arg(long)]
    pub config: PathBuf,
    /// `key.path=value`, applied to the config before validation. Repeatable.
    #[arg(long = "override", value_name = "KEY=VAL")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    pub device: String,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOptions,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Network input resolution; defaults to the training resolution stored in the checkpoint.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Directory receiving `metrics.csv`, `curves.csv` and `report.json`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunOptions,
    /// Comma-separated subset of A3, B1, C1, C2, E.
    #[arg(long, value_delimiter = ',', default_value = "A3,B1,C1,C2,E")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub train_count: usize,
    #[arg(long, default_value_t = 4)]
    pub test_count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::MakeToy(a) => cmd_make_toy(&a),
    }
}

fn load_run_config(opts: &RunOptions) -> Result<RunConfig> {
    if opts.device != "cpu" {
        return Err(Error::config("--device", format!("unsupported device `{}` (only `cpu`)", opts.device)));
    }
    let mut overrides = opts.overrides.clone();
    if let Some(lr) = opts.lr {
        overrides.push(format!("train.lr={lr:e}"));
    }
    if let Some(seed) = opts.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let cfg = RunConfig::load(&opts.config, &overrides)?;
    cfg.check_paths()?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn train_into(cfg: &RunConfig, train: TrainConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snapshot = RunConfig { train: train.clone(), ..cfg.clone() };
    write_file(&out.join("config.toml"), &snapshot.to_toml())?;
    let manifest = scan_dataset(&cfg.data.train_root, Split::Train)?;
    manifest.write_tsv(&out.join("manifest.tsv"))?;
    let val = cfg.data.val_root.as_deref().map(|r| scan_dataset(r, Split::Test)).transpose()?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, train, manifest, val)?,
        None => Trainer::new(train, manifest, val)?,
    };
    let outcome = trainer.run(out)?;
    if let Some(last) = outcome.history.last() {
        println!("step {} epoch {} total loss {:.6}", last.step, last.epoch, last.loss.total);
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(trainer)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(&a.run)?;
    train_into(&cfg, cfg.train.clone(), &a.run.out, a.resume.as_deref()).map(|_| ())
}

/// Returns the number of images that could not be processed.
pub fn cmd_predict(a: &PredictArgs) -> Result<usize> {
    let archive = Archive::load(&a.checkpoint)?;
    let model = model_from_archive(&archive, &a.checkpoint)?;
    let size = match a.input_size {
        Some(s) => s,
        None => training_input_size(&archive).unwrap_or(352),
    };
    if !a.input_dir.is_dir() {
        return Err(Error::config("--input-dir", format!("{} is not a directory", a.input_dir.display())));
    }
    fs::create_dir_all(&a.output_dir).map_err(|e| Error::io(&a.output_dir, e))?;
    let (mut written, mut warnings) = (0, 0);
    for (stem, path) in list_files(&a.input_dir, IMAGE_EXTS)? {
        let pred = match model.predict_path(&path, size, None) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                warnings += 1;
                continue;
            }
        };
        write_gray_png(&a.output_dir.join(format!("{stem}.png")), &pred.map)?;
        written += 1;
    }
    println!("wrote {written} maps to {} ({warnings} warnings)", a.output_dir.display());
    Ok(warnings)
}

fn print_missing(report: &MetricReport) {
    for m in &report.missing {
        eprintln!("warning: `{m}` has no counterpart; excluded");
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let metrics = match &a.config {
        Some(p) => RunConfig::load(p, &[])?.metrics,
        None => Default::default(),
    };
    let report = evaluate_dataset(&a.pred_dir, &a.gt_dir, &metrics)?;
    print_missing(&report);
    report.write(&a.report)?;
    let v = report.aggregate();
    println!("stem,s_alpha,e_phi_mean,f_beta_mean,f_beta_max,mae");
    println!("mean,{:.6},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3], v[4]);
    Ok(())
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for n in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let v = Variant::from_str(n)?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::config("--variants", "no variant given"));
    }
    Ok(out)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let variants = parse_variants(&a.variants)?;
    let cfg = load_run_config(&a.run)?;
    let test_root = cfg
        .data
        .test_root
        .clone()
        .ok_or_else(|| Error::config("data.test_root", "ablation needs a test split"))?;
    let test = scan_dataset(&test_root, Split::Test)?;
    let mut table = format!(
        "# seed = {} (shared by all variants), input {}x{}, {} test images\n",
        cfg.train.seed,
        cfg.train.input_size,
        cfg.train.input_size,
        test.len()
    );
    table.push_str("variant,mfam,fusion,propagation,bgm,train_total,s_alpha,e_phi_mean,f_beta_mean,f_beta_max,mae\n");
    for v in variants {
        let mut train = cfg.train.clone();
        train.model.ablation = v.config();
        log::info!("training variant {v}");
        let mut trainer = train_into(&cfg, train, &a.run.out.join(v.to_string()), None)?;
        let mut items = Vec::new();
        for e in &test.pairs {
            let pred = trainer.model.predict_path(&e.image, cfg.train.input_size, None)?;
            let gt = read_gray(&e.mask)?;
            let (_, _, h, w) = gt.dims4();
            let (ph, pw) = (pred.map.shape()[1], pred.map.shape()[2]);
            let map = resize_bilinear(&pred.map.reshape(&[1, 1, ph, pw])?, h, w);
            let pair = EvalPair::normalized(&map, &gt)?;
            items.push((e.stem.clone(), evaluate_pair(&pair, &cfg.metrics)));
        }
        let report = MetricReport::from_pairs(&items, Vec::new(), &cfg.metrics);
        report.write(&a.run.out.join(v.to_string()).join("eval"))?;
        let ab = v.config();
        let train_total = trainer.train_set_loss()?.total;
        let m = report.aggregate();
        let _ = writeln!(
            table,
            "{v},{},{},{},{},{train_total:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            ab.use_mfam, ab.use_fusion, ab.use_propagation, ab.use_bgm, m[0], m[1], m[2], m[3], m[4]
        );
    }
    fs::create_dir_all(&a.run.out).map_err(|e| Error::io(&a.run.out, e))?;
    write_file(&a.run.out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_make_toy(a: &MakeToyArgs) -> Result<()> {
    if a.size == 0 || a.size % 32 != 0 {
        return Err(Error::config("--size", "must be a positive multiple of 32"));
    }
    write_toy_dataset(&a.out.join("train"), a.train_count, a.size, a.seed)?;
    write_toy_dataset(&a.out.join("test"), a.test_count, a.size, a.seed.wrapping_add(1))?;
    let root = fs::canonicalize(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut cfg = RunConfig::toy(&root);
    cfg.train.input_size = a.size as usize;
    cfg.train.seed = a.seed;
    let path = root.join("toy.toml");
    write_file(&path, &cfg.to_toml())?;
    println!("wrote toy dataset and {}", path.display());
    Ok(())
}
