//! Command-line front end. Every command writes a manifest into its output
//! location before doing any work. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datagen::{Dataset, DensityProfile, SceneConfig};
use crate::error::{Error, Result};
use crate::models::Regime;
use crate::pgm::write_pgm_normalized;
use crate::supervision::{BetaMode, ChannelWeighting};
use crate::tensorgrad::Tensor;
use crate::trainer::{
    evaluate_model, grad_check_model, load_dme, run_dme, run_sn, GradTarget, GtKernel, Prepared, RunConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "mdsnet",
    version,
    about = "Crowd density estimation with multi-channel deep supervision"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crowd dataset.
    GenData(GenData),
    /// Build density and dot maps (NT1) for every sample of a dataset.
    GenGt(GenGt),
    /// Pretrain the supervision network.
    TrainSn(Train),
    /// Train the density estimator against a frozen supervision network.
    TrainDme(Train),
    /// Evaluate an estimator checkpoint on a dataset split.
    Eval(Eval),
    /// Finite-difference check of analytic gradients on 16x16 inputs.
    GradCheck(GradCheckArgs),
    /// Write a max-normalized PGM next to an NT1 map.
    ExportMap(ExportMap),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of training scenes.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Number of test scenes (default: n / 4).
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value = "dense")]
    pub profile: DensityProfile,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GtFlags {
    /// Fixed Gaussian kernel width (default: 5 dense, 15 sparse).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Geometry-adaptive kernels.
    #[arg(long)]
    pub adaptive: bool,
}

#[derive(Debug, Args)]
pub struct GenGt {
    #[arg(long, default_value = "data")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub gt: GtFlags,
    /// Output directory (default: <dataset>/gt).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta_mode: Option<BetaMode>,
    /// Supervised nodes counted back from the output (0 = baseline).
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=3))]
    pub nodes: Option<u64>,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Channel weighting of the feature loss: attention or equal.
    #[arg(long)]
    pub weighting: Option<ChannelWeighting>,
    #[command(flatten)]
    pub gt: GtFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable crop, flip and gamma augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Supervision network checkpoint (train-dme only).
    #[arg(long)]
    pub sn_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    pub dataset: PathBuf,
    /// Split to score: test or train.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub gt: GtFlags,
    /// Output directory (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// se, sn, dme, objective or objective-dot.
    #[arg(long, default_value = "dme")]
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value = "grad-check")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportMap {
    /// NT1 map to export.
    #[arg(long)]
    pub input: PathBuf,
    /// PGM path (default: the input with a .pgm extension).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CommandManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    started_unix: u64,
}

fn write_manifest(path: &Path, command: &str, argv: &[OsString]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let m = CommandManifest {
        command,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(path, e))
}

fn kernel_for(gt: &GtFlags, dataset: &Dataset) -> GtKernel {
    GtKernel::resolve(gt.sigma, gt.adaptive, dataset.manifest.scene.density_profile)
}

impl Train {
    fn resolve(&self, default_out: &str) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig {
                out_dir: PathBuf::from(default_out),
                ..RunConfig::default()
            },
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if let Some(m) = self.beta_mode {
            cfg.loss.mode = m;
        }
        if let Some(n) = self.nodes {
            cfg.nodes = n as usize;
        }
        if let Some(r) = self.regime {
            cfg.set_regime(r);
        }
        if let Some(w) = self.weighting {
            cfg.weighting = w;
        }
        if let Some(s) = self.gt.sigma {
            cfg.sigma = Some(s);
        }
        if self.gt.adaptive {
            cfg.adaptive = true;
        }
        if let Some(e) = self.epochs {
            cfg.epochs_sn = e;
            cfg.epochs_dme = e;
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if self.no_augment {
            cfg.augment = false;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(a: &GenData, argv: &[OsString]) -> Result<()> {
    write_manifest(&a.out.join("run_manifest.json"), "gen-data", argv)?;
    let scene = SceneConfig::for_profile(a.profile, a.seed);
    let data = Dataset::generate(&scene, a.n, a.n_test.unwrap_or(a.n / 4))?;
    data.save(&a.out)?;
    println!(
        "wrote {} train / {} test scenes to {} (hash {})",
        data.train.len(),
        data.test.len(),
        a.out.display(),
        data.hash
    );
    Ok(())
}

fn gen_gt(a: &GenGt, argv: &[OsString]) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.dataset.join("gt"));
    write_manifest(&out.join("run_manifest.json"), "gen-gt", argv)?;
    let data = Dataset::load(&a.dataset)?;
    let kernel = kernel_for(&a.gt, &data);
    let mut max_err: f64 = 0.0;
    for s in data.train.iter().chain(&data.test) {
        let p = Prepared::new(s, kernel)?;
        let id = &s.annotation.image_id;
        p.density.save_nt1(&out.join(format!("{id}.density.nt1")))?;
        p.dots.save_nt1(&out.join(format!("{id}.dots.nt1")))?;
        max_err = max_err.max((p.density.sum() - p.count).abs());
    }
    println!(
        "wrote maps for {} samples to {} (max |mass - count| = {max_err:e})",
        data.train.len() + data.test.len(),
        out.display()
    );
    Ok(())
}

fn train_sn_cmd(a: &Train) -> Result<()> {
    let cfg = a.resolve("runs/sn")?;
    let m = run_sn(&cfg)?;
    println!(
        "SN trained: {} epochs, final epoch loss {:?}",
        m.epoch_losses.len(),
        m.epoch_losses.last()
    );
    println!("checkpoint {}", cfg.out_dir.join("sn.ckpt").display());
    Ok(())
}

fn train_dme_cmd(a: &Train) -> Result<()> {
    let cfg = a.resolve("runs/dme")?;
    let sn = a
        .sn_ckpt
        .clone()
        .ok_or_else(|| Error::usage("train-dme needs --sn-ckpt"))?;
    let m = run_dme(&cfg, &sn)?;
    if let Some(r) = &m.eval {
        println!("{}", r.to_json());
    }
    Ok(())
}

fn eval_cmd(a: &Eval, argv: &[OsString]) -> Result<()> {
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_manifest(&out.join("eval_manifest.json"), "eval", argv)?;
    let (net, params) = load_dme(&a.ckpt)?;
    let data = Dataset::load(&a.dataset)?;
    let kernel = kernel_for(&a.gt, &data);
    let split = match a.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        s => return Err(Error::usage(format!("unknown split {s:?} (test|train)"))),
    };
    let prepared = split
        .iter()
        .map(|s| Prepared::new(s, kernel))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_model(&net, &params, &prepared)?;
    let json = report.to_json();
    std::fs::write(out.join("eval.json"), &json).map_err(|e| Error::io(out.join("eval.json"), e))?;
    let csv = format!("{}\n{}\n", crate::metrics::EvalReport::CSV_HEADER, report.csv_row());
    std::fs::write(out.join("eval.csv"), csv).map_err(|e| Error::io(out.join("eval.csv"), e))?;
    println!("{json}");
    Ok(())
}

fn grad_check_cmd(a: &GradCheckArgs, argv: &[OsString]) -> Result<()> {
    write_manifest(&a.out.join("run_manifest.json"), "grad-check", argv)?;
    let target: GradTarget = a.model.parse()?;
    let report = grad_check_model(target, a.seed, a.eps, a.tol)?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(a.out.join("report.json"), e))?;
    println!(
        "model={} max_rel_err={:e} checked={} skipped={} pass={}",
        a.model, report.max_rel_err, report.checked, report.skipped, report.pass
    );
    if report.pass {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed for {}: max_rel_err {:e} (tol {:e}), worst {:?}",
            a.model, report.max_rel_err, a.tol, report.worst
        )))
    }
}

fn export_map(a: &ExportMap, argv: &[OsString]) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.input.with_extension("pgm"));
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.json");
    write_manifest(Path::new(&manifest), "export-map", argv)?;
    let t = Tensor::load_nt1(&a.input)?;
    write_pgm_normalized(&out, &t)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Parse `argv` (including the program name) and run the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, &argv),
        Command::GenGt(a) => gen_gt(a, &argv),
        Command::TrainSn(a) => train_sn_cmd(a),
        Command::TrainDme(a) => train_dme_cmd(a),
        Command::Eval(a) => eval_cmd(a, &argv),
        Command::GradCheck(a) => grad_check_cmd(a, &argv),
        Command::ExportMap(a) => export_map(a, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
