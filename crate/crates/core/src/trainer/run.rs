use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::data::{GtKernel, Prepared};
use super::eval::evaluate_model;
use super::fit::{rng_for, train_dme, train_sn};
use super::RunConfig;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{check_compatible, ArchConfig, DensityEstimator, SupervisionNet};
use crate::tensorgrad::ParamSet;

/// Architecture echo written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSidecar {
    pub network: String,
    pub arch: ArchConfig,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub epoch_losses: Vec<f64>,
    pub sn_checkpoint: Option<PathBuf>,
    pub sn_fingerprint: Option<String>,
    pub eval: Option<EvalReport>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, dataset_hash: &str) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            dataset_hash: dataset_hash.into(),
            started_unix: now(),
            finished_unix: None,
            epoch_losses: Vec::new(),
            sn_checkpoint: None,
            sn_fingerprint: None,
            eval: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write(&dir.join("run_manifest.json"), &serde_json::to_string_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("run_manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `dir/name.ckpt` becomes `dir/name.arch.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("arch.json")
}

fn save_checkpoint(path: &Path, network: &str, arch: &ArchConfig, params: &ParamSet) -> Result<()> {
    params.save(path)?;
    let side = ArchSidecar {
        network: network.into(),
        arch: arch.clone(),
        fingerprint: params.fingerprint(),
    };
    write(&sidecar_path(path), &serde_json::to_string_pretty(&side)?)
}

fn read_sidecar(ckpt: &Path, network: &str) -> Result<ArchSidecar> {
    if !ckpt.exists() {
        return Err(Error::io(ckpt, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let p = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let side: ArchSidecar = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
    if side.network != network {
        return Err(Error::config(format!(
            "{} holds a {} checkpoint, expected {network}",
            ckpt.display(),
            side.network
        )));
    }
    Ok(side)
}

pub fn load_sn(ckpt: &Path) -> Result<(SupervisionNet, ParamSet)> {
    let side = read_sidecar(ckpt, "sn")?;
    let mut params = ParamSet::new();
    let net = SupervisionNet::build(&side.arch, &mut params, &mut rng_for(0, 0))?;
    params.load_values(ckpt)?;
    Ok((net, params))
}

pub fn load_dme(ckpt: &Path) -> Result<(DensityEstimator, ParamSet)> {
    let side = read_sidecar(ckpt, "dme")?;
    let mut params = ParamSet::new();
    let net = DensityEstimator::build(&side.arch, &mut params, &mut rng_for(0, 0))?;
    params.load_values(ckpt)?;
    Ok((net, params))
}

fn start(cfg: &RunConfig, command: &str) -> Result<(Dataset, GtKernel, RunManifest)> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(command, cfg, "");
    manifest.save(out)?;
    let data = Dataset::load(&cfg.dataset)?;
    manifest.dataset_hash = data.hash.clone();
    manifest.save(out)?;
    let kernel = GtKernel::resolve(cfg.sigma, cfg.adaptive, data.manifest.scene.density_profile);
    Ok((data, kernel, manifest))
}

/// Pretrain SN on the dataset at `cfg.dataset`; writes `sn.ckpt`,
/// `losses.csv` and the run manifest into `cfg.out_dir`.
pub fn run_sn(cfg: &RunConfig) -> Result<RunManifest> {
    let (data, kernel, mut manifest) = start(cfg, "train-sn")?;
    let out = &cfg.out_dir;
    let trained = train_sn(cfg, &data.train, kernel)?;
    write(&out.join("losses.csv"), &trained.log.to_csv(cfg.regime()))?;
    let ckpt = out.join("sn.ckpt");
    save_checkpoint(&ckpt, "sn", &cfg.arch, &trained.params)?;
    manifest.epoch_losses = trained.log.epoch_means();
    manifest.sn_checkpoint = Some(ckpt);
    manifest.sn_fingerprint = Some(trained.params.fingerprint());
    manifest.finished_unix = Some(now());
    manifest.save(out)?;
    Ok(manifest)
}

/// Train the estimator against the frozen SN at `sn_ckpt`, then evaluate on
/// the test split; writes `dme.ckpt`, `losses.csv`, `eval.json` and the manifest.
pub fn run_dme(cfg: &RunConfig, sn_ckpt: &Path) -> Result<RunManifest> {
    let (data, kernel, mut manifest) = start(cfg, "train-dme")?;
    let out = &cfg.out_dir;
    let (sn, sn_params) = load_sn(sn_ckpt)?;
    check_compatible(sn.arch(), &cfg.arch)?;
    manifest.sn_checkpoint = Some(sn_ckpt.to_path_buf());
    manifest.sn_fingerprint = Some(sn_params.fingerprint());
    manifest.save(out)?;

    let trained = train_dme(cfg, &data.train, kernel, &sn, &sn_params)?;
    write(&out.join("losses.csv"), &trained.log.to_csv(cfg.regime()))?;
    save_checkpoint(&out.join("dme.ckpt"), "dme", &cfg.arch, &trained.params)?;

    let test = data
        .test
        .iter()
        .map(|s| Prepared::new(s, kernel))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_model(&trained.net, &trained.params, &test)?;
    write(&out.join("eval.json"), &report.to_json())?;
    manifest.epoch_losses = trained.log.epoch_means();
    manifest.eval = Some(report);
    manifest.finished_unix = Some(now());
    manifest.save(out)?;
    Ok(manifest)
}
