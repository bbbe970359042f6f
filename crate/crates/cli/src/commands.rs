//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpanet::gradsuite::{self, GradRow};
use dpanet::metrics;
use dpanet::model::{checkpoint, predict, NetConfig};
use dpanet::synth::{self, DpSample, SynthConfig};
use dpanet::train::{self, EpochRecord};

use crate::config::RunConfig;
use crate::{CliError, Command};

pub const CONFIG_ECHO: &str = "config.txt";
pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SPLIT: &str = "split.json";
pub const LAST_CHECKPOINT: &str = "last.dpan";
pub const BEST_CHECKPOINT: &str = "best.dpan";
pub const METRICS: &str = "metrics.csv";

/// Contents of `manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: SynthConfig,
    pub ids: Vec<String>,
}

/// Contents of `split.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::GenData => gen_data(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::Infer => infer(cfg),
        Command::Gradcheck => gradcheck(cfg),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{command} requires --{flag}")))
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(dpanet::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Creates `out` and echoes the resolved configuration into it.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join(CONFIG_ECHO), cfg.render())
}

fn net_config(cfg: &RunConfig) -> Result<NetConfig, CliError> {
    cfg.net_config().map_err(CliError::Usage)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.out, "out", "gen-data")?;
    prepare_out(out, cfg)?;
    let samples = synth::generate_dataset(&cfg.synth).map_err(runtime("generating data"))?;
    synth::write_dataset(out, &samples).map_err(runtime("writing data"))?;
    let manifest = Manifest {
        generator: cfg.synth.clone(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    write_file(&out.join(MANIFEST), to_json(&manifest)?)?;
    println!("wrote {} triplets to {}", samples.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data", "train")?;
    let out = required(&cfg.out, "out", "train")?;
    let net = net_config(cfg)?;
    let samples = synth::read_dataset(data).map_err(runtime(format!("reading {}", data.display())))?;
    prepare_out(out, cfg)?;

    let log_path = out.join(TRAIN_LOG);
    let mut log = format!("{}\n", EpochRecord::CSV_HEADER);
    write_file(&log_path, &log)?;
    let mut write_error = None;
    let outcome = train::train_loop(&samples, &cfg.train, &net, |record| {
        println!("{record}");
        let _ = writeln!(log, "{record}");
        if let Err(e) = fs::write(&log_path, &log) {
            write_error.get_or_insert(e);
        }
    })
    .map_err(runtime("training"))?;
    if let Some(e) = write_error {
        return Err(CliError::Runtime(format!("cannot write {}: {e}", log_path.display())));
    }

    checkpoint::save(&outcome.last, out.join(LAST_CHECKPOINT)).map_err(runtime("saving checkpoint"))?;
    checkpoint::save(&outcome.best, out.join(BEST_CHECKPOINT)).map_err(runtime("saving checkpoint"))?;
    let split = Split {
        train: outcome.train_ids,
        val: outcome.val_ids,
    };
    write_file(&out.join(SPLIT), to_json(&split)?)?;
    Ok(())
}

fn load_checkpoint(
    cfg: &RunConfig,
    net: &NetConfig,
    command: &str,
) -> Result<dpanet::model::ParamStore<f32>, CliError> {
    let path = required(&cfg.checkpoint, "checkpoint", command)?;
    checkpoint::load(path, net).map_err(runtime(format!("loading {}", path.display())))
}

fn read_split(path: &Path) -> Result<Split, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Per-image rows and the mean row of `metrics.csv`.
pub fn metrics_table(rows: &[(String, f64, f64, f64)]) -> String {
    let mut out = String::from("id,psnr,ssim,mae\n");
    let mut sum = (0.0, 0.0, 0.0);
    for (id, p, s, m) in rows {
        let _ = writeln!(out, "{id},{p:.6},{s:.6},{m:.6}");
        sum.0 += p;
        sum.1 += s;
        sum.2 += m;
    }
    let n = rows.len().max(1) as f64;
    let _ = writeln!(out, "mean,{:.6},{:.6},{:.6}", sum.0 / n, sum.1 / n, sum.2 / n);
    out
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data", "eval")?;
    let out = required(&cfg.out, "out", "eval")?;
    let net = net_config(cfg)?;
    let params = load_checkpoint(cfg, &net, "eval")?;
    let mut samples: Vec<DpSample> =
        synth::read_dataset(data).map_err(runtime(format!("reading {}", data.display())))?;
    if let Some(path) = &cfg.split_file {
        let split = read_split(path)?;
        samples.retain(|s| split.val.contains(&s.id));
        if samples.is_empty() {
            return Err(CliError::Runtime(format!(
                "none of the held-out ids in {} are in {}",
                path.display(),
                data.display()
            )));
        }
    }
    prepare_out(out, cfg)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let restored = predict(&net, &params, &s.left, &s.right).map_err(runtime(format!("restoring {}", s.id)))?;
        let score = |e| runtime(format!("scoring {}", s.id))(e);
        rows.push((
            s.id.clone(),
            metrics::psnr(&restored, &s.sharp).map_err(score)?,
            metrics::ssim(&restored, &s.sharp).map_err(score)?,
            metrics::mae(&restored, &s.sharp).map_err(score)?,
        ));
        synth::write_png(&out.join(format!("{}_restored.png", s.id)), &restored).map_err(runtime("writing output"))?;
    }
    let table = metrics_table(&rows);
    print!("{table}");
    write_file(&out.join(METRICS), table)
}

fn infer(cfg: &RunConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data", "infer")?;
    let out = required(&cfg.out, "out", "infer")?;
    let net = net_config(cfg)?;
    let params = load_checkpoint(cfg, &net, "infer")?;
    let pairs = synth::read_pairs(data).map_err(runtime(format!("reading {}", data.display())))?;
    prepare_out(out, cfg)?;
    for p in &pairs {
        let restored = predict(&net, &params, &p.left, &p.right).map_err(runtime(format!("restoring {}", p.id)))?;
        synth::write_png(&out.join(format!("{}_restored.png", p.id)), &restored).map_err(runtime("writing output"))?;
    }
    println!("restored {} pairs into {}", pairs.len(), out.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = gradsuite::run_suite(cfg.train.seed).map_err(runtime("gradient check"))?;
    println!("{}", GradRow::HEADER);
    for row in &rows {
        println!("{row}");
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
