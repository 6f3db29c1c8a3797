//! Command implementations behind the `stochreid` binary.
//!
//! All commands share one JSON config with per-command sections:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "generate": { "n_identities": 50, "n_cameras": 4, "images_per_id_per_cam": 4,
//!                 "d_in": 32, "camera_shift": 0.8, "noise_sigma": 0.15 },
//!   "train": { "variant": "stochastic_online", "epochs": 10 },
//!   "ablate": { "seeds": [0, 1], "cells": [{ "name": "baseline", "variant": "baseline" }],
//!               "sweep": { "axis": "lambda", "values": [0.0, 0.5, 1.0] } }
//! }
//! ```
//!
//! Every random stream derives from the top-level seed (`seed ^ purpose tag`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{generate, ingest_dir, Dataset, GenConfig, Split};
use crate::distance::DistanceMode;
use crate::encoder::{EncoderKind, EncoderState};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ResultsJson};
use crate::experiment::{run_on, RunResult};
use crate::trainer::{reports_to_csv, train, EpochReport, TrainConfig, Variant};

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<DistanceMode>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    generate: Option<Value>,
    train: Option<Value>,
    ablate: Option<AblateConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MuS,
    MuT,
    Lambda,
    Rho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Named overlays on the `train` section. Empty means one cell, `base`.
    #[serde(default)]
    pub cells: Vec<Map<String, Value>>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

/// Parsed config file with overrides applied.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    raw_generate: Option<Value>,
    raw_train: Value,
    pub ablate: Option<AblateConfig>,
    pub mode: Option<DistanceMode>,
    snapshot: Value,
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self> {
        let snapshot: Value = serde_json::from_str(text).map_err(invalid)?;
        let raw: RawConfig = serde_json::from_value(snapshot.clone()).map_err(invalid)?;
        let seed = overrides.seed.or(raw.seed).unwrap_or(0);
        Ok(RunConfig {
            seed,
            raw_generate: raw.generate,
            raw_train: raw.train.unwrap_or_else(|| Value::Object(Map::new())),
            ablate: raw.ablate,
            mode: overrides.mode,
            snapshot,
        })
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        self.gen_config_seeded(self.seed)
    }

    fn gen_config_seeded(&self, seed: u64) -> Result<GenConfig> {
        let mut raw = self
            .raw_generate
            .clone()
            .ok_or_else(|| Error::InvalidConfig("missing section `generate`".into()))?;
        if let Value::Object(m) = &mut raw {
            m.insert("seed".into(), Value::from(seed));
        }
        let cfg: GenConfig = serde_json::from_value(raw).map_err(|e| invalid(format!("generate: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train_config_with(&Map::new(), self.seed)
    }

    fn train_config_with(&self, overlay: &Map<String, Value>, seed: u64) -> Result<TrainConfig> {
        let mut merged = self.raw_train.clone();
        merge(&mut merged, &Value::Object(overlay.clone()));
        let mut cfg: TrainConfig =
            serde_json::from_value(merged).map_err(|e| invalid(format!("train: {e}")))?;
        cfg.seed = seed;
        if let Some(mode) = self.mode {
            cfg.distance_mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursive object merge; non-object values in `overlay` replace those in `base`.
fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn version_string() -> String {
    match option_env!("STOCHREID_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    outputs: Vec<PathBuf>,
    started: u64,
) -> Result<PathBuf> {
    let path = out.join(RUN_MANIFEST_FILE);
    let mut outputs = outputs;
    outputs.push(path.clone());
    let manifest = RunManifest {
        command: command.into(),
        version: version_string(),
        seed: cfg.seed,
        config: cfg.snapshot.clone(),
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invariant(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Generates a synthetic dataset into `out`.
pub fn cmd_gen(config: &Path, out: &Path, overrides: &Overrides) -> Result<Dataset> {
    let cfg = RunConfig::load(config, overrides)?;
    let dataset = generate(&cfg.gen_config()?)?;
    dataset.export(out)?;
    Ok(dataset)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub epochs: usize,
    pub variant: String,
    pub final_clusters: Option<usize>,
    pub final_outliers: Option<usize>,
    pub final_clu_acc: Option<f64>,
    pub total_secs: f64,
    pub retrieval: Option<ResultsJson>,
    pub reports: Vec<EpochReport>,
}

fn can_evaluate(ds: &Dataset) -> bool {
    ds.has_identities() && ds.split(Split::Query).next().is_some() && ds.split(Split::Gallery).next().is_some()
}

/// Trains on the dataset in `data` and writes the epoch CSV, checkpoint,
/// summary and run manifest into `out`.
pub fn cmd_train(config: &Path, data: &Path, out: &Path, overrides: &Overrides) -> Result<TrainSummary> {
    let started = unix_now();
    let clock = std::time::Instant::now();
    let cfg = RunConfig::load(config, overrides)?;
    let train_cfg = cfg.train_config()?;
    let dataset = ingest_dir(data)?;
    fs::create_dir_all(out)?;

    let encoder = train_cfg.build_encoder(&dataset)?;
    let output = train(&dataset, encoder, &train_cfg)?;
    let retrieval = if can_evaluate(&dataset) {
        Some(evaluate(&output.encoder, &dataset)?.to_json())
    } else {
        None
    };

    let epochs_path = out.join(EPOCHS_FILE);
    fs::write(&epochs_path, reports_to_csv(&output.reports))?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    output.encoder.save(&checkpoint_path)?;
    let last = output.reports.last();
    let summary = TrainSummary {
        seed: cfg.seed,
        epochs: output.reports.len(),
        variant: train_cfg.variant.name(),
        final_clusters: last.map(|r| r.num_clusters),
        final_outliers: last.map(|r| r.outliers),
        final_clu_acc: last.and_then(|r| r.clu_acc),
        total_secs: clock.elapsed().as_secs_f64(),
        retrieval,
        reports: output.reports,
    };
    let summary_path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invariant(e.to_string()))?;
    fs::write(&summary_path, text + "\n")?;
    let bin_path = checkpoint_path.with_extension("bin");
    write_manifest(
        out,
        "train",
        &cfg,
        vec![epochs_path, checkpoint_path, bin_path, summary_path],
        started,
    )?;
    Ok(summary)
}

/// Scores a checkpoint on the query/gallery splits of the dataset in `data`.
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<ResultsJson> {
    let encoder = EncoderState::load(checkpoint)?;
    let dataset = ingest_dir(data)?;
    match encoder.kind() {
        EncoderKind::Linear if encoder.d_in() != dataset.d_in => {
            return Err(Error::DimMismatch {
                expected: encoder.d_in(),
                found: dataset.d_in,
            })
        }
        EncoderKind::FreeEmbedding if encoder.params().rows() != dataset.len() => {
            return Err(Error::DimMismatch {
                expected: encoder.params().rows(),
                found: dataset.len(),
            })
        }
        _ => {}
    }
    Ok(evaluate(&encoder, &dataset)?.to_json())
}

/// One training configuration of an ablation grid.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    overlay: Map<String, Value>,
}

impl Cell {
    /// Train config for this cell at `seed`.
    pub fn config(&self, run: &RunConfig, seed: u64) -> Result<TrainConfig> {
        run.train_config_with(&self.overlay, seed)
    }
}

/// Expands `cells x sweep values` into named cells.
pub fn ablation_cells(ablate: &AblateConfig) -> Result<Vec<Cell>> {
    let mut base: Vec<Cell> = Vec::new();
    if ablate.cells.is_empty() {
        base.push(Cell {
            name: "base".into(),
            overlay: Map::new(),
        });
    }
    for c in &ablate.cells {
        let mut overlay = c.clone();
        let name = match overlay.remove("name") {
            Some(Value::String(s)) => s,
            _ => return Err(Error::InvalidConfig("every ablation cell needs a string `name`".into())),
        };
        base.push(Cell { name, overlay });
    }
    let Some(sweep) = &ablate.sweep else {
        return Ok(base);
    };
    if sweep.values.is_empty() {
        return Err(Error::InvalidConfig("sweep.values is empty".into()));
    }
    let mut cells = Vec::new();
    for c in &base {
        for &v in &sweep.values {
            let mut overlay = c.overlay.clone();
            let (key, label, value) = match sweep.axis {
                SweepAxis::MuS => ("mu_s", "mu_s", Value::from(v)),
                SweepAxis::MuT => ("mu_t", "mu_t", Value::from(v)),
                SweepAxis::Lambda => ("lambda", "lambda", Value::from(v)),
                SweepAxis::Rho => (
                    "variant",
                    "rho",
                    serde_json::to_value(Variant::PercentMean(v)).map_err(invalid)?,
                ),
            };
            overlay.insert(key.into(), value);
            cells.push(Cell {
                name: format!("{}:{}={}", c.name, label, v),
                overlay,
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub clu_acc: Option<f64>,
}

pub const ABLATION_CSV_HEADER: &str = "cell,seed,mAP,rank1,clu_acc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.10},{:.10},{}\n",
            r.cell,
            r.seed,
            r.map,
            r.rank1,
            r.clu_acc.map_or_else(String::new, |a| format!("{a:.10}"))
        ));
    }
    out
}

fn curves_csv(runs: &[(String, u64, RunResult)]) -> String {
    let mut out = String::from("cell,seed,epoch,Y,outliers,clu_acc,loss\n");
    for (cell, seed, run) in runs {
        for r in &run.reports {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                cell,
                seed,
                r.epoch,
                r.num_clusters,
                r.outliers,
                r.clu_acc.map_or_else(String::new, |a| format!("{a:.10}")),
                r.mean_loss.map_or_else(String::new, |l| format!("{l:.10}")),
            ));
        }
    }
    out
}

/// Runs every ablation cell for every seed. With `data` set, the given
/// dataset is shared by all runs; otherwise one dataset is generated per seed.
pub fn cmd_ablate(
    config: &Path,
    data: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
) -> Result<Vec<AblationRow>> {
    let started = unix_now();
    let cfg = RunConfig::load(config, overrides)?;
    let ablate = cfg
        .ablate
        .clone()
        .ok_or_else(|| Error::InvalidConfig("missing section `ablate`".into()))?;
    if ablate.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablate.seeds is empty".into()));
    }
    let cells = ablation_cells(&ablate)?;
    let shared = data.map(ingest_dir).transpose()?;
    let datasets: Vec<(u64, Dataset)> = ablate
        .seeds
        .iter()
        .map(|&s| match &shared {
            Some(ds) => Ok((s, ds.clone())),
            None => Ok((s, generate(&cfg.gen_config_seeded(s)?)?)),
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for cell in &cells {
        for (seed, ds) in &datasets {
            jobs.push((cell, *seed, ds, cell.config(&cfg, *seed)?));
        }
    }
    let runs: Vec<(String, u64, RunResult)> = jobs
        .par_iter()
        .map(|(cell, seed, ds, tc)| Ok((cell.name.clone(), *seed, run_on(ds, tc)?)))
        .collect::<Result<_>>()?;

    let rows: Vec<AblationRow> = runs
        .iter()
        .map(|(cell, seed, run)| AblationRow {
            cell: cell.clone(),
            seed: *seed,
            map: run.retrieval.map,
            rank1: run.retrieval.rank(1),
            clu_acc: run.final_clu_acc(),
        })
        .collect();
    fs::create_dir_all(out)?;
    let ablation_path = out.join(ABLATION_FILE);
    fs::write(&ablation_path, ablation_csv(&rows))?;
    let curves_path = out.join(CURVES_FILE);
    fs::write(&curves_path, curves_csv(&runs))?;
    write_manifest(out, "ablate", &cfg, vec![ablation_path, curves_path], started)?;
    Ok(rows)
}
