//! Hyperparameter grids over a run template.
//!
//! A template is config text in which the grid keys may hold `{a, b, ...}`
//! lists. Grid keys left out of the template take the default grids below;
//! a plain value is a singleton dimension.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::eval::{write_records, EvalRecord};
use crate::losses::LAMBDA_GRID;
use crate::nn::LR_GRID;

use super::report::{write_runs, RunRow};
use super::{train, HarnessError, Result, RunConfig};

pub const GP_GRID: [f64; 3] = [1.0, 3.0, 10.0];
pub const DISC_UPDATES_GRID: [usize; 2] = [1, 2];

/// Swept keys, in expansion order. `lambda` only applies to objectives
/// that take it.
const GRID_KEYS: [&str; 5] = ["lr", "gp_weight", "disc_updates", "lambda", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Non-swept `key = value` pairs.
    pub fixed: Vec<(String, String)>,
    /// Swept keys with their values, in [`GRID_KEYS`] order.
    pub dims: Vec<(String, Vec<String>)>,
}

fn defaults(key: &str) -> Vec<String> {
    match key {
        "lr" => LR_GRID.iter().map(f64::to_string).collect(),
        "gp_weight" => GP_GRID.iter().map(f64::to_string).collect(),
        "disc_updates" => DISC_UPDATES_GRID.iter().map(usize::to_string).collect(),
        "lambda" => LAMBDA_GRID.iter().map(f64::to_string).collect(),
        _ => vec!["0".into()],
    }
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut fixed = Vec::new();
        let mut given: Vec<(String, Vec<String>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim()))
                .ok_or_else(|| HarnessError::Config(format!("template line {}: expected key = value", lineno + 1)))?;
            if fixed.iter().any(|(k, _)| *k == key) || given.iter().any(|(k, _)| *k == key) {
                return Err(HarnessError::Config(format!("template line {}: duplicate key {key}", lineno + 1)));
            }
            let list = value.strip_prefix('{').and_then(|v| v.strip_suffix('}'));
            match (GRID_KEYS.contains(&key.as_str()), list) {
                (true, Some(inner)) => {
                    let values: Vec<String> = inner.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
                    given.push((key, values));
                }
                (true, None) => given.push((key, vec![value.to_owned()])),
                (false, Some(_)) => return Err(HarnessError::Config(format!("{key} cannot be swept"))),
                (false, None) => fixed.push((key, value.to_owned())),
            }
        }
        let mut dims = Vec::new();
        for key in GRID_KEYS {
            let values = match given.iter().position(|(k, _)| k == key) {
                Some(i) => given.swap_remove(i).1,
                None => defaults(key),
            };
            if values.is_empty() {
                return Err(HarnessError::EmptyGrid(key.into()));
            }
            dims.push((key.to_owned(), values));
        }
        Ok(Self { fixed, dims })
    }
}

/// Seed of one grid point: a hash of the base seed and the point's other
/// swept values, so runs do not share initializations and the result does
/// not depend on enumeration order.
fn derived_seed(point: &[(&str, &str)]) -> u64 {
    let mut h = Sha256::new();
    for (k, v) in point {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Every run of the grid. Output directories, when the template has one,
/// become `<out_dir>/<run id>`.
pub fn expand_grid(spec: &GridSpec) -> Result<Vec<RunConfig>> {
    let mut base = RunConfig::default();
    for (k, v) in &spec.fixed {
        base.set(k, v)?;
    }
    let dims: Vec<(&str, &[String])> = spec
        .dims
        .iter()
        .filter(|(k, _)| k != "lambda" || base.objective.uses_lambda())
        .map(|(k, v)| (k.as_str(), v.as_slice()))
        .collect();
    let total: usize = dims.iter().map(|(_, v)| v.len()).product();
    let mut out = Vec::with_capacity(total);
    for mut index in 0..total {
        let mut cfg = base.clone();
        let mut point = Vec::with_capacity(dims.len());
        for (key, values) in dims.iter().rev() {
            point.push((*key, values[index % values.len()].as_str()));
            index /= values.len();
        }
        point.reverse();
        for &(k, v) in &point {
            if k != "seed" {
                cfg.set(k, v)?;
            }
        }
        cfg.seed = derived_seed(&point);
        if let Some(dir) = &base.out_dir {
            cfg.out_dir = Some(dir.join(cfg.run_id()));
        }
        cfg.validate()?;
        out.push(cfg);
    }
    Ok(out)
}

/// Trains every config on up to `parallel` threads, then writes
/// `runs.csv` and the merged `records.csv` under `out`.
pub fn run_grid(configs: &[RunConfig], out: &Path, parallel: usize) -> Result<Vec<RunRow>> {
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<super::TrainSummary>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let mut cfg = cfg.clone();
                if cfg.out_dir.is_none() {
                    cfg.out_dir = Some(out.join(cfg.run_id()));
                }
                let r = train(&cfg);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    let mut records: Vec<EvalRecord> = Vec::new();
    for (cfg, r) in configs.iter().zip(results.into_inner().expect("no worker panicked")) {
        let summary = r.expect("every run was attempted")?;
        rows.push(RunRow::new(cfg, &summary));
        records.extend(summary.records());
    }
    write_runs(&out.join("runs.csv"), &rows)?;
    write_records(&out.join("records.csv"), &records)?;
    Ok(rows)
}
