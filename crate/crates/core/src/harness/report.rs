//! Best-checkpoint selection and stability series over evaluation records.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalRecord;

use super::{Result, RunConfig, TrainSummary};

/// One row of `runs.csv`: the swept settings and the fate of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub objective: String,
    pub dataset: String,
    pub lr: f64,
    pub gp_weight: f64,
    pub disc_updates: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub final_step: u64,
    pub diverged: bool,
}

impl RunRow {
    pub fn new(cfg: &RunConfig, summary: &TrainSummary) -> Self {
        Self {
            run_id: cfg.run_id(),
            objective: cfg.objective.to_string(),
            dataset: cfg.dataset.to_string(),
            lr: cfg.adam.lr,
            gp_weight: cfg.gp_weight,
            disc_updates: cfg.disc_updates,
            lambda: cfg.lambda,
            seed: cfg.seed,
            final_step: summary.final_step,
            diverged: summary.diverged,
        }
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs(path: &Path, rows: &[RunRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct DiagnosticRow<'a> {
    run_id: &'a str,
    step: u64,
    estimator_floor: f64,
    latent_mse: Option<f64>,
    diverged: bool,
}

/// Per-evaluation values outside the record schema: the same-distribution
/// Fréchet floor and the latent reconstruction error.
pub fn write_diagnostics(path: &Path, summary: &TrainSummary) -> Result<()> {
    let rows: Vec<_> = summary
        .metrics
        .iter()
        .map(|m| DiagnosticRow {
            run_id: &m.record.run_id,
            step: m.record.step,
            estimator_floor: m.estimator_floor,
            latent_mse: m.latent_mse,
            diverged: summary.diverged,
        })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    FidSamples,
    FidRecon,
    ReconL2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::FidSamples, Metric::FidRecon, Metric::ReconL2];

    pub fn of(self, r: &EvalRecord) -> Option<f64> {
        match self {
            Metric::FidSamples => Some(r.fid_samples),
            Metric::FidRecon => r.fid_recon,
            Metric::ReconL2 => r.recon_l2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::FidSamples => "fid_samples",
            Metric::FidRecon => "fid_recon",
            Metric::ReconL2 => "recon_l2",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    pub record: EvalRecord,
    /// Metrics under which this checkpoint is among the best `k`.
    pub by: Vec<Metric>,
}

/// Union of the best `k` records under each metric, lower is better.
/// Ties go to the earlier step, then the smaller run id. Records lacking a
/// metric, or holding a non-finite value, are not ranked under it.
pub fn select_best(records: &[EvalRecord], k: usize) -> Vec<Selected> {
    let mut out: Vec<Selected> = Vec::new();
    for metric in Metric::ALL {
        let mut ranked: Vec<(f64, &EvalRecord)> =
            records.iter().filter_map(|r| metric.of(r).filter(|v| v.is_finite()).map(|v| (v, r))).collect();
        ranked.sort_by(|(a, ra), (b, rb)| a.total_cmp(b).then(ra.step.cmp(&rb.step)).then(ra.run_id.cmp(&rb.run_id)));
        for (_, r) in ranked.into_iter().take(k) {
            match out.iter_mut().find(|s| s.record.run_id == r.run_id && s.record.step == r.step) {
                Some(s) => s.by.push(metric),
                None => out.push(Selected { record: r.clone(), by: vec![metric] }),
            }
        }
    }
    out
}

/// Selection for one (objective, dataset) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSelection {
    pub objective: String,
    pub dataset: String,
    pub selected: Vec<Selected>,
}

/// Groups records by their run's objective and dataset and selects within
/// each group. Records of runs missing from `runs` form one group with
/// empty labels.
pub fn selection_report(records: &[EvalRecord], runs: &[RunRow], k: usize) -> Vec<GroupSelection> {
    let by_id: HashMap<&str, &RunRow> = runs.iter().map(|r| (r.run_id.as_str(), r)).collect();
    let mut groups: BTreeMap<(String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = by_id.get(r.run_id.as_str()).map_or_else(Default::default, |row| (row.objective.clone(), row.dataset.clone()));
        groups.entry(key).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|((objective, dataset), recs)| GroupSelection { objective, dataset, selected: select_best(&recs, k) })
        .collect()
}

#[derive(Serialize)]
struct SelectionRow<'a> {
    objective: &'a str,
    dataset: &'a str,
    run_id: &'a str,
    step: u64,
    fid_samples: f64,
    fid_recon: Option<f64>,
    recon_l2: Option<f64>,
    selected_by: String,
}

pub fn write_selection<W: std::io::Write>(out: W, groups: &[GroupSelection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for g in groups {
        for s in &g.selected {
            w.serialize(SelectionRow {
                objective: &g.objective,
                dataset: &g.dataset,
                run_id: &s.record.run_id,
                step: s.record.step,
                fid_samples: s.record.fid_samples,
                fid_recon: s.record.fid_recon,
                recon_l2: s.record.recon_l2,
                selected_by: s.by.iter().map(|m| m.name()).collect::<Vec<_>>().join(";"),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    panel: String,
    objective: &'a str,
    dataset: &'a str,
    run_id: &'a str,
    step: u64,
    x: f64,
    y: f64,
}

/// Points of the three metric-pair scatter panels, one row per selected
/// checkpoint and panel where both metrics exist.
pub fn write_scatter<W: std::io::Write>(out: W, groups: &[GroupSelection]) -> Result<()> {
    let panels = [(Metric::FidSamples, Metric::FidRecon), (Metric::FidSamples, Metric::ReconL2), (Metric::FidRecon, Metric::ReconL2)];
    let mut w = csv::Writer::from_writer(out);
    for g in groups {
        for (mx, my) in panels {
            for s in &g.selected {
                if let (Some(x), Some(y)) = (mx.of(&s.record), my.of(&s.record)) {
                    w.serialize(ScatterRow {
                        panel: format!("{mx}~{my}"),
                        objective: &g.objective,
                        dataset: &g.dataset,
                        run_id: &s.record.run_id,
                        step: s.record.step,
                        x,
                        y,
                    })?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One point of a metric-versus-step curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub run_id: String,
    pub objective: String,
    pub dataset: String,
    pub lr: Option<f64>,
    pub gp_weight: Option<f64>,
    pub disc_updates: Option<usize>,
    /// Set only for objectives that take λ, so curves group by it.
    pub lambda: Option<f64>,
    pub step: u64,
    pub fid_samples: f64,
    pub fid_recon: Option<f64>,
    pub recon_l2: Option<f64>,
    /// The run stopped on a non-finite value after its last row.
    pub diverged: bool,
}

/// Records ordered by run then step, annotated with their run's settings.
pub fn stability_rows(records: &[EvalRecord], runs: &[RunRow]) -> Vec<StabilityRow> {
    let by_id: HashMap<&str, &RunRow> = runs.iter().map(|r| (r.run_id.as_str(), r)).collect();
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id).then(a.step.cmp(&b.step)));
    sorted
        .into_iter()
        .map(|r| {
            let run = by_id.get(r.run_id.as_str());
            let takes_lambda = run.and_then(|row| row.objective.parse::<crate::models::Objective>().ok()).is_some_and(|o| o.uses_lambda());
            StabilityRow {
                run_id: r.run_id.clone(),
                objective: run.map(|x| x.objective.clone()).unwrap_or_default(),
                dataset: run.map(|x| x.dataset.clone()).unwrap_or_default(),
                lr: run.map(|x| x.lr),
                gp_weight: run.map(|x| x.gp_weight),
                disc_updates: run.map(|x| x.disc_updates),
                lambda: run.and_then(|x| x.lambda).filter(|_| takes_lambda),
                step: r.step,
                fid_samples: r.fid_samples,
                fid_recon: r.fid_recon,
                recon_l2: r.recon_l2,
                diverged: run.is_some_and(|x| x.diverged),
            }
        })
        .collect()
}

pub fn write_stability<W: std::io::Write>(out: W, rows: &[StabilityRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
