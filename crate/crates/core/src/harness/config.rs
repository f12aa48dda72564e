//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::models::{ArchConfig, DataShape, Objective};
use crate::nn::AdamConfig;
use crate::Dtype;

use super::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub objective: Objective,
    pub dataset: DatasetSpec,
    pub latent_dim: usize,
    /// Planar hidden width.
    pub hidden: usize,
    /// Planar hidden layer count.
    pub depth: usize,
    /// Image base channel count.
    pub channels: usize,
    pub adam: AdamConfig,
    pub gp_weight: f64,
    pub disc_updates: usize,
    pub lambda: Option<f64>,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Power-iteration rounds per training step.
    pub sn_iters: usize,
    /// Samples per evaluation; defaults to 10 000 planar, 2 048 images.
    pub n_eval: Option<usize>,
    pub precision: Dtype,
    /// Where `train` writes checkpoints and records.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            objective: "gan+zae".parse().expect("known objective"),
            dataset: DatasetSpec::DEFAULT,
            latent_dim: 2,
            hidden: 64,
            depth: 2,
            channels: 8,
            adam: AdamConfig::default(),
            gp_weight: 1.0,
            disc_updates: 1,
            lambda: None,
            batch_size: 64,
            steps: 20_000,
            checkpoint_interval: 1_000,
            seed: 0,
            sn_iters: 1,
            n_eval: None,
            precision: Dtype::F32,
            out_dir: None,
        }
    }
}

/// Keys that change the training trajectory. The rest (length, output and
/// evaluation settings) may differ between a run and its resumption.
const TRAJECTORY_KEYS: [&str; 17] = [
    "objective",
    "dataset",
    "latent_dim",
    "hidden",
    "depth",
    "channels",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "gp_weight",
    "disc_updates",
    "lambda",
    "batch_size",
    "seed",
    "sn_iters",
    "precision",
];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value}: {why}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| bad(key, value, e))
        }
        match key {
            "objective" => self.objective = value.parse().map_err(|e| bad(key, value, e))?,
            "dataset" => self.dataset = value.parse().map_err(|e| bad(key, value, e))?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "gp_weight" => self.gp_weight = num(key, value)?,
            "disc_updates" => self.disc_updates = num(key, value)?,
            "lambda" => self.lambda = if value == "none" { None } else { Some(num(key, value)?) },
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sn_iters" => self.sn_iters = num(key, value)?,
            "n_eval" => self.n_eval = Some(num(key, value)?),
            "precision" => {
                self.precision = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(bad(key, value, "expected f32 or f64")),
                }
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(HarnessError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        let a = &self.adam;
        if !(a.lr >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail(format!("invalid Adam settings {a:?}"));
        }
        if !(self.gp_weight >= 0.0) {
            return fail(format!("gp_weight must be ≥ 0, got {}", self.gp_weight));
        }
        if self.disc_updates == 0 || self.batch_size < 2 || self.sn_iters == 0 {
            return fail("disc_updates, sn_iters ≥ 1 and batch_size ≥ 2 required".into());
        }
        if self.checkpoint_interval == 0 || self.steps < self.checkpoint_interval {
            return fail(format!("need 1 ≤ checkpoint_interval ≤ steps, got {} and {}", self.checkpoint_interval, self.steps));
        }
        match (self.objective.uses_lambda(), self.lambda) {
            (true, None) => return fail(format!("{} needs lambda", self.objective)),
            (false, Some(_)) => return fail(format!("{} takes no lambda", self.objective)),
            (true, Some(l)) if !(l >= 0.0) => return fail(format!("lambda must be ≥ 0, got {l}")),
            _ => {}
        }
        self.arch().validate()?;
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        let data = match self.dataset.image_shape() {
            Some(img) => DataShape::Image(img),
            None => DataShape::Planar(self.dataset.dim()),
        };
        ArchConfig { data, latent_dim: self.latent_dim, hidden: self.hidden, depth: self.depth, channels: self.channels }
    }

    pub fn n_eval(&self) -> usize {
        self.n_eval.unwrap_or(if self.dataset.image_shape().is_some() { 2_048 } else { 10_000 })
    }

    fn value_of(&self, key: &str) -> String {
        let a = &self.adam;
        match key {
            "objective" => self.objective.to_string(),
            "dataset" => self.dataset.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "depth" => self.depth.to_string(),
            "channels" => self.channels.to_string(),
            "lr" => a.lr.to_string(),
            "beta1" => a.beta1.to_string(),
            "beta2" => a.beta2.to_string(),
            "adam_eps" => a.eps.to_string(),
            "gp_weight" => self.gp_weight.to_string(),
            "disc_updates" => self.disc_updates.to_string(),
            "lambda" => self.lambda.map_or("none".into(), |l| l.to_string()),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "sn_iters" => self.sn_iters.to_string(),
            "precision" => self.precision.name().into(),
            _ => unreachable!("not a trajectory key: {key}"),
        }
    }

    /// Canonical text of the trajectory keys, in fixed order.
    pub fn trajectory_text(&self) -> String {
        TRAJECTORY_KEYS.iter().fold(String::new(), |mut s, k| {
            let _ = writeln!(s, "{k} = {}", self.value_of(k));
            s
        })
    }

    /// Every key, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = self.trajectory_text();
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        if let Some(n) = self.n_eval {
            let _ = writeln!(s, "n_eval = {n}");
        }
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", dir.display());
        }
        s
    }

    /// SHA-256 of [`RunConfig::trajectory_text`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.trajectory_text().as_bytes()).into()
    }

    /// First 12 hex digits of the hash.
    pub fn run_id(&self) -> String {
        self.hash()[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
