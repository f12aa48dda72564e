//! The alternating training loop.

use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};

use crate::autodiff::Graph;
use crate::data::{sample_prior, Dataset};
use crate::eval::{default_extractor, evaluate_checkpoint, latent_recon_mse, read_records, write_records, EvalRecord, Evaluation, FeatureExtractor};
use crate::losses::{disc_objective, gen_enc_objective, Batch, BoundBundle, Phase};
use crate::models::{Base, ModelBundle};
use crate::nn::{adam_step, AdamState, Network, SpectralState};
use crate::{Rng, Scalar, Tensor};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::{HarnessError, Result};

/// Stream ids reserved next to the per-step streams `0..steps`.
const INIT_STREAM: u64 = u64::MAX;
const EVAL_STREAM: u64 = u64::MAX - 1;

/// Samples for the latent reconstruction error at each evaluation.
const LATENT_MSE_SAMPLES: usize = 4096;

fn stream(seed: u64, id: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// How many times each role group has been updated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub disc_updates: u64,
    pub gen_updates: u64,
}

/// One evaluation: the CSV record plus diagnostics that do not fit its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub record: EvalRecord,
    pub estimator_floor: f64,
    /// `E‖z − E(G(z))‖²`; `None` without an encoder.
    pub latent_mse: Option<f64>,
}

/// Adam state per network, keyed like the checkpoint tensors.
#[derive(Debug, Clone, PartialEq)]
struct Optimizers<T> {
    groups: Vec<(&'static str, AdamState<T>)>,
}

impl<T: Scalar> Optimizers<T> {
    fn new(b: &ModelBundle<T>) -> Self {
        let mut groups = vec![("g", AdamState::new(b.generator.params.tensors()))];
        let nets = [("e", &b.encoder), ("d1", &b.disc), ("d2", &b.disc2)];
        for (name, net) in nets {
            if let Some(net) = net {
                groups.push((name, AdamState::new(net.params.tensors())));
            }
        }
        if let Some(s) = &b.log_sigma {
            groups.push(("log_sigma", AdamState::new(std::slice::from_ref(s))));
        }
        Self { groups }
    }

    fn get(&mut self, name: &str) -> &mut AdamState<T> {
        &mut self.groups.iter_mut().find(|(n, _)| *n == name).expect("optimizer group exists").1
    }
}

fn network_mut<'a, T: Scalar>(b: &'a mut ModelBundle<T>, name: &str) -> Option<&'a mut Network<T>> {
    match name {
        "g" => Some(&mut b.generator),
        "e" => b.encoder.as_mut(),
        "d1" => b.disc.as_mut(),
        "d2" => b.disc2.as_mut(),
        _ => None,
    }
}

/// Every network of a bundle with its checkpoint prefix.
fn networks<T: Scalar>(b: &ModelBundle<T>) -> Vec<(&'static str, &Network<T>)> {
    let mut out = vec![("g", &b.generator)];
    for (name, net) in [("e", &b.encoder), ("d1", &b.disc), ("d2", &b.disc2)] {
        if let Some(n) = net {
            out.push((name, n));
        }
    }
    out
}

/// Builds the bundle a config describes, with its seeded initialization.
pub fn init_bundle<T: Scalar>(config: &RunConfig) -> Result<ModelBundle<T>> {
    let mut rng = stream(config.seed, INIT_STREAM);
    Ok(ModelBundle::new(config.objective, config.arch(), config.lambda, &mut rng)?)
}

pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub bundle: ModelBundle<T>,
    pub step: u64,
    pub counters: Counters,
    /// Set once a loss or parameter turns non-finite; training stops there.
    pub diverged: bool,
    dataset: Dataset,
    extractor: FeatureExtractor<T>,
    opt: Optimizers<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let bundle = init_bundle(&config)?;
        let opt = Optimizers::new(&bundle);
        let dataset = Dataset::open(config.dataset.clone())?;
        let extractor = default_extractor(&config.arch(), config.seed)?;
        Ok(Self { config, bundle, step: 0, counters: Counters::default(), diverged: false, dataset, extractor, opt })
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn set_extractor(&mut self, extractor: FeatureExtractor<T>) {
        self.extractor = extractor;
    }

    fn batch<'g>(&self, g: &'g Graph<T>, rng: &mut Rng) -> Result<Batch<'g, T>> {
        let n = self.config.batch_size;
        let d_z = self.config.latent_dim;
        let x = g.constant(self.dataset.sample(n, rng)?)?;
        let z = g.constant(sample_prior(d_z, n, rng)?)?;
        let u = Tensor::matrix(n, 1, (0..n).map(|_| T::lit(rng.random::<f64>())).collect());
        let noise = match self.bundle.objective.base {
            Base::Vae => Some(g.constant(sample_prior(d_z, n, rng)?)?),
            _ => None,
        };
        Ok(Batch { x, z, u, noise })
    }

    /// Loss value and gradients for one phase, each gradient labelled with
    /// its optimizer group. `None` when the phase has nothing to train.
    fn phase_grads(&self, phase: Phase, rng: &mut Rng) -> Result<Option<(f64, Vec<(&'static str, Vec<Tensor<T>>)>)>> {
        let g = Graph::new();
        let bb = BoundBundle::new(&self.bundle, &g, phase)?;
        let batch = self.batch(&g, rng)?;
        let nets = bb.nets();
        let obj = self.bundle.objective;
        let (loss, groups) = match phase {
            Phase::Disc => {
                let Some(loss) = disc_objective(obj, &nets, &batch, self.config.gp_weight)? else {
                    return Ok(None);
                };
                let mut groups = vec![("d1", bb.d1.as_ref().map(|m| m.params().to_vec()).unwrap_or_default())];
                if self.bundle.disc2.is_some() {
                    groups.push(("d2", bb.d2.as_ref().map(|m| m.params().to_vec()).unwrap_or_default()));
                }
                (loss.total, groups)
            }
            Phase::GenEnc => {
                let loss = gen_enc_objective(obj, &nets, &batch, self.bundle.lambda)?;
                let mut groups = vec![("g", bb.gen_params())];
                if let Some(e) = &bb.e {
                    groups.push(("e", e.params().to_vec()));
                }
                if let Some(s) = bb.log_sigma {
                    groups.push(("log_sigma", vec![s]));
                }
                (loss.total, groups)
            }
        };
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Ok(Some((value, Vec::new())));
        }
        let flat: Vec<_> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let mut grads = g.grad(loss, &flat, None)?.into_iter().map(|v| (*v.value()).clone());
        let out = groups
            .iter()
            .map(|(name, vars)| (*name, grads.by_ref().take(vars.len()).collect()))
            .collect();
        Ok(Some((value, out)))
    }

    fn apply(&mut self, grads: Vec<(&'static str, Vec<Tensor<T>>)>) -> Result<()> {
        let cfg = self.config.adam;
        for (name, g) in grads {
            let state = self.opt.get(name);
            let params: &mut [Tensor<T>] = match name {
                "log_sigma" => std::slice::from_mut(self.bundle.log_sigma.as_mut().expect("VAE scale")),
                _ => network_mut(&mut self.bundle, name).expect("network exists").params.tensors_mut(),
            };
            adam_step(params, &g, state, &cfg)?;
            if params.iter().any(|p| !p.is_finite()) {
                self.diverged = true;
            }
        }
        Ok(())
    }

    /// Turns a non-finite failure into divergence; other errors pass.
    fn guard<V>(&mut self, r: Result<V>) -> Result<Option<V>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.is_non_finite() => {
                self.diverged = true;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// One training step: `disc_updates` discriminator updates, then one
    /// generator/encoder update.
    pub fn train_step(&mut self) -> Result<()> {
        if self.diverged {
            return Ok(());
        }
        let mut rng = stream(self.config.seed, self.step);
        for _ in 0..self.config.disc_updates {
            self.bundle.refresh_spectral(self.config.sn_iters);
            let Some((loss, grads)) = self.guard(self.phase_grads(Phase::Disc, &mut rng))?.flatten() else { break };
            if !loss.is_finite() {
                self.diverged = true;
            }
            if self.diverged {
                return Ok(());
            }
            self.apply(grads)?;
            if self.diverged {
                return Ok(());
            }
            self.counters.disc_updates += 1;
        }
        self.bundle.refresh_spectral(self.config.sn_iters);
        let Some(phase) = self.guard(self.phase_grads(Phase::GenEnc, &mut rng))? else { return Ok(()) };
        let (loss, grads) = phase.expect("every objective trains G");
        if !loss.is_finite() {
            self.diverged = true;
            return Ok(());
        }
        self.apply(grads)?;
        self.counters.gen_updates += 1;
        if !self.diverged {
            self.step += 1;
        }
        Ok(())
    }

    /// Metrics of the current parameters. The evaluation stream is the same
    /// at every step, so unchanged parameters give unchanged metrics.
    pub fn evaluate(&self) -> Result<StepMetrics> {
        let n = self.config.n_eval();
        let mut rng = stream(self.config.seed, EVAL_STREAM);
        let ev = evaluate_checkpoint(&self.bundle, &self.dataset, &self.extractor, n, &mut rng)?;
        let latent_mse = latent_recon_mse(&self.bundle, LATENT_MSE_SAMPLES, &mut rng)?;
        Ok(StepMetrics {
            record: EvalRecord {
                run_id: self.config.run_id(),
                step: self.step,
                fid_samples: ev.fid_samples,
                fid_recon: ev.fid_recon,
                recon_l2: ev.recon_l2,
                n_eval: n,
                extractor_id: self.extractor.id(),
                seed: self.config.seed,
            },
            estimator_floor: ev.estimator_floor,
            latent_mse,
        })
    }

    /// Trains until `until` steps or divergence. Evaluates at step 0 of a
    /// fresh run and at every checkpoint interval, saving a checkpoint there
    /// when an output directory is configured.
    pub fn run(&mut self, until: u64) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        if self.step == 0 {
            let r = self.checkpoint_here();
            out.extend(self.guard(r)?);
        }
        while self.step < until && !self.diverged {
            self.train_step()?;
            if !self.diverged && (self.step % self.config.checkpoint_interval == 0 || self.step == until) {
                let r = self.checkpoint_here();
                out.extend(self.guard(r)?);
            }
        }
        if self.diverged {
            log::warn!("run {} diverged at step {}", self.config.run_id(), self.step);
        }
        Ok(out)
    }

    fn checkpoint_here(&self) -> Result<StepMetrics> {
        let m = self.evaluate()?;
        log::info!(
            "run {} step {}: fid_samples {:.4e} (floor {:.2e}) fid_recon {:?} recon_l2 {:?}",
            m.record.run_id,
            self.step,
            m.record.fid_samples,
            m.estimator_floor,
            m.record.fid_recon,
            m.record.recon_l2
        );
        if let Some(dir) = &self.config.out_dir {
            std::fs::create_dir_all(dir)?;
            self.to_checkpoint().save(&checkpoint_path(dir, self.step))?;
        }
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut tensors = bundle_tensors(&self.bundle);
        let mut counters = vec![
            ("disc_updates".to_owned(), self.counters.disc_updates),
            ("gen_updates".to_owned(), self.counters.gen_updates),
        ];
        for (name, st) in &self.opt.groups {
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                tensors.push((format!("adam/{name}/m{i}"), m.clone()));
                tensors.push((format!("adam/{name}/v{i}"), v.clone()));
            }
            counters.push((format!("adam/{name}/t"), st.t));
            counters.push((format!("adam/{name}/skipped"), st.skipped));
        }
        Checkpoint {
            config_text: self.config.to_text(),
            config_hash: self.config.hash(),
            step: self.step,
            diverged: self.diverged,
            counters,
            tensors,
        }
    }

    /// Continues a run from a checkpoint. `config` may change the length and
    /// output settings but not the trajectory.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(HarnessError::HashMismatch { expected: config.run_id(), found: hex_prefix(&ckpt.config_hash) });
        }
        let mut t = Self::new(config)?;
        load_bundle_tensors(&mut t.bundle, ckpt)?;
        for (name, st) in t.opt.groups.iter_mut() {
            for i in 0..st.m.len() {
                st.m[i] = take_like(ckpt, &format!("adam/{name}/m{i}"), &st.m[i])?;
                st.v[i] = take_like(ckpt, &format!("adam/{name}/v{i}"), &st.v[i])?;
            }
            st.t = counter(ckpt, &format!("adam/{name}/t"))?;
            st.skipped = counter(ckpt, &format!("adam/{name}/skipped"))?;
        }
        t.counters = Counters { disc_updates: counter(ckpt, "disc_updates")?, gen_updates: counter(ckpt, "gen_updates")? };
        t.step = ckpt.step;
        t.diverged = ckpt.diverged;
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.bin"))
}

fn hex_prefix(h: &[u8; 32]) -> String {
    h[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn counter<T: Scalar>(ckpt: &Checkpoint<T>, name: &str) -> Result<u64> {
    ckpt.counter(name).ok_or_else(|| HarnessError::Checkpoint(format!("missing counter {name}")))
}

fn take_like<T: Scalar>(ckpt: &Checkpoint<T>, name: &str, like: &Tensor<T>) -> Result<Tensor<T>> {
    let t = ckpt.tensor(name).ok_or_else(|| HarnessError::Checkpoint(format!("missing tensor {name}")))?;
    if t.shape() != like.shape() {
        return Err(HarnessError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), like.shape())));
    }
    Ok(t.clone())
}

fn scalar_tensor<T: Scalar>(v: T) -> Tensor<T> {
    Tensor::matrix(1, 1, vec![v])
}

/// Parameters and power-iteration states of every network.
fn bundle_tensors<T: Scalar>(b: &ModelBundle<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    for (prefix, net) in networks(b) {
        for (name, t) in net.params.iter() {
            out.push((format!("{prefix}/{name}"), t.clone()));
        }
        for (i, s) in net.spectral.iter().enumerate() {
            if let Some(s) = s {
                out.push((format!("{prefix}/sn{i}/u"), Tensor::matrix(1, s.u.len(), s.u.clone())));
                out.push((format!("{prefix}/sn{i}/v"), Tensor::matrix(1, s.v.len(), s.v.clone())));
                out.push((format!("{prefix}/sn{i}/sigma"), scalar_tensor(s.sigma)));
                out.push((format!("{prefix}/sn{i}/clamped"), scalar_tensor(if s.clamped { T::one() } else { T::zero() })));
            }
        }
    }
    if let Some(s) = &b.log_sigma {
        out.push(("log_sigma".into(), s.clone()));
    }
    out
}

fn load_bundle_tensors<T: Scalar>(b: &mut ModelBundle<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    for prefix in ["g", "e", "d1", "d2"] {
        let Some(net) = network_mut(b, prefix) else { continue };
        let names: Vec<String> = net.params.names().to_vec();
        for (name, slot) in names.iter().zip(net.params.tensors_mut()) {
            *slot = take_like(ckpt, &format!("{prefix}/{name}"), slot)?;
        }
        for (i, s) in net.spectral.iter_mut().enumerate() {
            if let Some(s) = s {
                let get = |part: &str, len: usize| take_like(ckpt, &format!("{prefix}/sn{i}/{part}"), &Tensor::zeros(vec![1, len]));
                *s = SpectralState {
                    u: get("u", s.u.len())?.into_data(),
                    v: get("v", s.v.len())?.into_data(),
                    sigma: get("sigma", 1)?.item(),
                    clamped: get("clamped", 1)?.item() != T::zero(),
                };
            }
        }
    }
    if let Some(s) = b.log_sigma.as_mut() {
        *s = take_like(ckpt, "log_sigma", s)?;
    }
    Ok(())
}

/// The config and model stored in a checkpoint.
pub fn load_model<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<(RunConfig, ModelBundle<T>)> {
    let config = RunConfig::parse(&ckpt.config_text)?;
    if config.hash() != ckpt.config_hash {
        return Err(HarnessError::HashMismatch { expected: hex_prefix(&ckpt.config_hash), found: config.run_id() });
    }
    let mut bundle = init_bundle(&config)?;
    load_bundle_tensors(&mut bundle, ckpt)?;
    Ok((config, bundle))
}

/// Result of a complete `train` invocation.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_id: String,
    pub final_step: u64,
    pub diverged: bool,
    pub counters: Counters,
    pub metrics: Vec<StepMetrics>,
}

impl TrainSummary {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.metrics.iter().map(|m| m.record.clone()).collect()
    }
}

fn train_typed<T: Scalar>(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let (mut t, mut records) = match resume {
        None => (Trainer::<T>::new(config.clone())?, Vec::new()),
        Some(path) => {
            let t = Trainer::<T>::resume(config.clone(), &Checkpoint::load(path)?)?;
            // Keep the records the interrupted run already wrote.
            let prior = match &config.out_dir {
                Some(dir) if dir.join("records.csv").exists() => read_records(&dir.join("records.csv"))?,
                _ => Vec::new(),
            };
            let kept = prior.into_iter().filter(|r| r.run_id == config.run_id() && r.step <= t.step).collect();
            (t, kept)
        }
    };
    let metrics = t.run(config.steps)?;
    records.extend(metrics.iter().map(|m| m.record.clone()));
    let summary = TrainSummary { run_id: config.run_id(), final_step: t.step, diverged: t.diverged, counters: t.counters, metrics };
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        write_records(&dir.join("records.csv"), &records)?;
        super::report::write_diagnostics(&dir.join("diagnostics.csv"), &summary)?;
    }
    Ok(summary)
}

/// Trains one run at the configured precision.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    train_from(config, None)
}

/// Like [`train`], optionally continuing from a checkpoint of the same run.
/// The summary then covers only the continued part.
pub fn train_from(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    match config.precision {
        crate::Dtype::F32 => train_typed::<f32>(config, resume),
        crate::Dtype::F64 => train_typed::<f64>(config, resume),
    }
}

fn evaluate_saved_typed<T: Scalar>(path: &Path, n: usize, features_from: Option<&Path>, seed: Option<u64>) -> Result<(EvalRecord, Evaluation)> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let (config, bundle) = load_model(&ckpt)?;
    let extractor = match features_from {
        None => default_extractor(&config.arch(), config.seed)?,
        Some(p) => {
            let (src_cfg, src) = load_model(&Checkpoint::<T>::load(p)?)?;
            let disc = src
                .disc
                .as_ref()
                .ok_or_else(|| HarnessError::Config(format!("{} has no discriminator to take features from", src_cfg.objective)))?;
            let id = format!("trained-body-{}-{}", src_cfg.run_id(), ckpt_step_label(p));
            FeatureExtractor::trained_body(disc, EXTRACTOR_DIM, config.seed, id)?
        }
    };
    let dataset = Dataset::open(config.dataset.clone())?;
    let seed = seed.unwrap_or(config.seed);
    let mut rng = stream(seed, EVAL_STREAM);
    let ev = evaluate_checkpoint(&bundle, &dataset, &extractor, n, &mut rng)?;
    let record = EvalRecord {
        run_id: config.run_id(),
        step: ckpt.step,
        fid_samples: ev.fid_samples,
        fid_recon: ev.fid_recon,
        recon_l2: ev.recon_l2,
        n_eval: n,
        extractor_id: extractor.id(),
        seed,
    };
    Ok((record, ev))
}

/// Feature width of extractors built from a trained discriminator.
pub const EXTRACTOR_DIM: usize = 64;

fn ckpt_step_label(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Evaluates a saved checkpoint on `n` samples per distribution.
/// `features_from` names a checkpoint whose first discriminator body,
/// plus a random projection, replaces the default extractor.
pub fn evaluate_saved(path: &Path, n: usize, features_from: Option<&Path>, seed: Option<u64>) -> Result<(EvalRecord, Evaluation)> {
    match super::peek_dtype(path)? {
        crate::Dtype::F32 => evaluate_saved_typed::<f32>(path, n, features_from, seed),
        crate::Dtype::F64 => evaluate_saved_typed::<f64>(path, n, features_from, seed),
    }
}
