use proptest::prelude::*;

use super::*;
use crate::eval::EvalRecord;

fn small(objective: &str) -> RunConfig {
    let mut text = format!(
        "objective = {objective}\nhidden = 16\nbatch_size = 16\nsteps = 10\ncheckpoint_interval = 5\nn_eval = 256\nseed = 3\n"
    );
    if objective.starts_with("bigan+") {
        text.push_str("lambda = 1\n");
    }
    RunConfig::parse(&text).unwrap()
}

fn params<T: crate::Scalar>(t: &Trainer<T>) -> Vec<(String, crate::Tensor<T>)> {
    t.to_checkpoint().tensors
}

#[test]
fn config_round_trips_and_rejects_bad_input() {
    let c = small("bigan+xadv");
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    assert_eq!(c.run_id().len(), 12);
    assert!(RunConfig::parse("colour = red").is_err());
    assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    assert!(RunConfig::parse("objective = bigan+zae").is_err(), "λ required");
    assert!(RunConfig::parse("objective = gan\nlambda = 1").is_err());
    assert!(RunConfig::parse("steps = 10\ncheckpoint_interval = 20").is_err());

    // Length and output keys do not enter the hash.
    let mut longer = c.clone();
    longer.steps = 1000;
    longer.out_dir = Some("elsewhere".into());
    assert_eq!(longer.hash(), c.hash());
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(other.hash(), c.hash());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut t = Trainer::<f32>::new(small("bigan+zadv")).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let ck = t.to_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in back.tensors.iter().zip(&ck.tensors) {
        let bits = |t: &crate::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(peek_dtype(&path).unwrap(), crate::Dtype::F32);
    assert!(Checkpoint::<f64>::load(&path).is_err(), "width mismatch");

    let bytes = ck.to_bytes();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err(), "version");
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    for objective in ["gan+zae", "bigan+xadv", "vae"] {
        let cfg = small(objective);
        let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
        let full_metrics = full.run(10).unwrap();

        let mut first = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut metrics = first.run(5).unwrap();
        let ck = Checkpoint::from_bytes(&first.to_checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::<f32>::resume(cfg.clone(), &ck).unwrap();
        metrics.extend(resumed.run(10).unwrap());

        assert_eq!(params(&resumed), params(&full), "{objective}");
        assert_eq!(resumed.counters, full.counters);
        assert_eq!(metrics, full_metrics);
    }
}

#[test]
fn resume_refuses_another_config() {
    let t = Trainer::<f32>::new(small("gan+zae")).unwrap();
    let mut other = small("gan+zae");
    other.adam.lr = 1e-3;
    assert!(matches!(Trainer::<f32>::resume(other, &t.to_checkpoint()), Err(HarnessError::HashMismatch { .. })));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let mut cfg = small("bigan+zae");
    cfg.adam.lr = 0.0;
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    let before: Vec<_> = t.bundle.generator.params.tensors().to_vec();
    let disc_before: Vec<_> = t.bundle.disc.as_ref().unwrap().params.tensors().to_vec();
    let metrics = t.run(10).unwrap();
    assert_eq!(t.bundle.generator.params.tensors(), &before[..]);
    assert_eq!(t.bundle.disc.as_ref().unwrap().params.tensors(), &disc_before[..]);
    assert_eq!(metrics.len(), 3);
    for m in &metrics[1..] {
        assert_eq!(m.record.fid_samples, metrics[0].record.fid_samples);
        assert_eq!(m.record.fid_recon, metrics[0].record.fid_recon);
        assert_eq!(m.record.recon_l2, metrics[0].record.recon_l2);
    }
}

#[test]
fn two_executions_agree() {
    let a = train(&small("gan+xadv")).unwrap();
    let b = train(&small("gan+xadv")).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.records().iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10]);
}

#[test]
fn role_update_counts() {
    for du in [1, 2] {
        let mut cfg = small("gan+zadv");
        cfg.disc_updates = du;
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.run(4).unwrap();
        assert_eq!(t.counters, Counters { disc_updates: 4 * du as u64, gen_updates: 4 });
    }
    // Nothing adversarial to update.
    let mut t = Trainer::<f32>::new(small("vae")).unwrap();
    t.run(3).unwrap();
    assert_eq!(t.counters, Counters { disc_updates: 0, gen_updates: 3 });
}

#[test]
fn f64_runs_and_loads() {
    let mut cfg = small("gan+zae");
    cfg.precision = crate::Dtype::F64;
    let dir = tempfile::tempdir().unwrap();
    cfg.out_dir = Some(dir.path().to_owned());
    let s = train(&cfg).unwrap();
    assert!(!s.diverged);
    let path = checkpoint_path(dir.path(), 10);
    assert_eq!(peek_dtype(&path).unwrap(), crate::Dtype::F64);
    let (back, bundle) = load_model(&Checkpoint::<f64>::load(&path).unwrap()).unwrap();
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(bundle.objective, cfg.objective);
    assert!(dir.path().join("records.csv").exists() && dir.path().join("diagnostics.csv").exists());
}

#[test]
fn non_finite_training_is_marked_diverged() {
    let mut cfg = small("gan");
    cfg.adam.lr = 1e30;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let metrics = t.run(10).unwrap();
    assert!(t.diverged);
    assert!(t.step < 10);
    assert!(metrics.iter().all(|m| m.record.step <= t.step));
}

#[test]
fn grid_sizes() {
    let base = GridSpec::parse("objective = gan+zae").unwrap();
    assert_eq!(expand_grid(&base).unwrap().len(), 18);
    let bigan = GridSpec::parse("objective = bigan+zae").unwrap();
    let runs = expand_grid(&bigan).unwrap();
    assert_eq!(runs.len(), 108);
    let mut ids: Vec<_> = runs.iter().map(RunConfig::run_id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 108);
    let single = GridSpec::parse("objective = gan\nlr = 3e-4\ngp_weight = {1}\ndisc_updates = 1").unwrap();
    assert_eq!(expand_grid(&single).unwrap().len(), 1);
    assert!(matches!(GridSpec::parse("lr = {}"), Err(HarnessError::EmptyGrid(_))));
    assert!(GridSpec::parse("hidden = {8, 16}").is_err());
    let seeds = GridSpec::parse("objective = gan\nlr = 3e-4\ngp_weight = 1\ndisc_updates = 1\nseed = {0, 1, 2}").unwrap();
    let runs = expand_grid(&seeds).unwrap();
    assert_eq!(runs.len(), 3);
    assert!(runs[0].seed != runs[1].seed && runs[1].seed != runs[2].seed);
}

#[test]
fn grid_runs_are_order_independent() {
    let spec = GridSpec::parse(
        "objective = gan+zae\nhidden = 8\nbatch_size = 8\nsteps = 4\ncheckpoint_interval = 2\nn_eval = 64\ngp_weight = 1\nlr = {1e-4, 1e-3}\ndisc_updates = {1, 2}",
    )
    .unwrap();
    let configs = expand_grid(&spec).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let forward = run_grid(&configs, a.path(), 3).unwrap();
    let mut reversed = configs.clone();
    reversed.reverse();
    let mut backward = run_grid(&reversed, b.path(), 1).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
    let read = |d: &std::path::Path| {
        let mut r = crate::eval::read_records(&d.join("records.csv")).unwrap();
        r.sort_by(|x, y| x.run_id.cmp(&y.run_id).then(x.step.cmp(&y.step)));
        r
    };
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(read_runs(&a.path().join("runs.csv")).unwrap(), forward);
}

fn rec(run: &str, step: u64, s: f64, r: Option<f64>, l: Option<f64>) -> EvalRecord {
    EvalRecord {
        run_id: run.into(),
        step,
        fid_samples: s,
        fid_recon: r,
        recon_l2: l,
        n_eval: 100,
        extractor_id: "identity".into(),
        seed: 0,
    }
}

#[test]
fn selection_examples() {
    let dominant = vec![rec("a", 1, 0.1, Some(0.1), Some(0.1)), rec("a", 2, 1.0, Some(1.0), Some(1.0))];
    let s = select_best(&dominant, 1);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].by, Metric::ALL.to_vec());

    let two = vec![rec("a", 1, 0.1, Some(2.0), Some(0.5)), rec("b", 1, 0.2, Some(1.0), Some(0.7))];
    let s = select_best(&two, 1);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].record.run_id, "a");
    assert_eq!(s[0].by, vec![Metric::FidSamples, Metric::ReconL2]);
    assert_eq!(s[1].by, vec![Metric::FidRecon]);

    // Nine distinct winners.
    let mut nine = Vec::new();
    for i in 0..3 {
        let f = i as f64;
        nine.push(rec("s", i, f, Some(100.0), Some(100.0)));
        nine.push(rec("r", i, 100.0, Some(f), Some(100.0)));
        nine.push(rec("l", i, 100.0, Some(100.0), Some(f)));
    }
    assert_eq!(select_best(&nine, 3).len(), 9);

    // Ties: earlier step, then smaller run id.
    let tied = vec![rec("b", 2, 1.0, None, None), rec("b", 1, 1.0, None, None), rec("a", 1, 1.0, None, None)];
    let s = select_best(&tied, 1);
    assert_eq!((s[0].record.run_id.as_str(), s[0].record.step), ("a", 1));
}

#[test]
fn stability_rows_carry_lambda_only_for_bigan_plus() {
    let run = |id: &str, objective: &str, lambda: Option<f64>, diverged: bool| RunRow {
        run_id: id.into(),
        objective: objective.into(),
        dataset: "gauss-ring(8,2,0.05)".into(),
        lr: 1e-4,
        gp_weight: 1.0,
        disc_updates: 1,
        lambda,
        seed: 0,
        final_step: 4,
        diverged,
    };
    let runs = vec![run("p", "bigan+zae", Some(0.3), false), run("q", "gan+zae", None, true)];
    let records: Vec<_> = (0..5).rev().map(|s| rec("p", s, 1.0, None, None)).chain([rec("q", 0, 1.0, None, None), rec("q", 1, 1.0, None, None)]).collect();
    let rows = stability_rows(&records, &runs);
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r.run_id == "p").map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(rows.iter().all(|r| (r.lambda.is_some()) == (r.objective == "bigan+zae")));
    assert!(rows.iter().all(|r| r.diverged == (r.run_id == "q")));
    let mut buf = Vec::new();
    write_stability(&mut buf, &rows).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 8);

    let groups = selection_report(&records, &runs, 3);
    assert_eq!(groups.len(), 2);
    let mut buf = Vec::new();
    write_selection(&mut buf, &groups).unwrap();
    write_scatter(std::io::sink(), &groups).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("objective,dataset,run_id,step"));
}

proptest! {
    #[test]
    fn selection_size_and_membership(
        vals in prop::collection::vec((0u8..5, 0.0f64..10.0, prop::option::of(0.0f64..10.0), prop::option::of(0.0f64..10.0)), 1..40),
        k in 1usize..5,
    ) {
        let records: Vec<_> = vals.iter().enumerate().map(|(i, &(run, s, r, l))| rec(&run.to_string(), i as u64, s, r, l)).collect();
        let sel = select_best(&records, k);
        prop_assert!(!sel.is_empty() && sel.len() <= 3 * k);
        for s in &sel {
            for &m in &s.by {
                let v = m.of(&s.record).unwrap();
                let better = records.iter().filter(|r| m.of(r).is_some_and(|x| x < v)).count();
                prop_assert!(better < k);
            }
        }
    }
}
