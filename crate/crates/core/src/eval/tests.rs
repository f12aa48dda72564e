use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::data::DatasetSpec;
use crate::models::Objective;
use crate::nn::ImageShape;
use crate::Rng;

fn moments_1d(mu: f64, var: f64) -> GaussianMoments<f64> {
    GaussianMoments { mean: vec![mu], cov: Tensor::matrix(1, 1, vec![var]), n: 2 }
}

#[test]
fn fit_gaussian_examples() {
    let m = fit_gaussian(&Tensor::matrix(2, 1, vec![-1.0, 1.0])).unwrap();
    assert_eq!(m.mean, vec![0.0]);
    assert_eq!(m.cov.item(), 2.0);

    let same = fit_gaussian(&Tensor::matrix(3, 2, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0])).unwrap();
    assert!(same.cov.data().iter().all(|&v| v == 0.0));

    assert!(matches!(fit_gaussian(&Tensor::matrix(1, 2, vec![1.0, 2.0])), Err(EvalError::TooFewSamples { .. })));
}

#[test]
fn fit_gaussian_is_affine_equivariant() {
    let mut rng = Rng::seed_from_u64(1);
    let n = 50;
    let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect());
    let a = Tensor::matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]);
    let b = [0.7f64, -4.0];
    let at = a.transpose().unwrap();
    let mut y = x.matmul(&at).unwrap();
    for i in 0..n {
        for (j, bj) in b.iter().enumerate() {
            y.data_mut()[2 * i + j] += bj;
        }
    }
    let (mx, my) = (fit_gaussian(&x).unwrap(), fit_gaussian(&y).unwrap());
    let expect_mean: Tensor<f64> = a.matmul(&Tensor::matrix(2, 1, mx.mean.clone())).unwrap();
    for j in 0..2 {
        assert!((my.mean[j] - expect_mean.data()[j] - b[j]).abs() < 1e-12);
    }
    let expect_cov = a.matmul(&mx.cov).unwrap().matmul(&at).unwrap();
    for (p, q) in my.cov.data().iter().zip(expect_cov.data().iter()) {
        assert!((p - q).abs() < 1e-10f64);
    }
}

#[test]
fn frechet_examples() {
    let m = moments_1d(0.3, 2.0);
    assert_eq!(frechet_distance(&m, &m).unwrap(), 0.0);
    let v = frechet_distance(&moments_1d(0.0, 1.0), &moments_1d(1.0, 4.0)).unwrap();
    assert!((v - 2.0).abs() < 1e-14);

    // Zero covariance reduces to the squared distance of the means.
    let p = GaussianMoments { mean: vec![1.0, 2.0], cov: Tensor::zeros(vec![2, 2]), n: 2 };
    let q = GaussianMoments { mean: vec![4.0, -2.0], cov: Tensor::zeros(vec![2, 2]), n: 2 };
    assert_eq!(frechet_distance(&p, &q).unwrap(), 25.0);

    let wide = GaussianMoments { mean: vec![0.0; 3], cov: Tensor::identity(3), n: 2 };
    assert!(matches!(frechet_distance(&p, &wide), Err(EvalError::Shape(_))));
}

fn random_moments(d: usize, rng: &mut Rng) -> GaussianMoments<f64> {
    let n = d + 5;
    let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect());
    fit_gaussian(&x).unwrap()
}

#[test]
fn frechet_is_symmetric_and_nonnegative() {
    let mut rng = Rng::seed_from_u64(2);
    for d in [2, 3, 6] {
        for _ in 0..20 {
            let (a, b) = (random_moments(d, &mut rng), random_moments(d, &mut rng));
            let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-9, "{ab} {ba}");
        }
    }
}

#[test]
fn frechet_matches_nalgebra_oracle() {
    use nalgebra::DMatrix;
    let mut rng = Rng::seed_from_u64(3);
    for d in [2, 5] {
        let (a, b) = (random_moments(d, &mut rng), random_moments(d, &mut rng));
        let s1 = DMatrix::from_row_slice(d, d, a.cov.data());
        let s2 = DMatrix::from_row_slice(d, d, b.cov.data());
        let root = |m: &DMatrix<f64>| {
            let e = m.clone().symmetric_eigen();
            let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
            &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
        };
        let r2 = root(&s2);
        let inner = &r2 * &s1 * &r2;
        let cross = root(&((&inner + inner.transpose()) * 0.5)).trace();
        let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
        let expect = mean_sq + s1.trace() + s2.trace() - 2.0 * cross;
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn commuting_trace_identity() {
    let mut rng = Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
        let e: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
        let diag = |v: &[f64]| {
            let mut t = Tensor::zeros(vec![4, 4]);
            for i in 0..4 {
                t.data_mut()[i * 5] = v[i];
            }
            t
        };
        let expect: f64 = d.iter().zip(&e).map(|(a, b)| a.sqrt() * b.sqrt()).sum();
        assert!((psd_sqrt_product(&diag(&d), &diag(&e)).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn recon_l2_examples() {
    let ext = FeatureExtractor::<f64>::identity(2).unwrap();
    let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
    let r = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]);
    assert_eq!(recon_feature_l2(&ext, &x, &r).unwrap(), 3.5);
    assert_eq!(recon_feature_l2(&ext, &r, &r).unwrap(), 0.0);
    let perm = [1, 0];
    assert_eq!(recon_feature_l2(&ext, &x.select_rows(&perm), &r.select_rows(&perm)).unwrap(), 3.5);
    let short = Tensor::matrix(1, 2, vec![0.0, 0.0]);
    assert!(recon_feature_l2(&ext, &short, &r).is_err());
}

#[test]
fn extractors_are_frozen_and_sized() {
    assert!(matches!(FeatureExtractor::<f64>::identity(1), Err(EvalError::FeatureDim(1))));
    let img = DataShape::Image(ImageShape::new(3, 16, 16));
    let ext = FeatureExtractor::<f32>::random_net(img, 32, 5).unwrap();
    assert_eq!(ext.dim(), 32);
    assert_eq!(ext, FeatureExtractor::random_net(img, 32, 5).unwrap());
    let mut rng = Rng::seed_from_u64(0);
    let x = Tensor::matrix(3, 768, (0..3 * 768).map(|_| rng.random::<f32>()).collect());
    assert_eq!(ext.features(&x).unwrap(), ext.features(&x).unwrap());

    let arch = ArchConfig::planar(2, 2, 16, 2);
    let bundle = ModelBundle::<f64>::new("gan".parse::<Objective>().unwrap(), arch, None, &mut rng).unwrap();
    let trained = FeatureExtractor::trained_body(bundle.disc.as_ref().unwrap(), 8, 1, "disc").unwrap();
    assert_eq!(trained.dim(), 8);
    assert_eq!(trained.id(), "disc");
    let x = Tensor::matrix(4, 2, (0..8).map(|_| rng.random::<f64>()).collect());
    assert_eq!(trained.features(&x).unwrap().shape(), &[4, 8]);
}

#[test]
fn chunked_forward_matches_single_pass() {
    let ext = FeatureExtractor::<f64>::random_net(DataShape::Planar(2), 4, 3).unwrap();
    let mut rng = Rng::seed_from_u64(5);
    let n = 2 * EVAL_CHUNK + 7;
    let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random::<f64>()).collect());
    let FeatureExtractor::Net { net, .. } = &ext else { unreachable!() };
    assert_eq!(ext.features(&x).unwrap(), net.apply(&x, None).unwrap().remove(0));
}

fn ring() -> Dataset {
    Dataset::open(DatasetSpec::DEFAULT).unwrap()
}

/// Upper 98th percentile of the real-vs-real distance over 50 independent draws.
fn floor_quantile(n: usize) -> f64 {
    let ext = FeatureExtractor::<f64>::identity(2).unwrap();
    let ds = ring();
    let mut floors: Vec<f64> = (0..50)
        .map(|s| {
            let mut rng = Rng::seed_from_u64(1000 + s);
            let a = fit_gaussian(&ext.features(&ds.sample(n, &mut rng).unwrap()).unwrap()).unwrap();
            let b = fit_gaussian(&ext.features(&ds.sample(n, &mut rng).unwrap()).unwrap()).unwrap();
            frechet_distance(&a, &b).unwrap()
        })
        .collect();
    floors.sort_by(f64::total_cmp);
    floors[48]
}

#[test]
fn exact_sampler_scores_within_estimator_floor() {
    let n = 2000;
    let ds = ring();
    let ext = FeatureExtractor::identity(2).unwrap();
    let mut rng = Rng::seed_from_u64(6);
    let mut other = Rng::seed_from_u64(7);
    let ev = evaluate_with::<f64>(&ds, &ext, n, &mut rng, |n, _| Ok(ds.sample(n, &mut other)?), Some(&|x: &Tensor<f64>| Ok(x.clone()))).unwrap();
    assert!(ev.fid_samples < floor_quantile(n), "{ev:?}");
    assert_eq!(ev.fid_recon, Some(0.0));
    assert_eq!(ev.recon_l2, Some(0.0));
}

#[test]
fn untrained_bundle_sits_far_above_floor() {
    let mut rng = Rng::seed_from_u64(8);
    let bundle = ModelBundle::<f64>::new("gan+zae".parse::<Objective>().unwrap(), ArchConfig::planar(2, 2, 32, 2), None, &mut rng).unwrap();
    let ext = FeatureExtractor::identity(2).unwrap();
    let ev = evaluate_checkpoint(&bundle, &ring(), &ext, 2000, &mut rng).unwrap();
    assert!(ev.fid_samples > 10.0 * floor_quantile(2000), "{ev:?}");
    assert!(ev.fid_recon.is_some() && ev.recon_l2.is_some());

    let gan = ModelBundle::<f64>::new("gan".parse::<Objective>().unwrap(), ArchConfig::planar(2, 2, 8, 1), None, &mut rng).unwrap();
    let ev = evaluate_checkpoint(&gan, &ring(), &ext, 100, &mut rng).unwrap();
    assert_eq!((ev.fid_recon, ev.recon_l2), (None, None));
    assert!(matches!(evaluate_checkpoint(&gan, &ring(), &ext, 3, &mut rng), Err(EvalError::TooFewSamples { .. })));
}

#[test]
fn latent_mse_is_zero_only_with_an_encoder() {
    let mut rng = Rng::seed_from_u64(9);
    let gan = ModelBundle::<f64>::new("gan".parse::<Objective>().unwrap(), ArchConfig::planar(2, 2, 8, 1), None, &mut rng).unwrap();
    assert_eq!(latent_recon_mse(&gan, 10, &mut rng).unwrap(), None);
    let ae = ModelBundle::<f64>::new("gan+zae".parse::<Objective>().unwrap(), ArchConfig::planar(2, 2, 8, 1), None, &mut rng).unwrap();
    assert!(latent_recon_mse(&ae, 10, &mut rng).unwrap().unwrap() > 0.0);
}

#[test]
fn more_samples_shrink_the_floor() {
    let ext = FeatureExtractor::<f64>::identity(2).unwrap();
    let ds = ring();
    let median = |n: usize, base: u64| {
        let mut v: Vec<f64> = (0..20)
            .map(|s| {
                let mut rng = Rng::seed_from_u64(base + s);
                let a = fit_gaussian(&ext.features(&ds.sample(n, &mut rng).unwrap()).unwrap()).unwrap();
                let b = fit_gaussian(&ext.features(&ds.sample(n, &mut rng).unwrap()).unwrap()).unwrap();
                frechet_distance(&a, &b).unwrap()
            })
            .collect();
        v.sort_by(f64::total_cmp);
        (v[9] + v[10]) / 2.0
    };
    assert!(median(4 * 500, 100) < median(500, 200));
}

#[test]
fn records_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let recs = vec![
        EvalRecord { run_id: "a1".into(), step: 0, fid_samples: 1.5, fid_recon: Some(2.0), recon_l2: Some(0.25), n_eval: 100, extractor_id: "identity".into(), seed: 3 },
        EvalRecord { run_id: "b2".into(), step: 1000, fid_samples: 0.125, fid_recon: None, recon_l2: None, n_eval: 100, extractor_id: "identity".into(), seed: 4 },
    ];
    write_records(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("run_id,step,fid_samples,fid_recon,recon_l2,n_eval,extractor_id,seed\n"));
    assert_eq!(read_records(&path).unwrap(), recs);
    assert!(recs.iter().all(EvalRecord::is_valid));
}

proptest! {
    #[test]
    fn one_dim_closed_form(mu1 in -10.0f64..10.0, mu2 in -10.0f64..10.0, s1 in 0.0f64..5.0, s2 in 0.0f64..5.0) {
        let v = frechet_distance(&moments_1d(mu1, s1 * s1), &moments_1d(mu2, s2 * s2)).unwrap();
        let expect = (mu1 - mu2).powi(2) + (s1 - s2).powi(2);
        prop_assert!((v - expect).abs() < 1e-10 * (1.0 + expect), "{} {}", v, expect);
    }

    #[test]
    fn fitted_moments_are_symmetric(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = Rng::seed_from_u64(seed);
        let n = 10;
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>());
        let m = fit_gaussian(&x).unwrap();
        prop_assert_eq!(&m.cov, &m.cov.transpose().unwrap());
        prop_assert_eq!(frechet_distance(&m, &m).unwrap(), 0.0);
    }
}
