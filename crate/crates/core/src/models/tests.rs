use rand::{Rng as _, SeedableRng};

use super::*;
use crate::autodiff::finite_diff_check;
use crate::nn::{adam_step, AdamConfig, AdamState};

fn planar() -> ArchConfig {
    ArchConfig::planar(2, 2, 8, 2)
}

fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn perturb(net: &mut Network<f64>, rng: &mut Rng, scale: f64) {
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

#[test]
fn objective_ids_round_trip() {
    let ids: Vec<String> = Objective::ALL.iter().map(ToString::to_string).collect();
    assert_eq!(
        ids,
        ["gan", "gan+zae", "gan+xae", "gan+zadv", "gan+xadv", "bigan", "bigan+zae", "bigan+xae", "bigan+zadv", "bigan+xadv", "vae"]
    );
    for o in Objective::ALL {
        assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
    }
    assert!("bigan+foo".parse::<Objective>().is_err());
}

#[test]
fn lambda_present_iff_bigan_plus() {
    let mut rng = Rng::seed_from_u64(0);
    for o in Objective::ALL {
        let with = ModelBundle::<f64>::new(o, planar(), Some(0.3), &mut rng);
        let without = ModelBundle::<f64>::new(o, planar(), None, &mut rng);
        assert_eq!(with.is_ok(), o.uses_lambda(), "{o}");
        assert_eq!(without.is_ok(), !o.uses_lambda(), "{o}");
    }
    let neg = ModelBundle::<f64>::new("bigan+zae".parse().unwrap(), planar(), Some(-1.0), &mut rng);
    assert!(matches!(neg, Err(ModelError::Lambda { .. })));
}

#[test]
fn zero_final_layer_gives_half_grey_images() {
    let mut rng = Rng::seed_from_u64(1);
    let arch = ArchConfig {
        data: DataShape::Image(ImageShape::new(1, 16, 16)),
        latent_dim: 4,
        hidden: 0,
        depth: 0,
        channels: 2,
    };
    let mut b = ModelBundle::<f64>::new("gan".parse().unwrap(), arch, None, &mut rng).unwrap();
    for v in b.generator.params.get_mut("head.0.w").unwrap().data_mut() {
        *v = 0.0;
    }
    let x = b.generate(&rand_tensor(&mut rng, 3, 4)).unwrap();
    assert_eq!(x.shape(), &[3, 256]);
    assert!(x.data().iter().all(|&v| v == 0.5));
    let d = b.disc.as_ref().unwrap().apply(&x, None).unwrap().remove(0);
    assert_eq!(d.shape(), &[3, 1]);
}

#[test]
fn identity_generator_returns_its_input() {
    let spec = NetworkSpec {
        body: vec![],
        heads: vec![LayerSpec::dense(2, 2, Activation::Identity, Normalizer::None)],
        inject_dim: 0,
    };
    let mut net = Network::<f64>::new(spec, &mut Rng::seed_from_u64(2)).unwrap();
    *net.params.get_mut("head.0.w").unwrap() = Tensor::identity(2);
    let g = Graph::new();
    let m = NetModule::new(&net, &g, false).unwrap();
    let z = g.constant(Tensor::matrix(2, 2, vec![0.5, -1.5, 2.0, 3.0])).unwrap();
    let x = generator_forward(&m, z, 2, Grad::Detach).unwrap();
    assert_eq!(x.value().data(), z.value().data());
    let bad = g.constant(Tensor::zeros(vec![1, 3])).unwrap();
    assert!(generator_forward(&m, bad, 2, Grad::Detach).is_err());
}

/// Straight-line evaluation of the planar generator, independent of the graph.
fn reference_generator(net: &Network<f64>, z: &[f64]) -> Vec<f64> {
    let p = &net.params;
    let dense = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.get2(i, j)).sum::<f64>())
            .collect()
    };
    let mut h = z.to_vec();
    for l in 0..net.spec().body.len() {
        let pre = dense(&h, p.get(&format!("body.{l}.w")).unwrap(), p.get(&format!("body.{l}.b")).unwrap());
        let m = pre.len() as f64;
        let mean = pre.iter().sum::<f64>() / m;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let gain = p.get(&format!("body.{l}.ln_g")).unwrap().data();
        let shift = p.get(&format!("body.{l}.ln_b")).unwrap().data();
        h = pre
            .iter()
            .enumerate()
            .map(|(j, v)| ((v - mean) / (var + 1e-5).sqrt() * gain[j] + shift[j]).max(0.0))
            .collect();
    }
    dense(&h, p.get("head.0.w").unwrap(), p.get("head.0.b").unwrap())
}

#[test]
fn generator_matches_straight_line_reference() {
    let mut rng = Rng::seed_from_u64(3);
    let mut b = ModelBundle::<f64>::new("gan".parse().unwrap(), planar(), None, &mut rng).unwrap();
    perturb(&mut b.generator, &mut rng, 0.2);
    let z = rand_tensor(&mut rng, 5, 2);
    let x = b.generate(&z).unwrap();
    for r in 0..5 {
        let expect = reference_generator(&b.generator, z.row(r));
        for (a, e) in x.row(r).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

fn joint_disc(rng: &mut Rng) -> Network<f64> {
    Network::new(planar().disc_spec(DiscKind::XZ, 1), rng).unwrap()
}

#[test]
fn zero_injections_ignore_z() {
    let mut rng = Rng::seed_from_u64(4);
    let mut d = joint_disc(&mut rng);
    d.refresh_spectral(3);
    let x = rand_tensor(&mut rng, 4, 2);
    let a = d.apply(&x, Some(&rand_tensor(&mut rng, 4, 2))).unwrap();
    let b = d.apply(&x, Some(&rand_tensor(&mut rng, 4, 2))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_layer_picking_z_gives_a_dot_z() {
    let spec = NetworkSpec {
        body: vec![LayerSpec::dense(2, 1, Activation::Identity, Normalizer::None)],
        heads: vec![LayerSpec::dense(1, 1, Activation::Identity, Normalizer::None)],
        inject_dim: 3,
    };
    let mut d = Network::<f64>::new(spec, &mut Rng::seed_from_u64(5)).unwrap();
    *d.params.get_mut("body.0.w").unwrap() = Tensor::zeros(vec![2, 1]);
    *d.params.get_mut("body.0.inj").unwrap() = Tensor::matrix(3, 1, vec![0.5, -2.0, 1.5]);
    *d.params.get_mut("head.0.w").unwrap() = Tensor::ones(vec![1, 1]);
    let x = Tensor::matrix(1, 2, vec![7.0, -3.0]);
    let z = Tensor::matrix(1, 3, vec![2.0, 1.0, 4.0]);
    let logit = d.apply(&x, Some(&z)).unwrap().remove(0);
    assert_eq!(logit.item(), 0.5 * 2.0 - 2.0 + 1.5 * 4.0);
}

#[test]
fn injection_makes_logit_depend_on_z() {
    let mut rng = Rng::seed_from_u64(6);
    let mut d = joint_disc(&mut rng);
    perturb(&mut d, &mut rng, 0.5);
    d.refresh_spectral(5);
    let g = Graph::new();
    let m = NetModule::new(&d, &g, true).unwrap();
    let x = g.constant(rand_tensor(&mut rng, 3, 2)).unwrap();
    let z0 = rand_tensor(&mut rng, 3, 2);
    let z = g.param(z0.clone()).unwrap();
    let out = disc_xz_forward(&m, x, z, Grad::Track).unwrap().sum().unwrap();
    let grad = g.grad(out, &[z], None).unwrap()[0].value();
    assert!(grad.max_abs() > 1e-6);
    // Central-difference probe on one coordinate.
    let h = 1e-6;
    let mut plus = z0.clone();
    plus.data_mut()[0] += h;
    let mut minus = z0;
    minus.data_mut()[0] -= h;
    let fp = g.replay(&[(z, plus)], &[out]).unwrap()[0].item();
    let fm = g.replay(&[(z, minus)], &[out]).unwrap()[0].item();
    let fd = (fp - fm) / (2.0 * h);
    assert!((fd - grad.data()[0]).abs() < 1e-6 * (1.0 + fd.abs()));
    assert!(finite_diff_check(&g, out, &[z], 1e-6).unwrap() < 1e-4);
}

#[test]
fn joint_disc_is_continuous_in_z() {
    let mut rng = Rng::seed_from_u64(7);
    let mut d = joint_disc(&mut rng);
    perturb(&mut d, &mut rng, 0.5);
    d.refresh_spectral(5);
    let inj_norm: f64 = d.params.iter().filter(|(n, _)| n.ends_with(".inj")).map(|(_, t)| t.max_abs()).fold(0.0, f64::max);
    let x = rand_tensor(&mut rng, 1, 2);
    let z = rand_tensor(&mut rng, 1, 2);
    let mut z2 = z.clone();
    z2.data_mut()[1] += 1e-6;
    let a = d.apply(&x, Some(&z)).unwrap()[0].item();
    let b = d.apply(&x, Some(&z2)).unwrap()[0].item();
    assert!((a - b).abs() < 1e-5 * inj_norm.max(1.0));
}

#[test]
fn shared_heads_see_body_updates() {
    let mut rng = Rng::seed_from_u64(8);
    let arch = planar();
    let mut d = shared_dual_disc::<f64>(&arch, DiscKind::XZ, DiscKind::XZ, &mut rng).unwrap();
    perturb(&mut d, &mut rng, 0.3);
    d.refresh_spectral(3);
    let x = rand_tensor(&mut rng, 4, 2);
    let z = rand_tensor(&mut rng, 4, 2);
    let before = d.apply(&x, Some(&z)).unwrap();

    // One Adam step on the body using head 0 only.
    let grads = {
        let g = Graph::new();
        let m = NetModule::new(&d, &g, true).unwrap();
        let loss = m
            .with_head(0)
            .run(g.constant(x.clone()).unwrap(), Some(g.constant(z.clone()).unwrap()), Grad::Track)
            .unwrap()
            .sum()
            .unwrap();
        let gs = g.grad(loss, m.params(), None).unwrap();
        let head1: Vec<usize> = d.params.names().iter().enumerate().filter(|(_, n)| n.starts_with("head.1")).map(|(i, _)| i).collect();
        for i in &head1 {
            assert_eq!(gs[*i].value().max_abs(), 0.0);
        }
        gs.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>()
    };
    let mut st = AdamState::new(d.params.tensors());
    adam_step(d.params.tensors_mut(), &grads, &mut st, &AdamConfig { lr: 1e-2, ..AdamConfig::default() }).unwrap();
    let after = d.apply(&x, Some(&z)).unwrap();
    assert_ne!(before[1], after[1]);

    assert!(matches!(
        shared_dual_disc::<f64>(&arch, DiscKind::X, DiscKind::XZ, &mut rng),
        Err(ModelError::Sharing(..))
    ));
}

#[test]
fn sharing_layout_per_objective() {
    let mut rng = Rng::seed_from_u64(9);
    let arch = planar();
    for id in ["gan+zadv", "gan+xadv"] {
        let b = ModelBundle::<f64>::new(id.parse().unwrap(), arch, None, &mut rng).unwrap();
        assert_eq!(b.disc.as_ref().unwrap().spec().heads.len(), 1);
        assert_eq!(b.disc.as_ref().unwrap().spec().inject_dim, 0);
        assert_eq!(b.disc2.as_ref().unwrap().spec().inject_dim, 2);
    }
    for id in ["bigan+zadv", "bigan+xadv"] {
        let b = ModelBundle::<f64>::new(id.parse().unwrap(), arch, Some(1.0), &mut rng).unwrap();
        assert!(b.disc2.is_none());
        let shared = b.disc.as_ref().unwrap();
        assert_eq!(shared.spec().heads.len(), 2);
        // body + 2 heads, against two unshared single-head discriminators
        let single = Network::<f64>::new(arch.disc_spec(DiscKind::XZ, 1), &mut rng).unwrap();
        let head = arch.hidden + 1;
        let body = single.params.scalar_count() - head;
        assert_eq!(shared.params.scalar_count(), body + 2 * head);
        assert_eq!(2 * single.params.scalar_count() - shared.params.scalar_count(), body);
    }
    let vae = ModelBundle::<f64>::new("vae".parse().unwrap(), arch, None, &mut rng).unwrap();
    assert!(vae.disc.is_none() && vae.log_sigma.is_some());
    assert_eq!(vae.encoder.as_ref().unwrap().spec().heads[0].kind.fan_out(), 4);
}

#[test]
fn encoder_and_disc_bodies_share_architecture() {
    for arch in [
        planar(),
        ArchConfig {
            data: DataShape::Image(ImageShape::new(3, 32, 32)),
            latent_dim: 16,
            hidden: 0,
            depth: 0,
            channels: 8,
        },
    ] {
        let e = arch.encoder_spec(arch.latent_dim);
        let d = arch.disc_spec(DiscKind::X, 1);
        let kinds = |s: &NetworkSpec| s.body.iter().map(|l| (l.kind, l.activation)).collect::<Vec<_>>();
        assert_eq!(kinds(&e), kinds(&d));
        assert_eq!(e.heads[0].kind.fan_out(), arch.latent_dim);
        assert_eq!(d.heads[0].kind.fan_out(), 1);
        assert!(e.body.iter().all(|l| l.normalizer == Normalizer::LayerNorm));
        assert!(d.body.iter().all(|l| l.normalizer == Normalizer::SpectralNorm));
    }
}

fn vae_nets(rng: &mut Rng) -> ModelBundle<f64> {
    let mut b = ModelBundle::<f64>::new("vae".parse().unwrap(), planar(), None, rng).unwrap();
    perturb(b.encoder.as_mut().unwrap(), rng, 0.3);
    b
}

#[test]
fn vae_noise_free_sample_is_the_mean() {
    let mut rng = Rng::seed_from_u64(10);
    let b = vae_nets(&mut rng);
    let g = Graph::new();
    let e = NetModule::new(b.encoder.as_ref().unwrap(), &g, true).unwrap();
    let dec = NetModule::new(&b.generator, &g, true).unwrap();
    let x = g.constant(rand_tensor(&mut rng, 3, 2)).unwrap();
    let out = vae_forward(&e, &dec, x, g.constant(Tensor::zeros(vec![3, 2])).unwrap()).unwrap();
    assert_eq!(out.z.value().data(), out.mu.value().data());
    assert!(vae_forward(&e, &dec, x, g.constant(Tensor::zeros(vec![3, 3])).unwrap()).is_err());
}

#[test]
fn vae_collapsed_variance_is_deterministic() {
    let mut rng = Rng::seed_from_u64(11);
    let mut b = vae_nets(&mut rng);
    let enc = b.encoder.as_mut().unwrap();
    // Drive the log-variance half of the head far below the clamp.
    let w = enc.params.get_mut("head.0.w").unwrap();
    let cols = w.cols();
    for r in 0..w.rows() {
        for c in 2..cols {
            w.data_mut()[r * cols + c] = 0.0;
        }
    }
    let bias = enc.params.get_mut("head.0.b").unwrap();
    bias.data_mut()[2] = -100.0;
    bias.data_mut()[3] = -100.0;
    let g = Graph::new();
    let e = NetModule::new(b.encoder.as_ref().unwrap(), &g, true).unwrap();
    let dec = NetModule::new(&b.generator, &g, true).unwrap();
    let x = g.constant(rand_tensor(&mut rng, 3, 2)).unwrap();
    let out = vae_forward(&e, &dec, x, g.constant(rand_tensor(&mut rng, 3, 2)).unwrap()).unwrap();
    assert!(out.logvar.value().data().iter().all(|&v| v == LOGVAR_RANGE.0));
    for (z, mu) in out.z.value().data().iter().zip(out.mu.value().data()) {
        assert!((z - mu).abs() <= (0.5 * LOGVAR_RANGE.0).exp());
    }
}

#[test]
fn vae_reconstruction_gradient_wrt_mean() {
    let mut rng = Rng::seed_from_u64(12);
    let b = vae_nets(&mut rng);
    let g = Graph::new();
    let dec = NetModule::new(&b.generator, &g, true).unwrap();
    // Feed μ in directly through an identity "encoder" to expose it as a leaf.
    let mu = g.param(rand_tensor(&mut rng, 3, 2)).unwrap();
    let logvar = g.constant(Tensor::full(vec![3, 2], -1.0)).unwrap();
    let enc = move |_x: Var<'_, f64>, _z: Option<Var<'_, f64>>, _m: Grad| mu.concat_cols(logvar);
    let x = g.constant(rand_tensor(&mut rng, 3, 2)).unwrap();
    let out = vae_forward(&enc, &dec, x, g.constant(rand_tensor(&mut rng, 3, 2)).unwrap()).unwrap();
    let recon = out.recon.sub(x).unwrap().square().unwrap().sum().unwrap();
    assert!(finite_diff_check(&g, recon, &[mu], 1e-6).unwrap() < 1e-4);
}
