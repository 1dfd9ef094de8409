use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensorgrad::{sigmoid, GradCheck, Graph, ParamSet};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn small_arch(mode: Regime) -> ArchConfig {
    ArchConfig {
        base_channels: 2,
        head_mode: mode,
        ..ArchConfig::default()
    }
}

#[test]
fn node_shapes_for_64() {
    let a = ArchConfig::default();
    assert_eq!(
        a.node_shapes(64, 64).unwrap(),
        vec![[32, 16, 16], [16, 32, 32], [8, 64, 64]]
    );
}

#[test]
fn arch_validation() {
    let mut a = ArchConfig::default();
    a.num_nodes = 2;
    assert!(matches!(a.validate(), Err(Error::Config(_))));
    let a = ArchConfig::default();
    assert!(matches!(a.check_input(60, 64), Err(Error::Config(_))));
    assert!(a.check_input(72, 64).is_ok());
}

#[test]
fn compatibility() {
    let a = ArchConfig::default();
    assert!(check_compatible(&a, &a).is_ok());
    let b = ArchConfig {
        base_channels: 4,
        ..a.clone()
    };
    assert!(matches!(check_compatible(&a, &b), Err(Error::Config(_))));
    // head mode does not affect node shapes
    let c = ArchConfig {
        head_mode: Regime::Dot,
        ..a.clone()
    };
    assert!(check_compatible(&a, &c).is_ok());
}

#[test]
fn sn_and_dme_shapes_64() {
    let arch = ArchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    let sn = SupervisionNet::build(&arch, &mut ps, &mut rng).unwrap();
    let mut pd = ParamSet::new();
    let dme = DensityEstimator::build(&arch, &mut pd, &mut rng).unwrap();

    let gt = rand_tensor(&mut rng, &[1, 1, 64, 64], 0.0, 0.01);
    let img = rand_tensor(&mut rng, &[1, 1, 64, 64], 0.0, 1.0);
    let (recon, bundle) = sn.infer(&ps, &gt, &img).unwrap();
    assert_eq!(recon.shape(), &[1, 1, 64, 64]);
    assert!(recon.data().iter().all(|&v| v >= 0.0));

    let mut g = Graph::new();
    let x = g.input(img.clone());
    let nodes = dme.forward(&mut g, &pd, x).unwrap();
    assert_eq!(g.shape(nodes.output), &[1, 1, 64, 64]);
    let want = [[1, 32, 16, 16], [1, 16, 32, 32], [1, 8, 64, 64]];
    for n in 0..3 {
        assert_eq!(bundle.features[n].shape(), &want[n]);
        assert_eq!(g.shape(nodes.taps[n]), &want[n]);
        assert_eq!(bundle.weights[n].shape(), &want[n][..2]);
        let c = want[n][1] as f64;
        assert!(bundle.weights[n].data().iter().all(|&w| w > 0.0 && w < 1.0));
        let s: f64 = bundle.weights[n].data().iter().sum();
        assert!(s > 0.0 && s < c);
    }
}

#[test]
fn wrong_side_is_config_error() {
    let arch = small_arch(Regime::Density);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    let sn = SupervisionNet::build(&arch, &mut ps, &mut rng).unwrap();
    let t = Tensor::zeros(&[1, 1, 20, 20]);
    assert!(matches!(sn.infer(&ps, &t, &t), Err(Error::Config(_))));
    let mut pd = ParamSet::new();
    let dme = DensityEstimator::build(&arch, &mut pd, &mut rng).unwrap();
    assert!(matches!(dme.predict(&pd, &t), Err(Error::Config(_))));
}

#[test]
fn zero_inputs_zero_recon() {
    let arch = small_arch(Regime::Density);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let sn = SupervisionNet::build(&arch, &mut ps, &mut rng).unwrap();
    ps.get_mut(sn.output_weight()).data_mut().fill(0.0);
    let z = Tensor::zeros(&[2, 1, 16, 16]);
    let (recon, bundle) = sn.infer(&ps, &z, &z).unwrap();
    assert!(recon.data().iter().all(|&v| v == 0.0));
    // zero features and zero biases give sigmoid(0) everywhere
    for w in &bundle.weights {
        assert!(w.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn se_zero_affines() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamSet::new();
    let se = SeBlock::build(&mut p, "se", 8, 4, &mut rng).unwrap();
    assert_eq!(se.hidden(), 2);
    for id in se.param_ids() {
        p.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 8, 4, 4]));
    let (scaled, w) = se.forward(&mut g, &p, x).unwrap();
    assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    assert!(g.value(scaled).data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_hidden_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    let se = SeBlock::build(&mut p, "se", 2, 4, &mut rng).unwrap();
    assert_eq!(se.hidden(), 1);
}

#[test]
fn se_identity_affines_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = ParamSet::new();
    let se = SeBlock::build(&mut p, "se", 2, 1, &mut rng).unwrap();
    let [w1, b1, w2, b2] = se.param_ids();
    for id in [w1, w2] {
        p.get_mut(id).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
    p.get_mut(b1).data_mut().fill(0.0);
    p.get_mut(b2).data_mut().fill(0.0);

    let x = rand_tensor(&mut rng, &[2, 2, 3, 5], 0.0, 2.0);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (scaled, w) = se.forward(&mut g, &p, xi).unwrap();
    for n in 0..2 {
        for c in 0..2 {
            let plane = &x.data()[(n * 2 + c) * 15..(n * 2 + c + 1) * 15];
            let mean = plane.iter().sum::<f64>() / 15.0;
            let want = sigmoid(mean);
            let got = g.value(w).data()[n * 2 + c];
            assert!((got - want).abs() < 1e-14);
            let out = &g.value(scaled).data()[(n * 2 + c) * 15..(n * 2 + c + 1) * 15];
            for (o, v) in out.iter().zip(plane) {
                assert!((o - v * want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn dme_output_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = rand_tensor(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
    for mode in [Regime::Density, Regime::Dot] {
        let mut p = ParamSet::new();
        let dme = DensityEstimator::build(&small_arch(mode), &mut p, &mut rng).unwrap();
        let out = dme.predict(&p, &img).unwrap();
        assert_eq!(out.shape(), &[2, 1, 16, 16]);
        match mode {
            Regime::Density => assert!(out.data().iter().all(|&v| v >= 0.0)),
            Regime::Dot => assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0)),
        }
    }
}

#[test]
fn deterministic_build() {
    let arch = ArchConfig::default();
    let mk = || {
        let mut p = ParamSet::new();
        DensityEstimator::build(&arch, &mut p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        p.fingerprint()
    };
    assert_eq!(mk(), mk());
}

#[test]
fn grad_check_sn() {
    let arch = small_arch(Regime::Density);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = ParamSet::new();
    let sn = SupervisionNet::build(&arch, &mut p, &mut rng).unwrap();
    let gt = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let img = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let target = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let report = GradCheck {
        samples_per_tensor: 8,
        ..GradCheck::default()
    }
    .run(
        |g, p| {
            let (a, b) = (g.input(gt.clone()), g.input(img.clone()));
            let nodes = sn.forward(g, p, a, b)?;
            let l = g.weighted_sq_err(nodes.recon, &target, &Tensor::ones(&[1, 1]))?;
            let s1 = g.sum(nodes.weights[0]);
            let s3 = g.sum(nodes.weights[2]);
            let f = g.square(nodes.features[1]);
            let f = g.sum(f);
            let t = g.add(l, s1)?;
            let t = g.add(t, s3)?;
            let t = g.add(t, f)?;
            Ok(g.scale(t, 1.0 / 256.0))
        },
        &mut p,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn grad_check_dme() {
    for mode in [Regime::Density, Regime::Dot] {
        let arch = small_arch(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        let dme = DensityEstimator::build(&arch, &mut p, &mut rng).unwrap();
        let img = rand_tensor(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
        let target = rand_tensor(&mut rng, &[2, 1, 16, 16], 0.0, 1.0);
        let tap_t = rand_tensor(&mut rng, &[2, 4, 8, 8], 0.0, 1.0);
        let tap_w = rand_tensor(&mut rng, &[2, 4], 0.1, 0.9);
        let report = GradCheck {
            samples_per_tensor: 8,
            ..GradCheck::default()
        }
        .run(
            |g, p| {
                let x = g.input(img.clone());
                let nodes = dme.forward(g, p, x)?;
                let l = g.weighted_sq_err(nodes.output, &target, &Tensor::ones(&[2, 1]))?;
                let f = g.weighted_sq_err(nodes.taps[1], &tap_t, &tap_w)?;
                let t = g.add(l, f)?;
                Ok(g.scale(t, 1.0 / 256.0))
            },
            &mut p,
        )
        .unwrap();
        assert!(report.pass, "{mode:?}: {report:?}");
    }
}
