use super::*;
use crate::datagen::{Dataset, SceneConfig};
use crate::metrics::EvalReport;
use crate::models::SupervisionNet;
use crate::supervision::ChannelWeighting;
use crate::tensorgrad::{Graph, ParamSet, Tensor};

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig {
        epochs_sn: 2,
        epochs_dme: 2,
        batch: 4,
        seed: 5,
        ..RunConfig::default()
    };
    cfg.arch.base_channels = 2;
    cfg
}

fn small_data(n: usize) -> Dataset {
    let scene = SceneConfig {
        size: 32,
        count_range: (3, 12),
        ..SceneConfig::dense(11)
    };
    Dataset::generate(&scene, n, 4).unwrap()
}

fn kernel() -> GtKernel {
    GtKernel::Fixed(5.0)
}

#[test]
fn config_validation() {
    assert!(RunConfig::default().validate().is_ok());
    let mut c = RunConfig::default();
    c.nodes = 4;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = RunConfig::default();
    c.arch.head_mode = Regime::Dot;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.set_regime(Regime::Dot);
    assert!(c.validate().is_ok());
    let c = RunConfig {
        batch: 0,
        ..RunConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn config_json_roundtrip() {
    let c = small_cfg();
    let j = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&j).unwrap(), c);
    // missing fields fall back to defaults
    let partial: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.lr, 1e-3);
}

#[test]
fn sn_training_is_deterministic_and_learns() {
    let data = small_data(8);
    let mut cfg = small_cfg();
    cfg.epochs_sn = 6;
    let a = train_sn(&cfg, &data.train, kernel()).unwrap();
    let b = train_sn(&cfg, &data.train, kernel()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    assert_eq!(a.log.rows.len(), 6 * 2);
    let means = a.log.epoch_means();
    assert!(means.last().unwrap() < &means[0], "{means:?}");
}

#[test]
fn sn_reconstruction_improves_over_untrained() {
    let data = small_data(8);
    let mut cfg = small_cfg();
    cfg.epochs_sn = 6;
    cfg.augment = false;
    let prepared: Vec<Prepared> = data
        .train
        .iter()
        .map(|s| Prepared::new(s, kernel()))
        .collect::<Result<_>>()
        .unwrap();
    let recon_mse = |net: &SupervisionNet, p: &ParamSet| -> f64 {
        prepared
            .iter()
            .map(|s| {
                let gt = s.density.clone().reshape(&[1, 1, 32, 32]).unwrap();
                let img = s.image.clone().reshape(&[1, 1, 32, 32]).unwrap();
                let (r, _) = net.infer(p, &gt, &img).unwrap();
                r.data()
                    .iter()
                    .zip(gt.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    let mut p0 = ParamSet::new();
    let n0 = SupervisionNet::build(&cfg.arch, &mut p0, &mut fit_rng(cfg.seed)).unwrap();
    let trained = train_sn(&cfg, &data.train, kernel()).unwrap();
    // the untrained net is the trained run's starting point
    assert_eq!(p0.fingerprint(), {
        let mut p = ParamSet::new();
        SupervisionNet::build(&cfg.arch, &mut p, &mut fit_rng(cfg.seed)).unwrap();
        p.fingerprint()
    });
    assert!(recon_mse(&trained.net, &trained.params) < recon_mse(&n0, &p0));
}

fn fit_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    super::fit::rng_for(seed, 1)
}

#[test]
fn dme_baseline_has_zero_feature_loss() {
    let data = small_data(8);
    let mut cfg = small_cfg();
    let sn = train_sn(&cfg, &data.train, kernel()).unwrap();
    cfg.nodes = 0;
    let d = train_dme(&cfg, &data.train, kernel(), &sn.net, &sn.params).unwrap();
    assert!(d.log.rows.iter().all(|r| r.feat == 0.0 && r.total == r.out));
}

#[test]
fn dme_supervision_is_active_and_sn_stays_frozen() {
    let data = small_data(8);
    let cfg = small_cfg();
    let sn = train_sn(&cfg, &data.train, kernel()).unwrap();
    let before = sn.params.fingerprint();
    for weighting in [ChannelWeighting::Attention, ChannelWeighting::Equal] {
        let c = RunConfig {
            weighting,
            ..cfg.clone()
        };
        let d = train_dme(&c, &data.train, kernel(), &sn.net, &sn.params).unwrap();
        assert!(d.log.rows[0].feat > 0.0);
        let r = d.log.rows[0];
        assert!((r.total - (r.out + 0.05 * r.feat)).abs() <= 1e-12 * r.total.abs());
    }
    assert_eq!(sn.params.fingerprint(), before);
    assert!(!sn.params.has_any_grad());
}

#[test]
fn dme_dot_regime_trains() {
    let data = small_data(8);
    let mut cfg = small_cfg();
    cfg.set_regime(Regime::Dot);
    let sn = train_sn(&cfg, &data.train, kernel()).unwrap();
    let d = train_dme(&cfg, &data.train, kernel(), &sn.net, &sn.params).unwrap();
    assert!(d.log.rows.iter().all(|r| r.total.is_finite()));
    let test: Vec<Prepared> = data
        .test
        .iter()
        .map(|s| Prepared::new(s, kernel()))
        .collect::<Result<_>>()
        .unwrap();
    let rep = evaluate_model(&d.net, &d.params, &test).unwrap();
    assert!(rep.psnr.is_none() && rep.ssim.is_none());
    assert_eq!(
        d.log.to_csv(Regime::Dot).lines().next().unwrap(),
        "step,l_dot,l_f,total"
    );
}

#[test]
fn incompatible_sn_is_config_error() {
    let data = small_data(4);
    let cfg = small_cfg();
    let sn = train_sn(
        &RunConfig {
            epochs_sn: 1,
            ..cfg.clone()
        },
        &data.train,
        kernel(),
    )
    .unwrap();
    let mut other = cfg.clone();
    other.arch.base_channels = 4;
    assert!(matches!(
        train_dme(&other, &data.train, kernel(), &sn.net, &sn.params),
        Err(Error::Config(_))
    ));
}

#[test]
fn perfect_and_zero_predictors() {
    let data = small_data(4);
    let test: Vec<Prepared> = data
        .test
        .iter()
        .map(|s| Prepared::new(s, kernel()))
        .collect::<Result<_>>()
        .unwrap();
    let perfect: Vec<Tensor> = test.iter().map(|p| p.density.clone()).collect();
    let r = evaluate_predictions(&perfect, &test, Regime::Density).unwrap();
    assert!(r.mae < 1e-9);
    assert_eq!(r.ssim, Some(1.0));
    assert_eq!(r.psnr, Some(f64::INFINITY));
    let zeros: Vec<Tensor> = test.iter().map(|p| Tensor::zeros(p.density.shape())).collect();
    let r = evaluate_predictions(&zeros, &test, Regime::Density).unwrap();
    let mean = test.iter().map(|p| p.count).sum::<f64>() / test.len() as f64;
    assert!((r.mae - mean).abs() < 1e-12);
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    assert!(matches!(
        evaluate_predictions(&[], &[], Regime::Density),
        Err(Error::Usage(_))
    ));
}

#[test]
fn non_finite_loss_aborts_with_batch() {
    let data = small_data(4);
    let mut cfg = small_cfg();
    cfg.lr = 1e300;
    cfg.epochs_sn = 3;
    match train_sn(&cfg, &data.train, kernel()) {
        Err(Error::Numeric(m)) => assert!(m.contains("batch"), "{m}"),
        other => panic!("expected numeric failure, got {:?}", other.map(|t| t.log.rows.len())),
    }
}

#[test]
fn run_artifacts_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(8);
    let ds = dir.path().join("data");
    data.save(&ds).unwrap();
    let mut cfg = small_cfg();
    cfg.epochs_sn = 1;
    cfg.epochs_dme = 1;
    cfg.dataset = ds.clone();
    cfg.out_dir = dir.path().join("sn");
    let m = run_sn(&cfg).unwrap();
    let ckpt = m.sn_checkpoint.clone().unwrap();
    assert!(ckpt.exists());
    assert_eq!(m.epoch_losses.len(), 1);
    let csv = std::fs::read_to_string(cfg.out_dir.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let (_, p) = load_sn(&ckpt).unwrap();
    assert_eq!(Some(p.fingerprint()), m.sn_fingerprint);

    cfg.out_dir = dir.path().join("dme");
    let m2 = run_dme(&cfg, &ckpt).unwrap();
    let rep = EvalReport::from_json(&std::fs::read_to_string(cfg.out_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(Some(rep), m2.eval);
    let (net, p) = load_dme(&cfg.out_dir.join("dme.ckpt")).unwrap();
    let test: Vec<Prepared> = data
        .test
        .iter()
        .map(|s| Prepared::new(s, kernel()))
        .collect::<Result<_>>()
        .unwrap();
    // reloading the on-disk dataset quantizes images, so compare against the reloaded split
    let reloaded = crate::datagen::Dataset::load(&ds).unwrap();
    let test_disk: Vec<Prepared> = reloaded
        .test
        .iter()
        .map(|s| Prepared::new(s, kernel()))
        .collect::<Result<_>>()
        .unwrap();
    assert_eq!(Some(evaluate_model(&net, &p, &test_disk).unwrap()), m2.eval);
    assert_eq!(test.len(), test_disk.len());
    assert_eq!(RunManifest::load(&cfg.out_dir).unwrap(), m2);

    // wrong network kind and missing checkpoints
    assert!(matches!(load_dme(&ckpt), Err(Error::Config(_))));
    assert!(matches!(
        load_sn(&dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn graph_sanity_for_feature_taps() {
    // taps of the estimator line up with the SN bundle for the small config
    let cfg = small_cfg();
    let mut ps = ParamSet::new();
    let sn = SupervisionNet::build(&cfg.arch, &mut ps, &mut fit_rng(1)).unwrap();
    let mut pd = ParamSet::new();
    let dme = crate::models::DensityEstimator::build(&cfg.arch, &mut pd, &mut fit_rng(2)).unwrap();
    let z = Tensor::zeros(&[1, 1, 32, 32]);
    let (_, bundle) = sn.infer(&ps, &z, &z).unwrap();
    let mut g = Graph::new();
    let x = g.input(z);
    let nodes = dme.forward(&mut g, &pd, x).unwrap();
    for (t, f) in nodes.taps.iter().zip(&bundle.features) {
        assert_eq!(g.shape(*t), f.shape());
    }
}

#[test]
fn grad_suite_passes() {
    for t in ["se", "sn", "dme", "objective", "objective-dot"] {
        let target: GradTarget = t.parse().unwrap();
        let r = grad_check_model(target, 0, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{t}: {r:?}");
    }
    assert!(matches!("mlp".parse::<GradTarget>(), Err(Error::Usage(_))));
}
