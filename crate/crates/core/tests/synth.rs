use stripdet_core::nn::{gradcheck, Module, NormMode};
use stripdet_core::strip::ModuleDesign;
use stripdet_core::synth::*;
use stripdet_core::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        steps: 12,
        batch_size: 4,
        train_size: 16,
        test_size: 12,
        seeds: vec![3],
        scene: SceneConfig {
            image_size: 16,
            scale_range: (0.3, 0.6),
            ..SceneConfig::default()
        },
        toy: ToyConfig {
            channels: 4,
            ..ToyConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn strip_norm_state(r: &ExperimentReport) -> ExperimentReport {
    let mut r = r.clone();
    for a in &mut r.arms {
        a.wall_clock_s = 0.0;
    }
    r
}

#[test]
fn matched_square_side_rounds_up() {
    assert_eq!(matched_square_side(11), 7);
    assert_eq!(matched_square_side(19), 9);
    assert_eq!(matched_square_side(5), 7);
    assert_eq!(matched_square_side(0), 5);
}

#[test]
fn toy_net_gradcheck() {
    let cfg = tiny();
    for design in [ModuleDesign::Sequential, ModuleDesign::SingleSquare { side: 5 }] {
        let mut net = ToyNet::new(&cfg.toy, design, 7).unwrap();
        let data = generate_samples(&cfg, 1, 0, 2).unwrap();
        let x = net.prepare(&[&data[0].image, &data[1].image]).unwrap();
        let r = gradcheck(&mut net, &x, 1e-3, 11, |m, t, x| m.forward(t, x, NormMode::BatchStats)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{design:?}: {:?}", r.worst());
    }
}

#[test]
fn prepared_input_folds_patches() {
    let cfg = tiny();
    let net = ToyNet::new(&cfg.toy, ModuleDesign::Sequential, 0).unwrap();
    let data = generate_samples(&cfg, 0, 0, 1).unwrap();
    let x = net.prepare(&[&data[0].image]).unwrap();
    assert_eq!(x.dims(), [1, 48, 4, 4]);
    // Pixel (y, x) = (6, 13) sits in cell (1, 3) at patch offset (2, 1).
    assert_eq!(x.get(0, 2 * 4 + 1, 1, 3), data[0].image.get(0, 0, 6, 13));
    assert_eq!(x.get(0, 16 + 2 * 4 + 1, 1, 3), (6.5 / 16.0) * 2.0 - 1.0);
    assert_eq!(x.get(0, 32 + 2 * 4 + 1, 1, 3), (13.5 / 16.0) * 2.0 - 1.0);
}

#[test]
fn pointwise_stem_equals_strided_conv() {
    use stripdet_core::nn::{conv2d_forward, ConvGeom, ConvParams};
    let cfg = tiny();
    let net = ToyNet::new(&cfg.toy, ModuleDesign::Sequential, 0).unwrap();
    let data = generate_samples(&cfg, 0, 0, 2).unwrap();
    let folded = net.prepare(&[&data[0].image, &data[1].image]).unwrap();
    let via_pointwise = conv2d_forward(&folded, &net.stem).unwrap();
    let coords = ToyNet { coord_channels: true, stem_stride: 1, ..net.clone() };
    let plain = coords.prepare(&[&data[0].image, &data[1].image]).unwrap();
    let kernel = net.stem.kernel.reshape([cfg.toy.channels, 3, 4, 4]).unwrap();
    let strided = ConvParams::new(kernel, net.stem.bias.clone(), ConvGeom::strided(4, 0, 1)).unwrap();
    let direct = conv2d_forward(&plain, &strided).unwrap();
    assert!(direct.max_abs_diff(&via_pointwise).unwrap() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss() {
    let cfg = ExperimentConfig {
        lr: 0.0,
        batch_size: 8,
        train_size: 8,
        steps: 5,
        ..tiny()
    };
    let data = generate_samples(&cfg, 0, 0, 8).unwrap();
    let mut net = ToyNet::new(&cfg.toy, ModuleDesign::Sequential, 2).unwrap();
    let before = net.state_dict();
    let out = train_toy_regressor(&cfg, &mut net, &data, 0).unwrap();
    let after = net.state_dict();
    for (name, t) in &before {
        if !name.contains("running") {
            assert_eq!(t, &after[name], "{name}");
        }
    }
    assert_eq!(out.epoch_losses.len(), 5);
    for l in &out.epoch_losses {
        assert!((l - out.initial_loss).abs() < 1e-12);
    }
}

#[test]
fn regression_loss_wraps_angle() {
    let t = [[0.0, 0.0, 0.0, 0.0, 1.5]];
    let p = stripdet_core::Tensor::from_vec([1, 5, 1, 1], vec![0.0, 0.0, 0.0, 0.0, -1.5]).unwrap();
    let (l, g) = regression_loss(&p, &t).unwrap();
    // The residual -3 wraps to pi - 3.
    let r = std::f64::consts::PI - 3.0;
    assert!((l - (r - 0.5 / 9.0)).abs() < 1e-12);
    assert_eq!(g.data()[4], 1.0);
}

#[test]
fn training_reduces_loss() {
    let cfg = ExperimentConfig {
        steps: 60,
        train_size: 32,
        ..tiny()
    };
    let data = generate_samples(&cfg, 0, 0, 32).unwrap();
    let mut net = ToyNet::new(&cfg.toy, ModuleDesign::Sequential, 0).unwrap();
    let out = train_toy_regressor(&cfg, &mut net, &data, 0).unwrap();
    assert!(out.final_loss.is_finite());
    assert!(out.epoch_losses.last().unwrap() < &out.initial_loss, "{out:?}");
}

#[test]
fn divergence_reports_step() {
    let cfg = ExperimentConfig { lr: 1e12, ..tiny() };
    let data = generate_samples(&cfg, 0, 0, 16).unwrap();
    let mut net = ToyNet::new(&cfg.toy, ModuleDesign::Sequential, 0).unwrap();
    match train_toy_regressor(&cfg, &mut net, &data, 0) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1 && step < cfg.steps),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn arms_have_equal_parameter_budgets() {
    let cfg = ExperimentConfig::default();
    let a = ToyNet::new(&cfg.toy, cfg.design(Arm::Strip), 0).unwrap().param_count();
    let b = ToyNet::new(&cfg.toy, cfg.design(Arm::SquareMatched), 0).unwrap().param_count();
    assert!(a.abs_diff(b) as f64 <= 0.05 * a.max(b) as f64, "{a} vs {b}");
}

#[test]
fn parity_violation_is_rejected() {
    let mut cfg = tiny();
    cfg.toy.strip_len = 31;
    cfg.scene.image_size = 64;
    cfg.toy.channels = 16;
    assert!(matches!(compare_square_vs_strip(&cfg), Err(Error::Config(_))));
}

#[test]
fn report_is_deterministic() {
    let a = compare_square_vs_strip(&tiny()).unwrap();
    let b = compare_square_vs_strip(&tiny()).unwrap();
    assert_eq!(strip_norm_state(&a), strip_norm_state(&b));
    assert_eq!(a.arms.len(), 2);
    assert_eq!(a.iou_deltas.len(), 3);
    assert!(a.param_gap <= 0.05);
}

#[test]
fn control_arms_match_exactly() {
    let r = compare_square_vs_strip(&tiny().control()).unwrap();
    assert_eq!(r.arms[0].design, r.arms[1].design);
    for d in &r.iou_deltas {
        for v in d.per_seed.iter().flatten() {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn report_serializes() {
    let r = compare_square_vs_strip(&tiny()).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: ExperimentReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.seeds, r.seeds);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let table = r.to_table();
    assert!(table.contains("[5, inf)") && table.contains("square-matched"));
}

#[test]
fn config_json_defaults() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"steps": 10, "control": true}"#).unwrap();
    assert_eq!(cfg.steps, 10);
    assert!(cfg.control);
    assert_eq!(cfg.toy.strip_len, 11);
    assert_eq!(cfg.bins.last(), Some(&f64::INFINITY));
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let s = LrSchedule::Cosine;
    assert_eq!(s.rate(0.01, 0, 100), 0.01);
    assert!((s.rate(0.01, 50, 100) - 0.005).abs() < 1e-15);
    assert!(s.rate(0.01, 100, 100).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.rate(0.01, 70, 100), 0.01);
}
