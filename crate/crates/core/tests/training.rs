use osnn::butterfly::{ButterflyNetwork, PhaseConfiguration, Routing, Transform};
use osnn::data::Dataset;
use osnn::devices::*;
use osnn::layers::{build_paper_model, BlockedLinear, OsnnModel};
use osnn::numerics::{gradient_check, Graph, RealTensor};
use osnn::training::*;
use osnn::OsnnError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ten classes, each a bright 6x6 square at its own spot plus faint noise.
fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        let (oy, ox) = (3 + (c / 5) * 12, 2 + (c % 5) * 5);
        for y in 0..28 {
            for x in 0..28 {
                let on = (oy..oy + 6).contains(&y) && (ox..ox + 6).contains(&x);
                let v: f64 = if on { 0.8 } else { 0.0 };
                images.push((v + rng.random_range(0.0..0.2)).min(1.0));
            }
        }
        labels.push(c as u8);
    }
    Dataset::new(images, labels, 28, 28, "synthetic").unwrap()
}

fn small_model(seed: u64) -> OsnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_paper_model(4, Transform::Hadamard, &mut rng).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 0.1,
        ..Default::default()
    }
}

#[test]
fn straight_through_derivative_matches_clamp_in_interior() {
    // The STE stands in for d/dv clamp(v, 0, 1).
    let h = 1e-6;
    for v in [-0.5f64, 0.01, 0.2, 0.5, 0.77, 0.99, 1.5] {
        let fd = ((v + h).clamp(0.0, 1.0) - (v - h).clamp(0.0, 1.0)) / (2.0 * h);
        assert!((fake_quantize_grad(v) - fd).abs() < 1e-4, "v={}", v);
    }
}

#[test]
fn injected_noise_has_requested_spread() {
    let spec = NoiseSpec {
        input_sigma: 0.1,
        phase_drift_sigma: 0.0,
        detector_sigma: 0.1,
        include_bp_phases: false,
    };
    let x = RealTensor::filled(&[200, 100], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for site in [NoiseSite::Input, NoiseSite::Detector] {
        let y = inject_noise(&x, &spec, site, &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.095..=0.105).contains(&std), "{:?}: {}", site, std);
    }
    let y = inject_noise(&x, &spec, NoiseSite::Phase, &mut rng).unwrap();
    assert_eq!(y, x);
    let far = RealTensor::filled(&[1000], 0.0);
    let clamped = inject_noise(&far, &spec, NoiseSite::Input, &mut rng).unwrap();
    assert!(clamped.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!("optical".parse::<NoiseSite>(), Err(OsnnError::Unknown { .. })));
    assert_eq!("phase".parse::<NoiseSite>().unwrap(), NoiseSite::Phase);
}

#[test]
fn drift_moves_the_attenuator_angle() {
    for s in [-1.0, -0.4, 0.0, 0.3, 1.0] {
        assert!((drifted_sigma(s, 0.0) - s).abs() < 1e-12);
    }
    let theta = 2.0 * 0.6f64.acos();
    assert!((drifted_sigma(0.6, 0.1) - ((theta + 0.1) / 2.0).cos()).abs() < 1e-12);
    assert!((drifted_sigma(-0.6, 0.1) + ((theta + 0.1) / 2.0).cos()).abs() < 1e-12);
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let model = small_model(1);
    let data = blobs(20, 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = train(&model, &data, None, &cfg, &Backend::Ideal).unwrap();
    assert_eq!(out.model, model);
    assert!(out.metrics.is_empty());
}

#[test]
fn training_is_deterministic_and_learns() {
    let model = small_model(2);
    let data = blobs(200, 2);
    let test = blobs(50, 3);
    let cfg = TrainConfig {
        epochs: 3,
        ..quick_config()
    };
    let a = train(&model, &data, Some(&test), &cfg, &Backend::Ideal).unwrap();
    let b = train(&model, &data, Some(&test), &cfg, &Backend::Ideal).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.model, b.model);
    assert!(a.metrics[2].train_loss < a.metrics[0].train_loss);
    assert!(a.metrics[2].test_acc > 0.5, "{:?}", a.metrics);

    let threaded = TrainConfig { threads: 3, ..cfg.clone() };
    let c = train(&model, &data, Some(&test), &threaded, &Backend::Ideal).unwrap();
    let d = train(&model, &data, Some(&test), &threaded, &Backend::Ideal).unwrap();
    assert_eq!(metrics_csv(&c.metrics), metrics_csv(&d.metrics));
    for (x, y) in a.metrics.iter().zip(&c.metrics) {
        assert!((x.train_loss - y.train_loss).abs() < 1e-9);
    }
}

#[test]
fn noisy_training_is_deterministic() {
    let model = small_model(4);
    let data = blobs(60, 4);
    let cfg = TrainConfig {
        noise: NoiseSpec {
            input_sigma: 0.1,
            phase_drift_sigma: 0.2,
            detector_sigma: 0.01,
            include_bp_phases: false,
        },
        ..quick_config()
    };
    let a = train(&model, &data, None, &cfg, &Backend::Ideal).unwrap();
    let b = train(&model, &data, None, &cfg, &Backend::Ideal).unwrap();
    assert_eq!(a.model, b.model);
    let clean = train(&model, &data, None, &quick_config(), &Backend::Ideal).unwrap();
    assert_ne!(a.model, clean.model);
}

#[test]
fn bad_configs_are_rejected() {
    let model = small_model(5);
    let data = blobs(10, 5);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..quick_config()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..quick_config()
        },
        TrainConfig {
            momentum: 1.0,
            ..quick_config()
        },
    ] {
        assert!(matches!(
            train(&model, &data, None, &cfg, &Backend::Ideal),
            Err(OsnnError::InvalidParameter { .. })
        ));
    }
    let empty = data.select(&[], "empty");
    assert!(matches!(
        train(&model, &empty, None, &quick_config(), &Backend::Ideal),
        Err(OsnnError::Empty(_))
    ));
    let wrong = Dataset::new(vec![0.0; 2 * 100], vec![0, 1], 10, 10, "x").unwrap();
    assert!(train(&model, &wrong, None, &quick_config(), &Backend::Ideal).is_err());
}

#[test]
fn sigma_gradients_match_finite_differences() {
    let mut model = small_model(6);
    model.set_quant(None);
    let data = blobs(8, 6);
    let idx: Vec<usize> = (0..8).collect();
    let (_, grads) = loss_and_sigma_grad(&model, &data, &idx).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    for li in 0..3 {
        for _ in 0..6 {
            let len = grads[li].len();
            let j = rng.random_range(0..len);
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let layer = m.blocked_layers_mut().nth(li).unwrap();
                let mut s = layer.sigma().to_vec();
                s[j] += delta;
                layer.set_sigma(s).unwrap();
                loss_and_sigma_grad(&m, &data, &idx).unwrap().0
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = grads[li][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "layer {} entry {}: {} vs {}", li, j, a, fd);
        }
    }
}

fn hadamard_layer(m: usize, n: usize, seed: u64) -> BlockedLinear {
    let mut layer = BlockedLinear::with_transform(m, n, 4, Transform::Hadamard).unwrap();
    layer.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
    layer
}

#[test]
fn calibration_of_an_ideal_chip_is_exact() {
    let layer = hadamard_layer(8, 8, 1);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let table = calibrate_devices(&chip, 32).unwrap();
    assert!(table.worst_residual() < 1e-8);
    for d in 0..4 {
        for target in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let theta = table.command(d, target);
            assert!((chip.measure_attenuator(d, theta) - target).abs() < 1e-8);
        }
    }
}

#[test]
fn calibration_recovers_magnitudes_on_a_varied_chip() {
    let layer = hadamard_layer(8, 8, 2);
    let var = VariationModel {
        kappa_std: 0.0,
        phase_offset_std: 0.05,
        seed: 9,
        ..Default::default()
    };
    let chip = ChipInstance::fabricate(&layer, var, NoiseSpec::none()).unwrap();
    let table = calibrate_devices(&chip, 64).unwrap();
    let mut sq = 0.0;
    let mut n = 0.0;
    for d in 0..4 {
        for i in 0..=20 {
            let target = i as f64 / 20.0;
            let got = chip.measure_attenuator(d, table.command(d, target));
            sq += (got - target).powi(2);
            n += 1.0;
        }
    }
    assert!((sq / n).sqrt() < 0.01);
    assert!(calibrate_devices(&chip, 1).is_err());
}

#[test]
fn calibrated_controls_keep_the_sign_of_the_transmission() {
    let layer = hadamard_layer(8, 8, 4);
    let var = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        seed: 7,
        ..Default::default()
    };
    let chip = ChipInstance::fabricate(&layer, var, NoiseSpec::none()).unwrap();
    let table = calibrate_devices(&chip, 33).unwrap();
    for (d, hw) in chip.hardware().attenuators.iter().enumerate() {
        for i in 1..=20 {
            let target = i as f64 / 20.0;
            let nominal = hw.transmission(Control::nominal(target).theta, 0.0);
            let calibrated = hw.transmission(table.command(d, target), 0.0);
            assert!((calibrated * nominal.conj()).re > 0.0, "device {} target {}", d, target);
        }
    }
}

#[test]
fn calibrated_mapping_needs_tables() {
    let layer = hadamard_layer(8, 8, 3);
    let mut chip = ChipInstance::fabricate(&layer, VariationModel::default(), NoiseSpec::none()).unwrap();
    assert!(matches!(chip.program(&layer, Mapping::Calibrated), Err(OsnnError::Uncalibrated)));
    let table = calibrate_devices(&chip, 16).unwrap();
    chip.set_calibration(table).unwrap();
    chip.program(&layer, Mapping::Calibrated).unwrap();
}

fn hadamard_configs() -> (PhaseConfiguration, PhaseConfiguration) {
    let c = Transform::Hadamard.configure(4).unwrap();
    (c.clone(), c)
}

fn probe_chip(var: VariationModel, noise: NoiseSpec) -> ChipInstance {
    let layer = hadamard_layer(4, 4, 5);
    ChipInstance::fabricate(&layer, var, noise).unwrap()
}

#[test]
fn nominal_dpe_model_is_the_ideal_block() {
    let (b, p) = hadamard_configs();
    let model = DpeModel::nominal(&b, &p).unwrap();
    assert_eq!(model.parameter_count(), 33);
    let chip = probe_chip(VariationModel::ideal(), NoiseSpec::none());
    let samples = sample_measurements(&chip, 50, &MeasurementPlan::default(), 1).unwrap();
    for s in &samples {
        let y = model.predict(&s.controls, &s.x).unwrap();
        for (a, b) in y.iter().zip(&s.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let hw = model.hardware_transfer(&b, &p).unwrap();
    let ideal = BlockedLinear::with_transform(4, 4, 4, Transform::Hadamard).unwrap();
    assert!(hw.b.max_abs_diff(ideal.b_matrix()) < 1e-12);
    assert!(hw.p.max_abs_diff(ideal.p_matrix()) < 1e-12);
}

#[test]
fn dpe_model_from_hardware_predicts_the_chip() {
    let var = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        seed: 4,
        ..Default::default()
    };
    let chip = probe_chip(var, NoiseSpec::none());
    let (b, p) = hadamard_configs();
    let truth = DpeModel::from_hardware(&b, &p, chip.hardware()).unwrap();
    let samples = sample_measurements(&chip, 50, &MeasurementPlan::default(), 2).unwrap();
    for s in &samples {
        let y = truth.predict(&s.controls, &s.x).unwrap();
        for (a, b) in y.iter().zip(&s.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dpe_tape_loss_matches_plain_forward_and_gradients() {
    let var = VariationModel {
        kappa_std: 0.05,
        phase_offset_std: 0.2,
        seed: 5,
        ..Default::default()
    };
    let chip = probe_chip(var, NoiseSpec::none());
    let samples = sample_measurements(&chip, 12, &MeasurementPlan::default(), 3).unwrap();
    let (b, p) = hadamard_configs();
    let mut model = DpeModel::nominal(&b, &p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = model.parameters();
    for v in params.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let last = params.len() - 1;
    params[last] = params[last].abs();
    model.set_parameters(&params).unwrap();

    let mut plain = 0.0;
    for s in &samples {
        let y = model.predict(&s.controls, &s.x).unwrap();
        plain += y.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    plain /= (samples.len() * 4) as f64;
    let mut g = Graph::new();
    let leaf = g.leaf(RealTensor::vector(params.clone()).unwrap());
    let loss = model.loss_graph(&mut g, leaf, &samples).unwrap();
    assert!((g.value(loss).data()[0] - plain).abs() < 1e-12);

    let worst = gradient_check(&[RealTensor::vector(params).unwrap()], 1e-6, |g, v| {
        model.loss_graph(g, v[0], &samples)
    })
    .unwrap();
    assert!(worst < 1e-4, "{}", worst);
}

#[test]
fn dpe_fit_leaves_an_ideal_chip_at_nominal() {
    let chip = probe_chip(VariationModel::ideal(), NoiseSpec::none());
    let samples = sample_measurements(&chip, 500, &MeasurementPlan::default(), 4).unwrap();
    let (b, p) = hadamard_configs();
    let init = DpeModel::nominal(&b, &p).unwrap();
    let fit = fit_dpe(&samples, &init, &DpeBudget::default()).unwrap();
    assert!(fit.holdout_rmse < 1e-6, "{} {:?}", fit.holdout_rmse, &fit.trace[..5]);
    for (a, b) in fit.model.parameters().iter().zip(init.parameters()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn dpe_fit_reaches_the_noise_floor_on_a_varied_chip() {
    let var = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        seed: 6,
        ..Default::default()
    };
    let noise = NoiseSpec {
        detector_sigma: 0.01,
        ..NoiseSpec::none()
    };
    let chip = probe_chip(var, noise);
    let samples = sample_measurements(&chip, 1000, &MeasurementPlan::default(), 5).unwrap();
    let (b, p) = hadamard_configs();
    let truth = DpeModel::from_hardware(&b, &p, chip.hardware()).unwrap();
    let mut floor = 0.0;
    for s in &samples {
        let y = truth.predict(&s.controls, &s.x).unwrap();
        floor += y.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let floor = (floor / (samples.len() * 4) as f64).sqrt();
    let init = DpeModel::nominal(&b, &p).unwrap();
    let nominal_rmse = {
        let mut acc = 0.0;
        for s in &samples {
            let y = init.predict(&s.controls, &s.x).unwrap();
            acc += y.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        (acc / (samples.len() * 4) as f64).sqrt()
    };
    let fit = fit_dpe(&samples, &init, &DpeBudget::default()).unwrap();
    assert!(fit.holdout_rmse <= 10.0 * floor, "{} vs floor {}", fit.holdout_rmse, floor);
    assert!(fit.holdout_rmse < nominal_rmse);
    assert_eq!(fit.trace.len(), DpeBudget::default().epochs);
}

#[test]
fn dpe_fit_rejects_bad_sample_sets() {
    let (b, p) = hadamard_configs();
    let init = DpeModel::nominal(&b, &p).unwrap();
    assert!(matches!(
        fit_dpe(&[], &init, &DpeBudget::default()),
        Err(OsnnError::Empty(_))
    ));
    let chip = probe_chip(VariationModel::ideal(), NoiseSpec::none());
    let few = sample_measurements(&chip, 100, &MeasurementPlan::default(), 6).unwrap();
    assert!(matches!(
        fit_dpe(&few, &init, &DpeBudget::default()),
        Err(OsnnError::InvalidParameter { .. })
    ));
    let many = sample_measurements(&chip, 500, &MeasurementPlan::default(), 6).unwrap();
    let wild = DpeBudget {
        epochs: 200,
        learning_rate: 50.0,
        ..Default::default()
    };
    // A huge step makes the loss climb; either way it must not return garbage.
    match fit_dpe(&many, &init, &wild) {
        Err(OsnnError::Divergence { trace, .. }) => assert!(!trace.is_empty()),
        Ok(fit) => assert!(fit.holdout_rmse.is_finite()),
        Err(e) => panic!("{}", e),
    }
}

#[test]
fn dpe_backend_trains_against_fitted_matrices() {
    let var = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        seed: 7,
        ..Default::default()
    };
    let chip = probe_chip(var, NoiseSpec::none());
    let (b, p) = hadamard_configs();
    let truth = DpeModel::from_hardware(&b, &p, chip.hardware()).unwrap();
    let model = small_model(7);
    let data = blobs(20, 7);
    let out = train(&model, &data, None, &quick_config(), &Backend::Dpe(Box::new(truth.clone()))).unwrap();
    for layer in out.model.blocked_layers() {
        let hw = layer.hardware().unwrap();
        assert_eq!(hw, &truth.hardware_transfer(layer.b_config(), layer.p_config()).unwrap());
    }
}

#[test]
fn pruning_with_zero_penalty_keeps_everything() {
    let model = small_model(8);
    let data = blobs(40, 8);
    let cfg = TrainConfig {
        prune: PruneConfig {
            lambda: 0.0,
            tau: 0.0,
            penalty_epochs: 1,
            finetune_epochs: 1,
        },
        ..quick_config()
    };
    let out = prune_sigma_groups(&model, &data, None, &cfg).unwrap();
    assert_eq!(out.report.pruned_units, 0);
    assert_eq!(out.report.total_units, 456);
    assert_eq!(out.mask.kept_units(), 456);
    assert_eq!(out.metrics.len(), 2);
    let bad = TrainConfig {
        prune: PruneConfig {
            lambda: -1.0,
            ..cfg.prune
        },
        ..cfg.clone()
    };
    assert!(prune_sigma_groups(&model, &data, None, &bad).is_err());
    let bad = TrainConfig {
        prune: PruneConfig { tau: -0.1, ..cfg.prune },
        ..cfg
    };
    assert!(prune_sigma_groups(&model, &data, None, &bad).is_err());
}

#[test]
fn pruning_removes_small_groups_and_keeps_them_zero() {
    let model = small_model(9);
    let data = blobs(100, 9);
    let cfg = TrainConfig {
        prune: PruneConfig {
            lambda: 2.0,
            tau: 0.05,
            penalty_epochs: 2,
            finetune_epochs: 1,
        },
        ..quick_config()
    };
    let out = prune_sigma_groups(&model, &data, None, &cfg).unwrap();
    assert!(out.report.pruned_units > 0);
    assert_eq!(out.report.pruned_per_layer.iter().sum::<usize>(), out.report.pruned_units);
    for (layer, mask) in out.model.blocked_layers().zip(&out.mask.layers) {
        let k = layer.k();
        for (u, keep) in mask.kept.iter().enumerate() {
            if !keep {
                assert!(layer.sigma()[u * k..(u + 1) * k].iter().all(|s| *s == 0.0));
            }
        }
    }
    // Masked model equals the same Σ with the pruned entries zeroed by hand.
    let mut manual = out.model.clone();
    for layer in manual.blocked_layers_mut() {
        layer.clear_mask();
    }
    let img = data.image(0);
    assert_eq!(out.model.forward(img).unwrap(), manual.forward(img).unwrap());
}

#[test]
fn ideal_chip_deployment_matches_model_accuracy() {
    let model = train(&small_model(10), &blobs(100, 10), None, &quick_config(), &Backend::Ideal)
        .unwrap()
        .model;
    let test = blobs(40, 11);
    let layer = model.blocked_layers().next().unwrap().clone();
    let mut chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let direct = evaluate(&model, &test, &NoiseSpec::none(), 0, 1).unwrap();
    let on_chip = evaluate_on_chip(&model, &chip, &test, Mapping::Nominal, DetectionMode::Coherent, 0, 1).unwrap();
    assert_eq!(direct.confusion, on_chip.confusion);
    assert!((direct.loss - on_chip.loss).abs() < 1e-9);
    assert!(matches!(
        evaluate_on_chip(&model, &chip, &test, Mapping::Calibrated, DetectionMode::Coherent, 0, 1),
        Err(OsnnError::Uncalibrated)
    ));
    chip.set_calibration(calibrate_devices(&chip, 16).unwrap()).unwrap();
    let calibrated = evaluate_on_chip(&model, &chip, &test, Mapping::Calibrated, DetectionMode::Coherent, 0, 2).unwrap();
    assert_eq!(direct.confusion, calibrated.confusion);
    let total: usize = direct.confusion.iter().flatten().sum();
    assert_eq!(total, test.len());
}

#[test]
fn wrong_sized_chip_is_rejected() {
    let model = small_model(12);
    let net = ButterflyNetwork::new(8, Routing::Natural).unwrap();
    let cfg = PhaseConfiguration::zeros(&net);
    let layer = BlockedLinear::new(8, 8, 8, cfg.clone(), cfg).unwrap();
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    assert!(matches!(
        evaluate_on_chip(&model, &chip, &blobs(5, 12), Mapping::Nominal, DetectionMode::Coherent, 0, 1),
        Err(OsnnError::ConfigMismatch(_))
    ));
}
