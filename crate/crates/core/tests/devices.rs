use std::f64::consts::PI;

use osnn::butterfly::{ButterflyNetwork, PhaseConfiguration, Routing, Transform};
use osnn::devices::*;
use osnn::layers::BlockedLinear;
use osnn::numerics::{Complex64, ComplexMatrix, RealTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_layer(m: usize, n: usize, k: usize, rng: &mut impl Rng) -> BlockedLinear {
    let net = ButterflyNetwork::new(k, Routing::Natural).unwrap();
    let mut cfg = || {
        let ph = (0..net.phase_shifter_count()).map(|_| rng.random_range(0.0..6.3)).collect();
        PhaseConfiguration::new(&net, ph).unwrap()
    };
    let (b, p) = (cfg(), cfg());
    let mut layer = BlockedLinear::new(m, n, k, b, p).unwrap();
    layer.init_uniform(rng);
    layer
}

#[test]
fn lossless_devices_are_unitary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let devices = [
            Device::Coupler(Coupler::new(rng.random_range(0.0..=1.0)).unwrap()),
            Device::PhaseShifter(PhaseShifter::new(rng.random_range(-10.0..10.0))),
            Device::Crossing(Crossing::new(0.0, rng.random_range(-60.0..-30.0)).unwrap()),
            Device::MziAttenuator(MziAttenuator::new(rng.random_range(0.0..=PI), rng.random_bool(0.5)).unwrap()),
        ];
        for d in devices {
            let u = device_transfer(&d).unwrap();
            assert!(u.unitarity_error() < 1e-12, "{:?}", d);
        }
    }
}

#[test]
fn coupler_endpoints() {
    let id = device_transfer(&Device::Coupler(Coupler::new(0.0).unwrap())).unwrap();
    assert!(id.max_abs_diff(&ComplexMatrix::identity(2)) < 1e-15);
    let half = device_transfer(&Device::Coupler(Coupler::fifty_fifty())).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let want = ComplexMatrix::new(
        2,
        2,
        vec![Complex64::new(s, 0.0), Complex64::new(0.0, s), Complex64::new(0.0, s), Complex64::new(s, 0.0)],
    )
    .unwrap();
    assert!(half.max_abs_diff(&want) < 1e-12);
    assert!(Coupler::new(1.2).is_err());
    assert!(device_transfer(&Device::Coupler(Coupler { kappa: -0.1 })).is_err());
}

#[test]
fn phase_shifter_and_crossing() {
    let p = PhaseShifter::new(3.0 * PI);
    assert!((p.phi() - PI).abs() < 1e-12);
    let u = device_transfer(&Device::PhaseShifter(p)).unwrap();
    assert_eq!((u.rows(), u.cols()), (1, 1));
    assert!((u.get(0, 0).norm() - 1.0).abs() < 1e-15);
    let ideal = device_transfer(&Device::Crossing(Crossing::default())).unwrap();
    let swap = ComplexMatrix::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(ideal.max_abs_diff(&swap) < 1e-15);
    let lossy = device_transfer(&Device::Crossing(Crossing::new(0.5, -35.0).unwrap())).unwrap();
    for c in lossy.column_norms() {
        assert!(c <= 1.0);
    }
    assert!(Crossing::new(0.0, -10.0).is_err());
}

#[test]
fn attenuator_curve_is_monotone_cosine() {
    let closed = MziAttenuator::new(PI, false).unwrap();
    let open = MziAttenuator::new(0.0, true).unwrap();
    assert!(closed.transmission().norm() < 1e-15);
    assert!((open.transmission() - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    let mut last = 1.0 + 1e-12;
    for i in 0..=100 {
        let a = MziAttenuator::new(PI * i as f64 / 100.0, false).unwrap();
        let t = a.transmission().norm();
        assert!(t <= last);
        last = t;
        let u = device_transfer(&Device::MziAttenuator(a)).unwrap();
        assert!((u.get(1, 0) - a.transmission()).norm() < 1e-15);
    }
    assert!(MziAttenuator::new(4.0, false).is_err());
    let a = MziAttenuator::for_amplitude(-0.3).unwrap();
    assert!((a.transmission() - Complex64::new(-0.3, 0.0)).norm() < 1e-12);
    // The ideal hardware model agrees with the device model.
    let hw = AttenuatorHardware::ideal();
    assert!((hw.transmission(a.theta(), a.sign_phase()) - a.transmission()).norm() < 1e-12);
}

#[test]
fn ideal_chip_equals_blocked_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let k = [2, 4, 8][rng.random_range(0..3)];
        let (m, n) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let layer = random_layer(m, n, k, &mut rng);
        let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = chip
            .simulate(&RealTensor::vector(x.clone()).unwrap(), DetectionMode::Coherent, &mut rng)
            .unwrap();
        let want = layer.forward_blocked(&RealTensor::vector(x).unwrap()).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn zero_input_with_ideal_modulators_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = random_layer(8, 8, 4, &mut rng);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let y = chip
        .simulate(&RealTensor::vector(vec![0.0; 8]).unwrap(), DetectionMode::Coherent, &mut rng)
        .unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn finite_extinction_ratio_leaks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = random_layer(4, 4, 4, &mut rng);
    let variation = VariationModel {
        er_db: 20.0,
        ..VariationModel::ideal()
    };
    let chip = ChipInstance::fabricate(&layer, variation, NoiseSpec::none()).unwrap();
    let y = chip
        .simulate(&RealTensor::vector(vec![0.0; 4]).unwrap(), DetectionMode::Coherent, &mut rng)
        .unwrap();
    let want = layer.forward_blocked(&RealTensor::vector(vec![0.01; 4]).unwrap()).unwrap();
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn multi_wavelength_extracts_effective_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = random_layer(6, 7, 4, &mut rng);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let (b, p) = (layer.b_matrix(), layer.p_matrix());
    let sigma = layer.effective_sigma();
    let nb = layer.padding().n_blocks;
    for j in 0..7 {
        let mut x = vec![0.0; 7];
        x[j] = 1.0;
        let y = chip
            .simulate(&RealTensor::vector(x).unwrap(), DetectionMode::MultiWavelength, &mut rng)
            .unwrap();
        for r in 0..6 {
            let unit = (r / 4) * nb + j / 4;
            let mut acc = Complex64::new(0.0, 0.0);
            for d in 0..4 {
                acc += b.get(r % 4, d) * sigma[unit * 4 + d] * p.get(d, j % 4);
            }
            assert!((y.data()[r] - acc.norm()).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_wavelength_matrix_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let layer = random_layer(8, 8, 4, &mut rng);
        let variation = VariationModel {
            kappa_std: 0.05,
            phase_offset_std: 0.1,
            seed: rng.random(),
            ..VariationModel::default()
        };
        let chip = ChipInstance::fabricate(&layer, variation, NoiseSpec::none()).unwrap();
        for j in 0..8 {
            let mut x = vec![0.0; 8];
            x[j] = 1.0;
            let y = chip
                .simulate(&RealTensor::vector(x).unwrap(), DetectionMode::MultiWavelength, &mut rng)
                .unwrap();
            assert!(y.data().iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn static_variation_is_frozen_and_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layer = random_layer(8, 8, 4, &mut rng);
    let v = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        seed: 11,
        ..VariationModel::default()
    };
    let a = ChipInstance::fabricate(&layer, v, NoiseSpec::none()).unwrap();
    let b = ChipInstance::fabricate(&layer, v, NoiseSpec::none()).unwrap();
    assert_eq!(a.hardware(), b.hardware());
    let other = ChipInstance::fabricate(&layer, VariationModel { seed: 12, ..v }, NoiseSpec::none()).unwrap();
    assert_ne!(a.hardware(), other.hardware());
    let x = RealTensor::vector(vec![0.5; 8]).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(0);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let y1 = a.simulate(&x, DetectionMode::Coherent, &mut r1).unwrap();
    let y2 = a.simulate(&x, DetectionMode::Coherent, &mut r2).unwrap();
    assert_eq!(y1, y2);
    let ideal = layer.forward_blocked(&x).unwrap();
    assert!(y1.max_abs_diff(&ideal) > 1e-4);
}

#[test]
fn dynamic_noise_is_redrawn_each_call() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer = random_layer(4, 4, 4, &mut rng);
    let noise = NoiseSpec {
        phase_drift_sigma: 0.1,
        ..NoiseSpec::none()
    };
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), noise).unwrap();
    let x = RealTensor::vector(vec![0.5; 4]).unwrap();
    let a = chip.simulate(&x, DetectionMode::Coherent, &mut rng).unwrap();
    let b = chip.simulate(&x, DetectionMode::Coherent, &mut rng).unwrap();
    assert_ne!(a, b);
}

#[test]
fn input_width_is_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = random_layer(5, 6, 4, &mut rng);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let padded = chip
        .simulate(&RealTensor::vector(vec![0.3; 8]).unwrap(), DetectionMode::Coherent, &mut rng)
        .unwrap();
    assert_eq!(padded.len(), 5);
    assert!(chip
        .simulate(&RealTensor::vector(vec![0.3; 7]).unwrap(), DetectionMode::Coherent, &mut rng)
        .is_err());
    let batch = chip
        .simulate(&RealTensor::matrix(6, 3, vec![0.1; 18]).unwrap(), DetectionMode::Coherent, &mut rng)
        .unwrap();
    assert_eq!(batch.shape(), &[5, 3]);
}

/// Chip response rebuilt from its frozen hardware parameters.
fn block_oracle(chip: &ChipInstance, controls: &[Control], x: &[f64]) -> Vec<f64> {
    let layer = chip.layer();
    let hw = chip.hardware();
    let b = layer.b_config().network().transfer_matrix_with(layer.b_config(), &hw.b).unwrap();
    let p = layer.p_config().network().transfer_matrix_with(layer.p_config(), &hw.p).unwrap();
    let t: Vec<Complex64> = controls
        .iter()
        .zip(&hw.attenuators)
        .map(|(c, a)| a.transmission(c.theta, c.sign_phase()))
        .collect();
    let w = b
        .matmul(&ComplexMatrix::diagonal(&t))
        .unwrap()
        .matmul(&p)
        .unwrap();
    let xc: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    w.matvec(&xc).unwrap().iter().map(|z| z.re).collect()
}

#[test]
fn measurements_are_deterministic_and_match_chip_transfer() {
    let layer = BlockedLinear::with_transform(4, 4, 4, Transform::Hadamard).unwrap();
    let v = VariationModel {
        kappa_std: 0.02,
        phase_offset_std: 0.05,
        er_db: f64::INFINITY,
        seed: 3,
    };
    let chip = ChipInstance::fabricate(&layer, v, NoiseSpec::none()).unwrap();
    let plan = MeasurementPlan::default();
    let a = sample_measurements(&chip, 50, &plan, 7).unwrap();
    let b = sample_measurements(&chip, 50, &plan, 7).unwrap();
    assert_eq!(a, b);
    for m in &a {
        let want = block_oracle(&chip, &m.controls, &m.x);
        for (y, w) in m.y.iter().zip(&want) {
            assert!((y - w).abs() < 1e-12);
        }
    }
    assert!(sample_measurements(&chip, 0, &plan, 7).is_err());
}

#[test]
fn measured_input_noise_has_the_injected_spread() {
    // B = P = H and Σ = 1 make the block the identity, so output residuals
    // are the input noise itself.
    let layer = BlockedLinear::with_transform(4, 4, 4, Transform::Hadamard).unwrap();
    let noise = NoiseSpec {
        input_sigma: 0.05,
        ..NoiseSpec::none()
    };
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), noise).unwrap();
    let open = Control {
        theta: 0.0,
        negative: false,
    };
    let plan = MeasurementPlan {
        inputs: InputDistribution::Uniform { lo: 0.3, hi: 0.7 },
        controls: ControlPlan::Fixed(vec![open; 4]),
        mode: DetectionMode::Coherent,
    };
    let samples = sample_measurements(&chip, 1000, &plan, 1).unwrap();
    let res: Vec<f64> = samples
        .iter()
        .flat_map(|m| m.y.iter().zip(&m.x).map(|(y, x)| y - x).collect::<Vec<_>>())
        .collect();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64).sqrt();
    assert!((0.04..=0.06).contains(&std), "{}", std);
}

#[test]
fn chip_json_round_trip_keeps_infinite_er() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layer = random_layer(6, 6, 2, &mut rng);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let text = chip.to_json().unwrap();
    assert!(text.contains("\"er_db\": null"));
    let back = ChipInstance::from_json(&text).unwrap();
    assert_eq!(back, chip);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chip.json");
    let varied = ChipInstance::fabricate(
        &layer,
        VariationModel {
            kappa_std: 0.03,
            ..VariationModel::default()
        },
        NoiseSpec::none(),
    )
    .unwrap();
    varied.save(&path).unwrap();
    assert_eq!(ChipInstance::load(&path).unwrap(), varied);
}

#[test]
fn pruned_units_are_absent_on_chip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut layer = random_layer(8, 8, 4, &mut rng);
    layer.set_mask(vec![true, false, true, false]).unwrap();
    let chip = ChipInstance::fabricate(
        &layer,
        VariationModel {
            kappa_std: 0.05,
            ..VariationModel::default()
        },
        NoiseSpec::none(),
    )
    .unwrap();
    let w = chip.effective_matrix().unwrap();
    for r in 0..8 {
        for c in 4..8 {
            assert_eq!(w.get(r, c), Complex64::new(0.0, 0.0));
        }
    }
}

#[test]
fn invalid_noise_is_rejected() {
    let layer = BlockedLinear::with_transform(4, 4, 4, Transform::Hadamard).unwrap();
    let bad = NoiseSpec {
        input_sigma: -0.1,
        ..NoiseSpec::none()
    };
    assert!(ChipInstance::fabricate(&layer, VariationModel::ideal(), bad).is_err());
}

#[test]
fn chunk_scaled_run_matches_plain_run_on_an_ideal_chip() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let layer = random_layer(6, 11, 4, &mut rng);
    let chip = ChipInstance::fabricate(&layer, VariationModel::ideal(), NoiseSpec::none()).unwrap();
    let count = 3;
    let cols: Vec<f64> = (0..11 * count).map(|_| rng.random_range(0.0..2.5)).collect();
    let plain = chip.simulate_columns(&cols, 11, count, DetectionMode::Coherent, &mut rng).unwrap();
    let scaled = chip.simulate_scaled(&cols, 11, count, DetectionMode::Coherent, &mut rng).unwrap();
    for (a, b) in plain.iter().zip(&scaled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn chunk_scaled_run_skips_dark_chunks() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let layer = random_layer(4, 8, 4, &mut rng);
    let var = VariationModel {
        er_db: 10.0,
        ..Default::default()
    };
    let chip = ChipInstance::fabricate(&layer, var, NoiseSpec::none()).unwrap();
    // The second chunk is dark: on a finite-ER chip it still leaks when sent,
    // so it must not be sent at all.
    let x = [0.3, 0.9, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0];
    let full = chip.simulate_scaled(&x, 8, 1, DetectionMode::Coherent, &mut rng).unwrap();
    let half_layer = {
        let mut l = BlockedLinear::new(4, 4, 4, layer.b_config().clone(), layer.p_config().clone()).unwrap();
        let s = layer.sigma();
        l.set_sigma(s[..4].to_vec()).unwrap();
        l
    };
    let mut half = chip.clone();
    half.program(&half_layer, Mapping::Nominal).unwrap();
    let want = half.simulate_scaled(&x[..4], 4, 1, DetectionMode::Coherent, &mut rng).unwrap();
    for (a, b) in full.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    let dark = chip.simulate_scaled(&[0.0; 8], 8, 1, DetectionMode::Coherent, &mut rng).unwrap();
    assert!(dark.iter().all(|&v| v == 0.0));
    let leaky = chip.simulate_columns(&[0.0; 8], 8, 1, DetectionMode::Coherent, &mut rng).unwrap();
    assert!(leaky.iter().any(|&v| v != 0.0));
}
