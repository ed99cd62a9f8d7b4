use std::f64::consts::PI;

use osnn::butterfly::*;
use osnn::numerics::{Complex64, ComplexMatrix};
use osnn::OsnnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn textbook_dft(k: usize, inverse: bool) -> ComplexMatrix {
    let sign = if inverse { 1.0 } else { -1.0 };
    ComplexMatrix::from_fn(k, k, |r, c| {
        let angle = sign * 2.0 * PI * (r * c) as f64 / k as f64;
        Complex64::new(angle.cos(), angle.sin()) / (k as f64).sqrt()
    })
}

fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    ComplexMatrix::from_fn(a.rows() * b.rows(), a.cols() * b.cols(), |r, c| {
        a.get(r / b.rows(), c / b.cols()) * b.get(r % b.rows(), c % b.cols())
    })
}

fn sylvester(k: usize) -> ComplexMatrix {
    let h2 = ComplexMatrix::from_real(2, 2, &[1.0, 1.0, 1.0, -1.0]).unwrap();
    let mut h = ComplexMatrix::from_real(1, 1, &[1.0]).unwrap();
    while h.rows() < k {
        h = kron(&h, &h2);
    }
    h.scale(Complex64::new(1.0 / (k as f64).sqrt(), 0.0))
}

fn transfer(cfg: &PhaseConfiguration) -> ComplexMatrix {
    cfg.network().transfer_matrix(cfg).unwrap()
}

fn aligned_error(u: &ComplexMatrix, reference: &ComplexMatrix) -> f64 {
    u.align_global_phase(reference).max_abs_diff(reference)
}

#[test]
fn dft4_matches_written_out_matrix() {
    let h = 0.5;
    let written = ComplexMatrix::new(
        4,
        4,
        vec![
            (1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (1.0, 0.0),
            (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0),
            (1.0, 0.0), (-1.0, 0.0), (1.0, 0.0), (-1.0, 0.0),
            (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0),
        ]
        .into_iter()
        .map(|(re, im)| Complex64::new(h * re, h * im))
        .collect(),
    )
    .unwrap();
    let u = transfer(&configure_dft(4, false).unwrap());
    assert!(aligned_error(&u, &written) < 1e-6);
}

#[test]
fn dft_and_inverse_match_textbook_for_all_sizes() {
    for k in [2, 4, 8, 16] {
        let f = transfer(&configure_dft(k, false).unwrap());
        let fi = transfer(&configure_dft(k, true).unwrap());
        assert!(aligned_error(&f, &textbook_dft(k, false)) < 1e-6, "k={}", k);
        assert!(aligned_error(&fi, &textbook_dft(k, true)) < 1e-6, "k={}", k);
        let prod = fi.matmul(&f).unwrap();
        assert!(aligned_error(&prod, &ComplexMatrix::identity(k)) < 1e-6);
    }
}

#[test]
fn dft2_is_hadamard_like() {
    let u = transfer(&configure_dft(2, false).unwrap());
    let s = 1.0 / 2f64.sqrt();
    let want = ComplexMatrix::from_real(2, 2, &[s, s, s, -s]).unwrap();
    assert!(aligned_error(&u, &want) < 1e-12);
}

#[test]
fn hadamard_matches_kronecker_oracle() {
    for k in [2, 4, 8, 16] {
        let u = transfer(&configure_hadamard(k).unwrap());
        // Exact, not only up to a global phase.
        assert!(u.max_abs_diff(&sylvester(k)) < 1e-12, "k={}", k);
        let sq = u.matmul(&u).unwrap();
        assert!(sq.max_abs_diff(&ComplexMatrix::identity(k)) < 1e-6);
    }
}

#[test]
fn h2_from_phase_sandwich_of_fifty_fifty() {
    let d = ComplexMatrix::diagonal(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0)]);
    let prod = d.matmul(&fifty_fifty()).unwrap().matmul(&d).unwrap();
    assert!(aligned_error(&prod, &sylvester(2)) < 1e-12);
}

#[test]
fn non_power_of_two_is_rejected() {
    assert!(matches!(configure_dft(6, false), Err(OsnnError::NotPowerOfTwo(6))));
    assert!(matches!(configure_hadamard(12), Err(OsnnError::NotPowerOfTwo(12))));
    assert!(matches!(configure_hadamard(1), Err(OsnnError::NotPowerOfTwo(1))));
}

#[test]
fn fit_recovers_dft_and_hadamard() {
    let budget = FitBudget {
        restarts: 4,
        ..FitBudget::default()
    };
    let fft = ButterflyNetwork::new(4, Routing::Fft).unwrap();
    let r = fit_unitary(&fft, &textbook_dft(4, false), &budget).unwrap();
    assert!(r.fidelity >= 1.0 - 1e-6, "{}", r.fidelity);
    let nat = ButterflyNetwork::new(8, Routing::Natural).unwrap();
    let r = fit_unitary(&nat, &sylvester(8), &budget).unwrap();
    assert!(r.fidelity >= 1.0 - 1e-6, "{}", r.fidelity);
}

#[test]
fn identity_is_out_of_reach_with_fixed_fifty_fifty_couplers() {
    // Every entry of the transfer matrix has modulus 1/sqrt(k), so the best
    // possible identity fidelity is 1 - sqrt(2 - 2/sqrt(k)).
    let k = 4;
    let net = ButterflyNetwork::new(k, Routing::Natural).unwrap();
    let r = fit_unitary(&net, &ComplexMatrix::identity(k), &FitBudget::default()).unwrap();
    let bound = 1.0 - (2.0 - 2.0 / (k as f64).sqrt()).sqrt();
    assert!(r.fidelity <= bound + 1e-9);
    assert!(r.fidelity >= bound - 1e-6, "{} vs {}", r.fidelity, bound);
}

#[test]
fn fit_is_deterministic_and_best_so_far_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let target = haar_unitary(4, &mut rng);
    let net = ButterflyNetwork::new(4, Routing::Natural).unwrap();
    let budget = FitBudget {
        restarts: 6,
        iterations: 150,
        ..FitBudget::default()
    };
    let a = fit_unitary(&net, &target, &budget).unwrap();
    let b = fit_unitary(&net, &target, &budget).unwrap();
    assert_eq!(a, b);
    assert!(a.best_so_far.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*a.best_so_far.last().unwrap(), a.fidelity);
    let u = net.transfer_matrix(&a.config).unwrap();
    assert!((fidelity(&u, &target) - a.fidelity).abs() < 1e-12);
}

#[test]
fn fit_rejects_non_square_target() {
    let net = ButterflyNetwork::new(4, Routing::Natural).unwrap();
    let err = fit_unitary(&net, &ComplexMatrix::zeros(4, 3), &FitBudget::default()).unwrap_err();
    assert!(matches!(err, OsnnError::ShapeMismatch { .. }));
}

#[test]
fn bsp_reaches_diagonal_phase_targets() {
    // diag(+-1, +-i) / 2: B = H, Sigma = I and P = H D realize it exactly.
    let vals = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 0.0)];
    let target = ComplexMatrix::diagonal(&vals.map(|(re, im)| Complex64::new(re / 2.0, im / 2.0)));
    let f = fit_bsp(4, &target, &FitBudget { restarts: 3, ..FitBudget::default() }).unwrap();
    assert!(f >= 1.0 - 1e-6, "{}", f);
}

#[test]
fn bsp_beats_sigma_only_on_shared_targets() {
    let budget = FitBudget {
        restarts: 3,
        iterations: 150,
        ..FitBudget::default()
    };
    let report = expressivity_report(
        4,
        12,
        &[ExpressivityMode::Bsp, ExpressivityMode::SigmaOnly],
        5,
        &budget,
    )
    .unwrap();
    let bsp = report.row(ExpressivityMode::Bsp).unwrap();
    let sig = report.row(ExpressivityMode::SigmaOnly).unwrap();
    for (a, b) in bsp.fidelities.iter().zip(&sig.fidelities) {
        assert!(a + 1e-12 >= *b);
    }
    assert!(bsp.mean > sig.mean);
}

#[test]
fn expressivity_report_validates_inputs() {
    let budget = FitBudget::default();
    assert!(matches!(
        expressivity_report(4, 0, &[ExpressivityMode::BOnly], 0, &budget),
        Err(OsnnError::Empty(_))
    ));
    assert!(matches!(
        "holographic".parse::<ExpressivityMode>(),
        Err(OsnnError::Unknown { .. })
    ));
}

#[test]
fn expressivity_report_is_deterministic() {
    let budget = FitBudget {
        restarts: 2,
        iterations: 40,
        ..FitBudget::default()
    };
    let modes = [ExpressivityMode::BOnly, ExpressivityMode::MultiWavelengthNonneg];
    let a = expressivity_report(4, 3, &modes, 1, &budget).unwrap();
    let b = expressivity_report(4, 3, &modes, 1, &budget).unwrap();
    assert_eq!(a, b);
    for row in &a.rows {
        assert!(row.fidelities.iter().all(|f| *f <= 1.0 + 1e-12));
    }
}
