use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix};

use super::configure::configure_hadamard;
use super::fit::{fit_unitary, haar_unitary, random_phases, FitBudget};
use super::network::{ButterflyNetwork, Routing};

/// Which circuit family is fitted to which random target population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressivityMode {
    /// One butterfly unit against Haar unitaries.
    BOnly,
    /// `B Sigma P` with all three fitted, against normalized Gaussian
    /// matrices.
    Bsp,
    /// Only `Sigma` fitted, `B` and `P` frozen at the Hadamard configuration.
    SigmaOnly,
    /// `|B Sigma P|` against normalized entrywise-|Gaussian| matrices.
    MultiWavelengthNonneg,
}

impl std::str::FromStr for ExpressivityMode {
    type Err = OsnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b_only" => Ok(Self::BOnly),
            "bsp" => Ok(Self::Bsp),
            "sigma_only" => Ok(Self::SigmaOnly),
            "multi_wavelength_nonneg" => Ok(Self::MultiWavelengthNonneg),
            other => Err(OsnnError::Unknown {
                kind: "expressivity mode",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeStatistics {
    pub mode: ExpressivityMode,
    pub n_targets: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub fidelities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    pub k: usize,
    pub seed: u64,
    pub rows: Vec<ModeStatistics>,
}

impl ExpressivityReport {
    pub fn row(&self, mode: ExpressivityMode) -> Option<&ModeStatistics> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<26} {:>8} {:>10} {:>10} {:>10}\n", "mode", "targets", "mean", "median", "std");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>8} {:>10.6} {:>10.6} {:>10.6}\n",
                format!("{:?}", r.mode),
                r.n_targets,
                r.mean,
                r.median,
                r.std
            ));
        }
        out
    }
}

fn stats(mode: ExpressivityMode, fidelities: Vec<f64>) -> ModeStatistics {
    let n = fidelities.len() as f64;
    let mean = fidelities.iter().sum::<f64>() / n;
    let std = (fidelities.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = fidelities.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    ModeStatistics {
        mode,
        n_targets: fidelities.len(),
        mean,
        median,
        std,
        fidelities,
    }
}

fn gaussian_target(k: usize, rng: &mut ChaCha8Rng, nonneg: bool) -> ComplexMatrix {
    let vals: Vec<f64> = (0..k * k)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            if nonneg {
                v.abs()
            } else {
                v
            }
        })
        .collect();
    let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
    ComplexMatrix::from_fn(k, k, |r, c| Complex64::new(vals[r * k + c] / norm, 0.0))
}

/// Best `B Sigma P` fit for fixed `B`, `P` with `Sigma` real, `|sigma| <= 1`,
/// and a free global phase. Returns `(J, c)` where `c = diag(B^H T P^H)` and
/// the squared residual is `|T|^2 - J / 2`.
fn sigma_objective(b: &ComplexMatrix, p: &ComplexMatrix, target: &ComplexMatrix) -> (f64, Vec<Complex64>) {
    let k = target.rows();
    let c: Vec<Complex64> = (0..k)
        .map(|d| {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..k {
                for bb in 0..k {
                    acc += b.get(a, d).conj() * target.get(a, bb) * p.get(d, bb).conj();
                }
            }
            acc
        })
        .collect();
    let s: Complex64 = c.iter().map(|z| z * z).sum();
    let j = c.iter().map(|z| z.norm_sqr()).sum::<f64>() + s.norm();
    (j, c)
}

/// Optimal `Sigma` diagonal and global phase for fixed `B`, `P`.
pub fn optimal_sigma(b: &ComplexMatrix, p: &ComplexMatrix, target: &ComplexMatrix) -> (Vec<f64>, f64) {
    let (_, c) = sigma_objective(b, p, target);
    let s: Complex64 = c.iter().map(|z| z * z).sum();
    let alpha = s.arg() / 2.0;
    let rot = Complex64::from_polar(1.0, -alpha);
    let sigma = c.iter().map(|z| (rot * z).re.clamp(-1.0, 1.0)).collect();
    (sigma, alpha)
}

fn bsp_fidelity(j: f64, target: &ComplexMatrix) -> f64 {
    let tn = target.frobenius_norm();
    1.0 - (tn * tn - 0.5 * j).max(0.0).sqrt() / tn
}

/// Fits the B and P phases of a `B Sigma P` block, with `Sigma` solved in
/// closed form at every step. Restart 0 starts from the Hadamard pair.
pub fn fit_bsp(k: usize, target: &ComplexMatrix, budget: &FitBudget) -> Result<f64> {
    let net = ButterflyNetwork::new(k, Routing::Natural)?;
    let had = configure_hadamard(k)?.phases().to_vec();
    let n = net.phase_shifter_count();
    let mut best = f64::NEG_INFINITY;
    for r in 0..budget.restarts.max(1) {
        let (mut pb, mut pp) = if r == 0 {
            (had.clone(), had.clone())
        } else {
            let mut rng = budget.rng(r);
            (random_phases(n, &mut rng), random_phases(n, &mut rng))
        };
        let mut vb = vec![0.0; n];
        let mut vp = vec![0.0; n];
        for t in 0..budget.iterations {
            let b = net.transfer_from_phases(&pb, None)?;
            let p = net.transfer_from_phases(&pp, None)?;
            let (_, c) = sigma_objective(&b, &p, target);
            let s: Complex64 = c.iter().map(|z| z * z).sum();
            let unit = if s.norm() > 0.0 { s.conj() / s.norm() } else { Complex64::new(0.0, 0.0) };
            let gamma: Vec<Complex64> = c.iter().map(|z| 2.0 * z.conj() + 2.0 * unit * z).collect();
            // G^B_{ad} = gamma_d (T P^H)_{ad},  G^P_{db} = gamma_d (B^H T)_{db}.
            let tph = target.matmul(&p.adjoint())?;
            let bht = b.adjoint().matmul(target)?;
            let gb = ComplexMatrix::from_fn(k, k, |a, d| gamma[d] * tph.get(a, d));
            let gp = ComplexMatrix::from_fn(k, k, |d, bb| gamma[d] * bht.get(d, bb));
            let (_, grad_b) = net.phase_gradient(&pb, None, |_| gb)?;
            let (_, grad_p) = net.phase_gradient(&pp, None, |_| gp)?;
            let step = budget.step(t);
            for i in 0..n {
                vb[i] = 0.9 * vb[i] + grad_b[i];
                vp[i] = 0.9 * vp[i] + grad_p[i];
                pb[i] += step * vb[i];
                pp[i] += step * vp[i];
            }
        }
        let b = net.transfer_from_phases(&pb, None)?;
        let p = net.transfer_from_phases(&pp, None)?;
        let (j, _) = sigma_objective(&b, &p, target);
        best = best.max(bsp_fidelity(j, target));
    }
    Ok(best)
}

/// `Sigma`-only fidelity with both units frozen at the Hadamard configuration.
pub fn fit_sigma_only(k: usize, target: &ComplexMatrix) -> Result<f64> {
    let cfg = configure_hadamard(k)?;
    let h = cfg.network().transfer_matrix(&cfg)?;
    let (j, _) = sigma_objective(&h, &h, target);
    Ok(bsp_fidelity(j, target))
}

/// Effective non-negative matrix `|B diag(sigma) P|` of a block.
pub fn nonneg_effective(b: &ComplexMatrix, sigma: &[f64], p: &ComplexMatrix) -> ComplexMatrix {
    let k = sigma.len();
    ComplexMatrix::from_fn(k, k, |r, c| {
        let v: Complex64 = (0..k).map(|d| b.get(r, d) * sigma[d] * p.get(d, c)).sum();
        Complex64::new(v.norm(), 0.0)
    })
}

/// Fits phases and `Sigma` so `|B Sigma P|` matches a non-negative target.
/// The objective is not smooth where entries vanish, so this uses central
/// finite-difference gradients.
pub fn fit_nonneg(k: usize, target: &ComplexMatrix, budget: &FitBudget) -> Result<f64> {
    let net = ButterflyNetwork::new(k, Routing::Natural)?;
    let n = net.phase_shifter_count();
    let had = configure_hadamard(k)?.phases().to_vec();
    let tn = target.frobenius_norm();
    let eval = |x: &[f64]| -> Result<f64> {
        let b = net.transfer_from_phases(&x[..n], None)?;
        let p = net.transfer_from_phases(&x[n..2 * n], None)?;
        let sigma: Vec<f64> = x[2 * n..].iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        let w = nonneg_effective(&b, &sigma, &p);
        Ok(w.sub(target)?.frobenius_norm().powi(2))
    };
    let mut best = f64::NEG_INFINITY;
    for r in 0..budget.restarts.max(1) {
        let mut rng = budget.rng(r);
        let mut x: Vec<f64> = if r == 0 {
            had.iter().chain(&had).copied().collect()
        } else {
            random_phases(2 * n, &mut rng)
        };
        x.extend((0..k).map(|_| rng.random_range(-1.0..1.0)));
        let mut v = vec![0.0; x.len()];
        let h = 1e-6;
        for t in 0..budget.iterations {
            let mut grad = vec![0.0; x.len()];
            for i in 0..x.len() {
                let keep = x[i];
                x[i] = keep + h;
                let up = eval(&x)?;
                x[i] = keep - h;
                let down = eval(&x)?;
                x[i] = keep;
                grad[i] = (up - down) / (2.0 * h);
            }
            let step = budget.step(t) * 0.2;
            for i in 0..x.len() {
                v[i] = 0.9 * v[i] - grad[i];
                x[i] += step * v[i];
                if i >= 2 * n {
                    x[i] = x[i].clamp(-1.0, 1.0);
                }
            }
        }
        best = best.max(1.0 - eval(&x)?.sqrt() / tn);
    }
    Ok(best)
}

/// Fidelity statistics of each mode over `n_targets` random targets.
///
/// All modes draw targets from one seeded stream per mode, so `Bsp` and
/// `SigmaOnly` see the same targets and their means compare pairwise.
pub fn expressivity_report(
    k: usize,
    n_targets: usize,
    modes: &[ExpressivityMode],
    seed: u64,
    budget: &FitBudget,
) -> Result<ExpressivityReport> {
    if n_targets == 0 {
        return Err(OsnnError::Empty("expressivity targets"));
    }
    let net = ButterflyNetwork::new(k, Routing::Natural)?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fids = Vec::with_capacity(n_targets);
        for i in 0..n_targets {
            let sub = FitBudget {
                seed: budget.seed.wrapping_add(i as u64),
                ..budget.clone()
            };
            let f = match mode {
                ExpressivityMode::BOnly => fit_unitary(&net, &haar_unitary(k, &mut rng), &sub)?.fidelity,
                ExpressivityMode::Bsp => fit_bsp(k, &gaussian_target(k, &mut rng, false), &sub)?,
                ExpressivityMode::SigmaOnly => fit_sigma_only(k, &gaussian_target(k, &mut rng, false))?,
                ExpressivityMode::MultiWavelengthNonneg => fit_nonneg(k, &gaussian_target(k, &mut rng, true), &sub)?,
            };
            fids.push(f);
        }
        rows.push(stats(mode, fids));
    }
    Ok(ExpressivityReport { k, seed, rows })
}
