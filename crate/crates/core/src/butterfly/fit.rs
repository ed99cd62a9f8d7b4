use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix};

use super::configure::Transform;
use super::network::{ButterflyNetwork, PhaseConfiguration, Routing};

/// Iteration and restart budget for the phase fitters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBudget {
    pub iterations: usize,
    pub restarts: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitBudget {
    fn default() -> Self {
        Self {
            iterations: 300,
            restarts: 20,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl FitBudget {
    fn check(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(OsnnError::invalid("restarts", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(OsnnError::invalid("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Step size at iteration `t`, cosine-decayed to zero.
    pub(crate) fn step(&self, t: usize) -> f64 {
        let frac = t as f64 / self.iterations.max(1) as f64;
        self.learning_rate * 0.5 * (1.0 + (PI * frac).cos())
    }

    /// Independent stream for restart `r`.
    pub(crate) fn rng(&self, r: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r as u64))
    }
}

/// Outcome of [`fit_unitary`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub config: PhaseConfiguration,
    pub fidelity: f64,
    /// Best fidelity seen after each restart (non-decreasing).
    pub best_so_far: Vec<f64>,
}

/// `1 - min_a |U - e^{ia} T|_F / |T|_F`.
pub fn fidelity(u: &ComplexMatrix, target: &ComplexMatrix) -> f64 {
    let inner: Complex64 = target.data().iter().zip(u.data()).map(|(t, x)| t.conj() * x).sum();
    let tn = target.frobenius_norm();
    let un = u.frobenius_norm();
    let residual = (un * un + tn * tn - 2.0 * inner.norm()).max(0.0).sqrt();
    1.0 - residual / tn
}

pub(crate) fn random_phases(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..TAU)).collect()
}

/// Closed-form configurations that make sense as warm starts for `net`.
pub(crate) fn warm_starts(net: &ButterflyNetwork) -> Vec<Vec<f64>> {
    let transforms: &[Transform] = match net.routing() {
        Routing::Natural => &[Transform::Hadamard],
        Routing::Fft => &[Transform::Dft, Transform::Idft],
    };
    transforms
        .iter()
        .filter_map(|t| t.configure(net.k()).ok())
        .map(|c| c.phases().to_vec())
        .collect()
}

/// Gradient fit of `net`'s phases to `target` up to a global phase.
///
/// The first restarts begin from the network's closed-form transforms, the
/// rest from uniformly random phases. Each restart runs full-batch gradient
/// ascent on `|tr(T^H U)|^2` with a cosine-decayed step.
pub fn fit_unitary(net: &ButterflyNetwork, target: &ComplexMatrix, budget: &FitBudget) -> Result<FitResult> {
    budget.check()?;
    if target.rows() != target.cols() {
        return Err(OsnnError::shape("fit_unitary", format!("target is {}x{}", target.rows(), target.cols())));
    }
    if target.rows() != net.k() {
        return Err(OsnnError::shape(
            "fit_unitary",
            format!("target is {}x{}, network is {}x{}", target.rows(), target.rows(), net.k(), net.k()),
        ));
    }
    let tn2 = target.frobenius_norm().powi(2);
    if tn2 == 0.0 {
        return Err(OsnnError::invalid("target", "zero matrix"));
    }
    let scale = 1.0 / (tn2 * net.k() as f64);
    let warm = warm_starts(net);

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut history = Vec::with_capacity(budget.restarts);
    for r in 0..budget.restarts {
        let mut phases = match warm.get(r) {
            Some(p) => p.clone(),
            None => random_phases(net.phase_shifter_count(), &mut budget.rng(r)),
        };
        let mut velocity = vec![0.0; phases.len()];
        for t in 0..budget.iterations {
            let (_, grad) = net.phase_gradient(&phases, None, |u| {
                let tau: Complex64 = target.data().iter().zip(u.data()).map(|(a, b)| a.conj() * b).sum();
                target.scale(tau * (2.0 * scale))
            })?;
            let step = budget.step(t);
            for ((p, v), g) in phases.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = 0.9 * *v + g;
                *p += step * *v;
            }
        }
        let u = net.transfer_from_phases(&phases, None)?;
        let f = fidelity(&u, target);
        if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((phases, f));
        }
        history.push(best.as_ref().map(|b| b.1).unwrap_or(f));
    }
    let (phases, fid) = best.expect("at least one restart");
    Ok(FitResult {
        config: PhaseConfiguration::new(net, phases)?,
        fidelity: fid,
        best_so_far: history,
    })
}

/// Haar-distributed random unitary (QR of a complex Gaussian matrix with
/// the phases of R's diagonal divided out).
pub fn haar_unitary(k: usize, rng: &mut impl Rng) -> ComplexMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut cols: Vec<Vec<Complex64>> = (0..k)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect();
    // Modified Gram-Schmidt; dividing by the (positive) norm fixes R's
    // diagonal phases, which is what makes the result Haar.
    for j in 0..k {
        for i in 0..j {
            let proj: Complex64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a.conj() * b).sum();
            let (left, right) = cols.split_at_mut(j);
            for (b, a) in right[0].iter_mut().zip(&left[i]) {
                *b -= proj * a;
            }
        }
        let norm = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in &mut cols[j] {
            *z /= norm;
        }
    }
    ComplexMatrix::from_fn(k, k, |r, c| cols[c][r])
}
