use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix};

use super::network::{ButterflyNetwork, PhaseConfiguration, Routing};

/// Closed-form phases for a network whose stage `s` applies
/// `(1/sqrt 2) [[1, w], [1, -w]]` to every pair, with `w` given by
/// `twiddle(s, lo)`.
///
/// Each unit is `diag(1, -i) . C . diag(1, -i w)` with the 50:50 coupler `C`.
/// The `-i` left on the `hi` output is pushed forward into the next phase
/// column that touches the same label, ending in the output column.
fn unit_phases(net: &ButterflyNetwork, twiddle: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let k = net.k();
    let stages = net.stages();
    let mut phases = vec![0.0; net.phase_shifter_count()];
    let mut carry = vec![0.0; k];
    for s in 0..stages {
        for (lo, hi) in net.pairs(s) {
            let w = twiddle(s, lo);
            phases[s * k + lo] = carry[lo];
            phases[s * k + hi] = carry[hi] + w - FRAC_PI_2;
            carry[lo] = 0.0;
            carry[hi] = -FRAC_PI_2;
        }
    }
    phases[stages * k..].copy_from_slice(&carry);
    phases
}

/// Phases making an [`Routing::Fft`] network equal the unitary DFT of size
/// `k` (or its inverse).
pub fn configure_dft(k: usize, inverse: bool) -> Result<PhaseConfiguration> {
    let net = ButterflyNetwork::new(k, Routing::Fft)?;
    let sign = if inverse { 1.0 } else { -1.0 };
    let phases = unit_phases(&net, |s, lo| {
        let half = 1usize << s;
        let j = lo % half;
        sign * 2.0 * PI * j as f64 / (2 * half) as f64
    });
    PhaseConfiguration::new(&net, phases)
}

/// Phases making a [`Routing::Natural`] network equal `H_k / sqrt(k)` with the
/// Sylvester ordering.
pub fn configure_hadamard(k: usize) -> Result<PhaseConfiguration> {
    let net = ButterflyNetwork::new(k, Routing::Natural)?;
    PhaseConfiguration::new(&net, unit_phases(&net, |_, _| 0.0))
}

/// Named linear transforms a B or P unit can be set to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Hadamard,
    Dft,
    Idft,
}

impl std::str::FromStr for Transform {
    type Err = OsnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hadamard" => Ok(Transform::Hadamard),
            "dft" => Ok(Transform::Dft),
            "idft" => Ok(Transform::Idft),
            other => Err(OsnnError::Unknown {
                kind: "transform",
                name: other.to_string(),
            }),
        }
    }
}

impl Transform {
    pub fn configure(self, k: usize) -> Result<PhaseConfiguration> {
        match self {
            Transform::Hadamard => configure_hadamard(k),
            Transform::Dft => configure_dft(k, false),
            Transform::Idft => configure_dft(k, true),
        }
    }

    /// The ideal matrix, computed directly from its definition.
    pub fn matrix(self, k: usize) -> Result<ComplexMatrix> {
        if k < 2 || !k.is_power_of_two() {
            return Err(OsnnError::NotPowerOfTwo(k));
        }
        let norm = 1.0 / (k as f64).sqrt();
        Ok(match self {
            Transform::Hadamard => ComplexMatrix::from_fn(k, k, |r, c| {
                let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                Complex64::new(sign * norm, 0.0)
            }),
            Transform::Dft | Transform::Idft => {
                let sign = if self == Transform::Dft { -1.0 } else { 1.0 };
                ComplexMatrix::from_fn(k, k, |r, c| {
                    Complex64::from_polar(norm, sign * 2.0 * PI * ((r * c) % k) as f64 / k as f64)
                })
            }
        })
    }
}
