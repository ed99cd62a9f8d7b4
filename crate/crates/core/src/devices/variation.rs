use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::butterfly::{ButterflyNetwork, NetworkHardware};
use crate::error::{OsnnError, Result};
use crate::numerics::Complex64;

/// Serializes non-finite dB values (ideal devices) as `null`.
pub(crate) mod serde_db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Statistics of static fabrication errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationModel {
    pub kappa_std: f64,
    pub phase_offset_std: f64,
    /// Input-modulator extinction ratio; `inf` (stored as `null`) is ideal.
    #[serde(with = "serde_db")]
    pub er_db: f64,
    pub seed: u64,
}

impl Default for VariationModel {
    fn default() -> Self {
        Self {
            kappa_std: 0.0,
            phase_offset_std: 0.0,
            er_db: 25.0,
            seed: 0,
        }
    }
}

impl VariationModel {
    /// No variation and an infinite extinction ratio.
    pub fn ideal() -> Self {
        Self {
            er_db: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kappa_std", self.kappa_std), ("phase_offset_std", self.phase_offset_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OsnnError::invalid(name, format!("{} must be finite and >= 0", v)));
            }
        }
        if !(self.er_db > 0.0) {
            return Err(OsnnError::invalid("er_db", format!("{} must be > 0", self.er_db)));
        }
        Ok(())
    }

    /// Amplitude that leaks through an input modulator commanded to 0.
    pub fn leak(&self) -> f64 {
        if self.er_db.is_finite() {
            10f64.powf(-self.er_db / 10.0)
        } else {
            0.0
        }
    }

    /// Draws one frozen chip: both butterfly networks and `k` attenuators.
    pub fn sample(&self, b: &ButterflyNetwork, p: &ButterflyNetwork) -> Result<ChipHardware> {
        self.validate()?;
        if b.k() != p.k() {
            return Err(OsnnError::invalid("networks", "B and P must have the same size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let kn = Normal::new(0.0, self.kappa_std).expect("checked");
        let pn = Normal::new(0.0, self.phase_offset_std).expect("checked");
        let kappa = |rng: &mut ChaCha8Rng| (0.5 + kn.sample(rng)).clamp(0.0, 1.0);
        let net_hw = |net: &ButterflyNetwork, rng: &mut ChaCha8Rng| NetworkHardware {
            kappas: (0..net.coupler_count()).map(|_| kappa(rng)).collect(),
            phase_offsets: (0..net.phase_shifter_count()).map(|_| pn.sample(rng)).collect(),
        };
        let b_hw = net_hw(b, &mut rng);
        let p_hw = net_hw(p, &mut rng);
        let attenuators = (0..b.k())
            .map(|_| AttenuatorHardware {
                kappa1: (0.5 + kn.sample(&mut rng)).clamp(0.0, 1.0),
                kappa2: (0.5 + kn.sample(&mut rng)).clamp(0.0, 1.0),
                theta_offset: pn.sample(&mut rng),
                sign_offset: pn.sample(&mut rng),
            })
            .collect();
        Ok(ChipHardware {
            b: b_hw,
            p: p_hw,
            attenuators,
            er_db: self.er_db,
        })
    }
}

/// Dynamic noise, re-drawn on every inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Additive Gaussian on encoded inputs (range `[0, 1]`).
    pub input_sigma: f64,
    /// Gaussian drift on attenuator phases, radians.
    pub phase_drift_sigma: f64,
    /// Additive Gaussian on detected outputs.
    pub detector_sigma: f64,
    /// Also drift every B/P phase shifter.
    pub include_bp_phases: bool,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_sigma", self.input_sigma),
            ("phase_drift_sigma", self.phase_drift_sigma),
            ("detector_sigma", self.detector_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OsnnError::invalid(name, format!("{} must be finite and >= 0", v)));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.input_sigma == 0.0 && self.phase_drift_sigma == 0.0 && self.detector_sigma == 0.0
    }
}

/// Frozen parameters of one MZI attenuator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuatorHardware {
    pub kappa1: f64,
    pub kappa2: f64,
    pub theta_offset: f64,
    pub sign_offset: f64,
}

impl AttenuatorHardware {
    pub fn ideal() -> Self {
        Self {
            kappa1: 0.5,
            kappa2: 0.5,
            theta_offset: 0.0,
            sign_offset: 0.0,
        }
    }

    /// Cross-port amplitude for internal phase `theta` and sign phase
    /// `sign_phase`, with the common `i` of the two couplers removed:
    /// `e^{i(s+so)} [a e^{i psi/2} + b e^{-i psi/2}]`, `psi = theta + offset`.
    pub fn transmission(&self, theta: f64, sign_phase: f64) -> Complex64 {
        let a = (self.kappa2 * (1.0 - self.kappa1)).sqrt();
        let b = (self.kappa1 * (1.0 - self.kappa2)).sqrt();
        let half = (theta + self.theta_offset) / 2.0;
        let (s, c) = half.sin_cos();
        Complex64::new((a + b) * c, (a - b) * s) * Complex64::from_polar(1.0, sign_phase + self.sign_offset)
    }
}

/// Everything frozen about one fabricated chip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipHardware {
    pub b: NetworkHardware,
    pub p: NetworkHardware,
    pub attenuators: Vec<AttenuatorHardware>,
    #[serde(with = "serde_db")]
    pub er_db: f64,
}

impl ChipHardware {
    pub fn ideal(b: &ButterflyNetwork, p: &ButterflyNetwork) -> Self {
        Self {
            b: NetworkHardware::ideal(b),
            p: NetworkHardware::ideal(p),
            attenuators: vec![AttenuatorHardware::ideal(); b.k()],
            er_db: f64::INFINITY,
        }
    }

    pub fn k(&self) -> usize {
        self.attenuators.len()
    }

    pub fn leak(&self) -> f64 {
        VariationModel {
            er_db: self.er_db,
            ..VariationModel::default()
        }
        .leak()
    }
}
