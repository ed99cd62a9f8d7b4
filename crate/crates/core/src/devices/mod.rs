//! Transfer-matrix models of the optical primitives, process variation and
//! a simulated chip standing in for fabricated hardware.

pub mod chip;
pub mod variation;

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::butterfly::coupler_matrix;
use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix};

pub use chip::{
    sample_measurements, simulate_chip, ChipInstance, Control, ControlPlan, DetectionMode, InputDistribution,
    Mapping, Measurement, MeasurementPlan,
};
pub use variation::{AttenuatorHardware, ChipHardware, NoiseSpec, VariationModel};

/// Directional coupler with power coupling ratio `kappa`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupler {
    pub kappa: f64,
}

impl Coupler {
    pub fn new(kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        Ok(Self { kappa })
    }

    pub fn fifty_fifty() -> Self {
        Self { kappa: 0.5 }
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(OsnnError::invalid("kappa", format!("{} outside [0, 1]", kappa)));
    }
    Ok(())
}

/// Single-waveguide phase shifter; `phi` is kept in `[0, 2pi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseShifter {
    phi: f64,
}

impl PhaseShifter {
    pub fn new(phi: f64) -> Self {
        Self { phi: phi.rem_euclid(TAU) }
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// Waveguide crossing. The default is ideal: lossless, no crosstalk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub insertion_loss_db: f64,
    #[serde(with = "variation::serde_db")]
    pub crosstalk_db: f64,
}

impl Default for Crossing {
    fn default() -> Self {
        Self {
            insertion_loss_db: 0.0,
            crosstalk_db: f64::NEG_INFINITY,
        }
    }
}

impl Crossing {
    pub fn new(insertion_loss_db: f64, crosstalk_db: f64) -> Result<Self> {
        if !(insertion_loss_db >= 0.0 && insertion_loss_db.is_finite()) {
            return Err(OsnnError::invalid("insertion_loss_db", format!("{} must be >= 0", insertion_loss_db)));
        }
        if !(crosstalk_db <= -30.0) {
            return Err(OsnnError::invalid("crosstalk_db", format!("{} must be <= -30", crosstalk_db)));
        }
        Ok(Self {
            insertion_loss_db,
            crosstalk_db,
        })
    }
}

/// MZI used as a variable attenuator: `t = cos(theta/2) e^{i sign_phase}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MziAttenuator {
    theta: f64,
    sign_phase: f64,
}

impl MziAttenuator {
    pub fn new(theta: f64, negative: bool) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(OsnnError::invalid("theta", format!("{} outside [0, pi]", theta)));
        }
        Ok(Self {
            theta,
            sign_phase: if negative { PI } else { 0.0 },
        })
    }

    /// Attenuator programmed to the signed amplitude `value` in `[-1, 1]`.
    pub fn for_amplitude(value: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&value) {
            return Err(OsnnError::invalid("amplitude", format!("{} outside [-1, 1]", value)));
        }
        Self::new(2.0 * value.abs().acos(), value < 0.0)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn sign_phase(&self) -> f64 {
        self.sign_phase
    }

    pub fn transmission(&self) -> Complex64 {
        Complex64::from_polar((self.theta / 2.0).cos(), self.sign_phase)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "device", rename_all = "snake_case")]
pub enum Device {
    Coupler(Coupler),
    PhaseShifter(PhaseShifter),
    Crossing(Crossing),
    MziAttenuator(MziAttenuator),
}

/// Transfer matrix of one device: 2x2 for two-port devices, 1x1 for a
/// phase shifter.
///
/// The attenuator is a push-pull MZI between two 50:50 couplers with the
/// common `i` factor removed, so its cross-port entry is the transmission
/// `t` and the whole matrix stays unitary.
pub fn device_transfer(device: &Device) -> Result<ComplexMatrix> {
    match device {
        Device::Coupler(c) => {
            check_kappa(c.kappa)?;
            Ok(coupler_matrix(c.kappa))
        }
        Device::PhaseShifter(p) => Ok(ComplexMatrix::diagonal(&[Complex64::from_polar(1.0, p.phi)])),
        Device::Crossing(x) => {
            let amp = 10f64.powf(-x.insertion_loss_db / 20.0);
            let leak = if x.crosstalk_db.is_finite() {
                10f64.powf(x.crosstalk_db / 10.0)
            } else {
                0.0
            };
            let through = Complex64::new(amp * (1.0 - leak).sqrt(), 0.0);
            let cross = Complex64::new(0.0, amp * leak.sqrt());
            ComplexMatrix::new(2, 2, vec![cross, through, through, cross])
        }
        Device::MziAttenuator(a) => {
            let (s, c) = (a.theta / 2.0).sin_cos();
            let ph = Complex64::from_polar(1.0, a.sign_phase);
            ComplexMatrix::new(2, 2, vec![ph * s, ph * c, ph * c, -ph * s])
        }
    }
}
