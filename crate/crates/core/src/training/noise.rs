use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::devices::NoiseSpec;
use crate::error::{OsnnError, Result};
use crate::numerics::RealTensor;

/// Where dynamic noise enters a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSite {
    /// Encoded input amplitudes; the result is clamped to `[0, 1]`.
    Input,
    /// Attenuator phases (radians).
    Phase,
    /// Detected outputs.
    Detector,
}

impl FromStr for NoiseSite {
    type Err = OsnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(NoiseSite::Input),
            "phase" => Ok(NoiseSite::Phase),
            "detector" => Ok(NoiseSite::Detector),
            other => Err(OsnnError::Unknown {
                kind: "noise site",
                name: other.to_string(),
            }),
        }
    }
}

impl NoiseSite {
    pub fn sigma(self, spec: &NoiseSpec) -> f64 {
        match self {
            NoiseSite::Input => spec.input_sigma,
            NoiseSite::Phase => spec.phase_drift_sigma,
            NoiseSite::Detector => spec.detector_sigma,
        }
    }
}

/// Adds Gaussian noise with the std `spec` assigns to `site`.
pub fn inject_noise(tensor: &RealTensor, spec: &NoiseSpec, site: NoiseSite, rng: &mut impl Rng) -> Result<RealTensor> {
    spec.validate()?;
    let sigma = site.sigma(spec);
    let mut data = tensor.data().to_vec();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("validated");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    if site == NoiseSite::Input {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    RealTensor::new(tensor.shape().to_vec(), data)
}

/// Realized Σ entry under an attenuator phase drift `delta`:
/// `sign * cos(acos|s| + delta / 2)`.
pub fn drifted_sigma(s: f64, delta: f64) -> f64 {
    let mag = s.abs().min(1.0);
    let v = (mag.acos() + delta / 2.0).cos();
    if s < 0.0 {
        -v
    } else {
        v
    }
}
