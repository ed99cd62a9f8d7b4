use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};

/// Uniform magnitude quantizer over `[0, 1]` with `2^bits` levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self { bits: 3 }
    }
}

impl QuantSpec {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(OsnnError::invalid("bits", format!("{} not in 1..=24", bits)));
        }
        Ok(Self { bits })
    }

    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    pub fn step(&self) -> f64 {
        1.0 / (self.levels() - 1) as f64
    }
}

/// Nearest level of `spec` to `v` after clamping to `[0, 1]`; ties round away
/// from zero.
///
/// In training the backward pass treats this as the identity for
/// `v` inside `[0, 1]` and as zero outside (straight-through estimator).
pub fn fake_quantize(v: f64, spec: &QuantSpec) -> f64 {
    let n = (spec.levels() - 1) as f64;
    (v.clamp(0.0, 1.0) * n).round() / n
}

/// Straight-through derivative of [`fake_quantize`].
pub fn fake_quantize_grad(v: f64) -> f64 {
    if (0.0..=1.0).contains(&v) {
        1.0
    } else {
        0.0
    }
}

/// Signed weight realized by a Σ entry: the magnitude is quantized, the sign
/// is kept.
pub fn quantize_signed(v: f64, spec: Option<&QuantSpec>) -> f64 {
    match spec {
        Some(s) => v.signum() * fake_quantize(v.abs(), s),
        None => v,
    }
}
