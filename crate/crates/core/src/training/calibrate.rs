use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::devices::ChipInstance;
use crate::error::{OsnnError, Result};

/// Fitted control curve of one attenuator:
/// `|t|^2 = p + u cos(theta) - v sin(theta) = p + q cos(theta + o)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuatorCurve {
    pub p: f64,
    pub u: f64,
    pub v: f64,
    /// RMS of `|t|` residuals over the sweep.
    pub residual_rms: f64,
}

impl AttenuatorCurve {
    pub fn amplitude(&self) -> f64 {
        self.u.hypot(self.v)
    }

    pub fn offset(&self) -> f64 {
        self.v.atan2(self.u)
    }

    /// Predicted `|t|` at control `theta`.
    pub fn magnitude(&self, theta: f64) -> f64 {
        (self.p + self.u * theta.cos() - self.v * theta.sin()).max(0.0).sqrt()
    }

    /// Control that realizes magnitude `target` (clamped to the reachable
    /// range), in `[-pi, pi)`. A full turn flips the sign of a push-pull
    /// MZI, so the control stays on the branch through 0.
    pub fn command(&self, target: f64) -> f64 {
        let c = ((target * target - self.p) / self.amplitude()).clamp(-1.0, 1.0);
        (c.acos() - self.offset() + PI).rem_euclid(TAU) - PI
    }
}

/// One curve per physical attenuator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub curves: Vec<AttenuatorCurve>,
    pub sweep_points: usize,
}

impl CalibrationTable {
    pub fn command(&self, attenuator: usize, target: f64) -> f64 {
        self.curves[attenuator].command(target)
    }

    pub fn worst_residual(&self) -> f64 {
        self.curves.iter().map(|c| c.residual_rms).fold(0.0, f64::max)
    }
}

/// Sweeps every attenuator over `sweep_points` evenly spaced controls in
/// `[0, pi]` and fits its curve by linear least squares on `|t|^2`.
pub fn calibrate_devices(chip: &ChipInstance, sweep_points: usize) -> Result<CalibrationTable> {
    if sweep_points < 8 {
        return Err(OsnnError::Calibration {
            device: 0,
            reason: format!("{} sweep points; at least 8 are required", sweep_points),
        });
    }
    let thetas: Vec<f64> = (0..sweep_points)
        .map(|i| PI * i as f64 / (sweep_points - 1) as f64)
        .collect();
    let mut curves = Vec::with_capacity(chip.k());
    for d in 0..chip.k() {
        let mags: Vec<f64> = thetas.iter().map(|&t| chip.measure_attenuator(d, t)).collect();
        let rows: Vec<[f64; 3]> = thetas.iter().map(|&t| [1.0, t.cos(), -t.sin()]).collect();
        let target: Vec<f64> = mags.iter().map(|m| m * m).collect();
        let [p, u, v] = least_squares3(&rows, &target).ok_or_else(|| OsnnError::Calibration {
            device: d,
            reason: "singular sweep design".into(),
        })?;
        let mut curve = AttenuatorCurve {
            p,
            u,
            v,
            residual_rms: 0.0,
        };
        if curve.amplitude() < 1e-6 {
            return Err(OsnnError::Calibration {
                device: d,
                reason: "fitted curve is flat, so no control is monotone".into(),
            });
        }
        let sq: f64 = thetas
            .iter()
            .zip(&mags)
            .map(|(&t, m)| (curve.magnitude(t) - m).powi(2))
            .sum();
        curve.residual_rms = (sq / sweep_points as f64).sqrt();
        curves.push(curve);
    }
    Ok(CalibrationTable { curves, sweep_points })
}

/// Normal equations for a 3-parameter linear model.
fn least_squares3(rows: &[[f64; 3]], y: &[f64]) -> Option<[f64; 3]> {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (r, yi) in rows.iter().zip(y) {
        for i in 0..3 {
            b[i] += r[i] * yi;
            for j in 0..3 {
                a[i][j] += r[i] * r[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}
