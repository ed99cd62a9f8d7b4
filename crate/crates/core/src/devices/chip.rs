use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::butterfly::ButterflyNetwork;
use crate::error::{OsnnError, Result};
use crate::layers::BlockedLinear;
use crate::numerics::{linalg, Complex64, ComplexMatrix, RealTensor};
use crate::training::calibrate::CalibrationTable;

use super::variation::{ChipHardware, NoiseSpec, VariationModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Single wavelength, coherent detection of the real part.
    Coherent,
    /// One wavelength per input; powers add at each detector.
    MultiWavelength,
}

/// Drive settings of one attenuator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub theta: f64,
    pub negative: bool,
}

impl Control {
    pub fn sign_phase(&self) -> f64 {
        if self.negative {
            PI
        } else {
            0.0
        }
    }

    /// Ideal-device control for a signed amplitude.
    pub fn nominal(value: f64) -> Self {
        Self {
            theta: 2.0 * value.abs().min(1.0).acos(),
            negative: value < 0.0,
        }
    }
}

/// How Σ magnitudes become attenuator controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mapping {
    /// `theta = 2 acos|σ|`, as if every device were ideal.
    Nominal,
    /// Through the chip's calibration tables.
    Calibrated,
}

/// One fabricated BPNC (a B network, a P network and `k` attenuators),
/// time-multiplexed over every Σ unit of the layer it is programmed with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipInstance {
    variation: VariationModel,
    noise: NoiseSpec,
    hardware: ChipHardware,
    layer: BlockedLinear,
    mapping: Mapping,
    controls: Vec<Control>,
    calibration: Option<CalibrationTable>,
}

impl ChipInstance {
    /// Samples static variations from `variation` and programs `layer` with
    /// the nominal mapping.
    pub fn fabricate(layer: &BlockedLinear, variation: VariationModel, noise: NoiseSpec) -> Result<Self> {
        let b = layer.b_config().network();
        let p = layer.p_config().network();
        let hardware = variation.sample(&b, &p)?;
        Self::with_hardware(layer, variation, hardware, noise)
    }

    pub fn with_hardware(
        layer: &BlockedLinear,
        variation: VariationModel,
        hardware: ChipHardware,
        noise: NoiseSpec,
    ) -> Result<Self> {
        noise.validate()?;
        let mut chip = Self {
            variation,
            noise,
            hardware,
            layer: layer.clone(),
            mapping: Mapping::Nominal,
            controls: Vec::new(),
            calibration: None,
        };
        chip.program(layer, Mapping::Nominal)?;
        Ok(chip)
    }

    pub fn k(&self) -> usize {
        self.hardware.k()
    }

    pub fn variation(&self) -> &VariationModel {
        &self.variation
    }

    pub fn hardware(&self) -> &ChipHardware {
        &self.hardware
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn set_noise(&mut self, noise: NoiseSpec) -> Result<()> {
        noise.validate()?;
        self.noise = noise;
        Ok(())
    }

    pub fn layer(&self) -> &BlockedLinear {
        &self.layer
    }

    pub fn mapping(&self) -> Mapping {
        self.mapping
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn calibration(&self) -> Option<&CalibrationTable> {
        self.calibration.as_ref()
    }

    pub fn set_calibration(&mut self, table: CalibrationTable) -> Result<()> {
        if table.curves.len() != self.k() {
            return Err(OsnnError::invalid(
                "calibration",
                format!("{} curves for {} attenuators", table.curves.len(), self.k()),
            ));
        }
        self.calibration = Some(table);
        Ok(())
    }

    /// Loads the Σ values of `layer` into the attenuators. The phase
    /// configurations of `layer` must fit the fabricated networks.
    pub fn program(&mut self, layer: &BlockedLinear, mapping: Mapping) -> Result<()> {
        for (name, cfg, hw) in [
            ("B", layer.b_config(), &self.hardware.b),
            ("P", layer.p_config(), &self.hardware.p),
        ] {
            let net = cfg.network();
            if net.k() != self.k() || net.phase_shifter_count() != hw.phase_offsets.len() {
                return Err(OsnnError::ConfigMismatch(format!(
                    "{} network of the layer does not fit a k={} chip",
                    name,
                    self.k()
                )));
            }
        }
        let k = self.k();
        let controls = match mapping {
            Mapping::Nominal => layer.effective_sigma().iter().map(|&s| Control::nominal(s)).collect(),
            Mapping::Calibrated => {
                let table = self.calibration.as_ref().ok_or(OsnnError::Uncalibrated)?;
                layer
                    .effective_sigma()
                    .iter()
                    .enumerate()
                    .map(|(idx, &s)| Control {
                        theta: table.command(idx % k, s.abs().min(1.0)),
                        negative: s < 0.0,
                    })
                    .collect()
            }
        };
        self.layer = layer.clone();
        self.mapping = mapping;
        self.controls = controls;
        Ok(())
    }

    /// Static `|t|` of attenuator `d` at control `theta`, as measured when
    /// it is calibrated on its own.
    pub fn measure_attenuator(&self, d: usize, theta: f64) -> f64 {
        self.hardware.attenuators[d].transmission(theta, 0.0).norm()
    }

    fn networks(&self) -> (ButterflyNetwork, ButterflyNetwork) {
        (self.layer.b_config().network(), self.layer.p_config().network())
    }

    /// B and P transfer matrices, with per-call drift on their phases when
    /// `drift` is given.
    fn bp<R: Rng + ?Sized>(&self, drift: Option<(&Normal<f64>, &mut R)>) -> Result<(ComplexMatrix, ComplexMatrix)> {
        let (bn, pn) = self.networks();
        let mut b_ph = self.layer.b_config().phases().to_vec();
        let mut p_ph = self.layer.p_config().phases().to_vec();
        if let Some((normal, rng)) = drift {
            for v in b_ph.iter_mut().chain(p_ph.iter_mut()) {
                *v += normal.sample(rng);
            }
        }
        Ok((
            bn.transfer_from_phases(&b_ph, Some(&self.hardware.b))?,
            pn.transfer_from_phases(&p_ph, Some(&self.hardware.p))?,
        ))
    }

    /// Complex `rows x (n_blocks k)` matrix realized by `controls` laid out
    /// as `m_blocks x n_blocks` units. Units with `kept[u] == false` are
    /// absent from the chip.
    #[allow(clippy::too_many_arguments)]
    fn realize<R: Rng + ?Sized>(
        &self,
        controls: &[Control],
        kept: Option<&[bool]>,
        m_blocks: usize,
        n_blocks: usize,
        rows: usize,
        rng: &mut R,
        noisy: bool,
    ) -> Result<ComplexMatrix> {
        let k = self.k();
        let drift = if noisy && self.noise.phase_drift_sigma > 0.0 {
            Some(Normal::new(0.0, self.noise.phase_drift_sigma).expect("validated"))
        } else {
            None
        };
        let t: Vec<Complex64> = controls
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let theta = c.theta + drift.as_ref().map_or(0.0, |n| n.sample(rng));
                self.hardware.attenuators[idx % k].transmission(theta, c.sign_phase())
            })
            .collect();
        let (b, p) = match &drift {
            Some(n) if self.noise.include_bp_phases => self.bp(Some((n, rng)))?,
            _ => self.bp::<R>(None)?,
        };
        let cols = n_blocks * k;
        let mut w = ComplexMatrix::zeros(rows, cols);
        for r in 0..rows {
            let (i, rr) = (r / k, r % k);
            for j in 0..n_blocks {
                let unit = i * n_blocks + j;
                if kept.is_some_and(|m| !m[unit]) {
                    continue;
                }
                let tu = &t[unit * k..(unit + 1) * k];
                for cc in 0..k {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for d in 0..k {
                        acc += b.get(rr, d) * tu[d] * p.get(d, cc);
                    }
                    w.set(r, j * k + cc, acc);
                }
            }
        }
        debug_assert!(m_blocks * k >= rows);
        Ok(w)
    }

    /// Complex transfer matrix of the programmed layer without dynamic
    /// noise: logical output rows by padded input columns.
    pub fn effective_matrix(&self) -> Result<ComplexMatrix> {
        let pad = self.layer.padding();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.realize(
            &self.controls,
            self.layer.mask(),
            pad.m_blocks,
            pad.n_blocks,
            pad.m,
            &mut rng,
            false,
        )
    }

    /// Runs `cols` (`width x count`, row-major; `width` is the logical or
    /// padded input width) through the chip. Drift is drawn once per call.
    pub fn simulate_columns<R: Rng + ?Sized>(
        &self,
        cols: &[f64],
        width: usize,
        count: usize,
        mode: DetectionMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let pad = self.layer.padding();
        if width != pad.n && width != pad.n_padded() {
            return Err(OsnnError::shape(
                "simulate_chip",
                format!("input width {}, chip expects {} or {}", width, pad.n, pad.n_padded()),
            ));
        }
        if cols.len() != width * count {
            return Err(OsnnError::shape(
                "simulate_chip",
                format!("{} values for {} columns of {}", cols.len(), count, width),
            ));
        }
        let w = self.realize(
            &self.controls,
            self.layer.mask(),
            pad.m_blocks,
            pad.n_blocks,
            pad.m,
            rng,
            true,
        )?;
        self.apply(&w, cols, width, count, mode, rng)
    }

    /// Runs `cols` the way a time-multiplexed chip executes a layer: every
    /// `k`-chunk of a column is sent at its own full scale (divided by its
    /// peak; all-zero chunks are skipped), each partial sum is detected
    /// separately and the partial sums are accumulated with the peaks
    /// restored. Drift is drawn once per call.
    pub fn simulate_scaled<R: Rng + ?Sized>(
        &self,
        cols: &[f64],
        width: usize,
        count: usize,
        mode: DetectionMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let pad = self.layer.padding();
        if width != pad.n && width != pad.n_padded() {
            return Err(OsnnError::shape(
                "simulate_scaled",
                format!("input width {}, chip expects {} or {}", width, pad.n, pad.n_padded()),
            ));
        }
        if cols.len() != width * count {
            return Err(OsnnError::shape(
                "simulate_scaled",
                format!("{} values for {} columns of {}", cols.len(), count, width),
            ));
        }
        let w = self.realize(
            &self.controls,
            self.layer.mask(),
            pad.m_blocks,
            pad.n_blocks,
            pad.m,
            rng,
            true,
        )?;
        let k = self.k();
        let np = pad.n_padded();
        let rows = pad.m;
        let wr = w.real_part();
        let wp: Vec<f64> = w.data().iter().map(|z| z.norm_sqr()).collect();
        let leak = self.hardware.leak();
        let input = (self.noise.input_sigma > 0.0).then(|| Normal::new(0.0, self.noise.input_sigma).expect("validated"));
        let det = (self.noise.detector_sigma > 0.0).then(|| Normal::new(0.0, self.noise.detector_sigma).expect("validated"));
        let mut y = vec![0.0; rows * count];
        let mut xn = vec![0.0; k];
        for p in 0..count {
            let mut acc = vec![0.0; rows];
            for j in 0..pad.n_blocks {
                let value = |c: usize| {
                    let r = j * k + c;
                    if r < width {
                        cols[r * count + p]
                    } else {
                        0.0
                    }
                };
                let s = (0..k).map(value).fold(0.0, f64::max);
                if s <= 0.0 {
                    continue;
                }
                for (c, v) in xn.iter_mut().enumerate() {
                    let mut a = value(c) / s;
                    if let Some(n) = &input {
                        a = (a + n.sample(rng)).clamp(0.0, 1.0);
                    }
                    *v = leak + (1.0 - leak) * a;
                }
                for (r, out) in acc.iter_mut().enumerate() {
                    let base = r * np + j * k;
                    match mode {
                        DetectionMode::Coherent => {
                            let mut part: f64 = (0..k).map(|c| wr[base + c] * xn[c]).sum();
                            if let Some(n) = &det {
                                part += n.sample(rng);
                            }
                            *out += s * part;
                        }
                        DetectionMode::MultiWavelength => {
                            let part: f64 = (0..k).map(|c| wp[base + c] * xn[c] * xn[c]).sum();
                            *out += s * s * part;
                        }
                    }
                }
            }
            for (r, v) in acc.into_iter().enumerate() {
                y[r * count + p] = match mode {
                    DetectionMode::Coherent => v,
                    DetectionMode::MultiWavelength => {
                        v.max(0.0).sqrt() + det.as_ref().map_or(0.0, |n| n.sample(rng))
                    }
                };
            }
        }
        Ok(y)
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        w: &ComplexMatrix,
        cols: &[f64],
        width: usize,
        count: usize,
        mode: DetectionMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let np = w.cols();
        let rows = w.rows();
        let mut x = vec![0.0; np * count];
        x[..width * count].copy_from_slice(cols);
        if self.noise.input_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise.input_sigma).expect("validated");
            for v in &mut x {
                *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
            }
        }
        let leak = self.hardware.leak();
        if leak > 0.0 {
            for v in &mut x {
                *v = leak + (1.0 - leak) * *v;
            }
        }
        let mut y = vec![0.0; rows * count];
        match mode {
            DetectionMode::Coherent => {
                let wr = w.real_part();
                linalg::gemm(false, false, rows, count, np, 1.0, &wr, &x, 0.0, &mut y);
            }
            DetectionMode::MultiWavelength => {
                let p: Vec<f64> = w.data().iter().map(|z| z.norm_sqr()).collect();
                let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
                linalg::gemm(false, false, rows, count, np, 1.0, &p, &x2, 0.0, &mut y);
                for v in &mut y {
                    *v = v.max(0.0).sqrt();
                }
            }
        }
        if self.noise.detector_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise.detector_sigma).expect("validated");
            for v in &mut y {
                *v += n.sample(rng);
            }
        }
        Ok(y)
    }

    /// `x` is `[width]` or `[width, count]`; the output has the same rank
    /// with `m` rows.
    pub fn simulate<R: Rng + ?Sized>(&self, x: &RealTensor, mode: DetectionMode, rng: &mut R) -> Result<RealTensor> {
        let (width, count) = match x.shape() {
            [w] => (*w, 1),
            [w, c] => (*w, *c),
            s => return Err(OsnnError::shape("simulate_chip", format!("input shape {:?}", s))),
        };
        let y = self.simulate_columns(x.data(), width, count, mode, rng)?;
        let m = self.layer.m();
        if x.shape().len() == 1 {
            RealTensor::vector(y)
        } else {
            RealTensor::matrix(m, count, y)
        }
    }

    /// The chip used as a single `k x k` BPNC with explicit controls.
    pub fn block_response<R: Rng + ?Sized>(
        &self,
        controls: &[Control],
        x: &[f64],
        mode: DetectionMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let k = self.k();
        if controls.len() != k || x.len() != k {
            return Err(OsnnError::shape(
                "block_response",
                format!("{} controls and {} inputs for k={}", controls.len(), x.len(), k),
            ));
        }
        let w = self.realize(controls, None, 1, 1, k, rng, true)?;
        self.apply(&w, x, k, 1, mode, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let chip: ChipInstance = serde_json::from_str(text)?;
        chip.noise.validate()?;
        let mut check = chip.clone();
        check.program(&chip.layer, Mapping::Nominal)?;
        Ok(chip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn simulate_chip<R: Rng + ?Sized>(
    chip: &ChipInstance,
    x: &RealTensor,
    mode: DetectionMode,
    rng: &mut R,
) -> Result<RealTensor> {
    chip.simulate(x, mode, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDistribution {
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPlan {
    /// Fresh uniform `theta` in `[0, pi]` and a random sign per sample.
    Random,
    Fixed(Vec<Control>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub inputs: InputDistribution,
    pub controls: ControlPlan,
    pub mode: DetectionMode,
}

impl Default for MeasurementPlan {
    fn default() -> Self {
        Self {
            inputs: InputDistribution::Uniform { lo: 0.0, hi: 1.0 },
            controls: ControlPlan::Random,
            mode: DetectionMode::Coherent,
        }
    }
}

/// One probe of the chip: attenuator controls, input amplitudes and the
/// detected outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub controls: Vec<Control>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Probes the chip `n_samples` times with dynamic noise active.
pub fn sample_measurements(
    chip: &ChipInstance,
    n_samples: usize,
    plan: &MeasurementPlan,
    seed: u64,
) -> Result<Vec<Measurement>> {
    if n_samples == 0 {
        return Err(OsnnError::Empty("n_samples"));
    }
    let k = chip.k();
    let InputDistribution::Uniform { lo, hi } = plan.inputs;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(OsnnError::invalid("inputs", format!("[{}, {}] not inside [0, 1]", lo, hi)));
    }
    if let ControlPlan::Fixed(c) = &plan.controls {
        if c.len() != k {
            return Err(OsnnError::shape("sample_measurements", format!("{} fixed controls for k={}", c.len(), k)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let controls = match &plan.controls {
            ControlPlan::Random => (0..k)
                .map(|_| Control {
                    theta: rng.random_range(0.0..=PI),
                    negative: rng.random_bool(0.5),
                })
                .collect(),
            ControlPlan::Fixed(c) => c.clone(),
        };
        let x: Vec<f64> = (0..k).map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect();
        let y = chip.block_response(&controls, &x, plan.mode, &mut rng)?;
        out.push(Measurement { controls, x, y });
    }
    Ok(out)
}
