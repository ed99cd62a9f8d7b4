//! Analytic hardware cost of one matrix-vector multiply: component counts,
//! area, delay and power for OSNN layers and an MZI-mesh SVD baseline.

mod library;

use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::butterfly::{ButterflyNetwork, Routing};
use crate::error::{OsnnError, Result};
use crate::training::LayerMask;

pub use library::{ComponentLibrary, OpticalPath, Price};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Osnn,
    MziSvd,
}

impl FromStr for Architecture {
    type Err = OsnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "osnn" => Ok(Self::Osnn),
            "mzi_svd" => Ok(Self::MziSvd),
            _ => Err(OsnnError::Unknown {
                kind: "architecture",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Osnn => "osnn",
            Self::MziSvd => "mzi_svd",
        })
    }
}

/// Assumptions about the parts of an OSNN layer outside the B and P units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingModel {
    /// Wiring of the butterfly networks; decides their crossing counts.
    pub butterfly: Routing,
    /// Crossings charged per waveguide of each Σ unit for the fanout and
    /// combiner mesh.
    pub fanout_crossings_per_lane: usize,
}

impl Default for RoutingModel {
    fn default() -> Self {
        Self {
            butterfly: Routing::Fft,
            fanout_crossings_per_lane: 1,
        }
    }
}

/// Component counts of one layer.
///
/// Attenuators are listed for reference only; their couplers and phase
/// shifters are already included in the other fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub couplers: usize,
    pub phase_shifters: usize,
    /// The phase shifter of every attenuator that only sets the sign.
    pub sign_phase_shifters: usize,
    pub crossings: usize,
    pub splitters: usize,
    pub attenuators: usize,
    pub modulators: usize,
    pub photodetectors: usize,
    pub adcs: usize,
    pub trainable_devices: usize,
}

impl ComponentCounts {
    pub fn total_phase_shifters(&self) -> usize {
        self.phase_shifters + self.sign_phase_shifters
    }

    /// `(library name, count)` of every priced component.
    pub fn priced(&self) -> [(&'static str, usize); 7] {
        [
            ("coupler", self.couplers),
            ("phase_shifter", self.total_phase_shifters()),
            ("crossing", self.crossings),
            ("splitter", self.splitters),
            ("modulator", self.modulators),
            ("photodetector", self.photodetectors),
            ("adc", self.adcs),
        ]
    }
}

impl Add for ComponentCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            couplers: self.couplers + o.couplers,
            phase_shifters: self.phase_shifters + o.phase_shifters,
            sign_phase_shifters: self.sign_phase_shifters + o.sign_phase_shifters,
            crossings: self.crossings + o.crossings,
            splitters: self.splitters + o.splitters,
            attenuators: self.attenuators + o.attenuators,
            modulators: self.modulators + o.modulators,
            photodetectors: self.photodetectors + o.photodetectors,
            adcs: self.adcs + o.adcs,
            trainable_devices: self.trainable_devices + o.trainable_devices,
        }
    }
}

fn check_dims(arch: Architecture, m: usize, n: usize, k: usize) -> Result<()> {
    if k < 2 || m < k || n < k {
        return Err(OsnnError::invalid("dims", format!("need m, n >= k >= 2, got m={}, n={}, k={}", m, n, k)));
    }
    if arch == Architecture::Osnn && !k.is_power_of_two() {
        return Err(OsnnError::NotPowerOfTwo(k));
    }
    Ok(())
}

fn ceil_log2(x: usize) -> usize {
    x.next_power_of_two().trailing_zeros() as usize
}

pub fn count_components(arch: Architecture, m: usize, n: usize, k: usize, routing: &RoutingModel) -> Result<ComponentCounts> {
    check_dims(arch, m, n, k)?;
    match arch {
        Architecture::Osnn => {
            let mask = LayerMask {
                m_blocks: m.div_ceil(k),
                n_blocks: n.div_ceil(k),
                kept: vec![true; m.div_ceil(k) * n.div_ceil(k)],
            };
            let mut counts = count_masked(k, &mask, routing)?;
            counts.modulators = n;
            counts.photodetectors = m;
            counts.adcs = m;
            Ok(counts)
        }
        Architecture::MziSvd => {
            let mzis = m * (m - 1) / 2 + n * (n - 1) / 2;
            let diag = m.min(n);
            Ok(ComponentCounts {
                couplers: 2 * mzis + 2 * diag,
                phase_shifters: 2 * mzis + diag,
                sign_phase_shifters: diag,
                attenuators: diag,
                modulators: n,
                photodetectors: m,
                adcs: m,
                trainable_devices: m.max(n).pow(2),
                ..Default::default()
            })
        }
    }
}

/// Counts of an OSNN layer whose Σ units are kept according to `mask`.
///
/// B and P units whose whole row or column of Σ units is pruned are dropped
/// with them. Modulators, detectors and ADCs are not included.
pub fn count_masked(k: usize, mask: &LayerMask, routing: &RoutingModel) -> Result<ComponentCounts> {
    let net = ButterflyNetwork::new(k, routing.butterfly)?;
    if mask.kept.len() != mask.m_blocks * mask.n_blocks {
        return Err(OsnnError::ShapeMismatch {
            op: "count_masked",
            detail: format!("{} flags for a {}x{} grid", mask.kept.len(), mask.m_blocks, mask.n_blocks),
        });
    }
    let kept = |i: usize, j: usize| mask.kept[i * mask.n_blocks + j];
    let col_kept: Vec<usize> = (0..mask.n_blocks).map(|j| (0..mask.m_blocks).filter(|&i| kept(i, j)).count()).collect();
    let row_kept: Vec<usize> = (0..mask.m_blocks).map(|i| (0..mask.n_blocks).filter(|&j| kept(i, j)).count()).collect();
    let units: usize = col_kept.iter().sum();
    let unitaries = col_kept.iter().chain(&row_kept).filter(|&&c| c > 0).count();
    let tree = |c: &usize| c.saturating_sub(1);
    let splitters = k * (col_kept.iter().map(tree).sum::<usize>() + row_kept.iter().map(tree).sum::<usize>());
    let attenuators = units * k;
    Ok(ComponentCounts {
        couplers: unitaries * net.coupler_count() + 2 * attenuators,
        phase_shifters: unitaries * net.phase_shifter_count() + attenuators,
        sign_phase_shifters: attenuators,
        crossings: unitaries * net.crossing_count() + attenuators * routing.fanout_crossings_per_lane,
        splitters,
        attenuators,
        trainable_devices: attenuators,
        ..Default::default()
    })
}

/// Sum of count times area over every priced component.
pub fn estimate_area(counts: &ComponentCounts, lib: &ComponentLibrary) -> Result<f64> {
    let mut area = 0.0;
    for (name, count) in counts.priced() {
        if count > 0 {
            area += count as f64 * lib.price(name)?.area_mm2;
        }
    }
    Ok(area)
}

/// Number of stages on the longest input to output route.
pub fn optical_stages(arch: Architecture, m: usize, n: usize, k: usize) -> Result<usize> {
    check_dims(arch, m, n, k)?;
    Ok(match arch {
        // P, fanout tree, attenuators, combiner tree, B.
        Architecture::Osnn => {
            let l = k.trailing_zeros() as usize;
            2 * l + 1 + ceil_log2(m.div_ceil(k)) + ceil_log2(n.div_ceil(k))
        }
        // Rectangular meshes are as deep as they are wide, plus the diagonal.
        Architecture::MziSvd => m + n + 1,
    })
}

pub fn optical_path_delay(arch: Architecture, m: usize, n: usize, k: usize, lib: &ComponentLibrary) -> Result<f64> {
    let stages = optical_stages(arch, m, n, k)? as f64;
    Ok(stages
        * match arch {
            Architecture::Osnn => lib.optical_path.osnn_stage_ps(),
            Architecture::MziSvd => lib.optical_path.mzi_stage_ps(),
        })
}

/// Modulator, detector and ADC delays plus the optical path, in ps.
pub fn estimate_delay(arch: Architecture, m: usize, n: usize, k: usize, lib: &ComponentLibrary) -> Result<f64> {
    let optical = optical_path_delay(arch, m, n, k, lib)?;
    Ok(lib.price("modulator")?.delay_ps + lib.price("photodetector")?.delay_ps + lib.price("adc")?.delay_ps + optical)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    /// MVMs per second.
    pub rate_hz: f64,
    pub static_w: f64,
    pub dynamic_w: f64,
    pub reconfig_w: f64,
    pub power_w: f64,
    pub energy_per_mvm_pj: f64,
    /// `None` when the power is zero.
    pub tops_per_w: Option<f64>,
}

/// Power at one MVM per delay period.
///
/// Every component draws `static_mw` plus `energy_fj_per_bit` for each bit
/// it handles; weights are rewritten `reconfig_rate` times per second.
pub fn estimate_energy(
    arch: Architecture,
    m: usize,
    n: usize,
    k: usize,
    lib: &ComponentLibrary,
    routing: &RoutingModel,
    reconfig_rate: f64,
) -> Result<EnergyEstimate> {
    if !(reconfig_rate >= 0.0 && reconfig_rate.is_finite()) {
        return Err(OsnnError::invalid("reconfig_rate", format!("{} must be >= 0", reconfig_rate)));
    }
    let counts = count_components(arch, m, n, k, routing)?;
    let delay = estimate_delay(arch, m, n, k, lib)?;
    energy_of(&counts, delay, (m, n), lib, reconfig_rate)
}

fn energy_of(
    counts: &ComponentCounts,
    delay_ps: f64,
    (m, n): (usize, usize),
    lib: &ComponentLibrary,
    reconfig_rate: f64,
) -> Result<EnergyEstimate> {
    let rate_hz = 1e12 / delay_ps;
    let mut static_w = 0.0;
    let mut dynamic_w = 0.0;
    for (name, count) in counts.priced() {
        if count == 0 {
            continue;
        }
        let p = lib.price(name)?;
        static_w += count as f64 * p.static_mw * 1e-3;
        dynamic_w += count as f64 * p.energy_fj_per_bit * 1e-15 * lib.bits_per_sample * rate_hz;
    }
    let reconfig_w = counts.trainable_devices as f64 * lib.reconfig_energy_pj * 1e-12 * reconfig_rate;
    let power_w = static_w + dynamic_w + reconfig_w;
    let ops = 2.0 * (m * n) as f64;
    Ok(EnergyEstimate {
        rate_hz,
        static_w,
        dynamic_w,
        reconfig_w,
        power_w,
        energy_per_mvm_pj: power_w / rate_hz * 1e12,
        tops_per_w: (power_w > 0.0).then(|| ops * rate_hz / 1e12 / power_w),
    })
}

/// Throughput factor of running `k` wavelengths through one chip.
pub fn wdm_multiplier(k: usize) -> Result<usize> {
    if k < 2 {
        return Err(OsnnError::invalid("k", format!("{} must be >= 2", k)));
    }
    Ok(k - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub architecture: Architecture,
    pub library: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub counts: ComponentCounts,
    pub area_mm2: f64,
    pub delay_ps: f64,
    pub optical_delay_ps: f64,
    pub energy: EnergyEstimate,
    pub ops_per_mvm: usize,
    pub wdm: usize,
    pub tops: f64,
    pub tops_per_mm2: f64,
    /// Fraction of Σ units removed by the mask the report was built with.
    pub pruned_fraction: f64,
}

impl CostReport {
    pub fn new(
        arch: Architecture,
        m: usize,
        n: usize,
        k: usize,
        lib: &ComponentLibrary,
        routing: &RoutingModel,
        reconfig_rate: f64,
    ) -> Result<Self> {
        let counts = count_components(arch, m, n, k, routing)?;
        Self::from_counts(arch, m, n, k, counts, 0.0, lib, reconfig_rate)
    }

    /// OSNN report with pruned Σ units, and the B and P units only they
    /// used, left out.
    pub fn with_mask(
        m: usize,
        n: usize,
        k: usize,
        mask: &LayerMask,
        lib: &ComponentLibrary,
        routing: &RoutingModel,
        reconfig_rate: f64,
    ) -> Result<Self> {
        check_dims(Architecture::Osnn, m, n, k)?;
        if mask.m_blocks != m.div_ceil(k) || mask.n_blocks != n.div_ceil(k) {
            return Err(OsnnError::ShapeMismatch {
                op: "CostReport::with_mask",
                detail: format!("{}x{} mask for a {}x{} layer with k={}", mask.m_blocks, mask.n_blocks, m, n, k),
            });
        }
        let mut counts = count_masked(k, mask, routing)?;
        counts.modulators = n;
        counts.photodetectors = m;
        counts.adcs = m;
        let total = mask.kept.len();
        let pruned = mask.kept.iter().filter(|k| !**k).count() as f64 / total as f64;
        Self::from_counts(Architecture::Osnn, m, n, k, counts, pruned, lib, reconfig_rate)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_counts(
        arch: Architecture,
        m: usize,
        n: usize,
        k: usize,
        counts: ComponentCounts,
        pruned_fraction: f64,
        lib: &ComponentLibrary,
        reconfig_rate: f64,
    ) -> Result<Self> {
        let area_mm2 = estimate_area(&counts, lib)?;
        let delay_ps = estimate_delay(arch, m, n, k, lib)?;
        let optical_delay_ps = optical_path_delay(arch, m, n, k, lib)?;
        let energy = energy_of(&counts, delay_ps, (m, n), lib, reconfig_rate)?;
        let ops_per_mvm = 2 * m * n;
        let tops = ops_per_mvm as f64 * energy.rate_hz / 1e12;
        Ok(Self {
            architecture: arch,
            library: lib.name.clone(),
            m,
            n,
            k,
            counts,
            area_mm2,
            delay_ps,
            optical_delay_ps,
            energy,
            ops_per_mvm,
            wdm: 1,
            tops,
            tops_per_mm2: if area_mm2 > 0.0 { tops / area_mm2 } else { 0.0 },
            pruned_fraction,
        })
    }

    /// Multiplies throughput and compute density by `factor`.
    pub fn with_wdm(mut self, factor: usize) -> Self {
        let f = factor as f64 / self.wdm as f64;
        self.tops *= f;
        self.tops_per_mm2 *= f;
        self.wdm = factor;
        self
    }

    /// Recomputes the derived metrics from the stored fields.
    pub fn check(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
        let fail = |what: &str| Err(OsnnError::invalid("cost report", format!("{} is inconsistent", what)));
        if self.ops_per_mvm != 2 * self.m * self.n {
            return fail("ops_per_mvm");
        }
        if !close(self.energy.rate_hz, 1e12 / self.delay_ps) {
            return fail("rate_hz");
        }
        let tops = self.ops_per_mvm as f64 * self.energy.rate_hz / 1e12 * self.wdm as f64;
        if !close(self.tops, tops) {
            return fail("tops");
        }
        if self.area_mm2 > 0.0 && !close(self.tops_per_mm2, tops / self.area_mm2) {
            return fail("tops_per_mm2");
        }
        let e = &self.energy;
        if !close(e.power_w, e.static_w + e.dynamic_w + e.reconfig_w) {
            return fail("power_w");
        }
        if !close(e.energy_per_mvm_pj, e.power_w / e.rate_hz * 1e12) {
            return fail("energy_per_mvm_pj");
        }
        if let Some(t) = e.tops_per_w {
            if !close(t, self.ops_per_mvm as f64 * e.rate_hz / 1e12 / e.power_w) {
                return fail("tops_per_w");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| OsnnError::invalid("cost report", e.to_string()))
    }

    /// Aligned two-column table.
    pub fn table(&self) -> String {
        let c = &self.counts;
        let rows: Vec<(&str, String)> = vec![
            ("architecture", self.architecture.to_string()),
            ("library", self.library.clone()),
            ("m x n (k)", format!("{} x {} ({})", self.m, self.n, self.k)),
            ("couplers", c.couplers.to_string()),
            ("phase shifters", format!("{} (+{} sign)", c.phase_shifters, c.sign_phase_shifters)),
            ("crossings", c.crossings.to_string()),
            ("splitters", c.splitters.to_string()),
            ("attenuators", c.attenuators.to_string()),
            ("modulators", c.modulators.to_string()),
            ("photodetectors", c.photodetectors.to_string()),
            ("adcs", c.adcs.to_string()),
            ("trainable devices", c.trainable_devices.to_string()),
            ("area (mm2)", format!("{:.4}", self.area_mm2)),
            ("delay (ps)", format!("{:.2}", self.delay_ps)),
            ("optical path (ps)", format!("{:.2}", self.optical_delay_ps)),
            ("power (W)", format!("{:.4}", self.energy.power_w)),
            ("energy per MVM (pJ)", format!("{:.3}", self.energy.energy_per_mvm_pj)),
            ("ops per MVM", self.ops_per_mvm.to_string()),
            ("wdm", self.wdm.to_string()),
            ("TOPS", format!("{:.3}", self.tops)),
            ("TOPS/mm2", format!("{:.3}", self.tops_per_mm2)),
            (
                "TOPS/W",
                self.energy.tops_per_w.map_or_else(|| "-".to_string(), |t| format!("{:.3}", t)),
            ),
            ("pruned fraction", format!("{:.4}", self.pruned_fraction)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{:<width$}  {}\n", k, v, width = width)).collect()
    }
}
