use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};

/// Price of one component instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Price {
    pub area_mm2: f64,
    pub delay_ps: f64,
    pub static_mw: f64,
    pub energy_fj_per_bit: f64,
}

/// Waveguide routing between stages, as group delay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalPath {
    pub group_index: f64,
    /// Path length of one stage of an OSNN layer (butterfly, splitter or
    /// attenuator column, including routing).
    pub osnn_stage_um: f64,
    /// Path length of one MZI column of a mesh.
    pub mzi_stage_um: f64,
}

const C_UM_PER_PS: f64 = 299.792_458;

impl OpticalPath {
    pub fn osnn_stage_ps(&self) -> f64 {
        self.osnn_stage_um * self.group_index / C_UM_PER_PS
    }

    pub fn mzi_stage_ps(&self) -> f64 {
        self.mzi_stage_um * self.group_index / C_UM_PER_PS
    }
}

/// Component prices plus the optical-path and conversion parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentLibrary {
    pub name: String,
    pub components: BTreeMap<String, Price>,
    pub optical_path: OpticalPath,
    /// Bits carried per modulated sample; scales per-bit energies.
    pub bits_per_sample: f64,
    /// Energy to reprogram one trainable device.
    pub reconfig_energy_pj: f64,
}

const PRESETS: &[(&str, &str)] = &[
    ("paper-defaults", include_str!("../../presets/paper-defaults.toml")),
    ("compact-devices", include_str!("../../presets/compact-devices.toml")),
];

impl ComponentLibrary {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| OsnnError::Unknown {
            kind: "component library",
            name: name.to_string(),
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let lib: Self = toml::from_str(text).map_err(|e| OsnnError::invalid("component library", e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: String, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(OsnnError::invalid(name, format!("{} must be finite and >= 0", v)))
            }
        };
        for (c, p) in &self.components {
            check(format!("{}.area_mm2", c), p.area_mm2)?;
            check(format!("{}.delay_ps", c), p.delay_ps)?;
            check(format!("{}.static_mw", c), p.static_mw)?;
            check(format!("{}.energy_fj_per_bit", c), p.energy_fj_per_bit)?;
        }
        check("optical_path.group_index".into(), self.optical_path.group_index)?;
        check("optical_path.osnn_stage_um".into(), self.optical_path.osnn_stage_um)?;
        check("optical_path.mzi_stage_um".into(), self.optical_path.mzi_stage_um)?;
        check("bits_per_sample".into(), self.bits_per_sample)?;
        check("reconfig_energy_pj".into(), self.reconfig_energy_pj)
    }

    pub fn price(&self, component: &str) -> Result<Price> {
        self.components
            .get(component)
            .copied()
            .ok_or_else(|| OsnnError::MissingPrice(component.to_string()))
    }

    /// Every price (and the reconfiguration energy) multiplied by `factor`.
    /// The optical path is left alone.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for p in out.components.values_mut() {
            p.area_mm2 *= factor;
            p.delay_ps *= factor;
            p.static_mw *= factor;
            p.energy_fj_per_bit *= factor;
        }
        out.reconfig_energy_pj *= factor;
        out
    }
}
