use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix};

/// How physical input ports are assigned to the logical labels the stages
/// operate on.
///
/// Stage `s` always couples the label pair `(x, x ^ (1 << s))`. With
/// `Natural` routing input port `p` feeds label `p`; with `Fft` routing it
/// feeds label `bit_reverse(p)`, which is the radix-2 decimation-in-time
/// dataflow. A single wiring cannot produce both the DFT and the Sylvester
/// Hadamard matrix in natural order, so the routing is part of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    Natural,
    Fft,
}

/// Identity of a network shape, carried by every [`PhaseConfiguration`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkDescriptor {
    pub k: usize,
    pub routing: Routing,
}

impl NetworkDescriptor {
    /// Stable 64-bit FNV-1a hash of the descriptor, hex encoded.
    pub fn hash(&self) -> String {
        let text = format!("butterfly/k={}/routing={:?}", self.k, self.routing);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{:016x}", h)
    }
}

/// `log2(k)`-stage butterfly mesh of 50:50 couplers with one phase shifter
/// per coupler input arm and a final output phase column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ButterflyNetwork {
    k: usize,
    routing: Routing,
}

/// Frozen per-device deviations of one physical network.
///
/// `kappas` is indexed like [`ButterflyNetwork::couplers`]; `phase_offsets`
/// uses the same flat layout as a [`PhaseConfiguration`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkHardware {
    pub kappas: Vec<f64>,
    pub phase_offsets: Vec<f64>,
}

impl NetworkHardware {
    pub fn ideal(net: &ButterflyNetwork) -> Self {
        Self {
            kappas: vec![0.5; net.coupler_count()],
            phase_offsets: vec![0.0; net.phase_shifter_count()],
        }
    }

    fn check(&self, net: &ButterflyNetwork) -> Result<()> {
        if self.kappas.len() != net.coupler_count() || self.phase_offsets.len() != net.phase_shifter_count() {
            return Err(OsnnError::shape(
                "NetworkHardware",
                format!(
                    "{} kappas / {} offsets for a network with {} couplers / {} phase shifters",
                    self.kappas.len(),
                    self.phase_offsets.len(),
                    net.coupler_count(),
                    net.phase_shifter_count()
                ),
            ));
        }
        if let Some(bad) = self.kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return Err(OsnnError::invalid("kappa", format!("{} outside [0, 1]", bad)));
        }
        Ok(())
    }
}

/// Phase values of every phase shifter of a network, stage by stage (label
/// order inside a stage), followed by the output column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct PhaseConfiguration {
    descriptor: NetworkDescriptor,
    phases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    descriptor: NetworkDescriptor,
    descriptor_hash: String,
    phases: Vec<f64>,
}

impl TryFrom<RawConfig> for PhaseConfiguration {
    type Error = OsnnError;
    fn try_from(raw: RawConfig) -> Result<Self> {
        if raw.descriptor_hash != raw.descriptor.hash() {
            return Err(OsnnError::ConfigMismatch(format!(
                "stored hash {} does not match descriptor hash {}",
                raw.descriptor_hash,
                raw.descriptor.hash()
            )));
        }
        let net = ButterflyNetwork::new(raw.descriptor.k, raw.descriptor.routing)?;
        PhaseConfiguration::new(&net, raw.phases)
    }
}

impl From<PhaseConfiguration> for RawConfig {
    fn from(c: PhaseConfiguration) -> Self {
        RawConfig {
            descriptor_hash: c.descriptor.hash(),
            descriptor: c.descriptor,
            phases: c.phases,
        }
    }
}

impl PhaseConfiguration {
    pub fn new(net: &ButterflyNetwork, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != net.phase_shifter_count() {
            return Err(OsnnError::shape(
                "PhaseConfiguration",
                format!("expected {} phases, got {}", net.phase_shifter_count(), phases.len()),
            ));
        }
        if let Some(index) = phases.iter().position(|p| !p.is_finite()) {
            return Err(OsnnError::NonFinite { index });
        }
        let phases = phases.into_iter().map(|p| p.rem_euclid(std::f64::consts::TAU)).collect();
        Ok(Self {
            descriptor: net.descriptor(),
            phases,
        })
    }

    pub fn zeros(net: &ButterflyNetwork) -> Self {
        Self {
            descriptor: net.descriptor(),
            phases: vec![0.0; net.phase_shifter_count()],
        }
    }

    pub fn descriptor(&self) -> NetworkDescriptor {
        self.descriptor
    }

    pub fn network(&self) -> ButterflyNetwork {
        ButterflyNetwork {
            k: self.descriptor.k,
            routing: self.descriptor.routing,
        }
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn coupler(kappa: f64) -> [[Complex64; 2]; 2] {
    let t = Complex64::new((1.0 - kappa).sqrt(), 0.0);
    let c = Complex64::new(0.0, kappa.sqrt());
    [[t, c], [c, t]]
}

impl ButterflyNetwork {
    pub fn new(k: usize, routing: Routing) -> Result<Self> {
        if k < 2 || !k.is_power_of_two() {
            return Err(OsnnError::NotPowerOfTwo(k));
        }
        Ok(Self { k, routing })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn descriptor(&self) -> NetworkDescriptor {
        NetworkDescriptor {
            k: self.k,
            routing: self.routing,
        }
    }

    pub fn stages(&self) -> usize {
        self.k.trailing_zeros() as usize
    }

    pub fn coupler_count(&self) -> usize {
        self.k / 2 * self.stages()
    }

    pub fn phase_shifter_count(&self) -> usize {
        self.k * self.stages() + self.k
    }

    /// Label pairs `(lo, hi)` coupled in `stage`, ordered by `lo`.
    pub fn pairs(&self, stage: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let bit = 1 << stage;
        (0..self.k).filter(move |x| x & bit == 0).map(move |x| (x, x | bit))
    }

    /// Every coupler as `(stage, lo, hi)` in hardware index order.
    pub fn couplers(&self) -> Vec<(usize, usize, usize)> {
        (0..self.stages())
            .flat_map(|s| self.pairs(s).map(move |(lo, hi)| (s, lo, hi)))
            .collect()
    }

    /// Logical label driven by physical input port `port`.
    pub fn input_label(&self, port: usize) -> usize {
        match self.routing {
            Routing::Natural => port,
            Routing::Fft => port.reverse_bits() >> (usize::BITS as usize - self.stages()),
        }
    }

    /// Physical waveguide orderings from input ports, through each coupler
    /// column (pairs adjacent), to output ports. Entry `[c][pos]` is the
    /// logical label at position `pos` of column `c`.
    fn layouts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![(0..self.k).map(|p| self.input_label(p)).collect::<Vec<_>>()];
        for s in 0..self.stages() {
            out.push(self.pairs(s).flat_map(|(lo, hi)| [lo, hi]).collect());
        }
        out.push((0..self.k).collect());
        out
    }

    /// Waveguide crossings needed to wire the stages with planar routing:
    /// the inversion count between consecutive physical orderings.
    pub fn crossing_count(&self) -> usize {
        self.layouts()
            .windows(2)
            .map(|w| crossings_between(&w[0], &w[1]).0)
            .sum()
    }

    /// Largest number of crossings met by any single light path.
    pub fn crossing_depth(&self) -> usize {
        let layouts = self.layouts();
        let mut per_label = vec![0usize; self.k];
        for w in layouts.windows(2) {
            let (_, per) = crossings_between(&w[0], &w[1]);
            for (label, c) in per.into_iter().enumerate() {
                per_label[label] += c;
            }
        }
        per_label.into_iter().max().unwrap_or(0)
    }

    fn input_permutation(&self) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(self.k, self.k);
        for port in 0..self.k {
            m.set(self.input_label(port), port, Complex64::new(1.0, 0.0));
        }
        m
    }

    fn check_config(&self, config: &PhaseConfiguration) -> Result<()> {
        if config.descriptor != self.descriptor() {
            return Err(OsnnError::ConfigMismatch(format!(
                "configuration built for {:?}, network is {:?}",
                config.descriptor,
                self.descriptor()
            )));
        }
        Ok(())
    }

    /// End-to-end transfer matrix with ideal devices.
    pub fn transfer_matrix(&self, config: &PhaseConfiguration) -> Result<ComplexMatrix> {
        self.check_config(config)?;
        self.transfer_from_phases(&config.phases, None)
    }

    /// Transfer matrix of a physical instance with per-device deviations.
    pub fn transfer_matrix_with(&self, config: &PhaseConfiguration, hw: &NetworkHardware) -> Result<ComplexMatrix> {
        self.check_config(config)?;
        self.transfer_from_phases(&config.phases, Some(hw))
    }

    /// Transfer matrix for a raw phase vector (length checked).
    pub fn transfer_from_phases(&self, phases: &[f64], hw: Option<&NetworkHardware>) -> Result<ComplexMatrix> {
        self.check_phases(phases, hw)?;
        let mut u = self.input_permutation();
        self.apply_columns(&mut u, phases, hw, 0..=self.stages(), &mut |_, _| {});
        Ok(u)
    }

    fn check_phases(&self, phases: &[f64], hw: Option<&NetworkHardware>) -> Result<()> {
        if phases.len() != self.phase_shifter_count() {
            return Err(OsnnError::shape(
                "transfer_matrix",
                format!("expected {} phases, got {}", self.phase_shifter_count(), phases.len()),
            ));
        }
        if let Some(hw) = hw {
            hw.check(self)?;
        }
        Ok(())
    }

    fn phase(&self, phases: &[f64], hw: Option<&NetworkHardware>, idx: usize) -> f64 {
        phases[idx] + hw.map_or(0.0, |h| h.phase_offsets[idx])
    }

    /// Applies phase columns (and the couplers that follow each, except for
    /// the output column) in `range` to the rows of `u`. `visit` sees the
    /// matrix right before each phase column is applied.
    fn apply_columns(
        &self,
        u: &mut ComplexMatrix,
        phases: &[f64],
        hw: Option<&NetworkHardware>,
        range: std::ops::RangeInclusive<usize>,
        visit: &mut dyn FnMut(usize, &ComplexMatrix),
    ) {
        let k = self.k;
        let stages = self.stages();
        for col in range {
            visit(col, u);
            for x in 0..k {
                let ph = Complex64::from_polar(1.0, self.phase(phases, hw, col * k + x));
                for c in 0..k {
                    let v = u.get(x, c) * ph;
                    u.set(x, c, v);
                }
            }
            if col == stages {
                break;
            }
            for (i, (lo, hi)) in self.pairs(col).enumerate() {
                let kappa = hw.map_or(0.5, |h| h.kappas[col * k / 2 + i]);
                let m = coupler(kappa);
                for c in 0..k {
                    let a = u.get(lo, c);
                    let b = u.get(hi, c);
                    u.set(lo, c, m[0][0] * a + m[0][1] * b);
                    u.set(hi, c, m[1][0] * a + m[1][1] * b);
                }
            }
        }
    }

    /// Transfer matrix and `df/dphi` for every phase, where `f` is a real
    /// function of the transfer matrix whose first-order change is
    /// `Re(sum conj(G) * dU)` and `grad_u` computes `G` from `U`.
    pub fn phase_gradient(
        &self,
        phases: &[f64],
        hw: Option<&NetworkHardware>,
        grad_u: impl FnOnce(&ComplexMatrix) -> ComplexMatrix,
    ) -> Result<(ComplexMatrix, Vec<f64>)> {
        self.check_phases(phases, hw)?;
        let k = self.k;
        let stages = self.stages();
        let mut prefixes = Vec::with_capacity(stages + 1);
        let mut u = self.input_permutation();
        self.apply_columns(&mut u, phases, hw, 0..=stages, &mut |_, m| prefixes.push(m.clone()));

        let mut g = grad_u(&u);
        let mut out = vec![0.0; phases.len()];
        for col in (0..=stages).rev() {
            if col < stages {
                // Through the coupler column: g <- C^H g.
                for (i, (lo, hi)) in self.pairs(col).enumerate() {
                    let kappa = hw.map_or(0.5, |h| h.kappas[col * k / 2 + i]);
                    let m = coupler(kappa);
                    for c in 0..k {
                        let a = g.get(lo, c);
                        let b = g.get(hi, c);
                        g.set(lo, c, m[0][0].conj() * a + m[1][0].conj() * b);
                        g.set(hi, c, m[0][1].conj() * a + m[1][1].conj() * b);
                    }
                }
            }
            let before = &prefixes[col];
            for x in 0..k {
                let ph = Complex64::from_polar(1.0, self.phase(phases, hw, col * k + x));
                let mut acc = Complex64::new(0.0, 0.0);
                for c in 0..k {
                    acc += g.get(x, c).conj() * before.get(x, c);
                }
                out[col * k + x] = (Complex64::i() * ph * acc).re;
                for c in 0..k {
                    let v = g.get(x, c) * ph.conj();
                    g.set(x, c, v);
                }
            }
        }
        Ok((u, out))
    }
}

/// Inversions between two orderings of the same labels, in total and per
/// label.
fn crossings_between(from: &[usize], to: &[usize]) -> (usize, Vec<usize>) {
    let k = from.len();
    let mut target_pos = vec![0; k];
    for (pos, &label) in to.iter().enumerate() {
        target_pos[label] = pos;
    }
    let dest: Vec<usize> = from.iter().map(|&l| target_pos[l]).collect();
    let mut per = vec![0; k];
    let mut total = 0;
    for i in 0..k {
        for j in i + 1..k {
            if dest[i] > dest[j] {
                total += 1;
                per[from[i]] += 1;
                per[from[j]] += 1;
            }
        }
    }
    (total, per)
}

/// The 2x2 transfer matrix of a lossless coupler with power ratio `kappa`.
pub(crate) fn coupler_matrix(kappa: f64) -> ComplexMatrix {
    let m = coupler(kappa);
    ComplexMatrix::from_fn(2, 2, |r, c| m[r][c])
}

/// `(1/sqrt 2) [[1, i], [i, 1]]`.
pub fn fifty_fifty() -> ComplexMatrix {
    ComplexMatrix::from_fn(2, 2, |r, c| {
        if r == c {
            Complex64::new(FRAC_1_SQRT_2, 0.0)
        } else {
            Complex64::new(0.0, FRAC_1_SQRT_2)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_follow_closed_forms() {
        for k in [2, 4, 8, 16, 32] {
            let net = ButterflyNetwork::new(k, Routing::Fft).unwrap();
            let l = k.trailing_zeros() as usize;
            assert_eq!(net.coupler_count(), k / 2 * l);
            assert_eq!(net.couplers().len(), k / 2 * l);
            assert_eq!(net.phase_shifter_count(), k * l + k);
        }
        assert!(matches!(
            ButterflyNetwork::new(6, Routing::Natural),
            Err(OsnnError::NotPowerOfTwo(6))
        ));
    }

    #[test]
    fn k2_zero_phases_is_single_coupler() {
        let net = ButterflyNetwork::new(2, Routing::Natural).unwrap();
        let u = net.transfer_matrix(&PhaseConfiguration::zeros(&net)).unwrap();
        assert!(u.max_abs_diff(&fifty_fifty()) < 1e-15);
    }

    #[test]
    fn random_configs_are_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [2, 4, 8, 16] {
            for routing in [Routing::Natural, Routing::Fft] {
                let net = ButterflyNetwork::new(k, routing).unwrap();
                let phases = (0..net.phase_shifter_count())
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                let cfg = PhaseConfiguration::new(&net, phases).unwrap();
                assert!(net.transfer_matrix(&cfg).unwrap().unitarity_error() < 1e-10);
            }
        }
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let a = ButterflyNetwork::new(4, Routing::Natural).unwrap();
        let b = ButterflyNetwork::new(4, Routing::Fft).unwrap();
        let cfg = PhaseConfiguration::zeros(&a);
        assert!(matches!(b.transfer_matrix(&cfg), Err(OsnnError::ConfigMismatch(_))));
        assert!(PhaseConfiguration::new(&a, vec![0.0; 3]).is_err());
        assert!(a.transfer_from_phases(&[0.0; 5], None).is_err());
    }

    #[test]
    fn configuration_json_round_trip_checks_hash() {
        let net = ButterflyNetwork::new(4, Routing::Fft).unwrap();
        let cfg = PhaseConfiguration::new(&net, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
        let text = cfg.to_json().unwrap();
        assert_eq!(PhaseConfiguration::from_json(&text).unwrap(), cfg);
        let tampered = text.replace(&net.descriptor().hash(), "0000000000000000");
        assert!(PhaseConfiguration::from_json(&tampered).is_err());
    }

    #[test]
    fn phase_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ButterflyNetwork::new(8, Routing::Fft).unwrap();
        let mut hw = NetworkHardware::ideal(&net);
        for kappa in &mut hw.kappas {
            *kappa = rng.random_range(0.4..0.6);
        }
        let target = ComplexMatrix::from_fn(8, 8, |_, _| Complex64::new(rng.random(), rng.random()));
        let phases: Vec<f64> = (0..net.phase_shifter_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
        // f(U) = |tr(T^H U)|^2, G = 2 tau T.
        let f = |p: &[f64]| {
            let u = net.transfer_from_phases(p, Some(&hw)).unwrap();
            let tau: Complex64 = target.data().iter().zip(u.data()).map(|(t, x)| t.conj() * x).sum();
            tau.norm_sqr()
        };
        let (_, grad) = net
            .phase_gradient(&phases, Some(&hw), |u| {
                let tau: Complex64 = target.data().iter().zip(u.data()).map(|(t, x)| t.conj() * x).sum();
                target.scale(tau * 2.0)
            })
            .unwrap();
        for i in 0..phases.len() {
            let mut p = phases.clone();
            p[i] += 1e-6;
            let up = f(&p);
            p[i] -= 2e-6;
            let down = f(&p);
            let numeric = (up - down) / 2e-6;
            assert!((numeric - grad[i]).abs() < 1e-6 * numeric.abs().max(1.0), "phase {}", i);
        }
    }

    #[test]
    fn crossing_counts_are_zero_for_k2() {
        let net = ButterflyNetwork::new(2, Routing::Fft).unwrap();
        assert_eq!(net.crossing_count(), 0);
        let net = ButterflyNetwork::new(8, Routing::Fft).unwrap();
        assert!(net.crossing_count() > 0);
        assert!(net.crossing_depth() <= net.crossing_count());
    }
}
