use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::butterfly::{ButterflyNetwork, NetworkHardware, PhaseConfiguration};
use crate::devices::{AttenuatorHardware, ChipHardware, Control, Measurement};
use crate::error::{OsnnError, Result};
use crate::layers::HardwareTransfer;
use crate::numerics::{Complex64, ComplexMatrix, Graph, RealTensor, Var};

/// White-box model of one BPNC: estimated coupler ratios and phase offsets
/// of both butterfly networks, per-attenuator parameters and the input
/// leak, all fitted from measurements.
///
/// Only identifiable offsets are fitted. The first B column and the last P
/// column sit on the attenuator waveguides and are folded into each
/// attenuator's `sign_offset`. A phase common to both arms of a coupler
/// passes through it unchanged, so in every other column the offset of the
/// lower arm of each coupler is moved towards the attenuators and held at
/// zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpeModel {
    pub b_config: PhaseConfiguration,
    pub p_config: PhaseConfiguration,
    pub b: NetworkHardware,
    pub p: NetworkHardware,
    pub attenuators: Vec<AttenuatorHardware>,
    /// Input amplitude leaking through modulators commanded to 0.
    pub leak: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpeBudget {
    pub epochs: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Training stops once the MSE falls to this value.
    pub tolerance: f64,
}

impl Default for DpeBudget {
    fn default() -> Self {
        Self {
            epochs: 1500,
            learning_rate: 0.01,
            holdout_fraction: 0.2,
            seed: 0,
            tolerance: 1e-20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpeFit {
    pub model: DpeModel,
    pub train_rmse: f64,
    pub holdout_rmse: f64,
    /// Training MSE per epoch.
    pub trace: Vec<f64>,
}

/// Slots of the free parameter vector.
struct Layout {
    k: usize,
    stages: usize,
    /// Flat offset indices that are fitted; the rest stay at zero.
    b_free: Vec<usize>,
    p_free: Vec<usize>,
}

impl Layout {
    fn couplers(&self) -> usize {
        self.k / 2 * self.stages
    }
    fn b_kappa(&self) -> usize {
        0
    }
    fn p_kappa(&self) -> usize {
        self.couplers()
    }
    fn b_phase(&self) -> usize {
        2 * self.couplers()
    }
    fn p_phase(&self) -> usize {
        self.b_phase() + self.b_free.len()
    }
    fn att(&self) -> usize {
        self.p_phase() + self.p_free.len()
    }
    fn leak(&self) -> usize {
        self.att() + 4 * self.k
    }
    fn len(&self) -> usize {
        self.leak() + 1
    }

    /// `(label, parameter)` of the fitted offsets in phase column `col`.
    fn column(&self, free: &[usize], base: usize, col: usize) -> Vec<(usize, usize)> {
        free.iter()
            .enumerate()
            .filter(|(_, &f)| f / self.k == col)
            .map(|(pos, &f)| (f % self.k, base + pos))
            .collect()
    }
}

impl DpeModel {
    /// Ideal devices for the given programmed networks.
    pub fn nominal(b_config: &PhaseConfiguration, p_config: &PhaseConfiguration) -> Result<Self> {
        let (bn, pn) = (b_config.network(), p_config.network());
        if bn.k() != pn.k() {
            return Err(OsnnError::ConfigMismatch("B and P sizes differ".into()));
        }
        Ok(Self {
            b_config: b_config.clone(),
            p_config: p_config.clone(),
            b: NetworkHardware::ideal(&bn),
            p: NetworkHardware::ideal(&pn),
            attenuators: vec![AttenuatorHardware::ideal(); bn.k()],
            leak: 0.0,
        })
    }

    /// The model that exactly describes `hw`, with its offsets moved into
    /// the fitted slots.
    pub fn from_hardware(b_config: &PhaseConfiguration, p_config: &PhaseConfiguration, hw: &ChipHardware) -> Result<Self> {
        let mut model = Self::nominal(b_config, p_config)?;
        let (bn, pn) = (b_config.network(), p_config.network());
        let k = bn.k();
        let stages = bn.stages();
        if hw.attenuators.len() != k {
            return Err(OsnnError::ConfigMismatch(format!("{} attenuators for k={}", hw.attenuators.len(), k)));
        }
        let mut b = hw.b.phase_offsets.clone();
        let mut p = hw.p.phase_offsets.clone();
        for c in 0..stages {
            for (lo, hi) in pn.pairs(c) {
                let e = p[c * k + lo];
                for x in [lo, hi] {
                    p[c * k + x] -= e;
                    p[(c + 1) * k + x] += e;
                }
            }
        }
        for c in (0..stages).rev() {
            for (lo, hi) in bn.pairs(c) {
                let e = b[(c + 1) * k + lo];
                for x in [lo, hi] {
                    b[(c + 1) * k + x] -= e;
                    b[c * k + x] += e;
                }
            }
        }
        let last = stages * k;
        for d in 0..k {
            let mut a = hw.attenuators[d];
            a.sign_offset += b[bn.input_label(d)] + p[last + d];
            model.attenuators[d] = a;
            b[bn.input_label(d)] = 0.0;
            p[last + d] = 0.0;
        }
        model.b = NetworkHardware {
            kappas: hw.b.kappas.clone(),
            phase_offsets: b,
        };
        model.p = NetworkHardware {
            kappas: hw.p.kappas.clone(),
            phase_offsets: p,
        };
        model.leak = hw.leak();
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.attenuators.len()
    }

    fn layout(&self) -> Layout {
        let k = self.k();
        let stages = k.trailing_zeros() as usize;
        let (bn, pn) = (self.b_config.network(), self.p_config.network());
        let mut b_free = Vec::new();
        let mut p_free = Vec::new();
        for c in 0..stages {
            p_free.extend(pn.pairs(c).map(|(_, hi)| c * k + hi));
            b_free.extend(bn.pairs(c).map(|(_, hi)| (c + 1) * k + hi));
        }
        Layout {
            k,
            stages,
            b_free,
            p_free,
        }
    }

    /// Number of fitted parameters.
    pub fn parameter_count(&self) -> usize {
        self.layout().len()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let l = self.layout();
        let mut v = Vec::with_capacity(l.len());
        v.extend(&self.b.kappas);
        v.extend(&self.p.kappas);
        v.extend(l.b_free.iter().map(|&i| self.b.phase_offsets[i]));
        v.extend(l.p_free.iter().map(|&i| self.p.phase_offsets[i]));
        for a in &self.attenuators {
            v.extend([a.kappa1, a.kappa2, a.theta_offset, a.sign_offset]);
        }
        v.push(self.leak);
        v
    }

    pub fn set_parameters(&mut self, v: &[f64]) -> Result<()> {
        let l = self.layout();
        if v.len() != l.len() {
            return Err(OsnnError::shape("DpeModel", format!("{} parameters, expected {}", v.len(), l.len())));
        }
        let c = l.couplers();
        self.b.kappas.copy_from_slice(&v[0..c]);
        self.p.kappas.copy_from_slice(&v[c..2 * c]);
        for (pos, &i) in l.b_free.iter().enumerate() {
            self.b.phase_offsets[i] = v[l.b_phase() + pos];
        }
        for (pos, &i) in l.p_free.iter().enumerate() {
            self.p.phase_offsets[i] = v[l.p_phase() + pos];
        }
        for (d, a) in self.attenuators.iter_mut().enumerate() {
            let s = &v[l.att() + 4 * d..l.att() + 4 * d + 4];
            *a = AttenuatorHardware {
                kappa1: s[0],
                kappa2: s[1],
                theta_offset: s[2],
                sign_offset: s[3],
            };
        }
        self.leak = v[l.leak()];
        Ok(())
    }

    fn matrices(&self, b_config: &PhaseConfiguration, p_config: &PhaseConfiguration) -> Result<(ComplexMatrix, ComplexMatrix)> {
        Ok((
            b_config.network().transfer_matrix_with(b_config, &self.b)?,
            p_config.network().transfer_matrix_with(p_config, &self.p)?,
        ))
    }

    /// Predicted coherent detector outputs of one probe.
    pub fn predict(&self, controls: &[Control], x: &[f64]) -> Result<Vec<f64>> {
        let k = self.k();
        if controls.len() != k || x.len() != k {
            return Err(OsnnError::shape("DpeModel::predict", format!("expected {} controls and inputs", k)));
        }
        let (b, p) = self.matrices(&self.b_config, &self.p_config)?;
        let t: Vec<Complex64> = controls
            .iter()
            .zip(&self.attenuators)
            .map(|(c, a)| a.transmission(c.theta, c.sign_phase()))
            .collect();
        let xe: Vec<Complex64> = x
            .iter()
            .map(|v| Complex64::new(self.leak + (1.0 - self.leak) * v, 0.0))
            .collect();
        let px = p.matvec(&xe)?;
        let z: Vec<Complex64> = px.iter().zip(&t).map(|(a, b)| a * b).collect();
        Ok(b.matvec(&z)?.iter().map(|v| v.re).collect())
    }

    /// B and P seen by a Σ unit of a layer programmed with these
    /// configurations. Attenuator sign offsets are folded into the columns
    /// of B; magnitudes are left to the calibration tables.
    pub fn hardware_transfer(&self, b_config: &PhaseConfiguration, p_config: &PhaseConfiguration) -> Result<HardwareTransfer> {
        let (b, p) = self.matrices(b_config, p_config)?;
        let k = self.k();
        let phase: Vec<Complex64> = self
            .attenuators
            .iter()
            .map(|a| Complex64::from_polar(1.0, a.sign_offset))
            .collect();
        let b = ComplexMatrix::from_fn(k, k, |r, d| b.get(r, d) * phase[d]);
        Ok(HardwareTransfer { b, p })
    }

    /// Mean squared prediction error on `samples` as a tape expression of
    /// the parameter leaf `params`.
    pub fn loss_graph(&self, g: &mut Graph, params: Var, samples: &[Measurement]) -> Result<Var> {
        let l = self.layout();
        let k = l.k;
        let n = samples.len();
        let mut x = vec![0.0; k * n];
        let mut theta = vec![0.0; k * n];
        let mut sign = vec![0.0; k * n];
        let mut y = vec![0.0; k * n];
        for (c, m) in samples.iter().enumerate() {
            if m.x.len() != k || m.y.len() != k || m.controls.len() != k {
                return Err(OsnnError::shape("fit_dpe", format!("sample {} is not a k={} probe", c, k)));
            }
            for r in 0..k {
                x[r * n + c] = m.x[r];
                theta[r * n + c] = m.controls[r].theta;
                sign[r * n + c] = m.controls[r].sign_phase();
                y[r * n + c] = m.y[r];
            }
        }
        let leaf = |g: &mut Graph, d: Vec<f64>| g.leaf(RealTensor::matrix(k, n, d).expect("sized"));
        let xv = leaf(g, x.clone());
        let one_minus_x = leaf(g, x.iter().map(|v| 1.0 - v).collect());
        let theta = leaf(g, theta);
        let sign = leaf(g, sign);
        let target = leaf(g, y);

        let scalar = |g: &mut Graph, i: usize| g.slice(params, i, 1);
        let row_vec = |g: &mut Graph, entries: Vec<(usize, usize)>| -> Result<Var> {
            let mut list = Vec::with_capacity(entries.len());
            for (row, idx) in entries {
                list.push((row, scalar(g, idx)?));
            }
            g.assemble(&[k], &list)
        };

        // Input modulators: x + leak (1 - x).
        let leak = row_vec(g, (0..k).map(|r| (r, l.leak())).collect())?;
        let leaked = g.mul_rows(one_minus_x, leak)?;
        let xe = g.add(xv, leaked)?;
        let zero = g.leaf(RealTensor::zeros(&[k, n]));

        let p_net = self.p_config.network();
        let b_net = self.b_config.network();
        let (pr, pi) = network_graph(
            g,
            &p_net,
            self.p_config.phases(),
            (xe, zero),
            &|g, col| {
                let entries = l.column(&l.p_free, l.p_phase(), col);
                if entries.is_empty() {
                    Ok(None)
                } else {
                    row_vec(g, entries).map(Some)
                }
            },
            &|g, col| coupler_vectors(g, &p_net, col, l.p_kappa(), params),
        )?;

        // Attenuators.
        let att = |g: &mut Graph, off: usize| row_vec(g, (0..k).map(|r| (r, l.att() + 4 * r + off)).collect());
        let k1 = att(g, 0)?;
        let k2 = att(g, 1)?;
        let theta_off = att(g, 2)?;
        let sign_off = att(g, 3)?;
        let neg_k1 = g.neg(k1)?;
        let one_minus_k1 = g.offset(neg_k1, 1.0)?;
        let neg_k2 = g.neg(k2)?;
        let one_minus_k2 = g.offset(neg_k2, 1.0)?;
        let a2 = g.mul(k2, one_minus_k1)?;
        let a = g.sqrt(a2)?;
        let b2 = g.mul(k1, one_minus_k2)?;
        let b = g.sqrt(b2)?;
        let sum_ab = g.add(a, b)?;
        let diff_ab = g.sub(a, b)?;
        let psi = g.add_rows(theta, theta_off)?;
        let half = g.scale(psi, 0.5)?;
        let c = g.cos(half)?;
        let s = g.sin(half)?;
        let mag_re = g.mul_rows(c, sum_ab)?;
        let mag_im = g.mul_rows(s, diff_ab)?;
        let phi = g.add_rows(sign, sign_off)?;
        let (tr, ti) = rotate(g, mag_re, mag_im, phi)?;
        let (zr, zi) = complex_mul(g, (tr, ti), (pr, pi))?;

        let (yr, _) = network_graph(
            g,
            &b_net,
            self.b_config.phases(),
            (zr, zi),
            &|g, col| {
                let entries = l.column(&l.b_free, l.b_phase(), col);
                if entries.is_empty() {
                    Ok(None)
                } else {
                    row_vec(g, entries).map(Some)
                }
            },
            &|g, col| coupler_vectors(g, &b_net, col, l.b_kappa(), params),
        )?;
        let err = g.sub(yr, target)?;
        let sq = g.mul(err, err)?;
        let total = g.reduce_sum(sq)?;
        g.scale(total, 1.0 / (k * n) as f64)
    }

    fn mse(&self, samples: &[Measurement]) -> Result<f64> {
        let mut acc = 0.0;
        for m in samples {
            let p = self.predict(&m.controls, &m.x)?;
            acc += p.iter().zip(&m.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(acc / (samples.len() * self.k()) as f64)
    }
}

/// `(re + i im) e^{i phi}` with `phi` shaped like the operands.
fn rotate(g: &mut Graph, re: Var, im: Var, phi: Var) -> Result<(Var, Var)> {
    let c = g.cos(phi)?;
    let s = g.sin(phi)?;
    let rc = g.mul(re, c)?;
    let is = g.mul(im, s)?;
    let rs = g.mul(re, s)?;
    let ic = g.mul(im, c)?;
    Ok((g.sub(rc, is)?, g.add(rs, ic)?))
}

fn complex_mul(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> Result<(Var, Var)> {
    let rr = g.mul(a.0, b.0)?;
    let ii = g.mul(a.1, b.1)?;
    let ri = g.mul(a.0, b.1)?;
    let ir = g.mul(a.1, b.0)?;
    Ok((g.sub(rr, ii)?, g.add(ri, ir)?))
}

/// Row vectors `sqrt(1 - kappa)` and `sqrt(kappa)` for the couplers of
/// column `col`, both members of a pair sharing their coupler's value.
fn coupler_vectors(g: &mut Graph, net: &ButterflyNetwork, col: usize, base: usize, params: Var) -> Result<(Var, Var)> {
    let k = net.k();
    let mut entries = Vec::with_capacity(k);
    for (i, (lo, hi)) in net.pairs(col).enumerate() {
        let kappa = g.slice(params, base + col * k / 2 + i, 1)?;
        entries.push((lo, kappa));
        entries.push((hi, kappa));
    }
    let kv = g.assemble(&[k], &entries)?;
    let s = g.sqrt(kv)?;
    let neg = g.neg(kv)?;
    let om = g.offset(neg, 1.0)?;
    let c = g.sqrt(om)?;
    Ok((c, s))
}

type PhaseRow<'a> = dyn Fn(&mut Graph, usize) -> Result<Option<Var>> + 'a;
type CouplerRows<'a> = dyn Fn(&mut Graph, usize) -> Result<(Var, Var)> + 'a;

/// Propagates a `[k, n]` complex field through a butterfly network with
/// trainable offsets (`offsets(col)`) and coupler ratios.
fn network_graph(
    g: &mut Graph,
    net: &ButterflyNetwork,
    phases: &[f64],
    field: (Var, Var),
    offsets: &PhaseRow<'_>,
    couplers: &CouplerRows<'_>,
) -> Result<(Var, Var)> {
    let k = net.k();
    let stages = net.stages();
    let mut perm = vec![0; k];
    for port in 0..k {
        perm[net.input_label(port)] = port;
    }
    let mut re = g.permute_rows(field.0, &perm)?;
    let mut im = g.permute_rows(field.1, &perm)?;
    let n = g.value(re).len() / k;
    for col in 0..=stages {
        let base: Vec<f64> = phases[col * k..(col + 1) * k].to_vec();
        let mut phi = g.leaf(RealTensor::vector(base)?);
        if let Some(off) = offsets(g, col)? {
            phi = g.add(phi, off)?;
        }
        let c = g.cos(phi)?;
        let s = g.sin(phi)?;
        let rc = g.mul_rows(re, c)?;
        let is = g.mul_rows(im, s)?;
        let rs = g.mul_rows(re, s)?;
        let ic = g.mul_rows(im, c)?;
        re = g.sub(rc, is)?;
        im = g.add(rs, ic)?;
        if col == stages {
            break;
        }
        let (cv, sv) = couplers(g, col)?;
        let mut partner = vec![0; k];
        for (lo, hi) in net.pairs(col) {
            partner[lo] = hi;
            partner[hi] = lo;
        }
        let pre = g.permute_rows(re, &partner)?;
        let pim = g.permute_rows(im, &partner)?;
        let a = g.mul_rows(re, cv)?;
        let b = g.mul_rows(pim, sv)?;
        let c2 = g.mul_rows(im, cv)?;
        let d = g.mul_rows(pre, sv)?;
        re = g.sub(a, b)?;
        im = g.add(c2, d)?;
    }
    debug_assert_eq!(g.value(re).len(), k * n);
    Ok((re, im))
}

/// Fits `init` to measured probes with full-batch Adam on the mean squared
/// prediction error. A fixed fraction of the samples is held out.
pub fn fit_dpe(samples: &[Measurement], init: &DpeModel, budget: &DpeBudget) -> Result<DpeFit> {
    if samples.is_empty() {
        return Err(OsnnError::Empty("measurements"));
    }
    let n_params = init.parameter_count();
    if samples.len() < 10 * n_params {
        return Err(OsnnError::invalid(
            "samples",
            format!("{} samples for {} parameters; need at least 10x", samples.len(), n_params),
        ));
    }
    if !(0.0..1.0).contains(&budget.holdout_fraction) {
        return Err(OsnnError::invalid("holdout_fraction", format!("{}", budget.holdout_fraction)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(budget.seed));
    let n_hold = (samples.len() as f64 * budget.holdout_fraction).round() as usize;
    let holdout: Vec<Measurement> = order[..n_hold].iter().map(|&i| samples[i].clone()).collect();
    let train: Vec<Measurement> = order[n_hold..].iter().map(|&i| samples[i].clone()).collect();

    let mut model = init.clone();
    let mut theta = model.parameters();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut trace = Vec::with_capacity(budget.epochs);
    let mut rising = 0;
    for epoch in 0..budget.epochs {
        let mut g = Graph::new();
        let params = g.leaf(RealTensor::vector(theta.clone())?);
        let loss = model.loss_graph(&mut g, params, &train)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(OsnnError::Divergence { epoch, trace });
        }
        // Changes below one part in a million count as flat.
        if trace.last().is_some_and(|&last| value > last * (1.0 + 1e-6)) {
            rising += 1;
        } else {
            rising = 0;
        }
        trace.push(value);
        if rising >= 10 {
            return Err(OsnnError::Divergence { epoch, trace });
        }
        if value <= budget.tolerance {
            break;
        }
        let grads = g.backward(loss)?;
        let grad = grads.get_or_zeros(&g, params);
        let lr = budget.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / budget.epochs as f64).cos());
        let t = (epoch + 1) as i32;
        for i in 0..n_params {
            let gi = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
        clamp_physical(&mut theta, &model.layout());
    }
    model.set_parameters(&theta)?;
    let train_rmse = model.mse(&train)?.sqrt();
    let holdout_rmse = if holdout.is_empty() {
        f64::NAN
    } else {
        model.mse(&holdout)?.sqrt()
    };
    Ok(DpeFit {
        model,
        train_rmse,
        holdout_rmse,
        trace,
    })
}

/// Keeps coupling ratios inside `(0, 1)` and the leak inside `[0, 1)`.
fn clamp_physical(theta: &mut [f64], l: &Layout) {
    let lo = 1e-6;
    let hi = 1.0 - 1e-6;
    for v in &mut theta[..2 * l.couplers()] {
        *v = v.clamp(lo, hi);
    }
    for d in 0..l.k {
        for off in 0..2 {
            let i = l.att() + 4 * d + off;
            theta[i] = theta[i].clamp(lo, hi);
        }
    }
    let li = l.leak();
    theta[li] = theta[li].clamp(0.0, 0.5);
}
