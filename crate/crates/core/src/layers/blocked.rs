use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::butterfly::{PhaseConfiguration, Transform};
use crate::error::{OsnnError, Result};
use crate::numerics::{Complex64, ComplexMatrix, RealTensor};
use crate::training::quant::{quantize_signed, QuantSpec};

/// Block-grid geometry of an `m x n` layer with block size `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub m_blocks: usize,
    pub n_blocks: usize,
}

impl Padding {
    pub fn m_padded(&self) -> usize {
        self.m_blocks * self.k
    }

    pub fn n_padded(&self) -> usize {
        self.n_blocks * self.k
    }

    pub fn is_padded(&self) -> bool {
        self.m_padded() != self.m || self.n_padded() != self.n
    }

    pub fn unit_count(&self) -> usize {
        self.m_blocks * self.n_blocks
    }
}

/// Rounds both dimensions up to multiples of `k`.
pub fn pad_to_block(m: usize, n: usize, k: usize) -> Result<Padding> {
    if m == 0 || n == 0 || k == 0 {
        return Err(OsnnError::invalid("dims", format!("m={}, n={}, k={} must all be >= 1", m, n, k)));
    }
    Ok(Padding {
        m,
        n,
        k,
        m_blocks: m.div_ceil(k),
        n_blocks: n.div_ceil(k),
    })
}

/// One Σ unit as programmed on hardware: per-entry magnitude and sign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaUnit {
    pub magnitudes: Vec<f64>,
    pub signs: Vec<i8>,
    pub quant: Option<QuantSpec>,
}

impl SigmaUnit {
    pub fn values(&self) -> Vec<f64> {
        self.magnitudes.iter().zip(&self.signs).map(|(m, s)| m * *s as f64).collect()
    }
}

/// Matrices used in place of the ideal B and P when training against a
/// fitted hardware model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareTransfer {
    pub b: ComplexMatrix,
    pub p: ComplexMatrix,
}

/// Blocked `B Σ_ij P` layer with shared B and P units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct BlockedLinear {
    padding: Padding,
    b_config: PhaseConfiguration,
    p_config: PhaseConfiguration,
    /// Signed latent Σ values in `[-1, 1]`, indexed `((i * n_blocks) + j) * k + d`.
    sigma: Vec<f64>,
    quant: Option<QuantSpec>,
    /// Kept flags per unit, `i * n_blocks + j`; `None` means all kept.
    mask: Option<Vec<bool>>,
    hardware: Option<HardwareTransfer>,
    b: ComplexMatrix,
    p: ComplexMatrix,
    /// `basis[(d * k + r) * k + c] = Re(B[r, d] P[d, c])`.
    basis: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    m: usize,
    n: usize,
    k: usize,
    b_config: PhaseConfiguration,
    p_config: PhaseConfiguration,
    b_config_hash: String,
    p_config_hash: String,
    sigma: Vec<f64>,
    quant: Option<QuantSpec>,
    mask: Option<Vec<bool>>,
    hardware: Option<HardwareTransfer>,
}

impl TryFrom<RawLayer> for BlockedLinear {
    type Error = OsnnError;
    fn try_from(raw: RawLayer) -> Result<Self> {
        for (cfg, hash) in [(&raw.b_config, &raw.b_config_hash), (&raw.p_config, &raw.p_config_hash)] {
            if &config_hash(cfg) != hash {
                return Err(OsnnError::ConfigMismatch(format!("checkpoint hash {} does not match phases", hash)));
            }
        }
        let mut layer = BlockedLinear::new(raw.m, raw.n, raw.k, raw.b_config, raw.p_config)?;
        layer.set_sigma(raw.sigma)?;
        layer.quant = raw.quant;
        if let Some(mask) = raw.mask {
            layer.set_mask(mask)?;
        }
        if let Some(hw) = raw.hardware {
            layer.set_hardware(Some(hw))?;
        }
        Ok(layer)
    }
}

impl From<BlockedLinear> for RawLayer {
    fn from(l: BlockedLinear) -> Self {
        RawLayer {
            m: l.padding.m,
            n: l.padding.n,
            k: l.padding.k,
            b_config_hash: config_hash(&l.b_config),
            p_config_hash: config_hash(&l.p_config),
            b_config: l.b_config,
            p_config: l.p_config,
            sigma: l.sigma,
            quant: l.quant,
            mask: l.mask,
            hardware: l.hardware,
        }
    }
}

/// FNV-1a over the descriptor hash and the exact bit patterns of the phases.
pub fn config_hash(cfg: &PhaseConfiguration) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(cfg.descriptor().hash().as_bytes());
    for p in cfg.phases() {
        eat(&p.to_bits().to_le_bytes());
    }
    format!("{:016x}", h)
}

fn basis_from(b: &ComplexMatrix, p: &ComplexMatrix) -> Vec<f64> {
    let k = b.rows();
    let mut basis = vec![0.0; k * k * k];
    for d in 0..k {
        for r in 0..k {
            for c in 0..k {
                basis[(d * k + r) * k + c] = (b.get(r, d) * p.get(d, c)).re;
            }
        }
    }
    basis
}

impl BlockedLinear {
    pub fn new(m: usize, n: usize, k: usize, b_config: PhaseConfiguration, p_config: PhaseConfiguration) -> Result<Self> {
        let padding = pad_to_block(m, n, k)?;
        for (name, cfg) in [("b_config", &b_config), ("p_config", &p_config)] {
            if cfg.descriptor().k != k {
                return Err(OsnnError::ConfigMismatch(format!(
                    "{} is for k={}, layer uses k={}",
                    name,
                    cfg.descriptor().k,
                    k
                )));
            }
        }
        let b = b_config.network().transfer_matrix(&b_config)?;
        let p = p_config.network().transfer_matrix(&p_config)?;
        let basis = basis_from(&b, &p);
        Ok(Self {
            padding,
            b_config,
            p_config,
            sigma: vec![0.0; padding.unit_count() * k],
            quant: None,
            mask: None,
            hardware: None,
            b,
            p,
            basis,
        })
    }

    /// Layer with both units set to the same named transform.
    pub fn with_transform(m: usize, n: usize, k: usize, transform: Transform) -> Result<Self> {
        let cfg = transform.configure(k)?;
        Self::new(m, n, k, cfg.clone(), cfg)
    }

    /// Σ drawn uniformly from `[-1, 1]`.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        for s in &mut self.sigma {
            *s = rng.random_range(-1.0..=1.0);
        }
        self.apply_mask();
    }

    pub fn m(&self) -> usize {
        self.padding.m
    }

    pub fn n(&self) -> usize {
        self.padding.n
    }

    pub fn k(&self) -> usize {
        self.padding.k
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn b_config(&self) -> &PhaseConfiguration {
        &self.b_config
    }

    pub fn p_config(&self) -> &PhaseConfiguration {
        &self.p_config
    }

    pub fn quant(&self) -> Option<&QuantSpec> {
        self.quant.as_ref()
    }

    pub fn set_quant(&mut self, quant: Option<QuantSpec>) {
        self.quant = quant;
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Replaces the latent Σ values. Each must lie in `[-1, 1]`.
    pub fn set_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.sigma.len() {
            return Err(OsnnError::shape(
                "set_sigma",
                format!("expected {} values, got {}", self.sigma.len(), sigma.len()),
            ));
        }
        if let Some(i) = sigma.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(OsnnError::invalid("sigma", format!("entry {} = {} outside [-1, 1]", i, sigma[i])));
        }
        self.sigma = sigma;
        self.apply_mask();
        Ok(())
    }

    pub(crate) fn sigma_mut(&mut self) -> &mut [f64] {
        &mut self.sigma
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Fixes a kept/pruned flag per unit; pruned units are zeroed.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.padding.unit_count() {
            return Err(OsnnError::shape(
                "set_mask",
                format!("expected {} flags, got {}", self.padding.unit_count(), mask.len()),
            ));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    pub(crate) fn apply_mask(&mut self) {
        let k = self.padding.k;
        if let Some(mask) = &self.mask {
            for (u, keep) in mask.iter().enumerate() {
                if !keep {
                    self.sigma[u * k..(u + 1) * k].fill(0.0);
                }
            }
        }
    }

    pub fn is_kept(&self, unit: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[unit])
    }

    pub fn hardware(&self) -> Option<&HardwareTransfer> {
        self.hardware.as_ref()
    }

    /// Trains against the given B and P instead of the ideal transfer
    /// matrices (`None` restores the ideal ones).
    pub fn set_hardware(&mut self, hw: Option<HardwareTransfer>) -> Result<()> {
        let k = self.padding.k;
        let (b, p) = match &hw {
            Some(h) => {
                for m in [&h.b, &h.p] {
                    if m.rows() != k || m.cols() != k {
                        return Err(OsnnError::shape("set_hardware", format!("{}x{} for k={}", m.rows(), m.cols(), k)));
                    }
                }
                (h.b.clone(), h.p.clone())
            }
            None => (
                self.b_config.network().transfer_matrix(&self.b_config)?,
                self.p_config.network().transfer_matrix(&self.p_config)?,
            ),
        };
        self.basis = basis_from(&b, &p);
        self.b = b;
        self.p = p;
        self.hardware = hw;
        Ok(())
    }

    /// B currently used by the math (ideal or hardware).
    pub fn b_matrix(&self) -> &ComplexMatrix {
        &self.b
    }

    pub fn p_matrix(&self) -> &ComplexMatrix {
        &self.p
    }

    /// Number of trainable Σ entries in kept units.
    pub fn trainable_count(&self) -> usize {
        let kept = (0..self.padding.unit_count()).filter(|&u| self.is_kept(u)).count();
        kept * self.padding.k
    }

    /// Σ values as realized (quantized magnitude, kept sign, pruned zero).
    pub fn effective_sigma(&self) -> Vec<f64> {
        self.sigma.iter().map(|&s| quantize_signed(s, self.quant.as_ref())).collect()
    }

    pub fn units(&self) -> Vec<SigmaUnit> {
        let k = self.padding.k;
        self.effective_sigma()
            .chunks(k)
            .map(|c| SigmaUnit {
                magnitudes: c.iter().map(|v| v.abs()).collect(),
                signs: c.iter().map(|v| if *v < 0.0 { -1 } else { 1 }).collect(),
                quant: self.quant,
            })
            .collect()
    }

    /// Weights for a given flat Σ vector as an `m x n_padded` row-major
    /// matrix: logical output rows, all physical input columns (the padded
    /// ones multiply inputs that are zero in exact arithmetic).
    pub(crate) fn dense_from(&self, sigma: &[f64]) -> Vec<f64> {
        let Padding { m, k, n_blocks, .. } = self.padding;
        let np = self.padding.n_padded();
        let mut w = vec![0.0; m * np];
        for r in 0..m {
            let (i, rr) = (r / k, r % k);
            for c in 0..np {
                let (j, cc) = (c / k, c % k);
                let s = &sigma[(i * n_blocks + j) * k..(i * n_blocks + j + 1) * k];
                let mut acc = 0.0;
                for (d, sd) in s.iter().enumerate() {
                    acc += sd * self.basis[(d * k + rr) * k + cc];
                }
                w[r * np + c] = acc;
            }
        }
        w
    }

    /// `dL/dΣ` for every entry given `dL/dW` on the `m x n_padded` weights.
    pub(crate) fn sigma_grad_from_dense(&self, grad_w: &[f64]) -> Vec<f64> {
        let Padding { m, k, n_blocks, .. } = self.padding;
        let np = self.padding.n_padded();
        let mut g = vec![0.0; self.sigma.len()];
        for r in 0..m {
            let (i, rr) = (r / k, r % k);
            for c in 0..np {
                let (j, cc) = (c / k, c % k);
                let gw = grad_w[r * np + c];
                if gw == 0.0 {
                    continue;
                }
                let base = (i * n_blocks + j) * k;
                for d in 0..k {
                    g[base + d] += gw * self.basis[(d * k + rr) * k + cc];
                }
            }
        }
        g
    }

    /// Realized weight matrix `[m, n]`.
    pub fn dense_weight(&self) -> RealTensor {
        let Padding { m, n, .. } = self.padding;
        let np = self.padding.n_padded();
        let full = self.dense_from(&self.effective_sigma());
        let w = (0..m).flat_map(|r| full[r * np..r * np + n].to_vec()).collect();
        RealTensor::matrix(m, n, w).expect("finite weights")
    }

    fn check_input(&self, x: &RealTensor) -> Result<()> {
        if x.len() != self.padding.n {
            return Err(OsnnError::shape(
                "forward_blocked",
                format!("input has {} entries, layer expects {}", x.len(), self.padding.n),
            ));
        }
        Ok(())
    }

    /// Shared-unit forward: `kappa_j = P x_j` once per input segment, then
    /// `y_i = Re(B sum_j Σ_ij kappa_j)`.
    pub fn forward_blocked(&self, x: &RealTensor) -> Result<RealTensor> {
        self.check_input(x)?;
        let Padding { m, k, m_blocks, n_blocks, .. } = self.padding;
        let sigma = self.effective_sigma();
        let kappas = self.project_inputs(x.data());
        let mut y = Vec::with_capacity(m_blocks * k);
        let mut z = vec![Complex64::new(0.0, 0.0); k];
        for i in 0..m_blocks {
            z.fill(Complex64::new(0.0, 0.0));
            for (j, kap) in kappas.iter().enumerate() {
                let s = &sigma[(i * n_blocks + j) * k..][..k];
                for d in 0..k {
                    z[d] += kap[d] * s[d];
                }
            }
            y.extend(self.b.matvec(&z)?.into_iter().map(|v| v.re));
        }
        y.truncate(m);
        RealTensor::vector(y)
    }

    fn project_inputs(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let Padding { n, k, n_blocks, .. } = self.padding;
        (0..n_blocks)
            .map(|j| {
                let seg: Vec<Complex64> = (0..k)
                    .map(|c| {
                        let idx = j * k + c;
                        Complex64::new(if idx < n { x[idx] } else { 0.0 }, 0.0)
                    })
                    .collect();
                self.p.matvec(&seg).expect("segment length is k")
            })
            .collect()
    }

    /// Exact gradients of `forward_blocked` with respect to the realized Σ
    /// entries and to the input.
    ///
    /// `dL/dσ_ijd = Re((B^T g_i)_d · kappa_jd)` and `dL/dx = W^T g`.
    pub fn grad_blocked(&self, x: &RealTensor, upstream: &RealTensor) -> Result<(RealTensor, RealTensor)> {
        self.check_input(x)?;
        let Padding { m, n, k, m_blocks, n_blocks } = self.padding;
        if upstream.len() != m {
            return Err(OsnnError::shape(
                "grad_blocked",
                format!("upstream has {} entries, layer output is {}", upstream.len(), m),
            ));
        }
        let kappas = self.project_inputs(x.data());
        let bt = self.b.transpose();
        let mut gs = vec![0.0; m_blocks * n_blocks * k];
        for i in 0..m_blocks {
            let g: Vec<Complex64> = (0..k)
                .map(|r| Complex64::new(upstream.data().get(i * k + r).copied().unwrap_or(0.0), 0.0))
                .collect();
            let btg = bt.matvec(&g)?;
            for (j, kap) in kappas.iter().enumerate() {
                for d in 0..k {
                    gs[(i * n_blocks + j) * k + d] = (btg[d] * kap[d]).re;
                }
            }
        }
        let w = self.dense_weight();
        let mut gx = vec![0.0; n];
        for r in 0..m {
            let gr = upstream.data()[r];
            for c in 0..n {
                gx[c] += w.data()[r * n + c] * gr;
            }
        }
        Ok((
            RealTensor::new(vec![m_blocks, n_blocks, k], gs)?,
            RealTensor::vector(gx)?,
        ))
    }
}

/// Complex `B diag(σ) P` of one block.
pub fn block_product(b: &ComplexMatrix, sigma: &[f64], p: &ComplexMatrix) -> ComplexMatrix {
    let k = sigma.len();
    ComplexMatrix::from_fn(k, k, |r, c| (0..k).map(|d| b.get(r, d) * sigma[d] * p.get(d, c)).sum())
}
