use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::butterfly::Transform;
use crate::error::{OsnnError, Result};
use crate::numerics::{linalg, tape::softmax};
use crate::training::quant::QuantSpec;

use super::blocked::BlockedLinear;
use super::conv::{col2im_add, im2col_into, ConvSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Convolution through a blocked kernel matrix, followed by a fixed
    /// electronic gain.
    Conv {
        spec: ConvSpec,
        linear: BlockedLinear,
        gain: f64,
    },
    Relu,
    /// Average pooling to a fixed output grid. Cell `i` covers input rows
    /// `floor(i*H/out) .. ceil((i+1)*H/out)`, likewise for columns.
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Linear {
        linear: BlockedLinear,
        gain: f64,
    },
}

impl Layer {
    pub fn blocked(&self) -> Option<(&BlockedLinear, f64)> {
        match self {
            Layer::Conv { linear, gain, .. } | Layer::Linear { linear, gain } => Some((linear, *gain)),
            _ => None,
        }
    }

    pub fn blocked_mut(&mut self) -> Option<&mut BlockedLinear> {
        match self {
            Layer::Conv { linear, .. } | Layer::Linear { linear, .. } => Some(linear),
            _ => None,
        }
    }
}

/// Feed-forward OSNN: a stack of [`Layer`]s over `[C, H, W]` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsnnModel {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

fn pool_bounds(i: usize, inp: usize, out: usize) -> (usize, usize) {
    ((i * inp) / out, ((i + 1) * inp).div_ceil(out))
}

fn avg_pool(act: &[f64], [c, h, w]: [usize; 3], oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = pool_bounds(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_bounds(ox, w, ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += act[(ch * h + y) * w + x];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

/// What a blocked layer does with its input in one forward pass.
pub(crate) struct BlockPass {
    /// Unrolled (normalized, noisy) input, `n_padded x positions`.
    pub cols: Vec<f64>,
    /// Input-noise clamp pass-through flags; `None` when nothing was clamped.
    pub pass: Option<Vec<bool>>,
    /// Factor applied to `W · cols`: per-sample amplitude scale times gain.
    pub scale: f64,
    pub positions: usize,
}

/// Activations and block inputs recorded by [`OsnnModel::forward_sample`].
pub(crate) struct SampleTrace {
    pub acts: Vec<Vec<f64>>,
    pub blocks: Vec<Option<BlockPass>>,
}

/// Dynamic noise applied inside one forward pass.
pub(crate) struct ForwardNoise<'a, R: Rng> {
    pub input_sigma: f64,
    pub detector_sigma: f64,
    pub rng: &'a mut R,
}

impl OsnnModel {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let model = Self { input_shape, layers };
        model.shapes()?;
        Ok(model)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn blocked_layers(&self) -> impl Iterator<Item = &BlockedLinear> {
        self.layers.iter().filter_map(|l| l.blocked().map(|(b, _)| b))
    }

    pub fn blocked_layers_mut(&mut self) -> impl Iterator<Item = &mut BlockedLinear> {
        self.layers.iter_mut().filter_map(|l| l.blocked_mut())
    }

    /// Output shape after every layer, starting with the input.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { spec, linear, .. } => {
                    if cur[0] != spec.in_channels {
                        return Err(OsnnError::shape(
                            "model",
                            format!("conv expects {} channels, got {}", spec.in_channels, cur[0]),
                        ));
                    }
                    if linear.n() != spec.patch_len() || linear.m() != spec.out_channels {
                        return Err(OsnnError::shape("model", "conv kernel matrix does not match spec"));
                    }
                    let (ho, wo) = spec.output_size(cur[1], cur[2])?;
                    [spec.out_channels, ho, wo]
                }
                Layer::Relu => cur,
                Layer::AdaptiveAvgPool { out_h, out_w } => {
                    if *out_h == 0 || *out_w == 0 || *out_h > cur[1] || *out_w > cur[2] {
                        return Err(OsnnError::shape("model", format!("cannot pool {:?} to {}x{}", cur, out_h, out_w)));
                    }
                    [cur[0], *out_h, *out_w]
                }
                Layer::Flatten => [cur.iter().product(), 1, 1],
                Layer::Linear { linear, .. } => {
                    let len: usize = cur.iter().product();
                    if linear.n() != len {
                        return Err(OsnnError::shape(
                            "model",
                            format!("linear expects {} inputs, got {}", linear.n(), len),
                        ));
                    }
                    [linear.m(), 1, 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> usize {
        self.shapes().map(|s| s.last().unwrap().iter().product()).unwrap_or(0)
    }

    /// Trainable Σ entries across all blocked layers.
    pub fn trainable_count(&self) -> usize {
        self.blocked_layers().map(|l| l.trainable_count()).sum()
    }

    pub fn set_quant(&mut self, quant: Option<QuantSpec>) {
        for l in self.blocked_layers_mut() {
            l.set_quant(quant);
        }
    }

    /// Realized `m x n_padded` weights of every blocked layer.
    pub(crate) fn nominal_weights(&self) -> Vec<Vec<f64>> {
        self.blocked_layers().map(|l| l.dense_from(&l.effective_sigma())).collect()
    }

    /// Ideal logits of one image.
    pub fn forward(&self, image: &[f64]) -> Result<Vec<f64>> {
        let expected: usize = self.input_shape.iter().product();
        if image.len() != expected {
            return Err(OsnnError::shape(
                "forward",
                format!("image has {} values, model expects {}", image.len(), expected),
            ));
        }
        let weights = self.nominal_weights();
        Ok(self.forward_sample::<rand_chacha::ChaCha8Rng>(&weights, image, None, None))
    }

    pub fn predict(&self, image: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    /// Forward pass of one sample with explicit per-layer weights.
    ///
    /// With noise, each blocked layer normalizes its input by the sample's
    /// peak value `s`, adds input noise and clamps to `[0, 1]` (the optical
    /// amplitude range), multiplies, adds detector noise, and rescales by
    /// `s`. Without noise this is exactly `gain * W x`.
    pub(crate) fn forward_sample<R: Rng>(
        &self,
        weights: &[Vec<f64>],
        image: &[f64],
        mut noise: Option<ForwardNoise<'_, R>>,
        mut trace: Option<&mut SampleTrace>,
    ) -> Vec<f64> {
        let shapes = self.shapes().expect("validated at construction");
        let mut act = image.to_vec();
        let mut wi = 0;
        if let Some(t) = trace.as_deref_mut() {
            t.acts.clear();
            t.blocks.clear();
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = shapes[li];
            let [_, oh, ow] = shapes[li + 1];
            let mut block = None;
            let out = match layer {
                Layer::Conv { spec, linear, gain } => {
                    let np = linear.padding().n_padded();
                    let positions = oh * ow;
                    let mut cols = vec![0.0; np * positions];
                    im2col_into(&act, h, w, spec, oh, ow, &mut cols);
                    let (out, pass) = block_apply(&weights[wi], linear.m(), np, linear.k(), positions, &mut cols, *gain, noise.as_mut());
                    wi += 1;
                    block = Some(BlockPass {
                        cols,
                        pass: pass.1,
                        scale: pass.0,
                        positions,
                    });
                    out
                }
                Layer::Linear { linear, gain } => {
                    let np = linear.padding().n_padded();
                    let mut cols = vec![0.0; np];
                    cols[..act.len()].copy_from_slice(&act);
                    let (out, pass) = block_apply(&weights[wi], linear.m(), np, linear.k(), 1, &mut cols, *gain, noise.as_mut());
                    wi += 1;
                    block = Some(BlockPass {
                        cols,
                        pass: pass.1,
                        scale: pass.0,
                        positions: 1,
                    });
                    out
                }
                Layer::Relu => act.iter().map(|v| v.max(0.0)).collect(),
                Layer::AdaptiveAvgPool { .. } => avg_pool(&act, [c, h, w], oh, ow),
                Layer::Flatten => act.clone(),
            };
            if let Some(t) = trace.as_deref_mut() {
                t.acts.push(std::mem::replace(&mut act, out));
                t.blocks.push(block);
            } else {
                act = out;
            }
        }
        act
    }

    /// Forward pass where every blocked layer is computed by
    /// `block(index, cols, padded_width, positions)`, which returns the
    /// `m x positions` outputs.
    pub(crate) fn forward_with<E>(
        &self,
        image: &[f64],
        mut block: impl FnMut(usize, &[f64], usize, usize) -> std::result::Result<Vec<f64>, E>,
    ) -> std::result::Result<Vec<f64>, E> {
        let shapes = self.shapes().expect("validated at construction");
        let mut act = image.to_vec();
        let mut wi = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let [c, h, w] = shapes[li];
            let [_, oh, ow] = shapes[li + 1];
            act = match layer {
                Layer::Conv { spec, linear, .. } => {
                    let np = linear.padding().n_padded();
                    let mut cols = vec![0.0; np * oh * ow];
                    im2col_into(&act, h, w, spec, oh, ow, &mut cols);
                    wi += 1;
                    block(wi - 1, &cols, np, oh * ow)?
                }
                Layer::Linear { linear, .. } => {
                    let np = linear.padding().n_padded();
                    let mut cols = vec![0.0; np];
                    cols[..act.len()].copy_from_slice(&act);
                    wi += 1;
                    block(wi - 1, &cols, np, 1)?
                }
                Layer::Relu => act.iter().map(|v| v.max(0.0)).collect(),
                Layer::AdaptiveAvgPool { .. } => avg_pool(&act, [c, h, w], oh, ow),
                Layer::Flatten => act,
            };
        }
        Ok(act)
    }

    /// Backward pass of one traced sample; adds `dL/dW` into `grad_w`
    /// (same layout as the weights).
    pub(crate) fn backward_sample(&self, weights: &[Vec<f64>], trace: &SampleTrace, grad_out: &[f64], grad_w: &mut [Vec<f64>]) {
        let shapes = self.shapes().expect("validated at construction");
        let mut g = grad_out.to_vec();
        let mut wi = self.blocked_layers().count();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let [c, h, w] = shapes[li];
            let [_, oh, ow] = shapes[li + 1];
            let input = &trace.acts[li];
            if let (Some((linear, _)), Some(pass)) = (layer.blocked(), trace.blocks[li].as_ref()) {
                wi -= 1;
                let m = linear.m();
                let np = linear.padding().n_padded();
                let p = pass.positions;
                let gy: Vec<f64> = g.iter().map(|v| v * pass.scale).collect();
                linalg::gemm(false, true, m, np, p, 1.0, &gy, &pass.cols, 1.0, &mut grad_w[wi]);
                if li == 0 {
                    break;
                }
                let mut gcols = vec![0.0; np * p];
                linalg::gemm(true, false, np, p, m, 1.0, &weights[wi], &gy, 0.0, &mut gcols);
                // Chunk peaks are held constant.
                if let Some(flags) = &pass.pass {
                    for (gc, keep) in gcols.iter_mut().zip(flags) {
                        if !keep {
                            *gc = 0.0;
                        }
                    }
                }
                g = match layer {
                    Layer::Conv { spec, .. } => {
                        let mut gi = vec![0.0; c * h * w];
                        col2im_add(&gcols, h, w, spec, oh, ow, &mut gi);
                        gi
                    }
                    _ => gcols[..input.len()].to_vec(),
                };
                continue;
            }
            g = match layer {
                Layer::Relu => g.iter().zip(input).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect(),
                Layer::AdaptiveAvgPool { .. } => {
                    let mut gi = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bounds(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bounds(ox, w, ow);
                                let share = g[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    for x in x0..x1 {
                                        gi[(ch * h + y) * w + x] += share;
                                    }
                                }
                            }
                        }
                    }
                    gi
                }
                Layer::Flatten => g,
                Layer::Conv { .. } | Layer::Linear { .. } => unreachable!(),
            };
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: OsnnModel = serde_json::from_str(text)?;
        model.shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Peak of every `k`-row chunk of every column of a `rows x positions`
/// row-major matrix: the modulator full scale used for that block input.
pub(crate) fn chunk_peaks(cols: &[f64], k: usize, positions: usize) -> Vec<f64> {
    let chunks = cols.len() / positions / k;
    let mut peaks = vec![0.0f64; chunks * positions];
    for (r, row) in cols.chunks(positions).enumerate() {
        let base = (r / k) * positions;
        for (p, v) in row.iter().enumerate() {
            peaks[base + p] = peaks[base + p].max(*v);
        }
    }
    peaks
}

/// `out = gain * (W cols + detector noise)`. With `noise` set, every
/// `k`-chunk of a column is sent at its own full scale: it is divided by its
/// peak, noised and clamped to `[0, 1]`, then scaled back; all-zero chunks
/// are skipped. Detector noise enters once per partial sum and is scaled
/// the same way. Returns the outputs, the applied scale and the clamp flags.
#[allow(clippy::too_many_arguments)]
fn block_apply<R: Rng>(
    w: &[f64],
    m: usize,
    np: usize,
    k: usize,
    positions: usize,
    cols: &mut [f64],
    gain: f64,
    noise: Option<&mut ForwardNoise<'_, R>>,
) -> (Vec<f64>, (f64, Option<Vec<bool>>)) {
    let mut flags = None;
    let mut det = None;
    if let Some(nz) = noise {
        let peaks = chunk_peaks(cols, k, positions);
        if nz.input_sigma > 0.0 {
            let normal = Normal::new(0.0, nz.input_sigma).expect("sigma checked");
            let mut f = vec![true; cols.len()];
            for (i, (v, keep)) in cols.iter_mut().zip(&mut f).enumerate() {
                let s = peaks[(i / positions / k) * positions + i % positions];
                if s > 0.0 {
                    let raw = *v / s + normal.sample(nz.rng);
                    *keep = (0.0..=1.0).contains(&raw);
                    *v = raw.clamp(0.0, 1.0) * s;
                }
            }
            flags = Some(f);
        }
        if nz.detector_sigma > 0.0 {
            let normal = Normal::new(0.0, nz.detector_sigma).expect("sigma checked");
            let chunks = np / k;
            let mut d = vec![0.0; m * positions];
            for (r, row) in d.chunks_mut(positions).enumerate() {
                debug_assert!(r < m);
                for (p, o) in row.iter_mut().enumerate() {
                    for j in 0..chunks {
                        let s = peaks[j * positions + p];
                        if s > 0.0 {
                            *o += s * normal.sample(nz.rng);
                        }
                    }
                }
            }
            det = Some(d);
        }
    }
    let mut out = vec![0.0; m * positions];
    linalg::gemm(false, false, m, positions, np, 1.0, w, cols, 0.0, &mut out);
    if let Some(d) = det {
        for (o, n) in out.iter_mut().zip(d) {
            *o += n;
        }
    }
    for o in &mut out {
        *o *= gain;
    }
    (out, (gain, flags))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy gradient for one sample.
pub(crate) fn cross_entropy_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    (loss, p)
}

/// Fixed electronic gain that gives roughly He-scaled weights when Σ is
/// uniform on `[-1, 1]` and B, P are flat-modulus unitaries.
pub fn default_gain(k: usize, fan_in: usize) -> f64 {
    (6.0 * k as f64 / fan_in as f64).sqrt()
}

/// conv(1->16, 3x3, s2, p1) -> relu -> conv(16->16, 3x3, s1, p1) -> relu ->
/// adaptive avg pool 5x5 -> flatten(400) -> blocked linear 400->10.
pub fn build_paper_model(k: usize, transform: Transform, rng: &mut impl Rng) -> Result<OsnnModel> {
    let conv1 = ConvSpec::new(1, 16, (3, 3), 2, 1)?;
    let conv2 = ConvSpec::new(16, 16, (3, 3), 1, 1)?;
    let mut l1 = BlockedLinear::with_transform(16, conv1.patch_len(), k, transform)?;
    let mut l2 = BlockedLinear::with_transform(16, conv2.patch_len(), k, transform)?;
    let mut l3 = BlockedLinear::with_transform(10, 400, k, transform)?;
    l1.init_uniform(rng);
    l2.init_uniform(rng);
    l3.init_uniform(rng);
    OsnnModel::new(
        [1, 28, 28],
        vec![
            Layer::Conv {
                spec: conv1,
                gain: default_gain(k, conv1.patch_len()),
                linear: l1,
            },
            Layer::Relu,
            Layer::Conv {
                spec: conv2,
                gain: default_gain(k, conv2.patch_len()),
                linear: l2,
            },
            Layer::Relu,
            Layer::AdaptiveAvgPool { out_h: 5, out_w: 5 },
            Layer::Flatten,
            Layer::Linear {
                gain: default_gain(k, 400),
                linear: l3,
            },
        ],
    )
}
