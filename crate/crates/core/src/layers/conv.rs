use serde::{Deserialize, Serialize};

use crate::error::{OsnnError, Result};
use crate::numerics::{linalg, RealTensor};

use super::blocked::BlockedLinear;

/// 2-D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(OsnnError::invalid(
                "conv_spec",
                "channels, kernel and stride must be positive",
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Rows of the unrolled input, `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return Err(OsnnError::shape(
                "im2col",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, ph, pw),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Unrolls one `[C, H, W]` image into `out` (`[C*kh*kw, Ho*Wo]`, row-major).
pub(crate) fn im2col_into(x: &[f64], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, out: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let cols = ho * wo;
    let pad = spec.padding as isize;
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ki as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + kj as isize - pad;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(cols_grad: &[f64], h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, out: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let cols = ho * wo;
    let pad = spec.padding as isize;
    for c in 0..spec.in_channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out[c * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn chw(input: &RealTensor, spec: &ConvSpec) -> Result<(usize, usize)> {
    match input.shape() {
        [c, h, w] if *c == spec.in_channels => Ok((*h, *w)),
        s => Err(OsnnError::shape(
            "im2col",
            format!("input shape {:?}, expected [{}, H, W]", s, spec.in_channels),
        )),
    }
}

/// `[C, H, W]` -> `[C*kh*kw, Ho*Wo]`; column `p` is the receptive field of
/// output position `p`, zero where it overlaps padding.
pub fn im2col(input: &RealTensor, spec: &ConvSpec) -> Result<RealTensor> {
    let (h, w) = chw(input, spec)?;
    let (ho, wo) = spec.output_size(h, w)?;
    let mut out = vec![0.0; spec.patch_len() * ho * wo];
    im2col_into(input.data(), h, w, spec, ho, wo, &mut out);
    RealTensor::matrix(spec.patch_len(), ho * wo, out)
}

/// Convolution as `W · im2col(x)` with `W` the layer's realized weights.
pub fn conv_forward(layer: &BlockedLinear, input: &RealTensor, spec: &ConvSpec) -> Result<RealTensor> {
    if layer.n() != spec.patch_len() || layer.m() != spec.out_channels {
        return Err(OsnnError::shape(
            "conv_forward",
            format!(
                "layer is {}x{}, spec needs {}x{}",
                layer.m(),
                layer.n(),
                spec.out_channels,
                spec.patch_len()
            ),
        ));
    }
    let (h, w) = chw(input, spec)?;
    let (ho, wo) = spec.output_size(h, w)?;
    let cols = im2col(input, spec)?;
    let weight = layer.dense_weight();
    let mut out = vec![0.0; spec.out_channels * ho * wo];
    linalg::gemm(
        false,
        false,
        spec.out_channels,
        ho * wo,
        spec.patch_len(),
        1.0,
        weight.data(),
        cols.data(),
        0.0,
        &mut out,
    );
    RealTensor::new(vec![spec.out_channels, ho, wo], out)
}
