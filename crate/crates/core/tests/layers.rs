use osnn::butterfly::{ButterflyNetwork, PhaseConfiguration, Routing, Transform};
use osnn::layers::*;
use osnn::numerics::{Complex64, RealTensor};
use osnn::training::quant::QuantSpec;
use osnn::OsnnError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(k: usize, routing: Routing, rng: &mut impl Rng) -> PhaseConfiguration {
    let net = ButterflyNetwork::new(k, routing).unwrap();
    let phases = (0..net.phase_shifter_count())
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    PhaseConfiguration::new(&net, phases).unwrap()
}

fn random_layer(m: usize, n: usize, k: usize, rng: &mut impl Rng) -> BlockedLinear {
    let routing = if rng.random_bool(0.5) { Routing::Natural } else { Routing::Fft };
    let b = random_config(k, routing, rng);
    let p = random_config(k, routing, rng);
    let mut layer = BlockedLinear::new(m, n, k, b, p).unwrap();
    layer.init_uniform(rng);
    layer
}

/// Real part of the full block matrix, built entry by entry from the
/// complex `B diag(σ) P` products of each block and then truncated.
fn dense_oracle(layer: &BlockedLinear) -> Vec<Vec<f64>> {
    let pad = layer.padding();
    let k = pad.k;
    let b = layer.b_matrix();
    let p = layer.p_matrix();
    let sigma = layer.effective_sigma();
    let mut w = vec![vec![0.0; pad.n]; pad.m];
    for (r, row) in w.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (i, j) = (r / k, c / k);
            let s = &sigma[(i * pad.n_blocks + j) * k..][..k];
            let mut acc = Complex64::new(0.0, 0.0);
            for d in 0..k {
                acc += b.get(r % k, d) * s[d] * p.get(d, c % k);
            }
            *v = acc.re;
        }
    }
    w
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn blocked_forward_matches_dense_block_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let k = [2, 4, 8][rng.random_range(0..3)];
        let m = rng.random_range(1..=64);
        let n = rng.random_range(1..=64);
        let layer = random_layer(m, n, k, &mut rng);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = layer.forward_blocked(&RealTensor::vector(x.clone()).unwrap()).unwrap();
        let oracle = dense_oracle(&layer);
        let want = matvec(&oracle, &x);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "m={} n={} k={}", m, n, k);
        }
        let dense = layer.dense_weight();
        for r in 0..m {
            for c in 0..n {
                assert!((dense.data()[r * n + c] - oracle[r][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn padding_geometry() {
    let p = pad_to_block(10, 7, 4).unwrap();
    assert_eq!((p.m_blocks, p.n_blocks), (3, 2));
    assert_eq!((p.m_padded(), p.n_padded()), (12, 8));
    assert!(p.is_padded());
    assert_eq!(p.unit_count(), 6);
    assert!(!pad_to_block(8, 16, 8).unwrap().is_padded());
    assert!(pad_to_block(0, 3, 4).is_err());
}

#[test]
fn padded_layer_output_has_logical_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = random_layer(5, 3, 4, &mut rng);
    let y = layer.forward_blocked(&RealTensor::vector(vec![0.2, -0.4, 0.9]).unwrap()).unwrap();
    assert_eq!(y.len(), 5);
    let err = layer.forward_blocked(&RealTensor::vector(vec![0.0; 4]).unwrap()).unwrap_err();
    assert!(matches!(err, OsnnError::ShapeMismatch { .. }));
}

#[test]
fn blocked_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, n, k) in [(6, 5, 2), (9, 13, 4), (8, 8, 8)] {
        let mut layer = random_layer(m, n, k, &mut rng);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xt = RealTensor::vector(x.clone()).unwrap();
        let loss = |l: &BlockedLinear, x: &[f64]| -> f64 {
            let y = l.forward_blocked(&RealTensor::vector(x.to_vec()).unwrap()).unwrap();
            y.data().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (gs, gx) = layer.grad_blocked(&xt, &RealTensor::vector(g.clone()).unwrap()).unwrap();
        let h = 1e-6;
        let base = layer.sigma().to_vec();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            layer.set_sigma(plus).unwrap();
            let lp = loss(&layer, &x);
            layer.set_sigma(minus).unwrap();
            let lm = loss(&layer, &x);
            let fd = (lp - lm) / (2.0 * h);
            let an = gs.data()[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "sigma {}", idx);
        }
        layer.set_sigma(base).unwrap();
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "x {}", i);
        }
    }
}

#[test]
fn quantization_changes_realized_sigma_only() {
    let mut layer = BlockedLinear::with_transform(4, 4, 4, Transform::Hadamard).unwrap();
    layer.set_sigma(vec![0.3, -0.5, 0.99, -0.01]).unwrap();
    layer.set_quant(Some(QuantSpec::new(3).unwrap()));
    let eff = layer.effective_sigma();
    let want = [2.0 / 7.0, -4.0 / 7.0, 1.0, 0.0];
    for (a, b) in eff.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(layer.sigma(), &[0.3, -0.5, 0.99, -0.01]);
    let units = layer.units();
    assert_eq!(units.len(), 1);
    assert_eq!(units[0].signs[1], -1);
}

#[test]
fn sigma_and_config_validation() {
    let mut layer = BlockedLinear::with_transform(4, 8, 4, Transform::Hadamard).unwrap();
    assert!(layer.set_sigma(vec![0.0; 3]).is_err());
    assert!(layer.set_sigma(vec![f64::NAN; 8]).is_err());
    let b8 = Transform::Hadamard.configure(8).unwrap();
    let p4 = Transform::Hadamard.configure(4).unwrap();
    assert!(matches!(
        BlockedLinear::new(4, 4, 4, b8, p4),
        Err(OsnnError::ConfigMismatch(_))
    ));
}

#[test]
fn masked_units_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut layer = random_layer(8, 8, 4, &mut rng);
    layer.set_mask(vec![true, false, false, true]).unwrap();
    assert_eq!(layer.trainable_count(), 8);
    let w = layer.dense_weight();
    // Unit 1 is rows 0..4, columns 4..8.
    for r in 0..4 {
        for c in 4..8 {
            assert_eq!(w.data()[r * 8 + c], 0.0);
        }
    }
    assert!(layer.set_mask(vec![true; 3]).is_err());
}

#[test]
fn im2col_enumerates_receptive_fields() {
    let x = RealTensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let spec = ConvSpec::new(1, 1, (2, 2), 1, 0).unwrap();
    let cols = im2col(&x, &spec).unwrap();
    assert_eq!(cols.shape(), &[4, 4]);
    // Columns are output positions, rows are kernel offsets.
    let want = [
        [1.0, 2.0, 4.0, 5.0],
        [2.0, 3.0, 5.0, 6.0],
        [4.0, 5.0, 7.0, 8.0],
        [5.0, 6.0, 8.0, 9.0],
    ];
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert_eq!(cols.data()[r * 4 + c], *v);
        }
    }
    let padded = im2col(&x, &ConvSpec::new(1, 1, (3, 3), 2, 1).unwrap()).unwrap();
    assert_eq!(padded.shape(), &[9, 4]);
    // Top-left output: only the bottom-right 2x2 of the kernel sees pixels.
    let first: Vec<f64> = (0..9).map(|r| padded.data()[r * 4]).collect();
    assert_eq!(first, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    assert!(im2col(&x, &ConvSpec::new(1, 1, (6, 6), 1, 0).unwrap()).is_err());
    assert!(im2col(&x, &ConvSpec::new(2, 1, (2, 2), 1, 0).unwrap()).is_err());
}

#[test]
fn conv_matches_direct_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = ConvSpec::new(3, 5, (3, 3), 2, 1).unwrap();
    let layer = random_layer(5, spec.patch_len(), 4, &mut rng);
    let (h, w) = (7, 6);
    let x: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let out = conv_forward(&layer, &RealTensor::new(vec![3, h, w], x.clone()).unwrap(), &spec).unwrap();
    let (ho, wo) = (4, 3);
    assert_eq!(out.shape(), &[5, ho, wo]);
    let kw = layer.dense_weight();
    for o in 0..5 {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = kw.data()[o * 27 + (c * 3 + ky) * 3 + kx];
                            acc += wv * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                assert!((out.data()[(o * ho + oy) * wo + ox] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn paper_model_shapes_and_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_paper_model(4, Transform::Hadamard, &mut rng).unwrap();
    let shapes = model.shapes().unwrap();
    assert_eq!(shapes[1], [16, 14, 14]);
    assert_eq!(shapes[3], [16, 14, 14]);
    assert_eq!(shapes[5], [16, 5, 5]);
    assert_eq!(shapes[6], [400, 1, 1]);
    assert_eq!(shapes[7], [10, 1, 1]);
    let units: usize = model.blocked_layers().map(|l| l.padding().unit_count()).sum();
    assert_eq!(units, 12 + 144 + 300);
    assert_eq!(model.trainable_count(), units * 4);
}

/// Ideal model forward rebuilt from public per-layer pieces.
fn manual_forward(model: &OsnnModel, image: &[f64]) -> Vec<f64> {
    let shapes = model.shapes().unwrap();
    let mut act = image.to_vec();
    for (li, layer) in model.layers().iter().enumerate() {
        let [c, h, w] = shapes[li];
        act = match layer {
            Layer::Conv { spec, linear, gain } => {
                let out = conv_forward(linear, &RealTensor::new(vec![c, h, w], act).unwrap(), spec).unwrap();
                out.data().iter().map(|v| v * gain).collect()
            }
            Layer::Linear { linear, gain } => {
                let y = linear.forward_blocked(&RealTensor::vector(act).unwrap()).unwrap();
                y.data().iter().map(|v| v * gain).collect()
            }
            Layer::Relu => act.iter().map(|v| v.max(0.0)).collect(),
            Layer::AdaptiveAvgPool { out_h, out_w } => {
                let mut out = Vec::new();
                for ch in 0..c {
                    for oy in 0..*out_h {
                        for ox in 0..*out_w {
                            let y0 = oy * h / out_h;
                            let y1 = ((oy + 1) * h).div_ceil(*out_h);
                            let x0 = ox * w / out_w;
                            let x1 = ((ox + 1) * w).div_ceil(*out_w);
                            let mut s = 0.0;
                            let mut cnt = 0.0;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    s += act[(ch * h + y) * w + x];
                                    cnt += 1.0;
                                }
                            }
                            out.push(s / cnt);
                        }
                    }
                }
                out
            }
            Layer::Flatten => act,
        };
    }
    act
}

#[test]
fn model_forward_matches_layer_by_layer_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = build_paper_model(4, Transform::Hadamard, &mut rng).unwrap();
    let image: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
    let a = model.forward(&image).unwrap();
    let b = manual_forward(&model, &image);
    assert_eq!(a.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10);
    }
    assert_eq!(model.predict(&image).unwrap(), argmax(&b));
    assert!(model.forward(&image[..100]).is_err());
}

#[test]
fn model_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = build_paper_model(4, Transform::Hadamard, &mut rng).unwrap();
    model.set_quant(Some(QuantSpec::default()));
    let text = model.to_json().unwrap();
    let back = OsnnModel::from_json(&text).unwrap();
    assert_eq!(back, model);
    let tampered = text.replacen("\"in_channels\": 16", "\"in_channels\": 3", 1);
    assert!(OsnnModel::from_json(&tampered).is_err());
}
