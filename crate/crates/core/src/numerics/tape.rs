//! Minimal reverse-mode gradient engine over a fixed operator set.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Node ids are handed out in creation order and an operation may only refer
//! to existing nodes, so the recorded graph is a DAG in topological order.
//! [`Graph::backward`] walks it once in reverse and returns a gradient for
//! every node reachable from the (scalar) output.
//!
//! Complex circuit math is expressed through paired real/imaginary tensors;
//! only real values ever live on the tape.

use crate::error::{OsnnError, Result};
use crate::numerics::RealTensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sqrt(Var),
    Cos(Var),
    Sin(Var),
    Relu(Var),
    MatMul(Var, Var),
    SumAll(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    Abs2 { re: Var, im: Var },
    MulRows(Var, Var),
    AddRows(Var, Var),
    Slice { src: Var, start: usize },
    Assemble { entries: Vec<(usize, Var)> },
    PermuteRows { src: Var, perm: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::MulRows(a, b) | Op::AddRows(a, b) => vec![*a, *b],
            Op::Abs2 { re, im } => vec![*re, *im],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sqrt(a)
            | Op::Cos(a)
            | Op::Sin(a)
            | Op::Relu(a)
            | Op::SumAll(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Slice { src, .. } | Op::PermuteRows { src, .. } => vec![*src],
            Op::Assemble { entries } => entries.iter().map(|(_, v)| *v).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: RealTensor,
    op: Op,
}

/// A recorded computation. Build with the operator methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if `v` does not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape for
    /// unreachable nodes.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> RealTensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| RealTensor::zeros(graph.value(v).shape()))
    }
}

fn same_shape(op: &'static str, a: &RealTensor, b: &RealTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(OsnnError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows_cols(t: &RealTensor) -> (usize, usize) {
    match t.shape() {
        [r] => (*r, 1),
        [r, c] => (*r, *c),
        s => (s[0], s[1..].iter().product()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&RealTensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| OsnnError::invalid("var", format!("node {} does not exist", v.0)))
    }

    /// Leaf node. Parameters and constants are both leaves; whether a
    /// gradient is read back is up to the caller.
    pub fn leaf(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.check(a)?;
        let data = av.data().iter().map(|&x| f(x)).collect::<Vec<_>>();
        let value = RealTensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = RealTensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.check(a)?.data().iter().position(|&x| x < 0.0) {
            return Err(OsnnError::invalid("sqrt", format!("negative input at index {}", bad)));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(OsnnError::shape("matmul", format!("{}x{} * {}x{}", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        super::linalg::gemm(false, false, m, n, k, 1.0, av.data(), bv.data(), 0.0, &mut out);
        let value = RealTensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.sum();
        let value = RealTensor::scalar(s)?;
        Ok(self.push(value, Op::SumAll(a)))
    }

    /// Mean softmax cross-entropy of `logits` (`[batch, classes]`, or a single
    /// `[classes]` row) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.check(logits)?;
        let (n, c) = match lv.shape() {
            [c] => (1, *c),
            [n, c] => (*n, *c),
            s => return Err(OsnnError::shape("softmax_cross_entropy", format!("rank {:?}", s))),
        };
        if labels.len() != n {
            return Err(OsnnError::shape(
                "softmax_cross_entropy",
                format!("{} rows but {} labels", n, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(OsnnError::invalid("label", format!("{} out of range for {} classes", bad, c)));
        }
        let mut loss = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let probs = softmax(row);
            loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        }
        let value = RealTensor::scalar(loss / n as f64)?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `re^2 + im^2` elementwise: squared magnitude of a complex tensor held
    /// as two real tensors.
    pub fn abs2(&mut self, re: Var, im: Var) -> Result<Var> {
        self.binary(re, im, "abs2", Op::Abs2 { re, im }, |x, y| x * x + y * y)
    }

    /// Scales row `r` of `x` (`[rows]` or `[rows, cols]`) by `v[r]`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols, data) = self.row_broadcast("mul_rows", x, v, |a, b| a * b)?;
        let shape = self.check(x)?.shape().to_vec();
        debug_assert_eq!(rows * cols, data.len());
        let value = RealTensor::from_parts(shape, data);
        Ok(self.push(value, Op::MulRows(x, v)))
    }

    /// Adds `v[r]` to every entry of row `r` of `x`.
    pub fn add_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, _, data) = self.row_broadcast("add_rows", x, v, |a, b| a + b)?;
        let shape = self.check(x)?.shape().to_vec();
        let value = RealTensor::from_parts(shape, data);
        Ok(self.push(value, Op::AddRows(x, v)))
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Vec<f64>)> {
        let xv = self.check(x)?;
        let vv = self.check(v)?;
        let (rows, cols) = rows_cols(xv);
        if vv.len() != rows {
            return Err(OsnnError::shape(name, format!("{} rows vs vector of {}", rows, vv.len())));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let s = vv.data()[r];
            data.extend(xv.data()[r * cols..(r + 1) * cols].iter().map(|&a| f(a, s)));
        }
        Ok((rows, cols, data))
    }

    /// Contiguous slice `[start, start + len)` of the flattened input, as a
    /// rank-1 tensor.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.check(src)?;
        if start + len > sv.len() {
            return Err(OsnnError::shape(
                "slice",
                format!("[{}, {}) out of {}", start, start + len, sv.len()),
            ));
        }
        let value = RealTensor::from_parts(vec![len], sv.data()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice { src, start }))
    }

    /// Builds a tensor of `shape` that is zero except at the listed flat
    /// indices, where it takes the value of the given scalar nodes.
    pub fn assemble(&mut self, shape: &[usize], entries: &[(usize, Var)]) -> Result<Var> {
        let mut value = RealTensor::zeros(shape);
        let n = value.len();
        for &(idx, v) in entries {
            let sv = self.check(v)?;
            if !sv.is_scalar() {
                return Err(OsnnError::shape("assemble", format!("entry node has shape {:?}", sv.shape())));
            }
            if idx >= n {
                return Err(OsnnError::shape("assemble", format!("index {} out of {}", idx, n)));
            }
            value.data_mut()[idx] += sv.data()[0];
        }
        Ok(self.push(
            value,
            Op::Assemble {
                entries: entries.to_vec(),
            },
        ))
    }

    /// Output row `r` is input row `perm[r]`.
    pub fn permute_rows(&mut self, src: Var, perm: &[usize]) -> Result<Var> {
        let sv = self.check(src)?;
        let (rows, cols) = rows_cols(sv);
        let mut seen = vec![false; rows];
        if perm.len() != rows || perm.iter().any(|&p| p >= rows || std::mem::replace(&mut seen[p], true)) {
            return Err(OsnnError::invalid("perm", format!("not a permutation of {} rows", rows)));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in perm {
            data.extend_from_slice(&sv.data()[p * cols..(p + 1) * cols]);
        }
        let value = RealTensor::from_parts(sv.shape().to_vec(), data);
        Ok(self.push(
            value,
            Op::PermuteRows {
                src,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if !out.is_scalar() {
            return Err(OsnnError::NonScalarOutput(out.shape().to_vec()));
        }
        for (id, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Some(p) = node.op.parents().into_iter().find(|p| p.0 >= id) {
                return Err(OsnnError::CyclicGraph { node: id, parent: p.0 });
            }
        }

        let mut grads: Vec<Option<RealTensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(RealTensor::filled(out.shape(), 1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &RealTensor, grads: &mut [Option<RealTensor>]) {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, val(*a).shape(), gd.iter().copied());
                accumulate(grads, *b, val(*b).shape(), gd.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, val(*a).shape(), gd.iter().copied());
                accumulate(grads, *b, val(*b).shape(), gd.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, val(*a).shape(), gd.iter().zip(bv).map(|(g, y)| g * y));
                accumulate(grads, *b, val(*b).shape(), gd.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::Neg(a) => accumulate(grads, *a, val(*a).shape(), gd.iter().map(|x| -x)),
            Op::Scale(a, c) => accumulate(grads, *a, val(*a).shape(), gd.iter().map(|x| c * x)),
            Op::Offset(a) => accumulate(grads, *a, val(*a).shape(), gd.iter().copied()),
            Op::Sqrt(a) => {
                let out = node.value.data();
                accumulate(
                    grads,
                    *a,
                    val(*a).shape(),
                    gd.iter().zip(out).map(|(g, s)| if *s > 0.0 { g * 0.5 / s } else { 0.0 }),
                );
            }
            Op::Cos(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, val(*a).shape(), gd.iter().zip(x).map(|(g, x)| -g * x.sin()));
            }
            Op::Sin(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, val(*a).shape(), gd.iter().zip(x).map(|(g, x)| g * x.cos()));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                accumulate(
                    grads,
                    *a,
                    val(*a).shape(),
                    gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2().expect("checked at construction");
                let (_, n) = bv.dims2().expect("checked at construction");
                let mut ga = vec![0.0; m * k];
                super::linalg::gemm(false, true, m, k, n, 1.0, gd, bv.data(), 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                super::linalg::gemm(true, false, k, n, m, 1.0, av.data(), gd, 0.0, &mut gb);
                accumulate(grads, *a, av.shape(), ga.into_iter());
                accumulate(grads, *b, bv.shape(), gb.into_iter());
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, val(*a).shape(), std::iter::repeat_n(gd[0], n));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let c = *lv.shape().last().expect("non-empty shape");
                let n = labels.len() as f64;
                let mut out = Vec::with_capacity(lv.len());
                for (row, &label) in lv.data().chunks(c).zip(labels) {
                    let mut p = softmax(row);
                    p[label] -= 1.0;
                    out.extend(p.into_iter().map(|x| x * gd[0] / n));
                }
                accumulate(grads, *logits, lv.shape(), out.into_iter());
            }
            Op::Abs2 { re, im } => {
                let (r, i) = (val(*re).data(), val(*im).data());
                accumulate(grads, *re, val(*re).shape(), gd.iter().zip(r).map(|(g, x)| 2.0 * g * x));
                accumulate(grads, *im, val(*im).shape(), gd.iter().zip(i).map(|(g, y)| 2.0 * g * y));
            }
            Op::MulRows(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let (rows, cols) = rows_cols(xv);
                let mut gx = Vec::with_capacity(rows * cols);
                let mut gv = vec![0.0; rows];
                for r in 0..rows {
                    let s = vv.data()[r];
                    for c in 0..cols {
                        let gi = gd[r * cols + c];
                        gx.push(gi * s);
                        gv[r] += gi * xv.data()[r * cols + c];
                    }
                }
                accumulate(grads, *x, xv.shape(), gx.into_iter());
                accumulate(grads, *v, vv.shape(), gv.into_iter());
            }
            Op::AddRows(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let (rows, cols) = rows_cols(xv);
                let gv: Vec<f64> = (0..rows).map(|r| gd[r * cols..(r + 1) * cols].iter().sum()).collect();
                accumulate(grads, *x, xv.shape(), gd.iter().copied());
                accumulate(grads, *v, vv.shape(), gv.into_iter());
            }
            Op::Slice { src, start } => {
                let sv = val(*src);
                let mut full = vec![0.0; sv.len()];
                full[*start..*start + gd.len()].copy_from_slice(gd);
                accumulate(grads, *src, sv.shape(), full.into_iter());
            }
            Op::Assemble { entries } => {
                for &(idx, v) in entries {
                    accumulate(grads, v, &[1], std::iter::once(gd[idx]));
                }
            }
            Op::PermuteRows { src, perm } => {
                let sv = val(*src);
                let (rows, cols) = rows_cols(sv);
                let mut full = vec![0.0; rows * cols];
                for (r, &p) in perm.iter().enumerate() {
                    full[p * cols..(p + 1) * cols].copy_from_slice(&gd[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, *src, sv.shape(), full.into_iter());
            }
        }
    }

    #[cfg(test)]
    fn push_raw_for_test(&mut self, value: RealTensor, parent: Var) -> Var {
        self.push(value, Op::Neg(parent))
    }
}

fn accumulate(grads: &mut [Option<RealTensor>], target: Var, shape: &[usize], values: impl Iterator<Item = f64>) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(values) {
                *e += v;
            }
        }
        slot @ None => {
            let data: Vec<f64> = values.collect();
            *slot = Some(RealTensor::from_parts(shape.to_vec(), data));
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences for a scalar function of several tensor inputs.
///
/// The relative error of each coordinate is `|analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-3)`, so coordinates with vanishing
/// gradient are judged on an absolute 1e-3 scale instead of blowing up.
pub fn gradient_check<F>(inputs: &[RealTensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |perturbed: &[RealTensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
