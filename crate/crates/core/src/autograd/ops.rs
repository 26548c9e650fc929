// Forward operations and their backward rules.

use super::{AutogradError, NodesView, Op, Tape, Var};
use crate::kernels::{dot, matmul, matmul_at, matmul_bt};
use crate::linalg::symmetric_eigen;
use crate::tensor::Tensor;

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Relative gap under which adjacent eigenvalues share a gradient.
const EIGEN_CLUSTER_TOL: f64 = 1e-9;

type Grads = Vec<(Var, Tensor)>;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AutogradError> {
    if a.len() != b.len() {
        return Err(mismatch(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for axis in (0..shape.len()).rev() {
        strides[axis] = if shape[axis] == 1 && out[axis] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[axis];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank.saturating_sub(1)];
    let mut o = 0;
    for _ in 0..outer {
        let base_a: usize = counter.iter().zip(&sa).map(|(c, s)| c * s).sum();
        let base_b: usize = counter.iter().zip(&sb).map(|(c, s)| c * s).sum();
        for j in 0..inner {
            f(o, base_a + j * ia_step, base_b + j * ib_step);
            o += 1;
        }
        for axis in (0..counter.len()).rev() {
            counter[axis] += 1;
            if counter[axis] < out[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "elementwise-mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    fn unary(&mut self, input: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_requires_grad(&[input]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(kind.name(), av.shape(), bv.shape())?;
        let value = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::new(out_shape, data)?
        } else {
            let mut data = vec![0.0; out_shape.iter().product()];
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |o, ia, ib| {
                data[o] = kind.apply(ad[ia], bd[ib]);
            });
            Tensor::new(out_shape, data)?
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.dims2(), bv.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(mismatch("matmul", av.shape(), bv.shape())),
        };
        debug_assert_eq!(k, k2);
        let value = Tensor::new(vec![m, n], matmul(av.data(), bv.data(), m, k, n))?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        if av.dims2().is_none() {
            return Err(AutogradError::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "transpose needs a rank-2 tensor",
            });
        }
        let value = av.transposed();
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scaled(c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.unary(a, value, Op::Gelu(a))
    }

    /// Natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(exponent));
        self.unary(a, value, Op::Powf(a, exponent))
    }

    /// `max(a, floor)`; no gradient flows through floored entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.unary(a, value, Op::ClampMin(a, floor))
    }

    /// Sum of all entries, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Normalises each slice along the last axis to zero mean and unit
    /// variance. No affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        let features = *av.shape().last().expect("rank >= 1");
        if features == 0 {
            return Err(AutogradError::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "layer-norm needs at least one feature",
            });
        }
        let rows = av.numel() / features;
        let mut normalized = vec![0.0; av.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &av.data()[r * features..(r + 1) * features];
            let mean = x.iter().sum::<f64>() / features as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / features as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, &v) in normalized[r * features..(r + 1) * features].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), normalized.clone())?;
        Ok(self.unary(
            a,
            value,
            Op::LayerNorm {
                input: a,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `vocab×dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutogradError> {
        let tv = self.value(table);
        let (vocab, dim) = tv.dims2().ok_or_else(|| AutogradError::InvalidShape {
            shape: tv.shape().to_vec(),
            reason: "embedding table must be rank 2",
        })?;
        if ids.is_empty() {
            return Err(AutogradError::InvalidArgument {
                op: "embedding-lookup",
                reason: "no ids".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutogradError::IndexOutOfRange {
                    op: "embedding-lookup",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.unary(
            table,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    ///
    /// `logits` is `[classes]` (one row) or `[rows, classes]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, AutogradError> {
        let lv = self.value(logits);
        let (rows, classes) = match lv.shape() {
            &[c] => (1, c),
            &[r, c] => (r, c),
            s => {
                return Err(AutogradError::InvalidShape {
                    shape: s.to_vec(),
                    reason: "logits must be rank 1 or 2",
                })
            }
        };
        if targets.len() != rows {
            return Err(mismatch("softmax-cross-entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            let x = &lv.data()[r * classes..(r + 1) * classes];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(x) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            if let Some(t) = targets[r] {
                if t >= classes {
                    return Err(AutogradError::IndexOutOfRange {
                        op: "softmax-cross-entropy",
                        index: t,
                        extent: classes,
                    });
                }
                total += max + z.ln() - x[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(AutogradError::InvalidArgument {
                op: "softmax-cross-entropy",
                reason: "every target is masked".into(),
            });
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.unary(
            logits,
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// `R·Rᵀ` for a rank-2 `R`.
    pub fn gram(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        let (n, m) = av.dims2().ok_or_else(|| AutogradError::InvalidShape {
            shape: av.shape().to_vec(),
            reason: "gram-matrix needs a rank-2 tensor",
        })?;
        let value = Tensor::new(vec![n, n], matmul_bt(av.data(), av.data(), n, m, n))?;
        Ok(self.unary(a, value, Op::Gram(a)))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        let n = match av.dims2() {
            Some((r, c)) if r == c => r,
            _ => {
                return Err(AutogradError::InvalidShape {
                    shape: av.shape().to_vec(),
                    reason: "trace needs a square matrix",
                })
            }
        };
        let value = Tensor::scalar((0..n).map(|i| av.at(i, i)).sum());
        Ok(self.unary(a, value, Op::Trace(a)))
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.unary(a, value, Op::FrobeniusSq(a))
    }

    /// Eigenvalues of a symmetric matrix, descending.
    ///
    /// Gradients follow `dλᵢ = vᵢᵀ dK vᵢ` with upstream gradients averaged over
    /// clusters of (numerically) equal eigenvalues, which is exact for any
    /// function symmetric in the spectrum.
    pub fn symmetric_eigenvalues(&mut self, a: Var) -> Result<Var, AutogradError> {
        let av = self.value(a);
        let n = match av.dims2() {
            Some((r, c)) if r == c => r,
            _ => {
                return Err(AutogradError::InvalidShape {
                    shape: av.shape().to_vec(),
                    reason: "symmetric-eigenvalues needs a square matrix",
                })
            }
        };
        let eig = symmetric_eigen(av.data(), n)?;
        let value = Tensor::vector(eig.values);
        Ok(self.unary(
            a,
            value,
            Op::SymEig {
                input: a,
                vectors: eig.vectors,
            },
        ))
    }

    /// Multi-head causal self-attention on `[batch·seq, dim]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, AutogradError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dims2().ok_or_else(|| AutogradError::InvalidShape {
            shape: qv.shape().to_vec(),
            reason: "attention inputs must be rank 2",
        })?;
        if kv.shape() != qv.shape() {
            return Err(mismatch("causal-attention", qv.shape(), kv.shape()));
        }
        if vv.shape() != qv.shape() {
            return Err(mismatch("causal-attention", qv.shape(), vv.shape()));
        }
        if rows != batch * seq || heads == 0 || dim % heads != 0 {
            return Err(AutogradError::InvalidArgument {
                op: "causal-attention",
                reason: format!(
                    "{rows}x{dim} inputs incompatible with batch={batch}, seq={seq}, heads={heads}"
                ),
            });
        }
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * dim + off..(b * seq + i) * dim + off + hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * dim + off..(b * seq + j) * dim + off + hd];
                        scores[j] = dot(qi, kj) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = (b * seq + i) * dim + off;
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[pbase + i * seq + j] = p;
                        let vj = &vd[(b * seq + j) * dim + off..(b * seq + j) * dim + off + hd];
                        for (o, &x) in out[orow..orow + hd].iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        let rg = self.any_requires_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }
}

fn map_grad(upstream: &Tensor, input: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| f(g, x))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape as input")
}

fn binary_grads(kind: Binary, a: &Tensor, b: &Tensor, out: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(out.shape(), a.shape(), b.shape(), |o, ia, ib| {
        let go = gd[o];
        match kind {
            Binary::Add => {
                ga[ia] += go;
                gb[ib] += go;
            }
            Binary::Sub => {
                ga[ia] += go;
                gb[ib] -= go;
            }
            Binary::Mul => {
                ga[ia] += go * bd[ib];
                gb[ib] += go * ad[ia];
            }
            Binary::Div => {
                ga[ia] += go / bd[ib];
                gb[ib] -= go * ad[ia] / (bd[ib] * bd[ib]);
            }
        }
    });
    (
        Tensor::new(a.shape().to_vec(), ga).expect("input shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("input shape"),
    )
}

pub(crate) fn backward_rule(view: &NodesView<'_>, id: usize, g: &Tensor) -> Result<Grads, AutogradError> {
    let out = view.output(id);
    let grads = match view.op(id) {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (view.value(*a), view.value(*b));
            let (m, k) = av.dims2().expect("rank 2");
            let n = bv.dims2().expect("rank 2").1;
            let ga = matmul_bt(g.data(), bv.data(), m, n, k);
            let gb = matmul_at(av.data(), g.data(), m, k, n);
            vec![
                (*a, Tensor::new(vec![m, k], ga)?),
                (*b, Tensor::new(vec![k, n], gb)?),
            ]
        }
        Op::Transpose(a) => vec![(*a, g.transposed())],
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(view.value(*a).shape().to_vec())?)],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let kind = match view.op(id) {
                Op::Add(..) => Binary::Add,
                Op::Sub(..) => Binary::Sub,
                Op::Mul(..) => Binary::Mul,
                _ => Binary::Div,
            };
            let (ga, gb) = binary_grads(kind, view.value(*a), view.value(*b), out, g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, c) => vec![(*a, g.scaled(*c))],
        Op::Relu(a) => vec![(
            *a,
            map_grad(g, view.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        )],
        Op::Gelu(a) => vec![(*a, map_grad(g, view.value(*a), |g, x| g * gelu_grad(x)))],
        Op::Log(a) => vec![(*a, map_grad(g, view.value(*a), |g, x| g / x))],
        Op::Powf(a, p) => {
            let p = *p;
            vec![(*a, map_grad(g, view.value(*a), |g, x| g * p * x.powf(p - 1.0)))]
        }
        Op::ClampMin(a, floor) => {
            let floor = *floor;
            vec![(
                *a,
                map_grad(g, view.value(*a), |g, x| if x > floor { g } else { 0.0 }),
            )]
        }
        Op::Sum(a) => vec![(*a, Tensor::filled(view.value(*a).shape(), g.item()))],
        Op::LayerNorm {
            input,
            normalized,
            inv_std,
        } => {
            let shape = view.value(*input).shape().to_vec();
            let features = *shape.last().expect("rank >= 1");
            let mut gx = vec![0.0; g.numel()];
            for (r, &is) in inv_std.iter().enumerate() {
                let range = r * features..(r + 1) * features;
                let gy = &g.data()[range.clone()];
                let xh = &normalized[range.clone()];
                let mean_g = gy.iter().sum::<f64>() / features as f64;
                let mean_gx = dot(gy, xh) / features as f64;
                for ((o, &gv), &h) in gx[range].iter_mut().zip(gy).zip(xh) {
                    *o = is * (gv - mean_g - h * mean_gx);
                }
            }
            vec![(*input, Tensor::new(shape, gx)?)]
        }
        Op::Embedding { table, ids } => {
            let tv = view.value(*table);
            let (_, dim) = tv.dims2().expect("rank 2");
            let mut gt = Tensor::zeros(tv.shape());
            let gd = gt.data_mut();
            for (r, &id) in ids.iter().enumerate() {
                for (o, &x) in gd[id * dim..(id + 1) * dim]
                    .iter_mut()
                    .zip(&g.data()[r * dim..(r + 1) * dim])
                {
                    *o += x;
                }
            }
            vec![(*table, gt)]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let shape = view.value(*logits).shape().to_vec();
            let classes = *shape.last().expect("rank >= 1");
            let scale = g.item() / *count as f64;
            let mut gl = vec![0.0; probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    let row = &mut gl[r * classes..(r + 1) * classes];
                    for (o, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                        *o = p * scale;
                    }
                    row[*t] -= scale;
                }
            }
            vec![(*logits, Tensor::new(shape, gl)?)]
        }
        Op::Gram(a) => {
            let av = view.value(*a);
            let (n, m) = av.dims2().expect("rank 2");
            let mut sym = g.data().to_vec();
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = g.data()[i * n + j] + g.data()[j * n + i];
                }
            }
            vec![(*a, Tensor::new(vec![n, m], matmul(&sym, av.data(), n, n, m))?)]
        }
        Op::Trace(a) => {
            let av = view.value(*a);
            let n = av.dims2().expect("rank 2").0;
            let mut ga = Tensor::zeros(av.shape());
            for i in 0..n {
                ga.data_mut()[i * n + i] = g.item();
            }
            vec![(*a, ga)]
        }
        Op::FrobeniusSq(a) => vec![(*a, view.value(*a).scaled(2.0 * g.item()))],
        Op::SymEig { input, vectors } => {
            let values = out.data();
            let n = values.len();
            let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tol = EIGEN_CLUSTER_TOL * peak.max(f64::MIN_POSITIVE);
            let mut weights = g.data().to_vec();
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && (values[end - 1] - values[end]).abs() <= tol {
                    end += 1;
                }
                let mean = weights[start..end].iter().sum::<f64>() / (end - start) as f64;
                weights[start..end].iter_mut().for_each(|w| *w = mean);
                start = end;
            }
            // dK = V diag(w) Vᵀ
            let mut scaled = vectors.clone();
            for r in 0..n {
                for c in 0..n {
                    scaled[r * n + c] *= weights[c];
                }
            }
            let gk = matmul_bt(&scaled, vectors, n, n, n);
            vec![(*input, Tensor::new(vec![n, n], gk)?)]
        }
        Op::CausalAttention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let (qv, kv, vv) = (view.value(*q), view.value(*k), view.value(*v));
            let (rows, dim) = qv.dims2().expect("rank 2");
            let hd = dim / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
            let mut gq = vec![0.0; rows * dim];
            let mut gk = vec![0.0; rows * dim];
            let mut gv = vec![0.0; rows * dim];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * hd;
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let ri = (b * seq + i) * dim + off;
                        let go = &gd[ri..ri + hd];
                        let prow = &probs[pbase + i * seq..pbase + i * seq + seq];
                        let mut weighted = 0.0;
                        for j in 0..=i {
                            let rj = (b * seq + j) * dim + off;
                            dp[j] = dot(go, &vd[rj..rj + hd]);
                            weighted += prow[j] * dp[j];
                            for (o, &x) in gv[rj..rj + hd].iter_mut().zip(go) {
                                *o += prow[j] * x;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let rj = (b * seq + j) * dim + off;
                            for c in 0..hd {
                                gq[ri + c] += ds * kd[rj + c];
                                gk[rj + c] += ds * qd[ri + c];
                            }
                        }
                    }
                }
            }
            vec![
                (*q, Tensor::new(vec![rows, dim], gq)?),
                (*k, Tensor::new(vec![rows, dim], gk)?),
                (*v, Tensor::new(vec![rows, dim], gv)?),
            ]
        }
    };
    Ok(grads)
}
