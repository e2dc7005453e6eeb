use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::shape::{broadcast_map, broadcast_shapes, strides};
use super::{Mask, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        index: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        segments: Vec<usize>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Records operations of one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so the backward pass is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
    last_grads: Vec<Option<Tensor>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            last_grads: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter onto the tape once; later calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the most recent backward pass. Leaf gradients accumulate
    /// across passes; intermediate gradients reflect only the last pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if let Some(g) = self.leaf_grads.get(&v.0) {
            return Some(g);
        }
        self.last_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_leaf_grads(&mut self) {
        self.leaf_grads.clear();
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(i, j)| f(da[*i], db[*j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// Inverted dropout; the identity on an evaluation tape or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = self.constant(Tensor::new(shape, data)?);
        self.mul(x, mask)
    }

    // ----- linear algebra -----

    /// Batched matrix product `[.., n, k] x [.., k, m] -> [.., n, m]` with
    /// broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let geo = MatmulGeometry::new(&sa, &sb).ok_or_else(mismatch)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (n, k, m) = (geo.n, geo.k, geo.m);
        let mut out = vec![0.0; geo.batch() * n * m];
        for t in 0..geo.batch() {
            let ab = &va[geo.map_a[t] * n * k..][..n * k];
            let bb = &vb[geo.map_b[t] * k * m..][..k * m];
            let cb = &mut out[t * n * m..][..n * m];
            for i in 0..n {
                let crow = &mut cb[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ab[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bb[p * m..(p + 1) * m];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
        }
        let value = Tensor::new(geo.out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Softmax along `axis`; masked-out entries (mask `false`) become exactly 0.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let mask_map = match mask {
            Some(m) => {
                if broadcast_shapes(m.shape(), &shape).as_deref() != Some(&shape[..]) {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax mask",
                        lhs: shape,
                        rhs: m.shape().to_vec(),
                    });
                }
                Some(broadcast_map(m.shape(), &shape))
            }
            None => None,
        };
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let valid = |i: usize| match (&mask_map, mask) {
                    (Some(map), Some(m)) => m.data()[map[base + i * inner]],
                    _ => true,
                };
                let mut max = f64::NEG_INFINITY;
                for i in 0..len {
                    if valid(i) {
                        max = max.max(xs[base + i * inner]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::FullyMasked { slice: o * inner + j });
                }
                let mut sum = 0.0;
                for i in 0..len {
                    if valid(i) {
                        let e = (xs[base + i * inner] - max).exp();
                        out[base + i * inner] = e;
                        sum += e;
                    }
                }
                for i in 0..len {
                    out[base + i * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "rank-0 input".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ----- reductions and reshaping -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &xs[(o * len + i) * inner..][..inner];
                for (dst, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_map(&out_shape, &eff);
        let xs = self.value(x).data();
        let data = map.iter().map(|&i| xs[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, map }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: "rank < 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers rows (entries along axis 0).
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or(TensorError::InvalidArgument {
            op: "index_select",
            reason: "rank-0 input".into(),
        })?;
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let width: usize = shape[1..].iter().product();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&xs[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sums row `e` of `x` into row `index[e]` of an `[rows, ..]` output.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&index.len()) {
            return Err(TensorError::InvalidArgument {
                op: "scatter_add",
                reason: format!("{} indices for shape {shape:?}", index.len()),
            });
        }
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "scatter_add",
                reason: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let width: usize = shape[1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * width];
        for (e, &r) in index.iter().enumerate() {
            for (o, v) in out[r * width..(r + 1) * width]
                .iter_mut()
                .zip(&xs[e * width..(e + 1) * width])
            {
                *o += v;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ScatterAdd {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the rows of `x` that share a segment id, independently for
    /// every trailing column.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&segments.len()) {
            return Err(TensorError::InvalidArgument {
                op: "segment_softmax",
                reason: format!("{} segment ids for shape {shape:?}", segments.len()),
            });
        }
        let width: usize = shape[1..].iter().product();
        let groups = group_rows(segments);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for rows in groups.values() {
            for c in 0..width {
                let max = rows
                    .iter()
                    .map(|&r| xs[r * width + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &r in rows {
                    let e = (xs[r * width + c] - max).exp();
                    out[r * width + c] = e;
                    sum += e;
                }
                for &r in rows {
                    out[r * width + c] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `[T, V]` logits; rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("logits {shape:?} for {} targets", targets.len()),
            });
        }
        let v = shape[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= v && Some(t) != ignore) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("target {bad} out of range for {v} classes"),
            });
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            if Some(t) != ignore {
                total += lse - row[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
            },
            rg,
        ))
    }

    // ----- backward -----

    /// Differentiates the scalar `loss`. Gradients of leaves accumulate on the
    /// tape across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.run_backward(loss)?;
        self.finish_backward(grads, None);
        Ok(())
    }

    /// Like [`Tape::backward`], additionally accumulating parameter-leaf
    /// gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.run_backward(loss)?;
        self.finish_backward(grads, Some(store));
        Ok(())
    }

    fn finish_backward(&mut self, grads: Vec<Option<Tensor>>, mut store: Option<&mut ParamStore>) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if let Some(s) = store.as_deref_mut() {
                        s.accumulate_grad(id, g);
                    }
                }
                _ => continue,
            }
            self.leaf_grads
                .entry(i)
                .and_modify(|acc| acc.add_assign(g))
                .or_insert_with(|| g.clone());
        }
        self.last_grads = grads;
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        if self.rg(v) {
            let t = Tensor::new(self.shape(v).to_vec(), data)?;
            self.acc(grads, v, t);
        }
        Ok(())
    }

    /// Reduces an output-shaped gradient onto the (broadcast) shape of `v`.
    fn reduce_to(&self, v: Var, out_shape: &[usize], g: &[f64], scale: impl Fn(usize) -> f64) -> Vec<f64> {
        let shape = self.shape(v);
        let n: usize = shape.iter().product();
        if shape == out_shape {
            return g.iter().enumerate().map(|(k, gv)| gv * scale(k)).collect();
        }
        let map = broadcast_map(shape, out_shape);
        let mut out = vec![0.0; n];
        for (k, (&i, gv)) in map.iter().zip(g).enumerate() {
            out[i] += gv * scale(k);
        }
        out
    }

    fn broadcast_values(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        let t = self.value(v);
        if t.shape() == out_shape {
            t.data().to_vec()
        } else {
            broadcast_map(t.shape(), out_shape)
                .into_iter()
                .map(|i| t.data()[i])
                .collect()
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let d = self.reduce_to(v, out_shape, gd, |_| 1.0);
                        self.acc_data(grads, v, d)?;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let d = self.reduce_to(*a, out_shape, gd, |_| 1.0);
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = self.reduce_to(*b, out_shape, gd, |_| -1.0);
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.broadcast_values(*b, out_shape);
                    let d = self.reduce_to(*a, out_shape, gd, |k| bv[k]);
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let av = self.broadcast_values(*a, out_shape);
                    let d = self.reduce_to(*b, out_shape, gd, |k| av[k]);
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.broadcast_values(*b, out_shape);
                if self.rg(*a) {
                    let d = self.reduce_to(*a, out_shape, gd, |k| 1.0 / bv[k]);
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let y = node.value.data();
                    let d = self.reduce_to(*b, out_shape, gd, |k| -y[k] / bv[k]);
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::Neg(x) => self.acc_data(grads, *x, gd.iter().map(|v| -v).collect())?,
            Op::Scale(x, c) => self.acc_data(grads, *x, gd.iter().map(|v| v * c).collect())?,
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc_data(grads, *x, gd.iter().zip(y).map(|(g, y)| g * y).collect())?;
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_data(grads, *x, gd.iter().zip(xv).map(|(g, x)| g / x).collect())?;
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc_data(grads, *x, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc_data(grads, *x, d)?;
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.acc_data(grads, *x, d)?;
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.acc_data(grads, *x, d)?;
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gd, grads)?,
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..len).map(|k| y[base + k * inner] * gd[base + k * inner]).sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            d[idx] = y[idx] * (gd[idx] - dot);
                        }
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let dim = *out_shape.last().expect("rank >= 1");
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let rng = r * dim..(r + 1) * dim;
                        let dxhat: Vec<f64> = gd[rng.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let h = &xhat[rng.clone()];
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for c in 0..dim {
                            dx[r * dim + c] = inv * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; dim];
                    for (k, (g, h)) in gd.iter().zip(xhat).enumerate() {
                        dg[k % dim] += g * h;
                    }
                    self.acc_data(grads, *gain, dg)?;
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; dim];
                    for (k, g) in gd.iter().enumerate() {
                        db[k % dim] += g;
                    }
                    self.acc_data(grads, *bias, db)?;
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc_data(grads, *x, vec![gd[0]; n])?;
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        d[(o * len + k) * inner..][..inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::Reshape(x) => self.acc_data(grads, *x, gd.to_vec())?,
            Op::Permute { x, map } => {
                let mut d = vec![0.0; gd.len()];
                for (k, &src) in map.iter().enumerate() {
                    d[src] = gd[k];
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.acc_data(grads, *v, d)?;
                    }
                    offset += len;
                }
            }
            Op::IndexSelect { x, index } => {
                let rows = self.shape(*x)[0];
                let width = gd.len() / index.len().max(1);
                let mut d = vec![0.0; rows * width];
                for (e, &r) in index.iter().enumerate() {
                    for (o, v) in d[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&gd[e * width..(e + 1) * width])
                    {
                        *o += v;
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::ScatterAdd { x, index } => {
                let width: usize = out_shape[1..].iter().product();
                let mut d = Vec::with_capacity(index.len() * width);
                for &r in index {
                    d.extend_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                let width: usize = out_shape[1..].iter().product();
                let mut d = vec![0.0; y.len()];
                for rows in group_rows(segments).values() {
                    for c in 0..width {
                        let dot: f64 = rows.iter().map(|&r| y[r * width + c] * gd[r * width + c]).sum();
                        for &r in rows {
                            let idx = r * width + c;
                            d[idx] = y[idx] * (gd[idx] - dot);
                        }
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::CrossEntropySum {
                logits,
                targets,
                ignore,
                probs,
            } => {
                let v = out_shape_of(self.shape(*logits));
                let mut d = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for c in 0..v {
                        d[r * v + c] = gd[0] * probs[r * v + c];
                    }
                    d[r * v + t] -= gd[0];
                }
                self.acc_data(grads, *logits, d)?;
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, gd: &[f64], grads: &mut [Option<Tensor>]) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let geo = MatmulGeometry::new(sa, sb).expect("validated in forward");
        let (n, k, m) = (geo.n, geo.k, geo.m);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if self.rg(a) {
            // dA = dC . B^T
            let mut da = vec![0.0; va.len()];
            for t in 0..geo.batch() {
                let gc = &gd[t * n * m..][..n * m];
                let bb = &vb[geo.map_b[t] * k * m..][..k * m];
                let dab = &mut da[geo.map_a[t] * n * k..][..n * k];
                for i in 0..n {
                    let grow = &gc[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bb[p * m..(p + 1) * m];
                        dab[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            self.acc_data(grads, a, da)?;
        }
        if self.rg(b) {
            // dB = A^T . dC
            let mut db = vec![0.0; vb.len()];
            for t in 0..geo.batch() {
                let gc = &gd[t * n * m..][..n * m];
                let ab = &va[geo.map_a[t] * n * k..][..n * k];
                let dbb = &mut db[geo.map_b[t] * k * m..][..k * m];
                for i in 0..n {
                    let grow = &gc[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = ab[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, gv) in dbb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
            self.acc_data(grads, b, db)?;
        }
        Ok(())
    }
}

fn out_shape_of(logits_shape: &[usize]) -> usize {
    logits_shape[1]
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat source offsets for an output of `out_shape` read with `eff` strides.
fn strided_map(out_shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn group_rows(segments: &[usize]) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (r, &s) in segments.iter().enumerate() {
        groups.entry(s).or_default().push(r);
    }
    groups
}

struct MatmulGeometry {
    n: usize,
    k: usize,
    m: usize,
    map_a: Vec<usize>,
    map_b: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (n, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, m) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return None;
        }
        let batch = broadcast_shapes(&sa[..ra - 2], &sb[..rb - 2])?;
        let map_a = broadcast_map(&sa[..ra - 2], &batch);
        let map_b = broadcast_map(&sb[..rb - 2], &batch);
        let mut out_shape = batch;
        out_shape.extend([n, m]);
        Some(Self {
            n,
            k,
            m,
            map_a,
            map_b,
            out_shape,
        })
    }

    fn batch(&self) -> usize {
        self.map_a.len()
    }
}
