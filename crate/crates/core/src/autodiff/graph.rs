//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is a
//! topological order and backward walks it in reverse, visiting each node
//! once. Gradients reaching a node along several paths are summed.

use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::tensor::{strides, Tensor};
use crate::encoder::PadSpec;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geo: Box<ConvGeometry>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Mean {
        x: Var,
        reduced: Vec<bool>,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    /// `out[.., i, ..] = x[.., index[.., i, ..], ..]` along `dim`.
    Gather {
        x: Var,
        dim: usize,
        index: Vec<usize>,
    },
    Softmax {
        x: Var,
        dim: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPoolAll(Var),
    /// Strided time slice plus zero-filled extra depth maps.
    Shortcut {
        x: Var,
        t_stride: usize,
    },
    SumAll(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
        clamp: f64,
    },
    BceLogits {
        z: Var,
        label: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record. `shape_only` graphs propagate shapes through the same
/// code paths without doing arithmetic.
pub struct Graph {
    nodes: Vec<Node>,
    shape_only: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{name} produced a non-finite value"
        )))
    }
}

/// Split a shape around `dim` into (outer, size, inner).
fn around(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            shape_only: false,
        }
    }

    pub fn shape_only() -> Self {
        Graph {
            nodes: Vec::new(),
            shape_only: true,
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !self.shape_only {
            check_finite(name, &value)?;
        }
        Ok(self.push(value, op, parents))
    }

    /// Input that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: &PadSpec,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [geo.c_out] {
            return Err(Error::Shape(format!(
                "conv3d bias shape {:?} does not match {} output depths",
                self.shape(b),
                geo.c_out
            )));
        }
        let out_shape = geo.out_shape();
        let value = if self.shape_only {
            Tensor::zeros(&out_shape)
        } else {
            let data = conv3d_forward(
                &geo,
                self.value(x).data(),
                self.value(w).data(),
                self.value(b).data(),
            );
            Tensor::new(&out_shape, data)?
        };
        self.push_checked(
            "conv3d",
            value,
            Op::Conv3d {
                x,
                w,
                b,
                geo: Box::new(geo),
            },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(x),
                self.shape(y)
            )));
        }
        let mut value = self.value(x).clone();
        for (a, b) in value.data_mut().iter_mut().zip(self.value(y).data()) {
            *a += b;
        }
        self.push_checked("add", value, Op::Add(x, y), &[x, y])
    }

    fn broadcast_shape(&self, x: Var, y: Var) -> Result<Vec<usize>> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != sy.len() {
            return Err(Error::Shape(format!(
                "mul: ranks of {sx:?} and {sy:?} differ"
            )));
        }
        sx.iter()
            .zip(sy)
            .map(|(&a, &b)| match (a, b) {
                _ if a == b => Ok(a),
                (1, b) => Ok(b),
                (a, 1) => Ok(a),
                _ => Err(Error::Shape(format!(
                    "mul: cannot broadcast {sx:?} with {sy:?}"
                ))),
            })
            .collect()
    }

    /// Flat input offsets for every output element under broadcasting.
    fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
        let st = strides(input);
        let eff: Vec<usize> = input
            .iter()
            .zip(&st)
            .map(|(&n, &s)| if n == 1 { 0 } else { s })
            .collect();
        let n: usize = out.iter().product();
        let mut offsets = Vec::with_capacity(n);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..n {
            offsets.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        offsets
    }

    /// Elementwise product; either side may have size-1 dims that broadcast.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let shape = self.broadcast_shape(x, y)?;
        let value = if self.shape_only {
            Tensor::zeros(&shape)
        } else {
            let ox = Self::broadcast_offsets(&shape, self.shape(x));
            let oy = Self::broadcast_offsets(&shape, self.shape(y));
            let (dx, dy) = (self.value(x).data(), self.value(y).data());
            let data = ox.iter().zip(&oy).map(|(&i, &j)| dx[i] * dy[j]).collect();
            Tensor::new(&shape, data)?
        };
        self.push_checked("mul", value, Op::Mul(x, y), &[x, y])
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= a);
        self.push_checked("scale", value, Op::Scale(x, a), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn reduced_mask(&self, x: Var, dims: &[usize]) -> Result<Vec<bool>> {
        let rank = self.shape(x).len();
        let mut mask = vec![false; rank];
        for &d in dims {
            if d >= rank {
                return Err(Error::Shape(format!(
                    "reduction dim {d} out of range for rank {rank}"
                )));
            }
            mask[d] = true;
        }
        let count: usize = self
            .shape(x)
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&n, _)| n)
            .product();
        if dims.is_empty() || count == 0 {
            return Err(Error::Shape("empty reduction".into()));
        }
        Ok(mask)
    }

    /// Output index for each input element when the masked dims collapse.
    fn reduce_targets(shape: &[usize], mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .map(|(&n, _)| n)
            .collect();
        let full: Vec<usize> = shape
            .iter()
            .zip(mask)
            .map(|(&n, &m)| if m { 1 } else { n })
            .collect();
        (Self::broadcast_offsets(shape, &full), out_shape)
    }

    /// Mean over `dims`, which are removed from the shape.
    pub fn mean_over(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let mask = self.reduced_mask(x, dims)?;
        let (targets, out_shape) = Self::reduce_targets(self.shape(x), &mask);
        let n_out: usize = out_shape.iter().product();
        let count = (self.value(x).len() / n_out.max(1)) as f64;
        let mut out = vec![0.0; n_out];
        if !self.shape_only {
            for (v, &t) in self.value(x).data().iter().zip(&targets) {
                out[t] += v;
            }
            out.iter_mut().for_each(|v| *v /= count);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Mean { x, reduced: mask }, &[x]))
    }

    /// Max over `dims`. Ties resolve to the first element in row-major order,
    /// which also receives the whole gradient.
    pub fn max_over(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let mask = self.reduced_mask(x, dims)?;
        let (targets, out_shape) = Self::reduce_targets(self.shape(x), &mask);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut argmax = vec![0usize; n_out];
        if self.shape_only {
            out.fill(0.0);
        } else {
            for (i, (&v, &t)) in self.value(x).data().iter().zip(&targets).enumerate() {
                if v > out[t] {
                    out[t] = v;
                    argmax[t] = i;
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push_checked("max_over", value, Op::Max { x, argmax }, &[x])
    }

    /// Permute along `dim`; `index` has the shape of `x` and holds, for every
    /// output position, the source position along `dim`.
    pub fn gather_along(&mut self, x: Var, dim: usize, index: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || index.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "gather along {dim} does not fit {shape:?}"
            )));
        }
        let (outer, n, inner) = around(&shape, dim);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..n {
                for k in 0..inner {
                    let pos = (o * n + i) * inner + k;
                    let j = index[pos];
                    if j >= n {
                        return Err(Error::Shape(format!("gather index {j} out of range {n}")));
                    }
                    out[pos] = src[(o * n + j) * inner + k];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Gather { x, dim, index }, &[x]))
    }

    /// Stable descending sort along `dim`. Returns the sorted values and, for
    /// every output position, the source position it came from.
    pub fn sort_desc(&mut self, x: Var, dim: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() {
            return Err(Error::Shape(format!(
                "sort dim {dim} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = around(&shape, dim);
        let data = self.value(x).data();
        let mut perm = vec![0usize; data.len()];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for o in 0..outer {
            for k in 0..inner {
                order.clear();
                order.extend(0..n);
                let at = |i: usize| data[(o * n + i) * inner + k];
                // stable: equal values keep their original order
                order.sort_by(|&a, &b| at(b).total_cmp(&at(a)));
                for (i, &src) in order.iter().enumerate() {
                    perm[(o * n + i) * inner + k] = src;
                }
            }
        }
        let sorted = self.gather_along(x, dim, perm.clone())?;
        Ok((sorted, perm))
    }

    pub fn softmax_along(&mut self, x: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax dim {dim} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = around(&shape, dim);
        let mut out = self.value(x).data().to_vec();
        if !self.shape_only {
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + k;
                    let m = (0..n)
                        .map(|i| out[idx(i)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for i in 0..n {
                        let e = (out[idx(i)] - m).exp();
                        out[idx(i)] = e;
                        sum += e;
                    }
                    for i in 0..n {
                        out[idx(i)] /= sum;
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push_checked("softmax", value, Op::Softmax { x, dim }, &[x])
    }

    /// `x (features) . w (features, out) + b (out)`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 1 || sw.len() != 2 || sw[0] != sx[0] || sb != [sw[1]] {
            return Err(Error::Shape(format!(
                "linear: x {sx:?}, W {sw:?}, b {sb:?} do not fit"
            )));
        }
        let (fin, fout) = (sw[0], sw[1]);
        let mut out = self.value(b).data().to_vec();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for i in 0..fin {
            for j in 0..fout {
                out[j] += xv[i] * wv[i * fout + j];
            }
        }
        let value = Tensor::from_vec(out);
        self.push_checked("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Global average over every dim but the last.
    pub fn avg_pool_all(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&depth) = shape.last() else {
            return Err(Error::Shape("avg_pool_all on a scalar".into()));
        };
        let count = self.value(x).len() / depth.max(1);
        let mut out = vec![0.0; depth];
        for row in self.value(x).data().chunks_exact(depth) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        Ok(self.push(Tensor::from_vec(out), Op::AvgPoolAll(x), &[x]))
    }

    /// Parameter-free residual path: keep every `t_stride`-th time step and
    /// zero-fill depth maps beyond the input's.
    pub fn shortcut(&mut self, x: Var, t_stride: usize, out_depth: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_depth < shape[3] || t_stride == 0 {
            return Err(Error::Shape(format!(
                "shortcut from {shape:?} to depth {out_depth} with stride {t_stride}"
            )));
        }
        let [g, l, t, c] = [shape[0], shape[1], shape[2], shape[3]];
        let t_out = t.div_ceil(t_stride);
        let mut out = vec![0.0; g * l * t_out * out_depth];
        let src = self.value(x).data();
        for gl in 0..g * l {
            for j in 0..t_out {
                let s = (gl * t + j * t_stride) * c;
                let d = (gl * t_out + j) * out_depth;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let value = Tensor::new(&[g, l, t_out, out_depth], out)?;
        Ok(self.push(value, Op::Shortcut { x, t_stride }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `p` clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], clamp: f64) -> Result<Var> {
        if self.value(p).len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "bce: {} probabilities for {} labels",
                self.value(p).len(),
                labels.len()
            )));
        }
        let loss = bce_value(self.value(p).data(), labels, clamp);
        self.push_checked(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                clamp,
            },
            &[p],
        )
    }

    /// Binary cross-entropy of a two-logit vector `z`, with the positive
    /// class at index 1. The value is the clamped loss of `p = softmax(z)[1]`;
    /// the gradient is `softmax(z) - onehot(label)`, which stays informative
    /// when `p` saturates.
    pub fn bce_logits(&mut self, z: Var, label: f64, clamp: f64) -> Result<Var> {
        if self.shape(z) != [2] {
            return Err(Error::Shape(format!(
                "bce_logits needs 2 logits, got {:?}",
                self.shape(z)
            )));
        }
        let p = softmax2(self.value(z).data())[1];
        let loss = bce_value(&[p], &[label], clamp);
        self.push_checked(
            "bce_logits",
            Tensor::scalar(loss),
            Op::BceLogits { z, label },
            &[z],
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_with(root, Tensor::full(self.shape(root), 1.0))
    }

    /// Reverse pass from `root` seeded with `seed` as its upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape("backward seed shape mismatch".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geo } => {
                let need = (self.needs(*x), self.needs(*w), self.needs(*b));
                let cg =
                    conv3d_backward(geo, self.value(*x).data(), self.value(*w).data(), g, need);
                if let Some(dx) = cg.dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(db) = cg.db {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *x, d);
            }
            Op::Add(x, y) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.to_vec());
                }
                if self.needs(*y) {
                    Self::accumulate(grads, *y, g.to_vec());
                }
            }
            Op::Mul(x, y) => {
                let shape = node.value.shape();
                let ox = Self::broadcast_offsets(shape, self.shape(*x));
                let oy = Self::broadcast_offsets(shape, self.shape(*y));
                let (vx, vy) = (self.value(*x).data(), self.value(*y).data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    for k in 0..g.len() {
                        dx[ox[k]] += g[k] * vy[oy[k]];
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.needs(*y) {
                    let mut dy = vec![0.0; vy.len()];
                    for k in 0..g.len() {
                        dy[oy[k]] += g[k] * vx[ox[k]];
                    }
                    Self::accumulate(grads, *y, dy);
                }
            }
            Op::Scale(x, a) => Self::accumulate(grads, *x, g.iter().map(|v| v * a).collect()),
            Op::Reshape(x) => Self::accumulate(grads, *x, g.to_vec()),
            Op::Mean { x, reduced } => {
                let (targets, _) = Self::reduce_targets(self.shape(*x), reduced);
                let count = (self.value(*x).len() / g.len()) as f64;
                let d = targets.iter().map(|&t| g[t] / count).collect();
                Self::accumulate(grads, *x, d);
            }
            Op::Max { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
                Self::accumulate(grads, *x, d);
            }
            Op::Gather { x, dim, index } => {
                let (outer, n, inner) = around(self.shape(*x), *dim);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..n {
                        for k in 0..inner {
                            let pos = (o * n + i) * inner + k;
                            d[(o * n + index[pos]) * inner + k] += g[pos];
                        }
                    }
                }
                Self::accumulate(grads, *x, d);
            }
            Op::Softmax { x, dim } => {
                let y = node.value.data();
                let (outer, n, inner) = around(node.value.shape(), *dim);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + k;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            d[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                Self::accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let fout = g.len();
                if self.needs(*x) {
                    let d = (0..xv.len())
                        .map(|i| (0..fout).map(|j| wv[i * fout + j] * g[j]).sum())
                        .collect();
                    Self::accumulate(grads, *x, d);
                }
                if self.needs(*w) {
                    let d = (0..xv.len() * fout)
                        .map(|k| xv[k / fout] * g[k % fout])
                        .collect();
                    Self::accumulate(grads, *w, d);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AvgPoolAll(x) => {
                let n = self.value(*x).len();
                let depth = g.len();
                let count = (n / depth) as f64;
                let d = (0..n).map(|k| g[k % depth] / count).collect();
                Self::accumulate(grads, *x, d);
            }
            Op::Shortcut { x, t_stride } => {
                let s = self.shape(*x);
                let [t, c] = [s[2], s[3]];
                let out_shape = node.value.shape();
                let (t_out, depth) = (out_shape[2], out_shape[3]);
                let mut d = vec![0.0; self.value(*x).len()];
                for gl in 0..s[0] * s[1] {
                    for j in 0..t_out {
                        let src = (gl * t + j * t_stride) * c;
                        let dst = (gl * t_out + j) * depth;
                        d[src..src + c].copy_from_slice(&g[dst..dst + c]);
                    }
                }
                Self::accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                Self::accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Bce { p, labels, clamp } => {
                let n = labels.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv < *clamp || pv > 1.0 - clamp {
                            // clamped region is flat
                            0.0
                        } else {
                            g[0] * (-(y / pv) + (1.0 - y) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                Self::accumulate(grads, *p, d);
            }
            Op::BceLogits { z, label } => {
                let q = softmax2(self.value(*z).data());
                let d = vec![g[0] * (q[0] - (1.0 - label)), g[0] * (q[1] - label)];
                Self::accumulate(grads, *z, d);
            }
        }
        Ok(())
    }
}

fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

pub fn bce_value(p: &[f64], labels: &[f64], clamp: f64) -> f64 {
    let n = labels.len() as f64;
    -p.iter()
        .zip(labels)
        .map(|(&pv, &y)| {
            let pc = pv.clamp(clamp, 1.0 - clamp);
            y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
        })
        .sum::<f64>()
        / n
}

/// Gradients from one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
