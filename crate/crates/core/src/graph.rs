//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and a single reverse sweep visits every node once.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{c, strides, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    MeanAll,
    SumAll,
    /// `[N, C, H, W] -> [N, C]`
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Act(Var, Activation),
    Reduce(Var, Reduction),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A differentiation tape. Not shared between threads; one graph per step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Adds a copy of `t` as a trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Copies the value of `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds this graph's gradient for `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let Some(g) = self.grad(v) else {
            return Ok(());
        };
        if g.len() != target.len() {
            return dim_err(format!(
                "gradient of length {} does not fit tensor {:?}",
                g.len(),
                target.shape()
            ));
        }
        match &mut target.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => target.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.elementwise(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * k).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src.shape()[p]).collect();
        let data = permute_data(src.data(), src.shape(), perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return dim_err(format!(
                    "concat: trailing shape {:?} differs from {:?}",
                    &v.shape()[1..],
                    tail
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let n = v.shape()[0];
        if start >= end || end > n {
            return dim_err(format!("slice {start}..{end} out of range for {n} rows"));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, v.data()[start * row..end * row].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// 2-D cross-correlation over `[N, C_in, H, W]` with `[C_out, C_in/groups, kH, kW]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geo = ConvGeometry::new(x.shape(), w.shape(), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.c_out] {
                return dim_err(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geo.c_out
                ));
            }
        }
        let mut out = geo.forward(x.data(), w.data());
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geo.ho * geo.wo;
            out.chunks_mut(plane)
                .enumerate()
                .for_each(|(i, ch)| ch.iter_mut().for_each(|v| *v = *v + bd[i % geo.c_out]));
        }
        let t = Tensor::new(vec![geo.n, geo.c_out, geo.ho, geo.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// `out[n, o] = sum_i weight[o, i] * input[n, i] + bias[o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return dim_err(format!(
                "linear: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let (m, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return dim_err(format!("linear bias shape {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let bd = bias.map(|b| self.value(b).data());
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![T::zero(); m * o];
        out.par_chunks_mut(o).with_min_len(8).enumerate().for_each(|(r, row)| {
            let xr = &xd[r * k..(r + 1) * k];
            for (j, slot) in row.iter_mut().enumerate() {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = dot(xr, wr);
                if let Some(bd) = bd {
                    acc = acc + bd[j];
                }
                *slot = acc;
            }
        });
        let t = Tensor::new(vec![m, o], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { input, weight, bias }, rg))
    }

    /// Normalizes over the last axis (population variance), then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let f = *x.shape().last().expect("rank >= 1");
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match feature width {f}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / f;
        let inv_f = c::<T>(1.0 / f as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * f..(r + 1) * f];
            let mean = xr.iter().copied().sum::<T>() * inv_f;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_f;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[r] = rs;
            for i in 0..f {
                let h = (xr[i] - mean) * rs;
                xhat[r * f + i] = h;
                out[r * f + i] = gd[i] * h + bd[i];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let x = self.value(a);
        let data = match kind {
            Activation::Gelu => x.data().iter().map(|&v| gelu(v)).collect(),
            Activation::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Softmax | Activation::LogSoftmax => {
                let f = *x.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(x.len());
                for row in x.data().chunks(f) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                    if kind == Activation::Softmax {
                        out.extend(row.iter().map(|&v| (v - m).exp() / z));
                    } else {
                        let lse = m + z.ln();
                        out.extend(row.iter().map(|&v| v - lse));
                    }
                }
                out
            }
        };
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Act(a, kind), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softmax)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.activation(a, Activation::LogSoftmax)
    }

    pub fn reduce(&mut self, a: Var, kind: Reduction) -> Result<Var> {
        let x = self.value(a);
        let t = match kind {
            Reduction::SumAll => Tensor::scalar(x.data().iter().copied().sum()),
            Reduction::MeanAll => {
                Tensor::scalar(x.data().iter().copied().sum::<T>() / c(x.len() as f64))
            }
            Reduction::GlobalAvgPool => {
                if x.rank() != 4 {
                    return dim_err(format!("global_avg_pool needs rank 4, got {:?}", x.shape()));
                }
                let (n, ch) = (x.shape()[0], x.shape()[1]);
                let plane = x.shape()[2] * x.shape()[3];
                let inv = c::<T>(1.0 / plane as f64);
                let data = x
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::new(vec![n, ch], data)?
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reduce(a, kind), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::SumAll).expect("sum_all is total")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::MeanAll).expect("mean_all is total")
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::GlobalAvgPool)
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across repeated calls; intermediate
    /// gradients are recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(gy),
                }
                continue;
            }
            for (var, g) in self.input_grads(idx, &gy) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each input.
    fn input_grads(&self, idx: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                    (*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, k) => vec![(*a, gy.iter().map(|&g| g * *k).collect())],
            Op::Reshape(a) => vec![(*a, gy.to_vec())],
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let row: usize = src.shape()[1..].iter().product();
                let mut g = vec![T::zero(); src.len()];
                g[start * row..start * row + gy.len()].copy_from_slice(gy);
                vec![(*a, g)]
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, permute_data(gy, node.value.shape(), &inv))]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.value(*p).len();
                        let g = gy[off..off + n].to_vec();
                        off += n;
                        (*p, g)
                    })
                    .collect()
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let geo = ConvGeometry::new(x.shape(), w.shape(), *spec).expect("validated in forward");
                let mut out = Vec::new();
                if needs(input) {
                    out.push((*input, geo.grad_input(gy, w.data())));
                }
                if needs(weight) {
                    out.push((*weight, geo.grad_weight(gy, x.data())));
                }
                if let Some(b) = bias.filter(needs) {
                    let plane = geo.ho * geo.wo;
                    let mut gb = vec![T::zero(); geo.c_out];
                    for (i, ch) in gy.chunks(plane).enumerate() {
                        gb[i % geo.c_out] = gb[i % geo.c_out] + ch.iter().copied().sum();
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let (xd, wd) = (x.data(), w.data());
                let mut out = Vec::new();
                if needs(input) {
                    let mut gx = vec![T::zero(); m * k];
                    gx.par_chunks_mut(k).with_min_len(8).enumerate().for_each(|(r, row)| {
                        for j in 0..o {
                            let g = gy[r * o + j];
                            if g == T::zero() {
                                continue;
                            }
                            let wr = &wd[j * k..(j + 1) * k];
                            row.iter_mut().zip(wr).for_each(|(a, &wv)| *a = *a + g * wv);
                        }
                    });
                    out.push((*input, gx));
                }
                if needs(weight) {
                    let mut gw = vec![T::zero(); o * k];
                    gw.par_chunks_mut(k).enumerate().for_each(|(j, row)| {
                        for r in 0..m {
                            let g = gy[r * o + j];
                            if g == T::zero() {
                                continue;
                            }
                            let xr = &xd[r * k..(r + 1) * k];
                            row.iter_mut().zip(xr).for_each(|(a, &xv)| *a = *a + g * xv);
                        }
                    });
                    out.push((*weight, gw));
                }
                if let Some(b) = bias.filter(needs) {
                    let mut gb = vec![T::zero(); o];
                    for row in gy.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((b, gb));
                }
                out
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gamma).data();
                let f = gd.len();
                let inv_f = c::<T>(1.0 / f as f64);
                let mut out = Vec::new();
                if needs(input) {
                    let mut gx = vec![T::zero(); gy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let s = r * f;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for i in 0..f {
                            let d = gy[s + i] * gd[i];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * xhat[s + i];
                        }
                        mean_d = mean_d * inv_f;
                        mean_dh = mean_dh * inv_f;
                        for i in 0..f {
                            let d = gy[s + i] * gd[i];
                            gx[s + i] = rs * (d - mean_d - xhat[s + i] * mean_dh);
                        }
                    }
                    out.push((*input, gx));
                }
                if needs(gamma) {
                    let mut gg = vec![T::zero(); f];
                    for (row, hrow) in gy.chunks(f).zip(xhat.chunks(f)) {
                        for i in 0..f {
                            gg[i] = gg[i] + row[i] * hrow[i];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if needs(beta) {
                    let mut gb = vec![T::zero(); f];
                    for row in gy.chunks(f) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((*beta, gb));
                }
                out
            }
            Op::Act(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let g = match kind {
                    Activation::Gelu => gy.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect(),
                    Activation::Relu => gy
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::Softmax => {
                        let f = *node.value.shape().last().unwrap();
                        let mut out = Vec::with_capacity(gy.len());
                        for (gr, yr) in gy.chunks(f).zip(y.chunks(f)) {
                            let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                            out.extend(gr.iter().zip(yr).map(|(&g, &p)| p * (g - dot)));
                        }
                        out
                    }
                    Activation::LogSoftmax => {
                        let f = *node.value.shape().last().unwrap();
                        let mut out = Vec::with_capacity(gy.len());
                        for (gr, yr) in gy.chunks(f).zip(y.chunks(f)) {
                            let s: T = gr.iter().copied().sum();
                            out.extend(gr.iter().zip(yr).map(|(&g, &ly)| g - ly.exp() * s));
                        }
                        out
                    }
                };
                vec![(*a, g)]
            }
            Op::Reduce(a, kind) => {
                let src = self.value(*a);
                let g = match kind {
                    Reduction::SumAll => vec![gy[0]; src.len()],
                    Reduction::MeanAll => vec![gy[0] / c(src.len() as f64); src.len()],
                    Reduction::GlobalAvgPool => {
                        let plane = src.shape()[2] * src.shape()[3];
                        let inv = c::<T>(1.0 / plane as f64);
                        gy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect()
                    }
                };
                vec![(*a, g)]
            }
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu<T: Real>(x: T) -> T {
    x * c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * c(0.5)).exp() * c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cpg: usize,
    opg: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return dim_err(format!("conv2d needs rank-4 input and weight, got {x:?} and {w:?}"));
        }
        let Conv2dSpec {
            stride,
            padding,
            groups,
        } = spec;
        if groups == 0 || !x[1].is_multiple_of(groups) || !w[0].is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "conv2d groups={groups} must divide C_in={} and C_out={}",
                x[1], w[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let cpg = x[1] / groups;
        if w[1] != cpg {
            return dim_err(format!(
                "conv2d weight {w:?} expects {} input channels per group, input has {cpg}",
                w[1]
            ));
        }
        let (hp, wp) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if hp < w[2] || wp < w[3] {
            return dim_err(format!(
                "conv2d kernel {}x{} larger than padded input {hp}x{wp}",
                w[2], w[3]
            ));
        }
        Ok(ConvGeometry {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            cpg,
            opg: w[0] / groups,
            kh: w[2],
            kw: w[3],
            ho: (hp - w[2]) / stride + 1,
            wo: (wp - w[3]) / stride + 1,
            stride,
            pad: padding,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = o * self.stride + k;
        (p >= self.pad && p - self.pad < limit).then(|| p - self.pad)
    }

    fn forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let g = *self;
        let plane = g.ho * g.wo;
        let mut out = vec![T::zero(); g.n * g.c_out * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(i, dst)| {
            let (n, co) = (i / g.c_out, i % g.c_out);
            let ci0 = (co / g.opg) * g.cpg;
            for cl in 0..g.cpg {
                let xc = &x[((n * g.c_in) + ci0 + cl) * g.h * g.w..][..g.h * g.w];
                let wk = &w[(co * g.cpg + cl) * g.kh * g.kw..][..g.kh * g.kw];
                for oy in 0..g.ho {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                        let wrow = &wk[ky * g.kw..(ky + 1) * g.kw];
                        for ox in 0..g.wo {
                            let mut acc = dst[oy * g.wo + ox];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    acc = acc + wv * xrow[ix];
                                }
                            }
                            dst[oy * g.wo + ox] = acc;
                        }
                    }
                }
            }
        });
        out
    }

    fn grad_input<T: Real>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let g = *self;
        let plane = g.ho * g.wo;
        let mut gx = vec![T::zero(); g.n * g.c_in * g.h * g.w];
        gx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(i, dst)| {
            let (n, ci) = (i / g.c_in, i % g.c_in);
            let grp = ci / g.cpg;
            let cl = ci % g.cpg;
            for co in grp * g.opg..(grp + 1) * g.opg {
                let gyc = &gy[(n * g.c_out + co) * plane..][..plane];
                let wk = &w[(co * g.cpg + cl) * g.kh * g.kw..][..g.kh * g.kw];
                for oy in 0..g.ho {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            let gv = gyc[oy * g.wo + ox];
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    let d = &mut dst[iy * g.w + ix];
                                    *d = *d + gv * wk[ky * g.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
        gx
    }

    fn grad_weight<T: Real>(&self, gy: &[T], x: &[T]) -> Vec<T> {
        let g = *self;
        let plane = g.ho * g.wo;
        let ksz = g.kh * g.kw;
        let mut gw = vec![T::zero(); g.c_out * g.cpg * ksz];
        gw.par_chunks_mut(g.cpg * ksz).enumerate().for_each(|(co, dst)| {
            let ci0 = (co / g.opg) * g.cpg;
            for n in 0..g.n {
                let gyc = &gy[(n * g.c_out + co) * plane..][..plane];
                for cl in 0..g.cpg {
                    let xc = &x[(n * g.c_in + ci0 + cl) * g.h * g.w..][..g.h * g.w];
                    let dk = &mut dst[cl * ksz..(cl + 1) * ksz];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let mut acc = dk[ky * g.kw + kx];
                            for oy in 0..g.ho {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for ox in 0..g.wo {
                                    if let Some(ix) = g.src(ox, kx, g.w) {
                                        acc = acc + gyc[oy * g.wo + ox] * xc[iy * g.w + ix];
                                    }
                                }
                            }
                            dk[ky * g.kw + kx] = acc;
                        }
                    }
                }
            }
        });
        gw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, Some(b), Conv2dSpec::default()).unwrap();
        assert_eq!(g.shape(y), [1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), [9.0]);
    }

    #[test]
    fn identity_kernel_passes_input() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = g.constant(t(&[2, 1, 4, 5], &data));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_bad_groups_and_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 3, 4, 4]));
        let w = g.constant(Tensor::ones(vec![4, 1, 3, 3]));
        let spec = Conv2dSpec {
            groups: 2,
            ..Default::default()
        };
        assert!(matches!(g.conv2d(x, w, None, spec), Err(Error::Config(_))));
        let w2 = g.constant(Tensor::ones(vec![4, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w2, None, Conv2dSpec::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_hand_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = g.constant(t(&[1], &[5.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), [16.0]);
        let bad = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        assert!(g.linear(bad, w, Some(b)).is_err());
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::<f64>::new();
        let xd = [0.5, -1.0, 2.0, 3.0, 0.0, -7.5];
        let x = g.constant(t(&[2, 3], &xd));
        let w = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), xd);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[5.0; 4]));
        let gm = g.constant(Tensor::ones(vec![4]));
        let bt = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gm, bt, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), [0.0; 4]);

        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let gm = g.constant(Tensor::ones(vec![2]));
        let bt = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 1.0]));
        let ge = g.gelu(x);
        let re = g.relu(x);
        assert_eq!(g.value(ge).data()[0], 0.0);
        assert!((g.value(ge).data()[2] - 0.841_344_746_068_543).abs() < 1e-6);
        assert_eq!(g.value(re).data()[1], 0.0);

        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = g.softmax(z);
        assert_eq!(g.value(s).data(), [0.5, 0.5]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean_all(x);
        assert_eq!(g.value(m).item().unwrap(), 3.0);
        let ones = g.constant(Tensor::ones(vec![1, 3, 2, 2]));
        let p = g.global_avg_pool(ones).unwrap();
        assert_eq!(g.shape(p), [1, 3]);
        assert_eq!(g.value(p).data(), [1.0, 1.0, 1.0]);
        assert!(g.global_avg_pool(x).is_err());
    }

    #[test]
    fn mean_all_gradient_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3, 5], &(0..15).map(|i| (i as f64).sin()).collect::<Vec<_>>()).with_grad());
        let m = g.mean_all(x);
        g.backward(m).unwrap();
        for &v in g.grad(x).unwrap() {
            assert!((v - 1.0 / 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![2, 3]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), [1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), [2.0; 6]);
    }

    #[test]
    fn backward_of_squared_error_at_minimum_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).with_grad());
        let y = g.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let d = g.sub(x, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let l = g.mean_all(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), [0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let p = g.permute(x, &[0, 2, 3, 1]).unwrap();
        assert_eq!(g.shape(p), [2, 2, 2, 3]);
        // element [0, h=0, w=1, c=2] == input [0, 2, 0, 1]
        assert_eq!(g.value(p).data()[3 + 2], data[2 * 4 + 1]);
        let back = g.permute(p, &[0, 3, 1, 2]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
        assert!(g.permute(x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]).with_grad());
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).with_grad());
        let cat = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), [3, 2]);
        let tail = g.slice_rows(cat, 1, 3).unwrap();
        assert_eq!(g.value(tail).data(), [3.0, 4.0, 5.0, 6.0]);
        let s = g.sum_all(tail);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), [0.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), [1.0; 4]);
    }
}
