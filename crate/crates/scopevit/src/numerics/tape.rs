//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every primitive records its inputs and output on the [`Tape`] during the
//! forward pass. [`Tape::backward`] replays the records once, in reverse
//! topological order (which is construction order), accumulating
//! vector-Jacobian products into per-node gradient slots.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// out = mul * a + add, elementwise with scalar constants; only the
    /// multiplier matters to the backward pass.
    Affine { a: Var, mul: f64 },
    /// Broadcast add of a `[c]` vector over the rows of `[..., c]`.
    AddRow(Var, Var),
    /// Broadcast multiply of a `[c]` vector over the rows of `[..., c]`.
    MulRow(Var, Var),
    /// 2-D matrix product `[m,k] x [k,n]`.
    Matmul(Var, Var),
    /// Batched matrix product `[B,m,k] x [B,k,n]`.
    Bmm(Var, Var),
    /// out.data[i] = src.data[indices[i]]; backward scatter-adds.
    IndexSelect { src: Var, indices: Vec<usize> },
    /// Column-wise concatenation of tensors sharing leading dimensions.
    ConcatCols(Vec<Var>),
    /// Row-wise concatenation of tensors sharing their last dimension.
    ConcatRows(Vec<Var>),
    /// Row-stable softmax over the last axis.
    Softmax(Var),
    /// Row-stable log-softmax over the last axis.
    LogSoftmax(Var),
    /// Per-row standardization (x - mean) / sqrt(var + eps) over the last axis.
    Normalize { a: Var, eps: f64 },
    /// Exact Gaussian-CDF GELU.
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    /// out = a^p with constant exponent.
    PowConst { a: Var, p: f64 },
    /// out = ln(max(a, floor)); gradient is zero in the clamped region.
    LnClamped { a: Var, floor: f64 },
    /// Sum of all elements, producing a scalar.
    SumAll(Var),
    /// Mean over the last axis.
    MeanLast(Var),
    /// Causal dilated 1-D convolution over `[T, cin]` with left zero padding.
    CausalConv1d { x: Var, w: Var, b: Var, dilation: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any flowed to it.
    ///
    /// Leaves registered with `requires_grad` always have an entry (zeros
    /// when disconnected from the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Records one forward pass; consumed by a single execution thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the exact error function.
fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Gradients are tracked when the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf { requires_grad })
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf {
            requires_grad: false,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dim {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `mul * a + add` with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).map(|x| mul * x + add);
        self.push(value, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let c = self.value(a).last_dim();
        if self.value(b).shape() != [c] {
            return Err(Error::Dim {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(c)
    }

    /// Add a `[c]` vector to every row of `[..., c]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast_check("add_row", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv[i % c];
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, b)))
    }

    /// Multiply every row of `[..., c]` by a `[c]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast_check("mul_row", a, b)?;
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= bv[i % c];
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulRow(a, b)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dim {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(t, Op::Bmm(a, b)))
    }

    /// Gather flattened elements: `out.data[i] = src.data[indices[i]]`.
    ///
    /// Repeated indices broadcast values; the backward pass accumulates.
    pub fn index_select(
        &mut self,
        src: Var,
        indices: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let n = self.value(src).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "index_select: index {bad} out of range for {n} elements"
            )));
        }
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::contract(format!(
                "index_select: shape {:?} does not hold {} indices",
                out_shape,
                indices.len()
            )));
        }
        let src_data = self.value(src).data();
        let data: Vec<f64> = indices.iter().map(|&i| src_data[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::IndexSelect { src, indices }))
    }

    /// Concatenate along the last axis; inputs must share leading dimensions.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no inputs"));
        }
        let lead = self.value(parts[0]).shape()
            [..self.value(parts[0]).rank() - 1]
            .to_vec();
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenate along the first axis; inputs must share the last axis and
    /// are stacked as `[total_rows, last_dim]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no inputs"));
        }
        let width = self.value(parts[0]).last_dim();
        for &p in parts {
            if self.value(p).last_dim() != width {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / width;
        let t = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    // ---- row-wise nonlinearities ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter() {
                sum += (*v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmax(a))
    }

    /// Row standardization over the last axis; the core of layer norm.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Normalize { a, eps })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * norm_cdf(x));
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid_op(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::PowConst { a, p })
    }

    /// `ln(max(x, floor))`; derivative is zero where the clamp engages.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(value, Op::LnClamped { a, floor })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let data: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        let shape = if t.rank() == 1 {
            vec![1]
        } else {
            t.shape()[..t.rank() - 1].to_vec()
        };
        let value = Tensor::new(shape, data).expect("shape from chunks");
        self.push(value, Op::MeanLast(a))
    }

    // ---- temporal convolution ----

    /// Causal dilated conv over `[T, cin]` with weights `[cout, cin, K]`,
    /// bias `[cout]`. Taps read frames `t, t-d, ..., t-(K-1)d`; out-of-range
    /// taps see zeros (left padding only).
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::Dim {
                op: "causal_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(Error::Dim {
                op: "causal_conv1d bias",
                lhs: sw,
                rhs: sb,
            });
        }
        if dilation == 0 {
            return Err(Error::config("causal_conv1d: dilation must be >= 1"));
        }
        let (t_len, cin) = (sx[0], sx[1]);
        let (cout, kernel) = (sw[0], sw[2]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            for o in 0..cout {
                let mut acc = bd[o];
                for kk in 0..kernel {
                    // kernel index K-1 reads the current frame.
                    let back = (kernel - 1 - kk) * dilation;
                    if back > t {
                        continue;
                    }
                    let src = t - back;
                    for c in 0..cin {
                        acc += wd[(o * cin + c) * kernel + kk] * xd[src * cin + c];
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        let value = Tensor::new(vec![t_len, cout], out)?;
        Ok(self.push(value, Op::CausalConv1d { x, w, b, dilation }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// gradient flowed to; leaves with `requires_grad` get explicit zeros
    /// when disconnected.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                requires_grad: true,
            } = node.op
            {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = hadamard(g, self.value(*b));
                let db = hadamard(g, self.value(*a));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Affine { a, mul } => {
                let mul = *mul;
                self.accumulate(grads, *a, g.map(|v| mul * v));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let c = self.value(*b).numel();
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % c] += v;
                }
                self.accumulate(grads, *b, Tensor::from_vec(db));
            }
            Op::MulRow(a, b) => {
                let c = self.value(*b).numel();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                let mut da = g.clone();
                for (i, v) in da.data_mut().iter_mut().enumerate() {
                    *v *= bv[i % c];
                }
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % c] += v * av[i];
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, Tensor::from_vec(db));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0; m * k];
                matmul_bt_acc(g.data(), self.value(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_acc(self.value(*a).data(), g.data(), &mut db, m, k, n);
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    matmul_bt_acc(
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &self.value(*b).data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    matmul_at_acc(
                        &self.value(*a).data()[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                self.accumulate(grads, *a, Tensor::new(vec![bs, m, k], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![bs, k, n], db).unwrap());
            }
            Op::IndexSelect { src, indices } => {
                let mut ds = Tensor::zeros(self.value(*src).shape().to_vec());
                let dsd = ds.data_mut();
                for (i, &j) in indices.iter().enumerate() {
                    dsd[j] += g.data()[i];
                }
                self.accumulate(grads, *src, ds);
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    let mut dp = Tensor::zeros(self.value(p).shape().to_vec());
                    let dpd = dp.data_mut();
                    for r in 0..rows {
                        dpd[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let dp = Tensor::new(
                        self.value(p).shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .unwrap();
                    self.accumulate(grads, p, dp);
                    offset += n;
                }
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let c = y.last_dim();
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let c = y.last_dim();
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let sum: f64 = drow.iter().sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d -= y.exp() * sum;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Normalize { a, eps } => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let c = x.last_dim();
                let cf = c as f64;
                let mut da = g.clone();
                for ((drow, yrow), xrow) in da
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let mean = xrow.iter().sum::<f64>() / cf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = drow.iter().sum::<f64>() / cf;
                    let gy_mean = drow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / cf;
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = inv * (*d - g_mean - y * gy_mean);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    *d *= norm_cdf(xv) + xv * norm_pdf(xv);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let mut da = g.clone();
                for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (1.0 - yv);
                }
                self.accumulate(grads, *a, da);
            }
            Op::PowConst { a, p } => {
                let x = self.value(*a);
                let p = *p;
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    *d *= p * xv.powf(p - 1.0);
                }
                self.accumulate(grads, *a, da);
            }
            Op::LnClamped { a, floor } => {
                let x = self.value(*a);
                let floor = *floor;
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    *d = if xv > floor { *d / xv } else { 0.0 };
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let da = Tensor::full(self.value(*a).shape().to_vec(), gv);
                self.accumulate(grads, *a, da);
            }
            Op::MeanLast(a) => {
                let c = self.value(*a).last_dim();
                let mut da = Tensor::zeros(self.value(*a).shape().to_vec());
                let dad = da.data_mut();
                for (r, &gv) in g.data().iter().enumerate() {
                    let v = gv / c as f64;
                    for d in dad[r * c..(r + 1) * c].iter_mut() {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::CausalConv1d { x, w, b, dilation } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (t_len, cin) = (sx[0], sx[1]);
                let (cout, kernel) = (sw[0], sw[2]);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut dx = vec![0.0; t_len * cin];
                let mut dw = vec![0.0; cout * cin * kernel];
                let mut db = vec![0.0; cout];
                for t in 0..t_len {
                    for o in 0..cout {
                        let gv = g.data()[t * cout + o];
                        db[o] += gv;
                        for kk in 0..kernel {
                            let back = (kernel - 1 - kk) * dilation;
                            if back > t {
                                continue;
                            }
                            let src = t - back;
                            for c in 0..cin {
                                dw[(o * cin + c) * kernel + kk] += gv * xd[src * cin + c];
                                dx[src * cin + c] += gv * wd[(o * cin + c) * kernel + kk];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![t_len, cin], dx).unwrap());
                self.accumulate(grads, *w, Tensor::new(vec![cout, cin, kernel], dw).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(db));
            }
        }
    }

    /// Values produced by softmax nodes, for attention diagnostics in tests.
    pub fn softmax_outputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
            .collect()
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
