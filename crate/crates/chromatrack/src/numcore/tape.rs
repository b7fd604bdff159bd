//! Wengert tape: ops are recorded eagerly during the forward pass and
//! replayed in reverse for gradients. One tape per training step; dropped
//! after `backward`.

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Relu {
        x: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        cols: Vec<Vec<T>>,
    },
    ConvTime {
        x: usize,
        w: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Tensor<T>,
        invstd: Tensor<T>,
        batch_stats: bool,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    SliceTime {
        x: usize,
        t: usize,
    },
    RowsFromChw {
        x: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    SoftmaxRows {
        x: usize,
    },
    CrossEntropyOneHot {
        p: usize,
        target: Tensor<T>,
        eps: T,
    },
    SumAll {
        x: usize,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, addressed by `Var`.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.vals.push(value);
        self.nodes.push(Node { op, requires_grad });
        Var(self.vals.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a tensor; it participates in gradients iff `requires_grad`
    /// is set on the tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.vals[a.0].same_shape(&self.vals[b.0]) {
            return Err(Error::Dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let mut out = self.vals[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Per-channel bias over a `B x C x H x W` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        let bs = self.vals[bias.0].shape().to_vec();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Dim(format!(
                "add_bias expects B x C x H x W and [C], got {xs:?} and {bs:?}"
            )));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.vals[x.0].clone();
        {
            let b = self.vals[bias.0].data().to_vec();
            for (chunk_idx, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let c = chunk_idx % xs[1];
                for v in chunk.iter_mut() {
                    *v += b[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.vals[a.0].same_shape(&self.vals[b.0]) {
            return Err(Error::Dim(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let mut out = self.vals[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.vals[b.0].data()) {
            *o = *o * v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.vals[x.0].map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].map(|v| v.maximum(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = kernels::matmul(&self.vals[a.0], &self.vals[b.0], trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, dilation: usize) -> Result<Var> {
        let (out, cols) = kernels::conv2d_fwd(&self.vals[x.0], &self.vals[w.0], stride, pad, dilation)?;
        let rg = self.rg(x) || self.rg(w);
        // Column matrices are only needed to form gradients.
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
                dilation,
                cols,
            },
            rg,
        ))
    }

    pub fn conv_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::conv_time_fwd(&self.vals[x.0], &self.vals[w.0])?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::ConvTime { x: x.0, w: w.0 }, rg))
    }

    /// Per-channel normalization of a `B x C x H x W` tensor. With
    /// `stats: None` the statistics are computed from the batch (training
    /// mode) and returned; otherwise the provided running statistics are
    /// used (inference mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<(Var, BnStats<T>)> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!(
                "batch_norm expects B x C x H x W, got {xs:?}"
            )));
        }
        let c = xs[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.vals[v.0].shape();
            if s != [c] {
                return Err(Error::Dim(format!(
                    "batch_norm {name} must be [{c}], got {s:?}"
                )));
            }
        }
        let (batch, hw) = (xs[0], xs[2] * xs[3]);
        let count = T::from_f64((batch * hw) as f64);
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.shape() != [c] || v.shape() != [c] {
                    return Err(Error::Dim(format!(
                        "running stats must be [{c}], got {:?} and {:?}",
                        m.shape(),
                        v.shape()
                    )));
                }
                (m.clone(), v.clone())
            }
            None => {
                let mut mean = Tensor::zeros(&[c]);
                let mut var = Tensor::zeros(&[c]);
                let data = self.vals[x.0].data();
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let mut s = T::zero();
                        for &v in &data[base..base + hw] {
                            s += v;
                        }
                        mean.data_mut()[ch] += s;
                    }
                }
                for m in mean.data_mut() {
                    *m = *m / count;
                }
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let m = mean.data()[ch];
                        let mut s = T::zero();
                        for &v in &data[base..base + hw] {
                            let d = v - m;
                            s += d * d;
                        }
                        var.data_mut()[ch] += s;
                    }
                }
                for v in var.data_mut() {
                    *v = *v / count;
                }
                (mean, var)
            }
        };
        let epsv = T::from_f64(eps);
        let invstd = var.map(|v| T::one() / (v + epsv).sqrt());
        let mut out = self.vals[x.0].clone();
        {
            let g = self.vals[gamma.0].data().to_vec();
            let bta = self.vals[beta.0].data().to_vec();
            for (chunk_idx, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let ch = chunk_idx % c;
                let (m, is) = (mean.data()[ch], invstd.data()[ch]);
                for v in chunk.iter_mut() {
                    *v = (*v - m) * is * g[ch] + bta[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let node_mean = mean.clone();
        let node_var = var.clone();
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        );
        Ok((
            var_out,
            BnStats {
                mean: node_mean,
                var: node_var,
            },
        ))
    }

    /// Concatenate two `B x C x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.vals[a.0].shape().to_vec();
        let sb = self.vals[b.0].shape().to_vec();
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::Dim(format!(
                "concat_channels shape mismatch: {sa:?} vs {sb:?}"
            )));
        }
        let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity((ca + cb) * batch * hw);
        for bi in 0..batch {
            data.extend_from_slice(&self.vals[a.0].data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&self.vals[b.0].data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let out = Tensor::new(&[batch, ca + cb, sa[2], sa[3]], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels { a: a.0, b: b.0 }, rg))
    }

    /// Extract frame `t` of a `T x C x H x W` tensor as `C x H x W`.
    pub fn slice_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 || t >= xs[0] {
            return Err(Error::Dim(format!(
                "slice_time index {t} invalid for shape {xs:?}"
            )));
        }
        let chw = xs[1] * xs[2] * xs[3];
        let data = self.vals[x.0].data()[t * chw..(t + 1) * chw].to_vec();
        let out = Tensor::new(&[xs[1], xs[2], xs[3]], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceTime { x: x.0, t }, rg))
    }

    /// Transpose a `C x H x W` tensor into `(H*W) x C` rows, one embedding
    /// per grid position.
    pub fn rows_from_chw(&mut self, x: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dim(format!(
                "rows_from_chw expects C x H x W, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let src = self.vals[x.0].data();
        let mut data = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = src[ch * hw + p];
            }
        }
        let out = Tensor::new(&[hw, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowsFromChw { x: x.0 }, rg))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Validation("concat_rows needs at least one input".into()));
        }
        let cols = self.vals[xs[0].0].shape()[1];
        let mut rows = 0;
        for &v in xs {
            let s = self.vals[v.0].shape();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Dim(format!(
                    "concat_rows: expected [_, {cols}], got {s:?}"
                )));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &v in xs {
            data.extend_from_slice(self.vals[v.0].data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
            rg,
        ))
    }

    /// Stable per-row softmax of a `R x C` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dim(format!("softmax_rows expects R x C, got {xs:?}")));
        }
        if self.vals[x.0].data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows input contains NaN or infinite values".into(),
            ));
        }
        let mut out = self.vals[x.0].clone();
        kernels::softmax_rows_inplace(out.data_mut(), xs[0], xs[1]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows { x: x.0 }, rg))
    }

    /// Mean over rows of `-sum(target * log(pred + eps))`; `target` rows
    /// must be one-hot and `pred` rows must already be distributions.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let ps = self.vals[p.0].shape().to_vec();
        if ps.len() != 2 || target.shape() != ps {
            return Err(Error::Dim(format!(
                "cross_entropy shapes disagree: pred {ps:?} vs target {:?}",
                target.shape()
            )));
        }
        let (rows, cols) = (ps[0], ps[1]);
        for r in 0..rows {
            let row = &self.vals[p.0].data()[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for &v in row {
                sum += v;
            }
            if (sum.to_f64() - 1.0).abs() > 1e-4 {
                return Err(Error::Validation(format!(
                    "cross_entropy pred row {r} sums to {} (must be 1 within 1e-4)",
                    sum.to_f64()
                )));
            }
            let trow = &target.data()[r * cols..(r + 1) * cols];
            let mut ones = 0;
            for &v in trow {
                let f = v.to_f64();
                if f == 1.0 {
                    ones += 1;
                } else if f != 0.0 {
                    return Err(Error::Validation(format!(
                        "cross_entropy target row {r} is not one-hot (entry {f})"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::Validation(format!(
                    "cross_entropy target row {r} has {ones} ones (must be exactly 1)"
                )));
            }
        }
        let eps = T::from_f64(1e-8);
        let mut total = T::zero();
        for (pv, tv) in self.vals[p.0].data().iter().zip(target.data()) {
            if tv.to_f64() == 1.0 {
                total += -((*pv + eps).ln());
            }
        }
        let loss = total / T::from_f64(rows as f64);
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyOneHot {
                p: p.0,
                target: target.clone(),
                eps,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.vals[x.0].data() {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, rg)
    }

    /// Reverse pass from a scalar loss. Consumes the tape's ability to run
    /// again; per-leaf gradients are read out of the returned `Grads`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.consumed = true;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        slots[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.accumulate(i, &g, &mut slots);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = Some(g);
            }
        }
        Ok(Grads { slots })
    }

    fn acc_into(slot: &mut Option<Tensor<T>>, shape: &[usize], add: impl Fn(&mut [T])) {
        let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
        add(t.data_mut());
    }

    fn accumulate(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &src in [a, b].iter() {
                    if self.nodes[*src].requires_grad {
                        Self::acc_into(&mut slots[*src], self.vals[*src].shape(), |d| {
                            for (o, &v) in d.iter_mut().zip(g.data()) {
                                *o += v;
                            }
                        });
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.nodes[*x].requires_grad {
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |d| {
                        for (o, &v) in d.iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
                if self.nodes[*bias].requires_grad {
                    let xs = self.vals[*x].shape();
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    Self::acc_into(&mut slots[*bias], &[c], |d| {
                        for (chunk_idx, chunk) in g.data().chunks(hw).enumerate() {
                            let ch = chunk_idx % c;
                            for &v in chunk {
                                d[ch] += v;
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bv = self.vals[*b].data();
                    Self::acc_into(&mut slots[*a], self.vals[*a].shape(), |d| {
                        for ((o, &gv), &v) in d.iter_mut().zip(g.data()).zip(bv) {
                            *o += gv * v;
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let av = self.vals[*a].data();
                    Self::acc_into(&mut slots[*b], self.vals[*b].shape(), |d| {
                        for ((o, &gv), &v) in d.iter_mut().zip(g.data()).zip(av) {
                            *o += gv * v;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[*x].requires_grad {
                    let c = *c;
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |d| {
                        for (o, &v) in d.iter_mut().zip(g.data()) {
                            *o += v * c;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].requires_grad {
                    let xv = self.vals[*x].data();
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |d| {
                        for ((o, &gv), &v) in d.iter_mut().zip(g.data()).zip(xv) {
                            if v > T::zero() {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::Matmul { a, b, trans_b } => {
                let (m, k) = (self.vals[*a].shape()[0], self.vals[*a].shape()[1]);
                let n = if *trans_b {
                    self.vals[*b].shape()[0]
                } else {
                    self.vals[*b].shape()[1]
                };
                if self.nodes[*a].requires_grad {
                    // dA = g * B (trans_b) or g * B^T
                    Self::acc_into(&mut slots[*a], &[m, k], |d| {
                        kernels::gemm_acc(
                            m,
                            n,
                            k,
                            T::one(),
                            g.data(),
                            false,
                            self.vals[*b].data(),
                            !*trans_b,
                            d,
                        );
                    });
                }
                if self.nodes[*b].requires_grad {
                    if *trans_b {
                        // C = A B^T, B is n x k: dB = g^T * A
                        Self::acc_into(&mut slots[*b], &[n, k], |d| {
                            kernels::gemm_acc(
                                n,
                                m,
                                k,
                                T::one(),
                                g.data(),
                                true,
                                self.vals[*a].data(),
                                false,
                                d,
                            );
                        });
                    } else {
                        // dB = A^T * g
                        Self::acc_into(&mut slots[*b], &[k, n], |d| {
                            kernels::gemm_acc(
                                k,
                                m,
                                n,
                                T::one(),
                                self.vals[*a].data(),
                                true,
                                g.data(),
                                false,
                                d,
                            );
                        });
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                dilation,
                cols,
            } => {
                let d = kernels::conv2d_dims(&self.vals[*x], &self.vals[*w], *stride, *pad, *dilation)
                    .expect("forward validated");
                let patch = d.h_out * d.w_out;
                let krows = d.c_in * d.kh * d.kw;
                let out_stride = d.c_out * patch;
                if self.nodes[*w].requires_grad {
                    Self::acc_into(&mut slots[*w], self.vals[*w].shape(), |dw| {
                        for (b, bcols) in cols.iter().enumerate() {
                            kernels::gemm_acc(
                                d.c_out,
                                patch,
                                krows,
                                T::one(),
                                &g.data()[b * out_stride..(b + 1) * out_stride],
                                false,
                                bcols,
                                true,
                                dw,
                            );
                        }
                    });
                }
                if self.nodes[*x].requires_grad {
                    let in_stride = d.c_in * d.h * d.w;
                    let wdata = self.vals[*w].data();
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |dx| {
                        let mut dcols = vec![T::zero(); krows * patch];
                        for b in 0..d.batch {
                            for v in dcols.iter_mut() {
                                *v = T::zero();
                            }
                            kernels::gemm_acc(
                                krows,
                                d.c_out,
                                patch,
                                T::one(),
                                wdata,
                                true,
                                &g.data()[b * out_stride..(b + 1) * out_stride],
                                false,
                                &mut dcols,
                            );
                            kernels::col2im_acc(
                                &dcols,
                                d.c_in,
                                d.h,
                                d.w,
                                d.kh,
                                d.kw,
                                *stride,
                                *pad,
                                *dilation,
                                d.h_out,
                                d.w_out,
                                &mut dx[b * in_stride..(b + 1) * in_stride],
                            );
                        }
                    });
                }
            }
            Op::ConvTime { x, w } => {
                let xs = self.vals[*x].shape();
                let (t_len, c_in, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let c_out = self.vals[*w].shape()[0];
                if self.nodes[*w].requires_grad {
                    let xv = self.vals[*x].data();
                    Self::acc_into(&mut slots[*w], self.vals[*w].shape(), |dw| {
                        let mut tap = vec![T::zero(); c_out * c_in];
                        for dt in 0..3usize {
                            for v in tap.iter_mut() {
                                *v = T::zero();
                            }
                            for t in 0..t_len {
                                let ti = t as isize + dt as isize - 1;
                                if ti < 0 || ti >= t_len as isize {
                                    continue;
                                }
                                // dW_dt += g_t [Cout x hw] * x_ti^T [hw x Cin]
                                kernels::gemm_acc(
                                    c_out,
                                    hw,
                                    c_in,
                                    T::one(),
                                    &g.data()[t * c_out * hw..(t + 1) * c_out * hw],
                                    false,
                                    &xv[ti as usize * c_in * hw..(ti as usize + 1) * c_in * hw],
                                    true,
                                    &mut tap,
                                );
                            }
                            for co in 0..c_out {
                                for ci in 0..c_in {
                                    dw[(co * c_in + ci) * 3 + dt] += tap[co * c_in + ci];
                                }
                            }
                        }
                    });
                }
                if self.nodes[*x].requires_grad {
                    let wv = self.vals[*w].data();
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |dx| {
                        let mut tap = vec![T::zero(); c_out * c_in];
                        for dt in 0..3usize {
                            for co in 0..c_out {
                                for ci in 0..c_in {
                                    tap[co * c_in + ci] = wv[(co * c_in + ci) * 3 + dt];
                                }
                            }
                            for t in 0..t_len {
                                let ti = t as isize + dt as isize - 1;
                                if ti < 0 || ti >= t_len as isize {
                                    continue;
                                }
                                // dx_ti += W_dt^T [Cin x Cout] * g_t [Cout x hw]
                                kernels::gemm_acc(
                                    c_in,
                                    c_out,
                                    hw,
                                    T::one(),
                                    &tap,
                                    true,
                                    &g.data()[t * c_out * hw..(t + 1) * c_out * hw],
                                    false,
                                    &mut dx[ti as usize * c_in * hw..(ti as usize + 1) * c_in * hw],
                                );
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let xs = self.vals[*x].shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let count = T::from_f64((batch * hw) as f64);
                let xv = self.vals[*x].data();
                let gv = self.vals[*gamma].data();
                let xhat = |b: usize, ch: usize, j: usize| {
                    (xv[(b * c + ch) * hw + j] - mean.data()[ch]) * invstd.data()[ch]
                };
                if self.nodes[*beta].requires_grad {
                    Self::acc_into(&mut slots[*beta], &[c], |d| {
                        for (chunk_idx, chunk) in g.data().chunks(hw).enumerate() {
                            let ch = chunk_idx % c;
                            for &v in chunk {
                                d[ch] += v;
                            }
                        }
                    });
                }
                if self.nodes[*gamma].requires_grad {
                    Self::acc_into(&mut slots[*gamma], &[c], |d| {
                        for b in 0..batch {
                            for ch in 0..c {
                                let gr = &g.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                                let mut s = T::zero();
                                for (j, &v) in gr.iter().enumerate() {
                                    s += v * xhat(b, ch, j);
                                }
                                d[ch] += s;
                            }
                        }
                    });
                }
                if self.nodes[*x].requires_grad {
                    if *batch_stats {
                        // Full BN backward: statistics depend on x.
                        let mut sum_g = vec![T::zero(); c];
                        let mut sum_gx = vec![T::zero(); c];
                        for b in 0..batch {
                            for ch in 0..c {
                                let gr = &g.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                                for (j, &v) in gr.iter().enumerate() {
                                    sum_g[ch] += v;
                                    sum_gx[ch] += v * xhat(b, ch, j);
                                }
                            }
                        }
                        Self::acc_into(&mut slots[*x], xs, |d| {
                            for b in 0..batch {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    let coef = gv[ch] * invstd.data()[ch];
                                    let mg = sum_g[ch] / count;
                                    let mgx = sum_gx[ch] / count;
                                    for j in 0..hw {
                                        d[base + j] +=
                                            coef * (g.data()[base + j] - mg - xhat(b, ch, j) * mgx);
                                    }
                                }
                            }
                        });
                    } else {
                        Self::acc_into(&mut slots[*x], xs, |d| {
                            for b in 0..batch {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    let coef = gv[ch] * invstd.data()[ch];
                                    for j in 0..hw {
                                        d[base + j] += coef * g.data()[base + j];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.vals[*a].shape();
                let sb = self.vals[*b].shape();
                let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let cc = ca + cb;
                if self.nodes[*a].requires_grad {
                    Self::acc_into(&mut slots[*a], sa, |d| {
                        for bi in 0..batch {
                            let src = &g.data()[bi * cc * hw..bi * cc * hw + ca * hw];
                            for (o, &v) in d[bi * ca * hw..(bi + 1) * ca * hw].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    Self::acc_into(&mut slots[*b], sb, |d| {
                        for bi in 0..batch {
                            let src = &g.data()[bi * cc * hw + ca * hw..(bi + 1) * cc * hw];
                            for (o, &v) in d[bi * cb * hw..(bi + 1) * cb * hw].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::SliceTime { x, t } => {
                if self.nodes[*x].requires_grad {
                    let chw = g.numel();
                    let t = *t;
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |d| {
                        for (o, &v) in d[t * chw..(t + 1) * chw].iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::RowsFromChw { x } => {
                if self.nodes[*x].requires_grad {
                    let xs = self.vals[*x].shape();
                    let (c, hw) = (xs[0], xs[1] * xs[2]);
                    Self::acc_into(&mut slots[*x], xs, |d| {
                        for p in 0..hw {
                            for ch in 0..c {
                                d[ch * hw + p] += g.data()[p * c + ch];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows { xs } => {
                let cols = g.shape()[1];
                let mut row0 = 0;
                for &src in xs {
                    let rows = self.vals[src].shape()[0];
                    if self.nodes[src].requires_grad {
                        let block = &g.data()[row0 * cols..(row0 + rows) * cols];
                        Self::acc_into(&mut slots[src], self.vals[src].shape(), |d| {
                            for (o, &v) in d.iter_mut().zip(block) {
                                *o += v;
                            }
                        });
                    }
                    row0 += rows;
                }
            }
            Op::SoftmaxRows { x } => {
                if self.nodes[*x].requires_grad {
                    let ys = &self.vals[i];
                    let (rows, cols) = (ys.shape()[0], ys.shape()[1]);
                    Self::acc_into(&mut slots[*x], ys.shape(), |d| {
                        for r in 0..rows {
                            let y = &ys.data()[r * cols..(r + 1) * cols];
                            let gr = &g.data()[r * cols..(r + 1) * cols];
                            let mut dot = T::zero();
                            for (&yv, &gv) in y.iter().zip(gr) {
                                dot += yv * gv;
                            }
                            for (j, o) in d[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                                *o += y[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropyOneHot { p, target, eps } => {
                if self.nodes[*p].requires_grad {
                    let rows = target.shape()[0];
                    let scale = g.item() / T::from_f64(rows as f64);
                    let pv = self.vals[*p].data();
                    let eps = *eps;
                    Self::acc_into(&mut slots[*p], self.vals[*p].shape(), |d| {
                        for (j, (&tv, o)) in target.data().iter().zip(d.iter_mut()).enumerate() {
                            if tv.to_f64() == 1.0 {
                                *o += -(scale / (pv[j] + eps));
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if self.nodes[*x].requires_grad {
                    let gv = g.item();
                    Self::acc_into(&mut slots[*x], self.vals[*x].shape(), |d| {
                        for o in d.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
        }
    }
}
