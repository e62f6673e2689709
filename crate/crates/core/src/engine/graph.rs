//! Reverse-mode tape over the fixed primitive set used by the pipeline:
//! matmul, 1-D convolution and its transpose, add/sub/mul, GELU, softmax,
//! layer normalization, embedding lookup, masked cross-entropy,
//! stop-gradient and straight-through substitution, plus the shape plumbing
//! (reshape, permute, slice, concat) needed to compose them.
//!
//! Ops evaluate eagerly and record themselves on the tape; [`Graph::backward`]
//! replays the tape in reverse, accumulating exact derivatives.

use super::{EngineError, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulTB(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        indices: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
    StopGrad,
    StraightThrough {
        grad_to: Var,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

/// A define-by-run tape. Build it fresh for every forward/backward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a leaf value. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<F>, grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        if self.shape(a) != self.shape(b) {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + bv;
        }
        let g = self.nodes[a.0].grad || self.nodes[b.0].grad;
        Ok(self.push(out, g, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("sub", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o - bv;
        }
        let g = self.nodes[a.0].grad || self.nodes[b.0].grad;
        Ok(self.push(out, g, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * bv;
        }
        let g = self.nodes[a.0].grad || self.nodes[b.0].grad;
        Ok(self.push(out, g, Op::Mul(a, b)))
    }

    /// Broadcast-add a 1-D bias over the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, EngineError> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(EngineError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        let bd = self.nodes[bias.0].value.data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o = *o + bv;
            }
        }
        let g = self.nodes[a.0].grad || self.nodes[bias.0].grad;
        Ok(self.push(out, g, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let fc = F::c(c);
        let out = self.nodes[a.0].value.map(|v| v * fc);
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let fc = F::c(c);
        let out = self.nodes[a.0].value.map(|v| v + fc);
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(gelu);
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.abs());
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * v);
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.sqrt());
        let g = self.nodes[a.0].grad;
        self.push(out, g, Op::Sqrt(a))
    }

    // ---- matrix products ----

    /// `a (..., m, k) x b (..., k, n)` with `b` either sharing the leading
    /// batch dims of `a` or plain 2-D (broadcast over the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let b_batched = bsh.len() > 2;
        let batch_ok = !b_batched || bsh[..bsh.len() - 2] == ash[..ash.len() - 2];
        if k != kb || !batch_ok {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let od = out.data_mut();
            for t in 0..batch {
                let asl = &ad[t * m * k..(t + 1) * m * k];
                let bsl = if b_batched {
                    &bd[t * k * n..(t + 1) * k * n]
                } else {
                    bd
                };
                mm(asl, bsl, m, k, n, &mut od[t * m * n..(t + 1) * m * n]);
            }
        }
        let g = self.nodes[a.0].grad || self.nodes[b.0].grad;
        Ok(self.push(out, g, Op::MatMul(a, b)))
    }

    /// `a (..., m, k) x b^T` with `b (n, k)` 2-D. Used for projection heads
    /// stored row-per-output.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[1] {
            return Err(EngineError::ShapeMismatch {
                op: "matmul_tb",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[0];
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let od = out.data_mut();
            for t in 0..batch {
                mm_tb(
                    &ad[t * m * k..(t + 1) * m * k],
                    bd,
                    m,
                    k,
                    n,
                    &mut od[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let g = self.nodes[a.0].grad || self.nodes[b.0].grad;
        Ok(self.push(out, g, Op::MatMulTB(a, b)))
    }

    // ---- convolutions ----

    /// 1-D convolution: `x (B, Ci, L)`, `w (Co, Ci, K)`, optional bias `(Co)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, EngineError> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[1] {
            return Err(EngineError::ShapeMismatch {
                op: "conv1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (bsz, ci, l) = (xsh[0], xsh[1], xsh[2]);
        let (co, _, kk) = (wsh[0], wsh[1], wsh[2]);
        if l + 2 * padding < kk || stride == 0 {
            return Err(EngineError::BadShape {
                op: "conv1d",
                shape: xsh,
                what: format!("kernel {kk} stride {stride} padding {padding} too large"),
            });
        }
        if let Some(bias) = b {
            if self.shape(bias) != [co] {
                return Err(EngineError::ShapeMismatch {
                    op: "conv1d",
                    lhs: vec![co],
                    rhs: self.shape(bias).to_vec(),
                });
            }
        }
        let lo = (l + 2 * padding - kk) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, co, lo]);
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for c_out in 0..co {
                    let orow = &mut od[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                    for c_in in 0..ci {
                        let wrow = &wd[(c_out * ci + c_in) * kk..(c_out * ci + c_in + 1) * kk];
                        let xrow = &xd[(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                        for (j, o) in orow.iter_mut().enumerate() {
                            let start = (j * stride) as isize - padding as isize;
                            let klo = (-start).max(0) as usize;
                            let khi = kk.min((l as isize - start).max(0) as usize);
                            let mut acc = F::zero();
                            for k in klo..khi {
                                acc = acc + wrow[k] * xrow[(start + k as isize) as usize];
                            }
                            *o = *o + acc;
                        }
                    }
                }
            }
            if let Some(bias) = b {
                let bd = self.nodes[bias.0].value.data().to_vec();
                for bi in 0..bsz {
                    for c_out in 0..co {
                        let orow = &mut od[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                        for o in orow.iter_mut() {
                            *o = *o + bd[c_out];
                        }
                    }
                }
            }
        }
        let g = self.nodes[x.0].grad
            || self.nodes[w.0].grad
            || b.map(|bv| self.nodes[bv.0].grad).unwrap_or(false);
        Ok(self.push(
            out,
            g,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Transposed 1-D convolution: `x (B, Ci, L)`, `w (Ci, Co, K)`,
    /// output length `(L-1)*stride - 2*padding + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, EngineError> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[0] {
            return Err(EngineError::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (bsz, ci, l) = (xsh[0], xsh[1], xsh[2]);
        let (_, co, kk) = (wsh[0], wsh[1], wsh[2]);
        let lo_signed = (l as isize - 1) * stride as isize - 2 * padding as isize + kk as isize;
        if stride == 0 || lo_signed < 1 {
            return Err(EngineError::BadShape {
                op: "conv_transpose1d",
                shape: xsh,
                what: format!("kernel {kk} stride {stride} padding {padding} yields empty output"),
            });
        }
        let lo = lo_signed as usize;
        if let Some(bias) = b {
            if self.shape(bias) != [co] {
                return Err(EngineError::ShapeMismatch {
                    op: "conv_transpose1d",
                    lhs: vec![co],
                    rhs: self.shape(bias).to_vec(),
                });
            }
        }
        let mut out = Tensor::zeros(&[bsz, co, lo]);
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for c_in in 0..ci {
                    let xrow = &xd[(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                    for c_out in 0..co {
                        let wrow = &wd[(c_in * co + c_out) * kk..(c_in * co + c_out + 1) * kk];
                        let orow = &mut od[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let base = (i * stride) as isize - padding as isize;
                            let klo = (-base).max(0) as usize;
                            let khi = kk.min((lo as isize - base).max(0) as usize);
                            for k in klo..khi {
                                orow[(base + k as isize) as usize] =
                                    orow[(base + k as isize) as usize] + xv * wrow[k];
                            }
                        }
                    }
                }
            }
            if let Some(bias) = b {
                let bd = self.nodes[bias.0].value.data().to_vec();
                for bi in 0..bsz {
                    for c_out in 0..co {
                        let orow = &mut od[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                        for o in orow.iter_mut() {
                            *o = *o + bd[c_out];
                        }
                    }
                }
            }
        }
        let g = self.nodes[x.0].grad
            || self.nodes[w.0].grad
            || b.map(|bv| self.nodes[bv.0].grad).unwrap_or(false);
        Ok(self.push(
            out,
            g,
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    // ---- normalizations ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, EngineError> {
        let sh = self.shape(a).to_vec();
        let n = *sh.last().ok_or(EngineError::BadShape {
            op: "softmax",
            shape: sh.clone(),
            what: "rank 0".into(),
        })?;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let g = self.nodes[a.0].grad;
        Ok(self.push(out, g, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, EngineError> {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().ok_or(EngineError::BadShape {
            op: "layer_norm",
            shape: sh.clone(),
            what: "rank 0".into(),
        })?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(EngineError::ShapeMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let gd = self.nodes[gain.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data().to_vec();
        let feps = F::c(eps);
        let fn_ = F::c(n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mut mean = F::zero();
            for v in row.iter() {
                mean = mean + *v;
            }
            mean = mean / fn_;
            let mut var = F::zero();
            for v in row.iter() {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / fn_;
            let inv = (var + feps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gd[j] + bd[j];
            }
        }
        let g = self.nodes[x.0].grad || self.nodes[gain.0].grad || self.nodes[bias.0].grad;
        Ok(self.push(out, g, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ---- lookups and losses ----

    /// Row lookup into `table (V, d)`; output shape `prefix + [d]` where
    /// `prefix` multiplies out to `indices.len()`.
    pub fn embedding(
        &mut self,
        table: Var,
        indices: &[u32],
        prefix: &[usize],
    ) -> Result<Var, EngineError> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(EngineError::BadShape {
                op: "embedding",
                shape: tsh,
                what: "table must be 2-D".into(),
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        let rows: usize = prefix.iter().product();
        if rows != indices.len() {
            return Err(EngineError::BadShape {
                op: "embedding",
                shape: prefix.to_vec(),
                what: format!("prefix holds {rows} rows but {} indices given", indices.len()),
            });
        }
        for &i in indices {
            if i as usize >= v {
                return Err(EngineError::IndexOutOfRange {
                    op: "embedding",
                    index: i as usize,
                    bound: v,
                });
            }
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let mut out = Tensor::zeros(&shape);
        {
            let td = self.nodes[table.0].value.data();
            let od = out.data_mut();
            for (r, &i) in indices.iter().enumerate() {
                od[r * d..(r + 1) * d].copy_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
            }
        }
        let g = self.nodes[table.0].grad;
        Ok(self.push(
            out,
            g,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy over masked rows of `logits (..., K)` against
    /// integer targets. Rows with `mask == false` contribute nothing; at
    /// least one row must be masked.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var, EngineError> {
        let sh = self.shape(logits).to_vec();
        let k = *sh.last().ok_or(EngineError::BadShape {
            op: "cross_entropy",
            shape: sh.clone(),
            what: "rank 0".into(),
        })?;
        let rows: usize = sh[..sh.len() - 1].iter().product();
        if targets.len() != rows || mask.len() != rows {
            return Err(EngineError::BadShape {
                op: "cross_entropy",
                shape: sh,
                what: format!(
                    "{rows} logit rows but {} targets / {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let m_count = mask.iter().filter(|&&m| m).count();
        if m_count == 0 {
            return Err(EngineError::NoMaskedPositions);
        }
        let mut total = F::zero();
        {
            let ld = self.nodes[logits.0].value.data();
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let t = targets[r] as usize;
                if t >= k {
                    return Err(EngineError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: k,
                    });
                }
                let row = &ld[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for &v in row {
                    sum = sum + (v - max).exp();
                }
                total = total + sum.ln() + max - row[t];
            }
        }
        let loss = total / F::c(m_count as f64);
        let g = self.nodes[logits.0].grad;
        Ok(self.push(
            Tensor::scalar(loss),
            g,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    // ---- gradient routing ----

    /// Forward identity; blocks all gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.clone();
        self.push(out, false, Op::StopGrad)
    }

    /// Straight-through substitution: forward value is `quantized`, the
    /// backward gradient is copied unchanged to `pre_quant`. `quantized`
    /// receives no gradient through this path.
    pub fn straight_through(&mut self, pre_quant: Var, quantized: Var) -> Result<Var, EngineError> {
        self.same_shape("straight_through", pre_quant, quantized)?;
        let out = self.nodes[quantized.0].value.clone();
        let g = self.nodes[pre_quant.0].grad;
        Ok(self.push(
            out,
            g,
            Op::StraightThrough {
                grad_to: pre_quant,
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let g = self.nodes[a.0].grad;
        self.push(Tensor::scalar(acc), g, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let g = self.nodes[a.0].grad;
        self.push(
            Tensor::scalar(acc / F::c(n as f64)),
            g,
            Op::Mean(a),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, EngineError> {
        let out = self.nodes[a.0].value.reshaped(shape.to_vec())?;
        let g = self.nodes[a.0].grad;
        Ok(self.push(out, g, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, EngineError> {
        let ish = self.shape(a).to_vec();
        if perm.len() != ish.len() || {
            let mut seen = vec![false; perm.len()];
            perm.iter().any(|&p| {
                if p >= perm.len() || seen[p] {
                    true
                } else {
                    seen[p] = true;
                    false
                }
            })
        } {
            return Err(EngineError::BadShape {
                op: "permute",
                shape: ish,
                what: format!("invalid permutation {perm:?}"),
            });
        }
        let out = permute_tensor(&self.nodes[a.0].value, perm);
        let g = self.nodes[a.0].grad;
        Ok(self.push(
            out,
            g,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, EngineError> {
        let ish = self.shape(a).to_vec();
        if axis >= ish.len() || start + len > ish[axis] {
            return Err(EngineError::BadShape {
                op: "slice",
                shape: ish,
                what: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = ish[..axis].iter().product();
        let mid = ish[axis];
        let inner: usize = ish[axis + 1..].iter().product();
        let mut osh = ish.clone();
        osh[axis] = len;
        let mut out = Tensor::zeros(&osh);
        {
            let id = self.nodes[a.0].value.data();
            let od = out.data_mut();
            for o in 0..outer {
                let src = &id[(o * mid + start) * inner..(o * mid + start + len) * inner];
                od[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
        }
        let g = self.nodes[a.0].grad;
        Ok(self.push(
            out,
            g,
            Op::Slice {
                x: a,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, EngineError> {
        if xs.is_empty() {
            return Err(EngineError::BadShape {
                op: "concat",
                shape: vec![],
                what: "no inputs".into(),
            });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(EngineError::BadShape {
                op: "concat",
                shape: first,
                what: format!("axis {axis} out of range"),
            });
        }
        let mut total_axis = 0usize;
        for &x in xs {
            let sh = self.shape(x);
            if sh.len() != first.len()
                || sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(EngineError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sh.to_vec(),
                });
            }
            total_axis += sh[axis];
        }
        let mut osh = first.clone();
        osh[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&osh);
        {
            let od = out.data_mut();
            let mut offset = 0usize;
            for &x in xs {
                let mid = self.shape(x)[axis];
                let id = self.nodes[x.0].value.data();
                for o in 0..outer {
                    let dst_start = (o * total_axis + offset) * inner;
                    od[dst_start..dst_start + mid * inner]
                        .copy_from_slice(&id[o * mid * inner..(o + 1) * mid * inner]);
                }
                offset += mid;
            }
        }
        let g = xs.iter().any(|&x| self.nodes[x.0].grad);
        Ok(self.push(
            out,
            g,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// node with `requires_grad` reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>, EngineError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(EngineError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![F::one()],
        )?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            // Re-store unless a leaf consumed it.
            grads[i] = Some(g);
        }
        // Drop gradients of non-grad nodes.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].grad {
                *slot = None;
            }
        }
        Ok(Grads { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].grad {
                    let mut d = g.clone();
                    for (o, &bv) in d.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *o = *o * bv;
                    }
                    self.add_grad(grads, *a, d);
                }
                if self.nodes[b.0].grad {
                    let mut d = g.clone();
                    for (o, &av) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *o = *o * av;
                    }
                    self.add_grad(grads, *b, d);
                }
            }
            Op::AddBias(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                if self.nodes[bias.0].grad {
                    let n = self.nodes[bias.0].value.len();
                    let mut d = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (o, &gv) in d.data_mut().iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    self.add_grad(grads, *bias, d);
                }
            }
            Op::Scale(a, c) => {
                let fc = F::c(*c);
                self.add_grad(grads, *a, g.map(|v| v * fc));
            }
            Op::AddScalar(a) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *o = *o * gelu_prime(xv);
                }
                self.add_grad(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    let s = if xv > F::zero() {
                        F::one()
                    } else if xv < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *o = *o * s;
                }
                self.add_grad(grads, *a, d);
            }
            Op::Square(a) => {
                let two = F::c(2.0);
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *o = *o * two * xv;
                }
                self.add_grad(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let half = F::c(0.5);
                let mut d = g.clone();
                for (o, &yv) in d.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                    *o = *o * half / yv;
                }
                self.add_grad(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let ash = self.nodes[a.0].value.shape();
                let bsh = self.nodes[b.0].value.shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let b_batched = bsh.len() > 2;
                let gd = g.data();
                if self.nodes[a.0].grad {
                    // dA = dO . B^T
                    let mut da = Tensor::zeros(ash);
                    let bd = self.nodes[b.0].value.data();
                    let dad = da.data_mut();
                    for t in 0..batch {
                        let bsl = if b_batched {
                            &bd[t * k * n..(t + 1) * k * n]
                        } else {
                            bd
                        };
                        mm_bt(
                            &gd[t * m * n..(t + 1) * m * n],
                            bsl,
                            m,
                            n,
                            k,
                            &mut dad[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.nodes[b.0].grad {
                    // dB = A^T . dO (summed over batch when B is 2-D)
                    let ad = self.nodes[a.0].value.data();
                    let mut db = Tensor::zeros(bsh);
                    let dbd = db.data_mut();
                    for t in 0..batch {
                        let dst = if b_batched {
                            &mut dbd[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut dbd[..]
                        };
                        mm_at(
                            &ad[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            dst,
                        );
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::MatMulTB(a, b) => {
                let ash = self.nodes[a.0].value.shape();
                let bsh = self.nodes[b.0].value.shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[0];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let gd = g.data();
                if self.nodes[a.0].grad {
                    // dA = dO . B    ((..,m,n) x (n,k))
                    let bd = self.nodes[b.0].value.data();
                    let mut da = Tensor::zeros(ash);
                    let dad = da.data_mut();
                    for t in 0..batch {
                        mm(
                            &gd[t * m * n..(t + 1) * m * n],
                            bd,
                            m,
                            n,
                            k,
                            &mut dad[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.nodes[b.0].grad {
                    // dB = dO^T . A summed over batch  -> (n, k)
                    let ad = self.nodes[a.0].value.data();
                    let mut db = Tensor::zeros(bsh);
                    let dbd = db.data_mut();
                    for t in 0..batch {
                        mm_at(
                            &gd[t * m * n..(t + 1) * m * n],
                            &ad[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            dbd,
                        );
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xsh = self.nodes[x.0].value.shape().to_vec();
                let wsh = self.nodes[w.0].value.shape().to_vec();
                let (bsz, ci, l) = (xsh[0], xsh[1], xsh[2]);
                let (co, _, kk) = (wsh[0], wsh[1], wsh[2]);
                let lo = self.nodes[i].value.shape()[2];
                let gd = g.data();
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let mut dx = self.nodes[x.0].grad.then(|| Tensor::zeros(&xsh));
                let mut dw = self.nodes[w.0].grad.then(|| Tensor::zeros(&wsh));
                for bi in 0..bsz {
                    for c_out in 0..co {
                        let grow = &gd[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                        for c_in in 0..ci {
                            let wrow =
                                &wd[(c_out * ci + c_in) * kk..(c_out * ci + c_in + 1) * kk];
                            let xrow = &xd[(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                            for (j, &gv) in grow.iter().enumerate() {
                                let start = (j * stride) as isize - *padding as isize;
                                let klo = (-start).max(0) as usize;
                                let khi = kk.min((l as isize - start).max(0) as usize);
                                if let Some(dx) = dx.as_mut() {
                                    let dxrow = &mut dx.data_mut()
                                        [(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                                    for k in klo..khi {
                                        let idx = (start + k as isize) as usize;
                                        dxrow[idx] = dxrow[idx] + gv * wrow[k];
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    let dwrow = &mut dw.data_mut()
                                        [(c_out * ci + c_in) * kk..(c_out * ci + c_in + 1) * kk];
                                    for k in klo..khi {
                                        dwrow[k] =
                                            dwrow[k] + gv * xrow[(start + k as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.add_grad(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.add_grad(grads, *w, dw);
                }
                if let Some(bias) = b {
                    if self.nodes[bias.0].grad {
                        let mut db = Tensor::zeros(&[co]);
                        for bi in 0..bsz {
                            for c_out in 0..co {
                                let grow =
                                    &gd[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                                let mut acc = F::zero();
                                for &gv in grow {
                                    acc = acc + gv;
                                }
                                db.data_mut()[c_out] = db.data_mut()[c_out] + acc;
                            }
                        }
                        self.add_grad(grads, *bias, db);
                    }
                }
            }
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xsh = self.nodes[x.0].value.shape().to_vec();
                let wsh = self.nodes[w.0].value.shape().to_vec();
                let (bsz, ci, l) = (xsh[0], xsh[1], xsh[2]);
                let (_, co, kk) = (wsh[0], wsh[1], wsh[2]);
                let lo = self.nodes[i].value.shape()[2];
                let gd = g.data();
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let mut dx = self.nodes[x.0].grad.then(|| Tensor::zeros(&xsh));
                let mut dw = self.nodes[w.0].grad.then(|| Tensor::zeros(&wsh));
                for bi in 0..bsz {
                    for c_in in 0..ci {
                        let xrow = &xd[(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                        for c_out in 0..co {
                            let wrow =
                                &wd[(c_in * co + c_out) * kk..(c_in * co + c_out + 1) * kk];
                            let grow = &gd[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                            for i_in in 0..l {
                                let base = (i_in * stride) as isize - *padding as isize;
                                let klo = (-base).max(0) as usize;
                                let khi = kk.min((lo as isize - base).max(0) as usize);
                                if let Some(dx) = dx.as_mut() {
                                    let mut acc = F::zero();
                                    for k in klo..khi {
                                        acc = acc + grow[(base + k as isize) as usize] * wrow[k];
                                    }
                                    let dxrow = &mut dx.data_mut()
                                        [(bi * ci + c_in) * l..(bi * ci + c_in + 1) * l];
                                    dxrow[i_in] = dxrow[i_in] + acc;
                                }
                                if let Some(dw) = dw.as_mut() {
                                    let xv = xrow[i_in];
                                    let dwrow = &mut dw.data_mut()
                                        [(c_in * co + c_out) * kk..(c_in * co + c_out + 1) * kk];
                                    for k in klo..khi {
                                        dwrow[k] =
                                            dwrow[k] + xv * grow[(base + k as isize) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.add_grad(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.add_grad(grads, *w, dw);
                }
                if let Some(bias) = b {
                    if self.nodes[bias.0].grad {
                        let mut db = Tensor::zeros(&[co]);
                        for bi in 0..bsz {
                            for c_out in 0..co {
                                let grow =
                                    &gd[(bi * co + c_out) * lo..(bi * co + c_out + 1) * lo];
                                let mut acc = F::zero();
                                for &gv in grow {
                                    acc = acc + gv;
                                }
                                db.data_mut()[c_out] = db.data_mut()[c_out] + acc;
                            }
                        }
                        self.add_grad(grads, *bias, db);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *self.nodes[i].value.shape().last().unwrap();
                let y = self.nodes[i].value.data();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.chunks(n)) {
                    let mut dot = F::zero();
                    for (dv, yv) in drow.iter().zip(yrow) {
                        dot = dot + *dv * *yv;
                    }
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = *yv * (*dv - dot);
                    }
                }
                self.add_grad(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let n = *self.nodes[i].value.shape().last().unwrap();
                let xd = self.nodes[x.0].value.data();
                let gaind = self.nodes[gain.0].value.data();
                let gd = g.data();
                let feps = F::c(*eps);
                let fn_ = F::c(n as f64);
                let rows = xd.len() / n;
                let mut dx = self.nodes[x.0].grad.then(|| {
                    Tensor::zeros(self.nodes[x.0].value.shape())
                });
                let mut dgain = self.nodes[gain.0].grad.then(|| Tensor::zeros(&[n]));
                let mut dbias = self.nodes[bias.0].grad.then(|| Tensor::zeros(&[n]));
                for r in 0..rows {
                    let xrow = &xd[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let mut mean = F::zero();
                    for &v in xrow {
                        mean = mean + v;
                    }
                    mean = mean / fn_;
                    let mut var = F::zero();
                    for &v in xrow {
                        let dv = v - mean;
                        var = var + dv * dv;
                    }
                    var = var / fn_;
                    let inv = (var + feps).sqrt().recip();
                    if let Some(dbias) = dbias.as_mut() {
                        for (o, &gv) in dbias.data_mut().iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                    if let Some(dgain) = dgain.as_mut() {
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv;
                            dgain.data_mut()[j] = dgain.data_mut()[j] + grow[j] * xhat;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..n {
                            let dxh = grow[j] * gaind[j];
                            let xhat = (xrow[j] - mean) * inv;
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat;
                        }
                        m1 = m1 / fn_;
                        m2 = m2 / fn_;
                        let dxrow = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dxh = grow[j] * gaind[j];
                            let xhat = (xrow[j] - mean) * inv;
                            dxrow[j] = dxrow[j] + (dxh - m1 - xhat * m2) * inv;
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.add_grad(grads, *x, dx);
                }
                if let Some(dgain) = dgain {
                    self.add_grad(grads, *gain, dgain);
                }
                if let Some(dbias) = dbias {
                    self.add_grad(grads, *bias, dbias);
                }
            }
            Op::Embedding { table, indices } => {
                if self.nodes[table.0].grad {
                    let tsh = self.nodes[table.0].value.shape();
                    let d = tsh[1];
                    let mut dt = Tensor::zeros(tsh);
                    let gd = g.data();
                    for (r, &idx) in indices.iter().enumerate() {
                        let dst =
                            &mut dt.data_mut()[idx as usize * d..(idx as usize + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o = *o + gv;
                        }
                    }
                    self.add_grad(grads, *table, dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if self.nodes[logits.0].grad {
                    let lsh = self.nodes[logits.0].value.shape();
                    let k = *lsh.last().unwrap();
                    let ld = self.nodes[logits.0].value.data();
                    let m_count = mask.iter().filter(|&&m| m).count();
                    let upstream = g.item();
                    let scale = upstream / F::c(m_count as f64);
                    let mut dl = Tensor::zeros(lsh);
                    let dld = dl.data_mut();
                    for (r, (&t, &msk)) in targets.iter().zip(mask).enumerate() {
                        if !msk {
                            continue;
                        }
                        let row = &ld[r * k..(r + 1) * k];
                        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let mut sum = F::zero();
                        for &v in row {
                            sum = sum + (v - max).exp();
                        }
                        let drow = &mut dld[r * k..(r + 1) * k];
                        for (j, o) in drow.iter_mut().enumerate() {
                            let p = (row[j] - max).exp() / sum;
                            let y = if j == t as usize { F::one() } else { F::zero() };
                            *o = (p - y) * scale;
                        }
                    }
                    self.add_grad(grads, *logits, dl);
                }
            }
            Op::StraightThrough { grad_to, .. } => {
                self.add_grad(grads, *grad_to, g.clone());
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.add_grad(
                    grads,
                    *a,
                    Tensor::full(self.nodes[a.0].value.shape(), gv),
                );
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let gv = g.item() / F::c(n as f64);
                self.add_grad(
                    grads,
                    *a,
                    Tensor::full(self.nodes[a.0].value.shape(), gv),
                );
            }
            Op::Reshape(a) => {
                let d = g
                    .reshaped(self.nodes[a.0].value.shape().to_vec())
                    .expect("reshape grad");
                self.add_grad(grads, *a, d);
            }
            Op::Permute { x, perm } => {
                // inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let d = permute_tensor(g, &inv);
                self.add_grad(grads, *x, d);
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if self.nodes[x.0].grad {
                    let ish = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = ish[..*axis].iter().product();
                    let mid = ish[*axis];
                    let inner: usize = ish[*axis + 1..].iter().product();
                    let mut dx = Tensor::zeros(&ish);
                    let gd = g.data();
                    for o in 0..outer {
                        let dst = &mut dx.data_mut()
                            [(o * mid + start) * inner..(o * mid + start + len) * inner];
                        dst.copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.add_grad(grads, *x, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let osh = self.nodes[i].value.shape().to_vec();
                let outer: usize = osh[..*axis].iter().product();
                let total = osh[*axis];
                let inner: usize = osh[*axis + 1..].iter().product();
                let gd = g.data();
                let mut offset = 0usize;
                for &x in xs {
                    let mid = self.nodes[x.0].value.shape()[*axis];
                    if self.nodes[x.0].grad {
                        let mut dx = Tensor::zeros(self.nodes[x.0].value.shape());
                        for o in 0..outer {
                            let src = &gd
                                [(o * total + offset) * inner..(o * total + offset + mid) * inner];
                            dx.data_mut()[o * mid * inner..(o + 1) * mid * inner]
                                .copy_from_slice(src);
                        }
                        self.add_grad(grads, x, dx);
                    }
                    offset += mid;
                }
            }
        }
    }
}

// tanh-form GELU, used consistently in forward and backward
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let k = F::c(GELU_K);
    let c = F::c(GELU_C);
    let half = F::c(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_prime<F: Scalar>(x: F) -> F {
    let k = F::c(GELU_K);
    let c = F::c(GELU_C);
    let half = F::c(0.5);
    let three = F::c(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + three * c * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// out += A (m,k) . B (k,n)
fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out += A (m,k) . B^T with B (n,k)
fn mm_tb<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out += A . B^T with A (m,n), B (k,n) -> (m,k); alias of mm_tb with renamed dims
fn mm_bt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    mm_tb(a, b, m, n, k, out);
}

/// out += A^T . B with A (m,k), B (m,n) -> (k,n)
fn mm_at<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn permute_tensor<F: Scalar>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let ish = t.shape();
    let rank = ish.len();
    let osh: Vec<usize> = perm.iter().map(|&p| ish[p]).collect();
    let mut istrides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        istrides[d] = istrides[d + 1] * ish[d + 1];
    }
    // stride in the input for each output axis
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| istrides[p]).collect();
    let mut out = Tensor::zeros(&osh);
    if t.len() == 0 {
        return out;
    }
    let id = t.data();
    let od = out.data_mut();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for o in od.iter_mut() {
        *o = id[in_off];
        // odometer increment over output indices
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += strides_for_out[d];
            if idx[d] < osh[d] {
                break;
            }
            in_off -= strides_for_out[d] * osh[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_passes_upstream_gradient_through() {
        // add with zero constant acts as identity
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.add(x, z).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_grad_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 3], &[0.2, -0.3, 1.1]), true);
        let loss = g.cross_entropy(logits, &[2], &[true]).unwrap();
        let grads = g.backward(loss).unwrap();
        let lg = grads.get(logits).unwrap().data();
        // expected: softmax(logits) - onehot(2)
        let exps: Vec<f64> = [0.2f64, -0.3, 1.1].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for j in 0..3 {
            let want = probs[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((lg[j] - want).abs() < 1e-12, "j={j}: {} vs {want}", lg[j]);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(&[4, 512]), false);
        let loss = g
            .cross_entropy(logits, &[0, 5, 100, 511], &[true; 4])
            .unwrap();
        let got: f64 = g.value(loss).item();
        assert!((got - (512f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn straight_through_forwards_quantized_and_routes_grad_to_pre_quant() {
        let mut g = Graph::new();
        let z_e = g.leaf(t(&[2], &[0.0, 0.0]), true);
        let z_q = g.constant(t(&[2], &[1.0, 1.0]));
        let st = g.straight_through(z_e, z_q).unwrap();
        assert_eq!(g.value(st).data(), &[1.0, 1.0]);
        let half = g.scale(st, 0.5);
        let s = g.sum(half);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(z_e).unwrap().data(), &[0.5, 0.5]);
        assert!(grads.get(z_q).is_none());
    }

    #[test]
    fn straight_through_with_equal_inputs_is_identity_forward() {
        let mut g = Graph::new();
        let z = t(&[3], &[0.5, -1.0, 2.0]);
        let z_e = g.leaf(z.clone(), true);
        let z_q = g.constant(z.clone());
        let st = g.straight_through(z_e, z_q).unwrap();
        assert_eq!(g.value(st).data(), z.data());
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sg = g.stop_grad(x);
        let y = g.square(sg);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4, 5]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let xt = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(xt).shape(), &[3, 2]);
        assert_eq!(g.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.permute(xt, &[1, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t(&[1, 2], &[5.0, 6.0]), false);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let s = g.slice(c, 0, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_requires_masked_positions() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(&[2, 4]), true);
        let err = g.cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, EngineError::NoMaskedPositions));
    }
}
