//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are only ever
//! appended, so the node list is already in topological order and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on a [`Tape`].
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
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Softmax { x: Var, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv1dSame { x: Var, kernel: Var, bias: Var },
    Concat(Vec<Var>),
    SelectLast { x: Var, index: usize },
    ScaleRows { x: Var, scale: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep strictly inside (0, 1) in floating point
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is `[m,k]` and `b` is `[n,k]`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `[m,k]` and `b` is `[m,n]`, giving `[k,n]`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Learnable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-learnable leaf (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// `x + bias`, broadcasting `bias [D]` over the leading dims of `x [.., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.rank() != 1 || tb.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    /// Matrix product of `a [m,k]` and `b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        expect_rank("transpose", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// `x Wᵀ + b` over the trailing dimension of `x [.., in]` with `W [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 || tx.last_dim() != tw.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (out_dim, in_dim) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / in_dim;
        let mut data = matmul_nt_raw(tx.data(), tw.data(), rows, in_dim, out_dim);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.rank() != 1 || tb.numel() != out_dim {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: tw.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in data.chunks_mut(out_dim) {
                for (v, bv) in row.iter_mut().zip(tb.data()) {
                    *v += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let out = Tensor::new(shape, data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Batched product of `a [g,m,k]` and `b [g,k,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3
            || tb.rank() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[2] != tb.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (g, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut data = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            data.extend(matmul_raw(
                &ta.data()[gi * m * k..(gi + 1) * m * k],
                &tb.data()[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::new(vec![g, m, n], data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::BatchMatMul(a, b), ng))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        expect_rank("transpose_last2", ta, 3)?;
        let (g, r, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let mut data = Vec::with_capacity(ta.numel());
        for gi in 0..g {
            data.extend(transpose_raw(&ta.data()[gi * r * c..(gi + 1) * r * c], r, c));
        }
        let out = Tensor::new(vec![g, c, r], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::TransposeLast2(a), ng))
    }

    /// `[B, L, D]` to `[B*heads, L, D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("split_heads", tx, 3)?;
        let (b, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape: tx.shape().to_vec(),
                reason: format!("model dim not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let src = tx.data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let dst = ((bi * heads + h) * l + li) * dh;
                    let s = (bi * l + li) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, l, dh], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, ng))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("merge_heads", tx, 3)?;
        let (bh, l, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if heads == 0 || bh % heads != 0 {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape: tx.shape().to_vec(),
                reason: format!("leading dim not divisible by {heads} heads"),
            });
        }
        let b = bh / heads;
        let d = dh * heads;
        let src = tx.data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let s = ((bi * heads + h) * l + li) * dh;
                    let dst = (bi * l + li) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b, l, d], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MergeHeads { x, heads }, ng))
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        let ng = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Layer normalization over the trailing dimension (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let (mean, rstd) = row_stats(row, eps);
            data.extend(
                row.iter()
                    .zip(tg.data().iter().zip(tb.data()))
                    .map(|(v, (g, b))| g * (v - mean) * rstd + b),
            );
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        ))
    }

    /// Length-preserving 1-D convolution over the sequence axis.
    ///
    /// `x [B, L, D_in]`, `kernel [k, D_out, D_in]`, `bias [D_out]`; `k` must be
    /// odd and positions outside the sequence read as zero.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        expect_rank("conv1d_same", tx, 3)?;
        expect_rank("conv1d_same kernel", tk, 3)?;
        let (k, d_out, d_in) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d_same needs an odd kernel size, got {k}"
            )));
        }
        if tx.shape()[2] != d_in || tb.shape() != [d_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (b, l) = (tx.shape()[0], tx.shape()[1]);
        let pad = (k - 1) / 2;
        let (xs, ks) = (tx.data(), tk.data());
        let mut data = vec![0.0; b * l * d_out];
        for bi in 0..b {
            for t in 0..l {
                let out = &mut data[(bi * l + t) * d_out..(bi * l + t + 1) * d_out];
                out.copy_from_slice(tb.data());
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    let xin = &xs[(bi * l + s) * d_in..(bi * l + s + 1) * d_in];
                    for (o, ov) in out.iter_mut().enumerate() {
                        let w = &ks[(j * d_out + o) * d_in..(j * d_out + o + 1) * d_in];
                        *ov += w.iter().zip(xin).map(|(a, c)| a * c).sum::<f64>();
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, l, d_out], data)?;
        let ng = self.needs(&[x, kernel, bias]);
        Ok(self.push(out, Op::Conv1dSame { x, kernel, bias }, ng))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.shape(*first);
        let lead = &lead[..lead.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec()), ng))
    }

    /// `x[..., index]`, dropping the trailing axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        if tx.rank() == 0 || index >= w {
            return Err(Error::InvalidArgument(format!(
                "select_last index {index} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let data = tx.data().chunks(w).map(|row| row[index]).collect();
        let out = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SelectLast { x, index }, ng))
    }

    /// Multiplies every slice `x[n, ..]` by `scale[n]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        if tx.rank() == 0 || ts.rank() != 1 || ts.numel() != tx.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let width = tx.numel() / tx.shape()[0].max(1);
        let data = tx
            .data()
            .chunks(width.max(1))
            .zip(ts.data())
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x, scale]);
        Ok(self.push(out, Op::ScaleRows { x, scale }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel().max(1) as f64);
        let ng = self.needs(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        expect_rank("cross_entropy", tl, 2)?;
        let (b, c) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != b {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &y) in tl.data().chunks(c).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / b.max(1) as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: lt.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddBias { x, bias } => {
                let d = shp(*bias)[0];
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*bias, gb);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, matmul_nt_raw(g, val(*b), m, n, k));
                acc(*b, matmul_tn_raw(val(*a), g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                acc(*a, transpose_raw(g, c, r));
            }
            Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = (shp(*w)[0], shp(*w)[1]);
                let rows = g.len() / out_dim;
                acc(*x, matmul_raw(g, val(*w), rows, out_dim, in_dim));
                acc(*w, matmul_tn_raw(g, val(*x), rows, out_dim, in_dim));
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_dim];
                    for row in g.chunks(out_dim) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (gn, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let n = shp(*b)[2];
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Vec::with_capacity(gn * m * k);
                let mut gb = Vec::with_capacity(gn * k * n);
                for i in 0..gn {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    ga.extend(matmul_nt_raw(gi, &vb[i * k * n..(i + 1) * k * n], m, n, k));
                    gb.extend(matmul_tn_raw(&va[i * m * k..(i + 1) * m * k], gi, m, k, n));
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::TransposeLast2(a) => {
                let (gn, r, c) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let mut ga = Vec::with_capacity(g.len());
                for i in 0..gn {
                    ga.extend(transpose_raw(&g[i * r * c..(i + 1) * r * c], c, r));
                }
                acc(*a, ga);
            }
            Op::SplitHeads { x, heads } => {
                let (b, l, d) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let dh = d / heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for li in 0..l {
                            let s = ((bi * heads + h) * l + li) * dh;
                            let dst = (bi * l + li) * d + h * dh;
                            gx[dst..dst + dh].copy_from_slice(&g[s..s + dh]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MergeHeads { x, heads } => {
                let (bh, l, dh) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let b = bh / heads;
                let d = dh * heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for li in 0..l {
                            let dst = ((bi * heads + h) * l + li) * dh;
                            let s = (bi * l + li) * d + h * dh;
                            gx[dst..dst + dh].copy_from_slice(&g[s..s + dh]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) =
                    axis_split(shp(*x), *axis).expect("axis validated on forward");
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, g.iter().zip(vx).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let d = shp(*gamma)[0];
                let (vx, vg) = (val(*x), val(*gamma));
                let mut gx = Vec::with_capacity(vx.len());
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (row, grow) in vx.chunks(d).zip(g.chunks(d)) {
                    let (mean, rstd) = row_stats(row, *eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * vg[j];
                        gg[j] += grow[j] * xhat[j];
                        gb[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    gx.extend((0..d).map(|j| rstd * (dxhat[j] - m1 - xhat[j] * m2)));
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Conv1dSame { x, kernel, bias } => {
                let (b, l, d_in) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let (k, d_out) = (shp(*kernel)[0], shp(*kernel)[1]);
                let pad = (k - 1) / 2;
                let (vx, vk) = (val(*x), val(*kernel));
                let mut gx = vec![0.0; vx.len()];
                let mut gk = vec![0.0; vk.len()];
                let mut gb = vec![0.0; d_out];
                for bi in 0..b {
                    for t in 0..l {
                        let gout = &g[(bi * l + t) * d_out..(bi * l + t + 1) * d_out];
                        for (o, gv) in gb.iter_mut().zip(gout) {
                            *o += gv;
                        }
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                                continue;
                            };
                            let xoff = (bi * l + s) * d_in;
                            for (o, &go) in gout.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let koff = (j * d_out + o) * d_in;
                                for i in 0..d_in {
                                    gx[xoff + i] += go * vk[koff + i];
                                    gk[koff + i] += go * vx[xoff + i];
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*kernel, gk);
                acc(*bias, gb);
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|&v| *shp(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut parts: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (p, &w) in parts.iter_mut().zip(&widths) {
                        p.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                for (&v, p) in inputs.iter().zip(parts) {
                    acc(v, p);
                }
            }
            Op::SelectLast { x, index } => {
                let w = *shp(*x).last().unwrap();
                let mut gx = vec![0.0; g.len() * w];
                for (r, gv) in g.iter().enumerate() {
                    gx[r * w + index] = *gv;
                }
                acc(*x, gx);
            }
            Op::ScaleRows { x, scale } => {
                let (vx, vs) = (val(*x), val(*scale));
                let width = vx.len() / vs.len().max(1);
                let mut gx = Vec::with_capacity(vx.len());
                let mut gs = vec![0.0; vs.len()];
                for (n, s) in vs.iter().enumerate() {
                    let gr = &g[n * width..(n + 1) * width];
                    let xr = &vx[n * width..(n + 1) * width];
                    gx.extend(gr.iter().map(|v| v * s));
                    gs[n] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                }
                acc(*x, gx);
                acc(*scale, gs);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::CrossEntropy { logits, labels } => {
                let c = shp(*logits)[1];
                let b = labels.len();
                let scale = g[0] / b.max(1) as f64;
                let mut gl = Vec::with_capacity(b * c);
                for (row, &y) in val(*logits).chunks(c).zip(labels) {
                    let lse = log_sum_exp(row);
                    gl.extend(row.iter().enumerate().map(|(j, z)| {
                        let p = (z - lse).exp();
                        scale * (p - if j == y { 1.0 } else { 0.0 })
                    }));
                }
                acc(*logits, gl);
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-node gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient of `v`, or `None` when `v` is not connected to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when disconnected.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape mirrors value"),
            None => Tensor::zeros(&shape),
        }
    }
}
