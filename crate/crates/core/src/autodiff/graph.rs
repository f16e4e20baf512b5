//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::attention::{self, AttnDims, AttnGroups};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool3(Var, [usize; 3]),
    MeanRows(Var),
    Upsample(Var, [usize; 3]),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Column(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<(Var, Arc<Vec<usize>>)>,
        groups: Arc<AttnGroups>,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Arc<Vec<usize>>,
    },
    SoftDice {
        logits: Var,
        probs: Vec<f64>,
        targets: Arc<Vec<usize>>,
        smooth: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    names: Vec<(Var, String)>,
    score_entries: u64,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn spatial3(op: &str, t: &Tensor) -> Result<([usize; 3], usize)> {
    match *t.shape() {
        [d, h, w, c] => Ok(([d, h, w], c)),
        _ => Err(Error::dim(format!(
            "{op}: expected [D, H, W, C] volume, got {:?}",
            t.shape()
        ))),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention logits evaluated so far, counted once per head.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Bind a named parameter as a tracked leaf. Repeated calls return the
    /// same node, so every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.input(t);
        self.bound.insert(name.to_string(), v);
        self.names.push((v, name.to_string()));
        Ok(v)
    }

    /// Named leaves bound through [`Graph::param`], in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(v, n)| (n.as_str(), *v))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `x[..., C] + b[C]` broadcast over all leading positions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.last_dim();
        if tb.numel() != c {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match channels of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// Scale each row of `x[..., C]` by the matching entry of `g` (one scalar per row).
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let c = tx.last_dim();
        if tg.numel() != tx.rows() {
            return Err(Error::dim(format!(
                "mul_rows: gate {:?} does not match rows of {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let data = tx
            .data()
            .chunks_exact(c)
            .zip(tg.data())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, g]);
        Ok(self.push(t, Op::MulRows(x, g), rg))
    }

    /// `a[..., k] · b[k, n]`, broadcasting over the leading extents of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.last_dim();
        if tb.rank() != 2 || tb.shape()[0] != k {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = tb.shape()[1];
        let m = ta.rows();
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", ta.shape())));
        };
        let t = Tensor::new(vec![c, r], kernels::transpose(ta.data(), r, c))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax_last: non-finite input".into()));
        }
        let c = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            kernels::softmax_row(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::dim(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match channels of {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let (data, means, rstds) = kernels::layer_norm(tx.data(), tg.data(), tb.data(), c, eps);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Channels-last 3D convolution. `w` is `[kz, ky, kx, Cin, Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (ext, cin) = spatial3("conv3d", tx)?;
        let [kz, ky, kx, wcin, cout] = *tw.shape() else {
            return Err(Error::dim(format!(
                "conv3d: kernel must be [kz, ky, kx, Cin, Cout], got {:?}",
                tw.shape()
            )));
        };
        if wcin != cin || tb.numel() != cout {
            return Err(Error::dim(format!(
                "conv3d: input {:?}, kernel {:?}, bias {:?} disagree on channels",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::dim("conv3d: stride must be >= 1"));
        }
        let geom = ConvGeom {
            input: ext,
            kernel: [kz, ky, kx],
            stride,
            pad,
            cin,
            cout,
        };
        let out = geom.output().ok_or_else(|| {
            Error::dim(format!(
                "conv3d: kernel {:?} larger than padded input {:?} (pad {pad:?})",
                [kz, ky, kx],
                ext
            ))
        })?;
        let data = kernels::conv3d(tx.data(), tw.data(), tb.data(), &geom);
        let t = Tensor::new(vec![out[0], out[1], out[2], cout], data)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// 3×3×3 stride-1 average pooling; border windows average only in-bounds voxels.
    pub fn avg_pool3(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (ext, c) = spatial3("avg_pool3", tx)?;
        let t = Tensor::new(tx.shape().to_vec(), kernels::avg_pool3(tx.data(), ext, c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool3(x, ext), rg))
    }

    /// Mean over every leading position: `[..., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let rows = tx.rows() as f64;
        let mut acc = vec![0.0; c];
        for row in tx.data().chunks_exact(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= rows);
        let t = Tensor::new(vec![c], acc).expect("c > 0");
        let rg = self.rg(&[x]);
        self.push(t, Op::MeanRows(x), rg)
    }

    /// Trilinear 2× upsampling applied `times` times; `times = 0` returns `x`.
    pub fn upsample2x(&mut self, x: Var, times: usize) -> Result<Var> {
        let mut cur = x;
        for _ in 0..times {
            let tx = self.value(cur);
            let (ext, c) = spatial3("upsample2x", tx)?;
            let data = kernels::upsample3d(tx.data(), ext, c);
            let t = Tensor::new(vec![2 * ext[0], 2 * ext[1], 2 * ext[2], c], data)?;
            let rg = self.rg(&[cur]);
            cur = self.push(t, Op::Upsample(cur, ext), rg);
        }
        Ok(cur)
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_last: no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat_last: leading extents {:?} vs {:?}",
                    s,
                    self.shape(*first)
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Stack `[R_i, C]` sequences into `[Σ R_i, C]` in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows: no inputs"))?;
        let c = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.last_dim() != c {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} does not match width {c}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Column `j` of `x[..., M]`, shaped as the leading extents.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.last_dim();
        if j >= m {
            return Err(Error::dim(format!("column {j} out of range for {:?}", tx.shape())));
        }
        let data = tx.data().chunks_exact(m).map(|r| r[j]).collect();
        let lead = tx.shape()[..tx.rank() - 1].to_vec();
        let shape = if lead.is_empty() { vec![1] } else { lead };
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Column(x, j), rg))
    }

    /// `out[i] = table[index[i]]` for a `[T, C]` table.
    pub fn gather_rows(&mut self, table: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        let [rows, c] = *tt.shape() else {
            return Err(Error::dim(format!(
                "gather_rows: table must be rank 2, got {:?}",
                tt.shape()
            )));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows: index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(&tt.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::GatherRows(table, index), rg))
    }

    /// Grouped multi-head attention; see [`attention`](super::attention).
    /// `q`/`k` are `[Nq, H·dk]`/`[Nk, H·dk]`, `v` is `[Nk, H·dv]`. The optional
    /// bias is a `[T, H]` table plus a per-pair row index shared by all groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<AttnGroups>,
        heads: usize,
        bias: Option<(Var, Arc<Vec<usize>>)>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 {
            return Err(Error::dim("attention: q, k, v must be rank 2"));
        }
        let (nq, dqk) = (tq.shape()[0], tq.shape()[1]);
        let (nk, dv) = (tv.shape()[0], tv.shape()[1]);
        if tk.shape() != [nk, dqk] {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?} are inconsistent",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || dqk % heads != 0 || dv % heads != 0 {
            return Err(Error::dim(format!(
                "attention: widths {dqk}/{dv} not divisible by {heads} heads"
            )));
        }
        for (qs, ks) in groups.queries.iter().zip(&groups.keys) {
            if qs.iter().any(|&i| i >= nq) || ks.iter().any(|&j| j >= nk) {
                return Err(Error::dim("attention: group index out of range"));
            }
            if let Some((_, index)) = &bias {
                if index.len() != qs.len() * ks.len() {
                    return Err(Error::dim("attention: bias index does not match group size"));
                }
            }
        }
        if let Some((table, index)) = &bias {
            let tt = self.value(*table);
            if tt.rank() != 2 || tt.shape()[1] != heads || index.iter().any(|&i| i >= tt.shape()[0]) {
                return Err(Error::dim(format!(
                    "attention: bias table {:?} incompatible with {heads} heads",
                    tt.shape()
                )));
            }
        }
        let head_qk = dqk / heads;
        let scale = 1.0 / (head_qk as f64).sqrt();
        let (data, probs) = {
            let bias_ref = bias.as_ref().map(|(t, idx)| (self.value(*t).data(), idx.as_slice()));
            let dims = AttnDims {
                heads,
                head_qk,
                head_v: dv / heads,
                scale,
                bias: bias_ref,
            };
            attention::forward(tq.data(), tk.data(), tv.data(), nq, &groups, &dims)
        };
        self.score_entries += groups.score_entries();
        let t = Tensor::new(vec![nq, dv], data)?;
        let mut deps = vec![q, k, v];
        if let Some((b, _)) = &bias {
            deps.push(*b);
        }
        let rg = self.rg(&deps);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                groups,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    fn class_targets(&self, logits: Var, targets: &[usize], op: &str) -> Result<usize> {
        let tl = self.value(logits);
        let k = tl.last_dim();
        if tl.rows() != targets.len() {
            return Err(Error::dim(format!(
                "{op}: {} positions in logits {:?} but {} targets",
                tl.rows(),
                tl.shape(),
                targets.len()
            )));
        }
        if let Some(pos) = targets.iter().position(|&t| t >= k) {
            return Err(Error::Contract(format!(
                "{op}: target label {} at position {pos} >= class count {k}",
                targets[pos]
            )));
        }
        Ok(k)
    }

    /// Mean over positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        let k = self.class_targets(logits, &targets, "cross_entropy")?;
        let tl = self.value(logits);
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (row, (p, &t)) in tl
            .data()
            .chunks_exact(k)
            .zip(probs.chunks_exact_mut(k).zip(targets.iter()))
        {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            kernels::softmax_row(p);
        }
        let loss = total / targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross_entropy: non-finite loss".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, targets }, rg))
    }

    /// `1 - mean_c (2 Σ p_c g_c + s) / (Σ p_c + Σ g_c + s)` with `p = softmax(logits)`.
    pub fn soft_dice(&mut self, logits: Var, targets: Arc<Vec<usize>>, smooth: f64) -> Result<Var> {
        let k = self.class_targets(logits, &targets, "soft_dice")?;
        let mut probs = self.value(logits).data().to_vec();
        for row in probs.chunks_exact_mut(k) {
            kernels::softmax_row(row);
        }
        let (inter, psum, gsum) = dice_sums(&probs, &targets, k);
        let mean_ratio = (0..k)
            .map(|c| (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth))
            .sum::<f64>()
            / k as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(1.0 - mean_ratio),
            Op::SoftDice {
                logits,
                probs,
                targets,
                smooth,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                if wants(*b) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::MulRows(x, s) => {
                let c = self.nodes[x.0].value.last_dim();
                if wants(*x) {
                    let dx = g
                        .chunks_exact(c)
                        .zip(val(*s))
                        .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                if wants(*s) {
                    let ds = g
                        .chunks_exact(c)
                        .zip(val(*x).chunks_exact(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let (m, k) = (ta.rows(), ta.last_dim());
                let n = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.accumulate(grads, *a, kernels::transpose(g, s[0], s[1]));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((p, gr), dr) in node
                    .value
                    .data()
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(d.chunks_exact_mut(c))
                {
                    kernels::softmax_row_backward(p, gr, dr);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let c = node.value.last_dim();
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), means, rstds, g, c);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv3d_backward(val(*x), val(*w), g, geom, wants(*x), wants(*w));
                if wants(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    self.accumulate(grads, *w, dw);
                }
                self.accumulate(grads, *b, db);
            }
            Op::AvgPool3(x, ext) => {
                let c = node.value.last_dim();
                self.accumulate(grads, *x, kernels::avg_pool3_adjoint(g, *ext, c));
            }
            Op::MeanRows(x) => {
                let tx = &self.nodes[x.0].value;
                let inv = 1.0 / tx.rows() as f64;
                let dx = (0..tx.rows()).flat_map(|_| g.iter().map(|v| v * inv)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample(x, ext) => {
                let c = node.value.last_dim();
                self.accumulate(grads, *x, kernels::upsample3d_adjoint(g, *ext, c));
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Column(x, j) => {
                let tx = &self.nodes[x.0].value;
                let m = tx.last_dim();
                let mut d = vec![0.0; tx.numel()];
                for (r, &gv) in g.iter().enumerate() {
                    d[r * m + j] = gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows(table, index) => {
                let tt = &self.nodes[table.0].value;
                let c = tt.last_dim();
                let mut d = vec![0.0; tt.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..c {
                        d[i * c + k] += g[r * c + k];
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                groups,
                heads,
                scale,
                probs,
            } => {
                let dqk = self.nodes[q.0].value.last_dim();
                let dv = self.nodes[v.0].value.last_dim();
                let bias_ref = bias.as_ref().map(|(t, idx)| (val(*t), idx.as_slice()));
                let dims = AttnDims {
                    heads: *heads,
                    head_qk: dqk / heads,
                    head_v: dv / heads,
                    scale: *scale,
                    bias: bias_ref,
                };
                let ag = attention::backward(val(*q), val(*k), val(*v), probs, g, groups, &dims);
                self.accumulate(grads, *q, ag.dq);
                self.accumulate(grads, *k, ag.dk);
                self.accumulate(grads, *v, ag.dv);
                if let Some((t, _)) = bias {
                    self.accumulate(grads, *t, ag.dbias);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let k = self.nodes[logits.0].value.last_dim();
                let inv = g[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * inv).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= inv;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SoftDice {
                logits,
                probs,
                targets,
                smooth,
            } => {
                let k = self.nodes[logits.0].value.last_dim();
                let (inter, psum, gsum) = dice_sums(probs, targets, k);
                let coef = -g[0] / k as f64;
                // d ratio_c / d p_rc = 2 g_rc / den_c - num_c / den_c^2
                let per_class: Vec<(f64, f64)> = (0..k)
                    .map(|c| {
                        let num = 2.0 * inter[c] + smooth;
                        let den = psum[c] + gsum[c] + smooth;
                        (2.0 / den, num / (den * den))
                    })
                    .collect();
                let mut d = vec![0.0; probs.len()];
                let mut dp = vec![0.0; k];
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let hit = if c == t { per_class[c].0 } else { 0.0 };
                        dp[c] = coef * (hit - per_class[c].1);
                    }
                    kernels::softmax_row_backward(&probs[r * k..(r + 1) * k], &dp, &mut d[r * k..(r + 1) * k]);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn dice_sums(probs: &[f64], targets: &[usize], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for (row, &t) in probs.chunks_exact(k).zip(targets) {
        for c in 0..k {
            psum[c] += row[c];
        }
        inter[t] += row[t];
        gsum[t] += 1.0;
    }
    (inter, psum, gsum)
}

/// Result of [`Graph::backward`]. Untouched nodes have no entry; their
/// gradient is zero.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients for every parameter bound in `graph`, keyed by name.
    pub fn named(&self, graph: &Graph) -> IndexMap<String, Tensor> {
        graph
            .bound_params()
            .map(|(name, v)| (name.to_string(), self.get(v)))
            .collect()
    }
}
