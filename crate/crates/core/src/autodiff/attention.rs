//! Grouped multi-head scaled dot-product attention.
//!
//! Every restricted attention pattern in the model (columns, slices, windows,
//! and the single-group cross attention) is expressed as a list of groups:
//! queries in a group attend only to keys in the same group. Logits are
//! evaluated only for in-group pairs, so the number of evaluated scores is
//! `Σ_g |queries_g|·|keys_g|` per head.

use super::kernels::{softmax_row, softmax_row_backward};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroups {
    pub queries: Vec<Vec<usize>>,
    pub keys: Vec<Vec<usize>>,
}

impl AttnGroups {
    /// Self-attention where each group attends within itself.
    pub fn partition(groups: Vec<Vec<usize>>) -> Self {
        AttnGroups {
            keys: groups.clone(),
            queries: groups,
        }
    }

    /// All `nq` queries attend to all `nk` keys.
    pub fn dense(nq: usize, nk: usize) -> Self {
        AttnGroups {
            queries: vec![(0..nq).collect()],
            keys: vec![(0..nk).collect()],
        }
    }

    /// Score entries evaluated per head.
    pub fn score_entries(&self) -> u64 {
        self.queries
            .iter()
            .zip(&self.keys)
            .map(|(q, k)| (q.len() * k.len()) as u64)
            .sum()
    }
}

/// Shapes and options shared by forward and backward.
pub struct AttnDims<'a> {
    pub heads: usize,
    /// Per-head query/key width.
    pub head_qk: usize,
    /// Per-head value width.
    pub head_v: usize,
    pub scale: f64,
    /// Relative bias table `[T × heads]` and per-pair row index (length |q_g|·|k_g|,
    /// identical for every group).
    pub bias: Option<(&'a [f64], &'a [usize])>,
}

/// Returns (output `[nq × heads·head_v]`, saved probabilities).
pub fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    groups: &AttnGroups,
    dims: &AttnDims<'_>,
) -> (Vec<f64>, Vec<f64>) {
    let (heads, hq, hv) = (dims.heads, dims.head_qk, dims.head_v);
    let dqk = heads * hq;
    let dv = heads * hv;
    let mut out = vec![0.0; nq * dv];
    let mut probs = Vec::with_capacity(groups.score_entries() as usize * heads);
    for (qs, ks) in groups.queries.iter().zip(&groups.keys) {
        for h in 0..heads {
            for (i, &qi) in qs.iter().enumerate() {
                let qrow = &q[qi * dqk + h * hq..qi * dqk + (h + 1) * hq];
                let start = probs.len();
                for (j, &kj) in ks.iter().enumerate() {
                    let krow = &k[kj * dqk + h * hq..kj * dqk + (h + 1) * hq];
                    let mut s = dims.scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    if let Some((table, index)) = dims.bias {
                        s += table[index[i * ks.len() + j] * heads + h];
                    }
                    probs.push(s);
                }
                softmax_row(&mut probs[start..]);
                let orow = &mut out[qi * dv + h * hv..qi * dv + (h + 1) * hv];
                for (j, &kj) in ks.iter().enumerate() {
                    let p = probs[start + j];
                    let vrow = &v[kj * dv + h * hv..kj * dv + (h + 1) * hv];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    groups: &AttnGroups,
    dims: &AttnDims<'_>,
) -> AttnGrads {
    let (heads, hq, hv) = (dims.heads, dims.head_qk, dims.head_v);
    let dqk = heads * hq;
    let dvw = heads * hv;
    let mut g = AttnGrads {
        dq: vec![0.0; q.len()],
        dk: vec![0.0; k.len()],
        dv: vec![0.0; v.len()],
        dbias: dims.bias.map(|(t, _)| vec![0.0; t.len()]).unwrap_or_default(),
    };
    let mut offset = 0;
    let mut dp = Vec::new();
    let mut ds = Vec::new();
    for (qs, ks) in groups.queries.iter().zip(&groups.keys) {
        for h in 0..heads {
            for (i, &qi) in qs.iter().enumerate() {
                let p = &probs[offset..offset + ks.len()];
                offset += ks.len();
                let dorow = &dout[qi * dvw + h * hv..qi * dvw + (h + 1) * hv];
                dp.clear();
                for (j, &kj) in ks.iter().enumerate() {
                    let vr = kj * dvw + h * hv;
                    let vrow = &v[vr..vr + hv];
                    dp.push(dorow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>());
                    for (dvv, &d) in g.dv[vr..vr + hv].iter_mut().zip(dorow) {
                        *dvv += p[j] * d;
                    }
                }
                ds.clear();
                ds.resize(ks.len(), 0.0);
                softmax_row_backward(p, &dp, &mut ds);
                let qr = qi * dqk + h * hq;
                for (j, &kj) in ks.iter().enumerate() {
                    let s = ds[j];
                    if s == 0.0 {
                        continue;
                    }
                    if let Some((_, index)) = dims.bias {
                        g.dbias[index[i * ks.len() + j] * heads + h] += s;
                    }
                    let kr = kj * dqk + h * hq;
                    for t in 0..hq {
                        g.dq[qr + t] += dims.scale * s * k[kr + t];
                        g.dk[kr + t] += dims.scale * s * q[qr + t];
                    }
                }
            }
        }
    }
    g
}
