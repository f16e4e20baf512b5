//! Tri-orientated spatial attention: axial (depth columns), planar (depth
//! slices) and 3D-window self-attention, summed.

use std::sync::Arc;

use super::{AttentionConfig, TokenSeq};
use crate::autodiff::{AttnGroups, Graph, Var};
use crate::encoder::{layer_norm, linear};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Token index of grid position (z, y, x) under row-major flattening.
#[inline]
pub fn token_index(grid: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * grid[1] + y) * grid[2] + x
}

/// One group per (y, x) column holding the `d` tokens along depth.
pub fn axial_groups(grid: [usize; 3]) -> AttnGroups {
    let [d, h, w] = grid;
    let mut groups = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            groups.push((0..d).map(|z| token_index(grid, z, y, x)).collect());
        }
    }
    AttnGroups::partition(groups)
}

/// One group per depth slice holding its `h·w` tokens.
pub fn planar_groups(grid: [usize; 3]) -> AttnGroups {
    let [d, h, w] = grid;
    let plane = h * w;
    AttnGroups::partition((0..d).map(|z| (z * plane..(z + 1) * plane).collect()).collect())
}

pub fn check_window(grid: [usize; 3], window: [usize; 3]) -> Result<()> {
    if window.contains(&0) || (0..3).any(|a| !grid[a].is_multiple_of(window[a])) {
        return Err(Error::dim(format!(
            "window {window:?} does not divide token grid {grid:?}"
        )));
    }
    Ok(())
}

/// Non-overlapping windows; tokens inside a window are ordered by local (z, y, x).
pub fn window_groups(grid: [usize; 3], window: [usize; 3]) -> Result<AttnGroups> {
    check_window(grid, window)?;
    let [wz, wy, wx] = window;
    let mut groups = Vec::new();
    for bz in (0..grid[0]).step_by(wz) {
        for by in (0..grid[1]).step_by(wy) {
            for bx in (0..grid[2]).step_by(wx) {
                let mut g = Vec::with_capacity(wz * wy * wx);
                for lz in 0..wz {
                    for ly in 0..wy {
                        for lx in 0..wx {
                            g.push(token_index(grid, bz + lz, by + ly, bx + lx));
                        }
                    }
                }
                groups.push(g);
            }
        }
    }
    Ok(AttnGroups::partition(groups))
}

/// Entries in the relative-position bias table: (2wz−1)(2wy−1)(2wx−1).
pub fn rel_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

/// Table row for every (query, key) pair inside one window.
pub fn rel_bias_index(window: [usize; 3]) -> Vec<usize> {
    let [wz, wy, wx] = window;
    let pos: Vec<[usize; 3]> = (0..wz)
        .flat_map(|z| (0..wy).flat_map(move |y| (0..wx).map(move |x| [z, y, x])))
        .collect();
    let mut index = Vec::with_capacity(pos.len() * pos.len());
    for a in &pos {
        for b in &pos {
            let dz = a[0] + wz - 1 - b[0];
            let dy = a[1] + wy - 1 - b[1];
            let dx = a[2] + wx - 1 - b[2];
            index.push((dz * (2 * wy - 1) + dy) * (2 * wx - 1) + dx);
        }
    }
    index
}

/// Projections shared by every attention flavour: bias-free Q/K/V, biased output.
#[derive(Clone, Debug)]
pub struct AttnProj {
    pub prefix: String,
    pub channels: usize,
    pub qkv_dim: usize,
    pub heads: usize,
}

impl AttnProj {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        let (p, c, d) = (&self.prefix, self.channels, self.qkv_dim);
        for n in ["q", "k", "v"] {
            init.weight(&format!("{p}.{n}.weight"), c, d)?;
        }
        init.linear(&format!("{p}.o"), d, c)
    }

    /// Self- or cross-attention of `query_src` rows over `kv_src` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_src: Var,
        kv_src: Var,
        groups: Arc<AttnGroups>,
        bias: Option<(Var, Arc<Vec<usize>>)>,
    ) -> Result<Var> {
        let p = &self.prefix;
        let wq = g.param(store, &format!("{p}.q.weight"))?;
        let wk = g.param(store, &format!("{p}.k.weight"))?;
        let wv = g.param(store, &format!("{p}.v.weight"))?;
        let q = g.matmul(query_src, wq)?;
        let k = g.matmul(kv_src, wk)?;
        let v = g.matmul(kv_src, wv)?;
        let a = g.attention(q, k, v, groups, self.heads, bias)?;
        linear(g, store, &format!("{p}.o"), a)
    }
}

fn require_grid(seq: &TokenSeq, op: &str) -> Result<[usize; 3]> {
    seq.grid
        .ok_or_else(|| Error::Contract(format!("{op}: token sequence has no spatial grid")))
}

/// Axial branch: attention along depth with a learnable `[d, C]` encoding.
pub fn mha_axial(g: &mut Graph, store: &ParamStore, prefix: &str, heads: usize, seq: &TokenSeq) -> Result<Var> {
    let grid = require_grid(seq, "mha_axial")?;
    let index: Vec<usize> = (0..grid.iter().product()).map(|k| k / (grid[1] * grid[2])).collect();
    let table = g.param(store, &format!("{prefix}.pos"))?;
    let pos = g.gather_rows(table, Arc::new(index))?;
    let u = g.add(seq.tokens, pos)?;
    branch_proj(store, prefix, heads, g, u)?.forward(g, store, u, u, Arc::new(axial_groups(grid)), None)
}

/// Planar branch: attention within each depth slice with a learnable `[h·w, C]` encoding.
pub fn mha_planar(g: &mut Graph, store: &ParamStore, prefix: &str, heads: usize, seq: &TokenSeq) -> Result<Var> {
    let grid = require_grid(seq, "mha_planar")?;
    let plane = grid[1] * grid[2];
    let index: Vec<usize> = (0..grid.iter().product()).map(|k| k % plane).collect();
    let table = g.param(store, &format!("{prefix}.pos"))?;
    let pos = g.gather_rows(table, Arc::new(index))?;
    let u = g.add(seq.tokens, pos)?;
    branch_proj(store, prefix, heads, g, u)?.forward(g, store, u, u, Arc::new(planar_groups(grid)), None)
}

/// Window branch: attention inside non-overlapping 3D windows with a
/// per-head relative position bias.
pub fn mha_window(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    window: [usize; 3],
    seq: &TokenSeq,
) -> Result<Var> {
    let grid = require_grid(seq, "mha_window")?;
    let groups = window_groups(grid, window)?;
    let table = g.param(store, &format!("{prefix}.rel_bias"))?;
    let bias = Some((table, Arc::new(rel_bias_index(window))));
    let u = seq.tokens;
    branch_proj(store, prefix, heads, g, u)?.forward(g, store, u, u, Arc::new(groups), bias)
}

fn branch_proj(store: &ParamStore, prefix: &str, heads: usize, g: &Graph, u: Var) -> Result<AttnProj> {
    let channels = *g.shape(u).last().unwrap();
    let qkv_dim = store
        .get(&format!("{prefix}.q.weight"))
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::Contract(format!("unknown parameter '{prefix}.q.weight'")))?;
    Ok(AttnProj {
        prefix: prefix.to_string(),
        channels,
        qkv_dim,
        heads,
    })
}

/// Which of the three branches a TSA layer evaluates. All three by default;
/// individual branches are useful for isolated checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub axial: bool,
    pub planar: bool,
    pub window: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches {
            axial: true,
            planar: true,
            window: true,
        }
    }
}

/// One T_tsa layer: `z' = z + Σ_branch MHA(LN(z)); out = z' + FFN(LN(z'))`.
#[derive(Clone, Debug)]
pub struct TsaBlock {
    pub prefix: String,
    pub channels: usize,
    pub grid: [usize; 3],
    pub cfg: AttentionConfig,
}

impl TsaBlock {
    fn proj(&self, branch: &str) -> AttnProj {
        AttnProj {
            prefix: format!("{}.{branch}", self.prefix),
            channels: self.channels,
            qkv_dim: self.cfg.qkv_dim,
            heads: self.cfg.heads,
        }
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.cfg.validate(self.channels)?;
        check_window(self.grid, self.cfg.window)?;
        let (p, c) = (&self.prefix, self.channels);
        init.layer_norm(&format!("{p}.ln1"), c)?;
        self.proj("axial").init(init)?;
        init.normal(&format!("{p}.axial.pos"), vec![self.grid[0], c], 0.02)?;
        self.proj("planar").init(init)?;
        init.normal(&format!("{p}.planar.pos"), vec![self.grid[1] * self.grid[2], c], 0.02)?;
        self.proj("window").init(init)?;
        init.normal(
            &format!("{p}.window.rel_bias"),
            vec![rel_table_len(self.cfg.window), self.cfg.heads],
            0.02,
        )?;
        init.layer_norm(&format!("{p}.ln2"), c)?;
        init.linear(&format!("{p}.ffn.fc1"), c, c * self.cfg.ffn_ratio)?;
        init.linear(&format!("{p}.ffn.fc2"), c * self.cfg.ffn_ratio, c)
    }

    /// Sum of the enabled branches applied to the (already normalized) tokens.
    pub fn mixing(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSeq, branches: Branches) -> Result<Var> {
        let p = &self.prefix;
        let heads = self.cfg.heads;
        let mut parts = Vec::with_capacity(3);
        if branches.axial {
            parts.push(mha_axial(g, store, &format!("{p}.axial"), heads, seq)?);
        }
        if branches.planar {
            parts.push(mha_planar(g, store, &format!("{p}.planar"), heads, seq)?);
        }
        if branches.window {
            parts.push(mha_window(
                g,
                store,
                &format!("{p}.window"),
                heads,
                self.cfg.window,
                seq,
            )?);
        }
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Config("TSA layer needs at least one branch".into()))?;
        rest.iter().try_fold(first, |acc, &b| g.add(acc, b))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSeq) -> Result<TokenSeq> {
        self.forward_branches(g, store, seq, Branches::default())
    }

    pub fn forward_branches(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenSeq,
        branches: Branches,
    ) -> Result<TokenSeq> {
        let grid = require_grid(seq, "tsa_block")?;
        if grid != self.grid {
            return Err(Error::dim(format!(
                "{}: built for grid {:?}, got {grid:?}",
                self.prefix, self.grid
            )));
        }
        let p = &self.prefix;
        let normed = layer_norm(g, store, &format!("{p}.ln1"), seq.tokens)?;
        let mixed = self.mixing(g, store, &TokenSeq::spatial(normed, grid), branches)?;
        let z1 = g.add(seq.tokens, mixed)?;
        let out = ffn(g, store, &format!("{p}.ln2"), &format!("{p}.ffn"), z1)?;
        Ok(TokenSeq::spatial(out, grid))
    }
}

/// `x + FC2(GELU(FC1(LN(x))))`.
pub(crate) fn ffn(g: &mut Graph, store: &ParamStore, ln: &str, prefix: &str, x: Var) -> Result<Var> {
    let n = layer_norm(g, store, ln, x)?;
    let h = linear(g, store, &format!("{prefix}.fc1"), n)?;
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{prefix}.fc2"), h)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_tokens() {
        let grid = [2, 3, 4];
        for groups in [
            axial_groups(grid),
            planar_groups(grid),
            window_groups(grid, [1, 3, 2]).unwrap(),
        ] {
            let mut all: Vec<usize> = groups.queries.concat();
            all.sort_unstable();
            assert_eq!(all, (0..24).collect::<Vec<_>>());
        }
    }

    #[test]
    fn score_entries_follow_closed_form() {
        let grid = [8, 8, 8];
        let n = 512u64;
        assert_eq!(axial_groups(grid).score_entries(), n * 8);
        assert_eq!(planar_groups(grid).score_entries(), n * 64);
        assert_eq!(window_groups(grid, [2, 2, 2]).unwrap().score_entries(), n * 8);
    }

    #[test]
    fn rel_index_centre_is_zero_offset() {
        let w = [2, 2, 2];
        let idx = rel_bias_index(w);
        assert_eq!(idx.len(), 64);
        assert!(idx.iter().all(|&i| i < rel_table_len(w)));
        // Diagonal pairs all map to the zero-offset entry (1,1,1) -> 13.
        for i in 0..8 {
            assert_eq!(idx[i * 8 + i], 13);
        }
    }

    #[test]
    fn indivisible_window_rejected() {
        assert!(matches!(window_groups([2, 2, 3], [2, 2, 2]), Err(Error::Dimension(_))));
    }
}
