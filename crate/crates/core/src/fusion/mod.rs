//! Nested modality-aware feature aggregation (NMaFA).
//!
//! The top encoder level of every modality is fused twice:
//!
//! 1. channel concatenation + patch embedding gives one token per voxel,
//!    refined by two tri-orientated spatial-attention layers ([`tsa`]);
//! 2. a token learner compresses each modality to `P` tokens, the tokens are
//!    stacked along the sequence axis, and the spatial stream queries them
//!    through cross attention ([`cma`]).

pub mod cma;
pub mod token_learner;
pub mod tsa;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub use cma::{CmaBlock, CmaResidual};
pub use token_learner::TokenLearner;
pub use tsa::{Branches, TsaBlock};

/// `[N, C]` tokens plus the grid they were flattened from (row-major z, y, x).
/// Non-spatial sequences (the stacked modality tokens) carry no grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub grid: Option<[usize; 3]>,
}

impl TokenSeq {
    pub fn spatial(tokens: Var, grid: [usize; 3]) -> Self {
        TokenSeq {
            tokens,
            grid: Some(grid),
        }
    }

    pub fn flat(tokens: Var) -> Self {
        TokenSeq { tokens, grid: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub window: [usize; 3],
    /// Total query/key/value width across heads.
    pub qkv_dim: usize,
    pub ffn_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            window: [2, 2, 2],
            qkv_dim: 128,
            ffn_ratio: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !self.qkv_dim.is_multiple_of(self.heads) || !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention: channels {channels} and qkv_dim {} must be divisible by heads {}",
                self.qkv_dim, self.heads
            )));
        }
        if self.window.contains(&0) || self.ffn_ratio == 0 {
            return Err(Error::Config("attention: window and ffn_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub attention: AttentionConfig,
    /// Tokens learnt per modality.
    pub tokens: usize,
    pub tsa_layers: usize,
    pub use_tsa: bool,
    pub use_cma: bool,
    pub cma_residual: CmaResidual,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            attention: AttentionConfig::default(),
            tokens: 32,
            tsa_layers: 2,
            use_tsa: true,
            use_cma: true,
            cma_residual: CmaResidual::QueryStream,
        }
    }
}

/// Concatenate same-shaped `[d, h, w, C]` maps on channels.
pub fn concat_modalities(g: &mut Graph, features: &[Var]) -> Result<Var> {
    let first = features.first().ok_or_else(|| Error::dim("no modality features"))?;
    let shape = g.shape(*first).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("expected [d, h, w, C] features, got {shape:?}")));
    }
    for (i, f) in features.iter().enumerate() {
        if g.shape(*f) != shape.as_slice() {
            return Err(Error::dim(format!(
                "modality {i} feature {:?} differs from modality 0 {shape:?}",
                g.shape(*f)
            )));
        }
    }
    g.concat_last(features)
}

/// The bottleneck: embedding, `tsa_layers` × T_tsa, token learners, T_cma.
#[derive(Clone, Debug)]
pub struct Nmafa {
    pub cfg: FusionConfig,
    pub modalities: usize,
    pub channels: usize,
    pub grid: [usize; 3],
}

pub const PREFIX: &str = "nmafa";

impl Nmafa {
    pub fn tsa(&self, layer: usize) -> TsaBlock {
        TsaBlock {
            prefix: format!("{PREFIX}.tsa{layer}"),
            channels: self.channels,
            grid: self.grid,
            cfg: self.cfg.attention.clone(),
        }
    }

    pub fn token_learner(&self, modality: usize) -> TokenLearner {
        TokenLearner {
            prefix: format!("{PREFIX}.tl{modality}"),
            channels: self.channels,
            tokens: self.cfg.tokens,
        }
    }

    pub fn cma(&self) -> CmaBlock {
        CmaBlock {
            prefix: format!("{PREFIX}.cma"),
            channels: self.channels,
            cfg: self.cfg.attention.clone(),
            residual: self.cfg.cma_residual,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        let c = self.channels;
        init.linear(&format!("{PREFIX}.embed"), self.modalities * c, c)?;
        init.normal(&format!("{PREFIX}.pos"), vec![self.n_tokens(), c], 0.02)?;
        if self.cfg.use_tsa {
            for l in 0..self.cfg.tsa_layers {
                self.tsa(l).init(init)?;
            }
        }
        if self.cfg.use_cma {
            if self.cfg.tokens == 0 {
                return Err(Error::Config("fusion.tokens must be >= 1".into()));
            }
            for i in 0..self.modalities {
                self.token_learner(i).init(init)?;
            }
            self.cma().init(init)?;
        }
        Ok(())
    }

    /// Channel concat, pointwise MC→C embedding, flatten, add the shared position encoding.
    pub fn channel_concat_embed(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<TokenSeq> {
        if features.len() != self.modalities {
            return Err(Error::Contract(format!(
                "expected {} modality features, got {}",
                self.modalities,
                features.len()
            )));
        }
        let cat = concat_modalities(g, features)?;
        let shape = g.shape(cat).to_vec();
        let grid = [shape[0], shape[1], shape[2]];
        if grid != self.grid {
            return Err(Error::dim(format!(
                "bottleneck grid {grid:?}, expected {:?}",
                self.grid
            )));
        }
        let flat = g.reshape(cat, &[self.n_tokens(), shape[3]])?;
        let tokens = linear(g, store, &format!("{PREFIX}.embed"), flat)?;
        let pos = g.param(store, &format!("{PREFIX}.pos"))?;
        let tokens = g.add(tokens, pos)?;
        Ok(TokenSeq::spatial(tokens, grid))
    }

    /// Stack per-modality `[P, C]` token sets, modality-major.
    pub fn spatial_concat(g: &mut Graph, tokens: &[Var]) -> Result<TokenSeq> {
        let first = tokens.first().ok_or_else(|| Error::dim("no modality tokens"))?;
        let shape = g.shape(*first).to_vec();
        if let Some(bad) = tokens.iter().find(|t| g.shape(**t) != shape.as_slice()) {
            return Err(Error::dim(format!(
                "modality token sets differ: {:?} vs {shape:?}",
                g.shape(*bad)
            )));
        }
        Ok(TokenSeq::flat(g.concat_rows(tokens)?))
    }

    /// Fused tokens `[N, C]` from the top-level features of every modality.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<TokenSeq> {
        let embedded = self.channel_concat_embed(g, store, features)?;
        let mut spatial = embedded;
        if self.cfg.use_tsa {
            for l in 0..self.cfg.tsa_layers {
                spatial = self.tsa(l).forward(g, store, &spatial)?;
            }
        }
        if !self.cfg.use_cma {
            return Ok(spatial);
        }
        let learnt = features
            .iter()
            .enumerate()
            .map(|(i, &f)| self.token_learner(i).forward(g, store, f))
            .collect::<Result<Vec<_>>>()?;
        let bank = Self::spatial_concat(g, &learnt)?;
        self.cma().forward(g, store, &spatial, &bank, &embedded)
    }
}
