//! Cross-modality attention transformer layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tsa::{ffn, AttnProj};
use super::{AttentionConfig, TokenSeq};
use crate::autodiff::{AttnGroups, Graph};
use crate::encoder::layer_norm;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Which stream the cross-attention output is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmaResidual {
    /// The spatially-enhanced tokens that form the queries.
    #[default]
    QueryStream,
    /// The patch-embedded tokens before the spatial-attention layers.
    EmbeddedTokens,
}

#[derive(Clone, Debug)]
pub struct CmaBlock {
    pub prefix: String,
    pub channels: usize,
    pub cfg: AttentionConfig,
    pub residual: CmaResidual,
}

impl CmaBlock {
    fn proj(&self) -> AttnProj {
        AttnProj {
            prefix: format!("{}.attn", self.prefix),
            channels: self.channels,
            qkv_dim: self.cfg.qkv_dim,
            heads: self.cfg.heads,
        }
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.cfg.validate(self.channels)?;
        let (p, c) = (&self.prefix, self.channels);
        init.layer_norm(&format!("{p}.ln_q"), c)?;
        init.layer_norm(&format!("{p}.ln_kv"), c)?;
        self.proj().init(init)?;
        init.layer_norm(&format!("{p}.ln2"), c)?;
        init.linear(&format!("{p}.ffn.fc1"), c, c * self.cfg.ffn_ratio)?;
        init.linear(&format!("{p}.ffn.fc2"), c * self.cfg.ffn_ratio, c)
    }

    /// `queries` is the spatial stream `[N, C]`, `bank` the stacked modality
    /// tokens `[M·P, C]`, `embedded` the pre-TSA tokens (used only by
    /// [`CmaResidual::EmbeddedTokens`]). Output keeps the query grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: &TokenSeq,
        bank: &TokenSeq,
        embedded: &TokenSeq,
    ) -> Result<TokenSeq> {
        let (qs, ks) = (g.shape(queries.tokens).to_vec(), g.shape(bank.tokens).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.channels || ks[1] != self.channels {
            return Err(Error::dim(format!(
                "{}: queries {qs:?} and bank {ks:?} must both be [*, {}]",
                self.prefix, self.channels
            )));
        }
        let p = &self.prefix;
        let q_in = layer_norm(g, store, &format!("{p}.ln_q"), queries.tokens)?;
        let kv_in = layer_norm(g, store, &format!("{p}.ln_kv"), bank.tokens)?;
        let groups = Arc::new(AttnGroups::dense(qs[0], ks[0]));
        let attended = self.proj().forward(g, store, q_in, kv_in, groups, None)?;
        let residual = match self.residual {
            CmaResidual::QueryStream => queries.tokens,
            CmaResidual::EmbeddedTokens => embedded.tokens,
        };
        let x1 = g.add(residual, attended)?;
        let out = ffn(g, store, &format!("{p}.ln2"), &format!("{p}.ffn"), x1)?;
        Ok(TokenSeq {
            tokens: out,
            grid: queries.grid,
        })
    }
}
