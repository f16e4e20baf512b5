//! Learned spatial pooling to a fixed number of tokens.

use crate::autodiff::{Graph, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// A pointwise two-layer map produces `P` logit maps; each map is softmaxed
/// over all voxels and used as pooling weights, so every output token is a
/// convex combination of the input features.
#[derive(Clone, Debug)]
pub struct TokenLearner {
    pub prefix: String,
    pub channels: usize,
    pub tokens: usize,
}

impl TokenLearner {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        let c = self.channels;
        init.linear(&format!("{}.fc1", self.prefix), c, c)?;
        init.linear(&format!("{}.fc2", self.prefix), c, self.tokens)
    }

    /// Pooling weights `[P, N]`; rows sum to one.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, flat: Var) -> Result<Var> {
        let h = linear(g, store, &format!("{}.fc1", self.prefix), flat)?;
        let h = g.gelu(h);
        let logits = linear(g, store, &format!("{}.fc2", self.prefix), h)?;
        let per_token = g.transpose(logits)?;
        g.softmax_last(per_token)
    }

    /// `feature` is `[d, h, w, C]`; returns `[P, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feature: Var) -> Result<Var> {
        let shape = g.shape(feature).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::dim(format!(
                "{}: expected [d, h, w, {}] feature, got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let n = shape[..3].iter().product();
        let flat = g.reshape(feature, &[n, self.channels])?;
        let w = self.weights(g, store, flat)?;
        g.matmul(w, flat)
    }
}
