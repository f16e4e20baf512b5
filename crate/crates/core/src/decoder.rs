//! Modality-sensitive gating of encoder skips and the bottom-up decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{linear, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::TokenSeq;
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Output channels of the decoder stages for levels 4, 3, 2, 1.
    pub level_channels: Vec<usize>,
    pub out_classes: usize,
    /// Gate skips by modality importance; otherwise skips are merged by a
    /// pointwise linear map over the concatenated modalities.
    pub use_msg: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            level_channels: vec![128, 64, 64, 32],
            out_classes: 3,
            use_msg: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() != LEVELS - 1 || self.level_channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder.level_channels must hold {} positive counts",
                LEVELS - 1
            )));
        }
        if self.out_classes < 2 {
            return Err(Error::Config("decoder.out_classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// Inverse of row-major flattening: `[N, C]` tokens back to `[d, h, w, C]`.
pub fn fold_tokens(g: &mut Graph, seq: &TokenSeq) -> Result<Var> {
    let grid = seq
        .grid
        .ok_or_else(|| Error::Contract("fold_tokens: sequence has no grid".into()))?;
    let shape = g.shape(seq.tokens).to_vec();
    let n: usize = grid.iter().product();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::dim(format!(
            "fold_tokens: {shape:?} tokens do not fill grid {grid:?}"
        )));
    }
    g.reshape(seq.tokens, &[grid[0], grid[1], grid[2], shape[1]])
}

/// `Σ_i I[..., i] ⊙ F_i`, one scalar gate per voxel and modality broadcast over channels.
pub fn msg_filter(g: &mut Graph, importance: Var, features: &[Var]) -> Result<Var> {
    let ishape = g.shape(importance).to_vec();
    if ishape.len() != 4 || ishape[3] != features.len() {
        return Err(Error::dim(format!(
            "msg_filter: importance {ishape:?} does not have {} modality channels",
            features.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, &f) in features.iter().enumerate() {
        let fshape = g.shape(f);
        if fshape.len() != 4 || fshape[..3] != ishape[..3] {
            return Err(Error::dim(format!(
                "msg_filter: modality {i} feature {fshape:?} vs importance {ishape:?}"
            )));
        }
        let gate = g.column(importance, i)?;
        let gated = g.mul_rows(f, gate)?;
        acc = Some(match acc {
            Some(a) => g.add(a, gated)?,
            None => gated,
        });
    }
    acc.ok_or_else(|| Error::dim("msg_filter: no features"))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub modalities: usize,
    /// Bottleneck width C.
    pub channels: usize,
    /// Encoder channels for levels 1..=4.
    pub skip_channels: Vec<usize>,
}

impl Decoder {
    /// Stage output channels for level `l` in 1..=4.
    fn out_channels(&self, l: usize) -> usize {
        self.cfg.level_channels[LEVELS - 1 - l]
    }

    fn in_channels(&self, l: usize) -> usize {
        let below = if l == LEVELS - 1 {
            self.channels
        } else {
            self.out_channels(l + 1)
        };
        below + self.skip_channels[l - 1]
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.cfg.validate()?;
        for l in (1..LEVELS).rev() {
            if self.cfg.use_msg {
                init.linear(&format!("msg.l{l}.fc"), self.channels, self.modalities)?;
            }
            init.conv(&format!("dec.l{l}.conv"), 3, self.in_channels(l), self.out_channels(l))?;
        }
        init.conv("dec.head", 1, self.out_channels(1), self.cfg.out_classes)
    }

    /// `σ(U^{L-l}(FC(fold(fused))))`: gates for level `l`, `[D_l, H_l, W_l, M]`.
    pub fn msg_importance(&self, g: &mut Graph, store: &ParamStore, fused: &TokenSeq, l: usize) -> Result<Var> {
        if !(1..LEVELS).contains(&l) {
            return Err(Error::Contract(format!(
                "msg_importance: level {l} outside 1..{LEVELS}"
            )));
        }
        let folded = fold_tokens(g, fused)?;
        let logits = linear(g, store, &format!("msg.l{l}.fc"), folded)?;
        let up = g.upsample2x(logits, LEVELS - l)?;
        Ok(g.sigmoid(up))
    }

    /// Merged skip for level `l` from the per-modality encoder features.
    /// Without MSG the gates are fixed at 1, i.e. a plain sum over modalities,
    /// so toggling MSG changes nothing but the gating.
    pub fn skip(&self, g: &mut Graph, store: &ParamStore, fused: &TokenSeq, l: usize, features: &[Var]) -> Result<Var> {
        if self.cfg.use_msg {
            let importance = self.msg_importance(g, store, fused, l)?;
            msg_filter(g, importance, features)
        } else {
            let (&first, rest) = features
                .split_first()
                .ok_or_else(|| Error::Contract("skip: no modality features".into()))?;
            rest.iter().try_fold(first, |acc, &f| g.add(acc, f))
        }
    }

    /// `skips[k]` is the merged skip for level `4 - k`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, bottom: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != LEVELS - 1 {
            return Err(Error::dim(format!(
                "decode: need {} skips, got {}",
                LEVELS - 1,
                skips.len()
            )));
        }
        let mut x = bottom;
        for (k, &skip) in skips.iter().enumerate() {
            let l = LEVELS - 1 - k;
            x = g.upsample2x(x, 1)?;
            let (xs, ss) = (g.shape(x), g.shape(skip));
            if ss.len() != 4 || xs[..3] != ss[..3] {
                return Err(Error::dim(format!("decode level {l}: upsampled {xs:?} vs skip {ss:?}")));
            }
            let cat = g.concat_last(&[x, skip])?;
            let w = g.param(store, &format!("dec.l{l}.conv.weight"))?;
            let b = g.param(store, &format!("dec.l{l}.conv.bias"))?;
            let conv = g.conv3d(cat, w, b, [1; 3], [1; 3])?;
            x = g.gelu(conv);
        }
        let w = g.param(store, "dec.head.weight")?;
        let b = g.param(store, "dec.head.bias")?;
        g.conv3d(x, w, b, [1; 3], [0; 3])
    }

    /// Fold the fused tokens, merge skips for levels 4..1 and decode to logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: &TokenSeq, pyramids: &[Vec<Var>]) -> Result<Var> {
        let bottom = fold_tokens(g, fused)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for l in (1..LEVELS).rev() {
            let feats: Vec<Var> = pyramids.iter().map(|p| p[l - 1]).collect();
            skips.push(self.skip(g, store, fused, l, &feats)?);
        }
        self.decode(g, store, bottom, &skips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fold_is_inverse_of_flatten() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 4).map(f64::from).collect();
        let vol = Tensor::new(vec![2, 3, 2, 4], data).unwrap();
        let tokens = g.constant(vol.clone().reshape(vec![12, 4]).unwrap());
        let folded = fold_tokens(&mut g, &TokenSeq::spatial(tokens, [2, 3, 2])).unwrap();
        assert_eq!(g.value(folded), &vol);
    }

    #[test]
    fn token_k_lands_at_row_major_position() {
        let grid = [2, 3, 2];
        let (w, h) = (grid[1], grid[2]);
        let mut g = Graph::new();
        let tokens = g.constant(Tensor::new(vec![12, 1], (0..12).map(f64::from).collect()).unwrap());
        let folded = fold_tokens(&mut g, &TokenSeq::spatial(tokens, grid)).unwrap();
        let v = g.value(folded).data().to_vec();
        for k in 0..12 {
            let (z, y, x) = (k / (w * h), (k % (w * h)) / h, k % h);
            assert_eq!(v[(z * w + y) * h + x], k as f64);
        }
    }

    #[test]
    fn fold_rejects_grid_mismatch() {
        let mut g = Graph::new();
        let tokens = g.constant(Tensor::zeros(vec![7, 2]));
        assert!(fold_tokens(&mut g, &TokenSeq::spatial(tokens, [2, 2, 2])).is_err());
        assert!(fold_tokens(&mut g, &TokenSeq::flat(tokens)).is_err());
    }

    #[test]
    fn msg_filter_rejects_extent_mismatch() {
        let mut g = Graph::new();
        let imp = g.constant(Tensor::full(vec![2, 2, 2, 1], 0.5));
        let f = g.constant(Tensor::zeros(vec![4, 4, 4, 3]));
        assert!(matches!(msg_filter(&mut g, imp, &[f]), Err(Error::Dimension(_))));
    }
}
