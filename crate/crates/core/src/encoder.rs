//! Global Poolformer encoder: five groups of one feature-embedding conv and
//! a stack of token-mixing blocks, producing a 5-level feature pyramid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::LAYER_NORM_EPS;
use crate::params::{Init, ParamStore};

pub const LEVELS: usize = 5;

/// Token mixer used inside encoder blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Global average pooling followed by a linear projection.
    #[default]
    Gpb,
    /// Local 3×3×3 average pooling minus identity.
    Pb,
    /// 3×3×3 convolution.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub gpb_per_stage: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    pub kind: EncoderKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![32, 64, 128, 128, 128],
            gpb_per_stage: 2,
            mlp_ratio: 4,
            in_channels: 1,
            kind: EncoderKind::Gpb,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "encoder.stage_channels must have {LEVELS} entries, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.mlp_ratio == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "encoder.stage_channels, mlp_ratio and in_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel count C of the top level.
    pub fn top_channels(&self) -> usize {
        self.stage_channels[LEVELS - 1]
    }
}

/// One token-mixing block: `Y = mix(LN(X)) + X; Z = MLP(LN(Y)) + Y`.
#[derive(Clone, Debug)]
pub struct GpbBlock {
    pub prefix: String,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub kind: EncoderKind,
}

impl GpbBlock {
    pub fn init(&self, init: &mut Init) -> Result<()> {
        let (p, c) = (&self.prefix, self.channels);
        init.layer_norm(&format!("{p}.ln1"), c)?;
        match self.kind {
            EncoderKind::Gpb => init.linear(&format!("{p}.mix"), c, c)?,
            EncoderKind::Cnn => init.conv(&format!("{p}.mix"), 3, c, c)?,
            EncoderKind::Pb => {}
        }
        init.layer_norm(&format!("{p}.ln2"), c)?;
        init.linear(&format!("{p}.mlp.fc1"), c, c * self.mlp_ratio)?;
        init.linear(&format!("{p}.mlp.fc2"), c * self.mlp_ratio, c)
    }

    /// `x` is `[d, h, w, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if g.shape(x).len() != 4 || c != self.channels {
            return Err(Error::dim(format!(
                "{}: expected [d, h, w, {}] input, got {:?}",
                self.prefix,
                self.channels,
                g.shape(x)
            )));
        }
        let p = &self.prefix;
        let n1 = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let y = match self.kind {
            EncoderKind::Gpb => {
                // Pooled summary is projected once and broadcast to every voxel.
                let pooled = g.mean_rows(n1);
                let pooled = g.reshape(pooled, &[1, c])?;
                let proj = linear(g, store, &format!("{p}.mix"), pooled)?;
                g.add_bias(x, proj)?
            }
            EncoderKind::Pb => {
                let pooled = g.avg_pool3(n1)?;
                let mixed = g.sub(pooled, n1)?;
                g.add(mixed, x)?
            }
            EncoderKind::Cnn => {
                let w = g.param(store, &format!("{p}.mix.weight"))?;
                let b = g.param(store, &format!("{p}.mix.bias"))?;
                let conv = g.conv3d(n1, w, b, [1; 3], [1; 3])?;
                g.add(conv, x)?
            }
        };
        let n2 = layer_norm(g, store, &format!("{p}.ln2"), y)?;
        let h = linear(g, store, &format!("{p}.mlp.fc1"), n2)?;
        let h = g.gelu(h);
        let h = linear(g, store, &format!("{p}.mlp.fc2"), h)?;
        g.add(h, y)
    }
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

/// Per-modality encoder outputs, level 1 (full resolution) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn top(&self) -> Var {
        self.levels[LEVELS - 1]
    }
}

/// Encoder for one modality; parameters live under `enc{index}.`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub index: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, index: usize) -> Self {
        Encoder { cfg, index }
    }

    pub fn prefix(&self) -> String {
        format!("enc{}", self.index)
    }

    fn stage_in(&self, stage: usize) -> usize {
        if stage == 1 {
            self.cfg.in_channels
        } else {
            self.cfg.stage_channels[stage - 2]
        }
    }

    fn block(&self, stage: usize, j: usize) -> GpbBlock {
        GpbBlock {
            prefix: format!("{}.s{stage}.b{j}", self.prefix()),
            channels: self.cfg.stage_channels[stage - 1],
            mlp_ratio: self.cfg.mlp_ratio,
            kind: self.cfg.kind,
        }
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.cfg.validate()?;
        for stage in 1..=LEVELS {
            let k = if stage == 1 { 1 } else { 2 };
            let cout = self.cfg.stage_channels[stage - 1];
            init.conv(&format!("{}.s{stage}.fe", self.prefix()), k, self.stage_in(stage), cout)?;
            for j in 0..self.cfg.gpb_per_stage {
                self.block(stage, j).init(init)?;
            }
        }
        Ok(())
    }

    /// Feature embedding for `stage` in 1..=5: a 1×1×1 conv at stage 1,
    /// a 2×2×2 stride-2 conv afterwards.
    pub fn feature_embed(&self, g: &mut Graph, store: &ParamStore, x: Var, stage: usize) -> Result<Var> {
        if !(1..=LEVELS).contains(&stage) {
            return Err(Error::Contract(format!("stage {stage} outside 1..={LEVELS}")));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!(
                "feature_embed: expected [D, H, W, C], got {shape:?}"
            )));
        }
        let stride = if stage == 1 { 1 } else { 2 };
        if stage > 1 && shape[..3].iter().any(|e| e % 2 != 0) {
            return Err(Error::dim(format!(
                "feature_embed stage {stage}: extents {:?} must be even; pad the volume upstream",
                &shape[..3]
            )));
        }
        let name = format!("{}.s{stage}.fe", self.prefix());
        let w = g.param(store, &format!("{name}.weight"))?;
        let b = g.param(store, &format!("{name}.bias"))?;
        g.conv3d(x, w, b, [stride; 3], [0; 3])
    }

    /// `volume` is `[D, H, W, in_channels]` with D, H, W divisible by 16.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(volume).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "encoder: expected [D, H, W, {}] input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let factor = 1 << (LEVELS - 1);
        if shape[..3].iter().any(|e| e % factor != 0) {
            return Err(Error::dim(format!(
                "encoder: extents {:?} must be divisible by {factor}",
                &shape[..3]
            )));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        let mut x = volume;
        for stage in 1..=LEVELS {
            x = self.feature_embed(g, store, x, stage)?;
            for j in 0..self.cfg.gpb_per_stage {
                x = self.block(stage, j).forward(g, store, x)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::params::ParamRng;
    use crate::tensor::Tensor;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![2, 3, 3, 4, 4],
            gpb_per_stage: 1,
            mlp_ratio: 2,
            in_channels: 1,
            kind: EncoderKind::Gpb,
        }
    }

    fn built(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
        let enc = Encoder::new(cfg, 0);
        let mut store = ParamStore::new();
        let mut rng = ParamRng::seed_from_u64(seed);
        enc.init(&mut Init {
            store: &mut store,
            rng: &mut rng,
        })
        .unwrap();
        (enc, store)
    }

    #[test]
    fn pyramid_halves_extents() {
        let (enc, store) = built(small_cfg(), 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![32, 16, 16, 1], 0.5));
        let pyr = enc.forward(&mut g, &store, x).unwrap();
        let expect = [[32, 16, 16, 2], [16, 8, 8, 3], [8, 4, 4, 3], [4, 2, 2, 4], [2, 1, 1, 4]];
        for (lvl, e) in pyr.levels.iter().zip(expect) {
            assert_eq!(g.shape(*lvl), e);
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        let (enc, store) = built(small_cfg(), 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![24, 16, 16, 1]));
        assert!(matches!(enc.forward(&mut g, &store, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn odd_extent_at_stride_stage_rejected() {
        let (enc, store) = built(small_cfg(), 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 4, 4, 2]));
        let err = enc.feature_embed(&mut g, &store, x, 2).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let block = GpbBlock {
            prefix: "b".into(),
            channels: 4,
            mlp_ratio: 2,
            kind: EncoderKind::Gpb,
        };
        let mut store = ParamStore::new();
        let mut rng = ParamRng::seed_from_u64(0);
        block
            .init(&mut Init {
                store: &mut store,
                rng: &mut rng,
            })
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 1, 3]));
        assert!(matches!(block.forward(&mut g, &store, x), Err(Error::Dimension(_))));
    }
}
