//! Full network: per-modality encoders, NMaFA bottleneck, gated decoder.

use indexmap::IndexMap;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::MultiModalVolume;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::{tsa, AttentionConfig, CmaResidual, FusionConfig, Nmafa, TokenSeq};
use crate::params::{Init, ParamRng, ParamStore};
use crate::tensor::Tensor;

/// Components that can be switched off for ablations. Disabled components
/// contribute no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_tsa: bool,
    pub use_cma: bool,
    pub use_msg: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_tsa: true,
            use_cma: true,
            use_msg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: usize,
    pub classes: usize,
    /// Input extents (D, H, W).
    pub extents: [usize; 3],
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    /// Decoder stage widths for levels 4, 3, 2, 1.
    pub level_channels: Vec<usize>,
    /// Token-learner tokens per modality.
    pub tokens: usize,
    pub tsa_layers: usize,
    pub cma_residual: CmaResidual,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: 4,
            classes: 4,
            extents: [128, 128, 128],
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            level_channels: DecoderConfig::default().level_channels,
            tokens: 32,
            tsa_layers: 2,
            cma_residual: CmaResidual::QueryStream,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Four MRI modalities, four label classes, 128³ crops, C = 128.
    pub fn brats() -> Self {
        Self::default()
    }

    /// Small configuration for tests and desk-scale experiments.
    pub fn toy(modalities: usize, classes: usize, extents: [usize; 3]) -> Self {
        ModelConfig {
            modalities,
            classes,
            extents,
            encoder: EncoderConfig {
                stage_channels: vec![4, 8, 8, 16, 16],
                gpb_per_stage: 1,
                mlp_ratio: 2,
                ..EncoderConfig::default()
            },
            attention: AttentionConfig {
                heads: 2,
                // Largest window ≤ 2 that divides the bottleneck grid.
                window: extents.map(|e| if (e / 16) % 2 == 0 { 2 } else { 1 }),
                qkv_dim: 16,
                ffn_ratio: 2,
            },
            level_channels: vec![16, 8, 8, 4],
            tokens: 4,
            ..Self::default()
        }
    }

    pub fn bottleneck_grid(&self) -> [usize; 3] {
        let f = 1 << (LEVELS - 1);
        self.extents.map(|e| e / f)
    }

    pub fn channels(&self) -> usize {
        self.encoder.top_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 {
            return Err(Error::Config("modalities must be >= 1".into()));
        }
        self.encoder.validate()?;
        let f = 1 << (LEVELS - 1);
        if self.extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::Config(format!(
                "extents {:?} must be positive multiples of {f}",
                self.extents
            )));
        }
        self.attention.validate(self.channels())?;
        if self.ablation.use_tsa {
            tsa::check_window(self.bottleneck_grid(), self.attention.window)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.ablation.use_cma && self.tokens == 0 {
            return Err(Error::Config("tokens must be >= 1".into()));
        }
        self.decoder_config().validate()
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            attention: self.attention.clone(),
            tokens: self.tokens,
            tsa_layers: self.tsa_layers,
            use_tsa: self.ablation.use_tsa,
            use_cma: self.ablation.use_cma,
            cma_residual: self.cma_residual,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            level_channels: self.level_channels.clone(),
            out_classes: self.classes,
            use_msg: self.ablation.use_msg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit LN gains; deterministic in `cfg.seed`.
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ParamRng::seed_from_u64(cfg.seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        for i in 0..cfg.modalities {
            Encoder::new(cfg.encoder.clone(), i).init(&mut init)?;
        }
        let model = Model {
            cfg,
            params: ParamStore::new(),
        };
        model.nmafa().init(&mut init)?;
        model.decoder().init(&mut init)?;
        // Parameters live on the f32 grid so checkpoints round-trip exactly.
        params.round_to_f32();
        Ok(Model { params, ..model })
    }

    pub fn encoder(&self, modality: usize) -> Encoder {
        Encoder::new(self.cfg.encoder.clone(), modality)
    }

    pub fn nmafa(&self) -> Nmafa {
        Nmafa {
            cfg: self.cfg.fusion_config(),
            modalities: self.cfg.modalities,
            channels: self.cfg.channels(),
            grid: self.cfg.bottleneck_grid(),
        }
    }

    pub fn decoder(&self) -> Decoder {
        Decoder {
            cfg: self.cfg.decoder_config(),
            modalities: self.cfg.modalities,
            channels: self.cfg.channels(),
            skip_channels: self.cfg.encoder.stage_channels[..LEVELS - 1].to_vec(),
        }
    }

    /// `inputs[i]` is modality `i` as `[D, H, W, 1]`; returns `[D, H, W, N_c]` logits.
    pub fn forward(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        self.forward_with(g, &self.params, inputs)
    }

    /// Forward pass reading parameters from `store` (same names as `self.params`).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.cfg.modalities {
            return Err(Error::Contract(format!(
                "model expects {} modalities, got {}",
                self.cfg.modalities,
                inputs.len()
            )));
        }
        let mut pyramids = Vec::with_capacity(inputs.len());
        for (i, &x) in inputs.iter().enumerate() {
            let s = g.shape(x);
            if s[..] != [self.cfg.extents[0], self.cfg.extents[1], self.cfg.extents[2], 1] {
                return Err(Error::dim(format!(
                    "modality {i}: input {s:?}, expected {:?}×1",
                    self.cfg.extents
                )));
            }
            pyramids.push(self.encoder(i).forward(g, store, x)?.levels);
        }
        let tops: Vec<Var> = pyramids.iter().map(|p| p[LEVELS - 1]).collect();
        let fused: TokenSeq = self.nmafa().forward(g, store, &tops)?;
        self.decoder().forward(g, store, &fused, &pyramids)
    }

    /// Bind a volume's modalities as constants.
    pub fn bind_inputs(&self, g: &mut Graph, volume: &MultiModalVolume) -> Result<Vec<Var>> {
        if volume.modalities() != self.cfg.modalities {
            return Err(Error::Contract(format!(
                "volume has {} modalities, model expects {}",
                volume.modalities(),
                self.cfg.modalities
            )));
        }
        (0..volume.modalities())
            .map(|i| Ok(g.constant(volume.modality_tensor(i)?)))
            .collect()
    }

    /// Eager forward pass producing logits.
    pub fn predict(&self, volume: &MultiModalVolume) -> Result<Tensor> {
        let mut g = Graph::new();
        let inputs = self.bind_inputs(&mut g, volume)?;
        let out = self.forward(&mut g, &inputs)?;
        Ok(g.value(out).clone())
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.params)
    }
}

/// Total parameter count with a per-module breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: IndexMap<String, usize>,
}

pub fn count_params(params: &ParamStore) -> ParamCount {
    let mut breakdown = IndexMap::new();
    let mut encoders = 0;
    let mut tsa_total = 0;
    let mut tl_total = 0;
    for (name, t) in params.iter() {
        let n = t.numel();
        if name.starts_with("enc") {
            encoders += n;
        }
        if name.starts_with("nmafa.tsa") {
            tsa_total += n;
        }
        if name.starts_with("nmafa.tl") {
            tl_total += n;
        }
    }
    breakdown.insert("encoders".to_string(), encoders);
    breakdown.insert(
        "nmafa.embed".to_string(),
        params.count_prefix("nmafa.embed.") + params.count_prefix("nmafa.pos"),
    );
    breakdown.insert("nmafa.tsa".to_string(), tsa_total);
    breakdown.insert("nmafa.token_learner".to_string(), tl_total);
    breakdown.insert("nmafa.cma".to_string(), params.count_prefix("nmafa.cma."));
    breakdown.insert("msg".to_string(), params.count_prefix("msg."));
    breakdown.insert("decoder".to_string(), params.count_prefix("dec."));
    ParamCount {
        total: params.count(),
        breakdown,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Full,
    Tsa,
}

/// Attention score entries per head per layer.
/// Full: N²; TSA: N·d + N·(h·w) + N·(window volume).
pub fn attention_cost(grid: [usize; 3], window: [usize; 3], mode: AttentionMode) -> Result<u64> {
    let n = grid.iter().product::<usize>() as u64;
    match mode {
        AttentionMode::Full => Ok(n * n),
        AttentionMode::Tsa => {
            tsa::check_window(grid, window).map_err(|e| Error::Config(e.to_string()))?;
            let wv = window.iter().product::<usize>() as u64;
            Ok(n * grid[0] as u64 + n * (grid[1] * grid[2]) as u64 + n * wv)
        }
    }
}

/// Closed-form multiply-accumulate estimate of one forward pass (convs,
/// linear maps, attention products; norms and elementwise ops ignored).
pub fn estimate_macs(cfg: &ModelConfig) -> u64 {
    let ch = &cfg.encoder.stage_channels;
    let m = cfg.modalities as u64;
    let vox = |l: usize| -> u64 { cfg.extents.iter().map(|&e| (e >> (l - 1)) as u64).product() };
    let mut enc = 0u64;
    for l in 1..=LEVELS {
        let c = ch[l - 1] as u64;
        let cin = if l == 1 {
            cfg.encoder.in_channels as u64
        } else {
            ch[l - 2] as u64
        };
        let taps = if l == 1 { 1 } else { 8 };
        enc += vox(l) * taps * cin * c;
        let r = cfg.encoder.mlp_ratio as u64;
        enc += cfg.encoder.gpb_per_stage as u64 * (2 * vox(l) * c * c * r + c * c);
    }
    let c = cfg.channels() as u64;
    let n = vox(LEVELS);
    let d = cfg.attention.qkv_dim as u64;
    let r = cfg.attention.ffn_ratio as u64;
    let mut fusion = n * m * c * c;
    if cfg.ablation.use_tsa {
        let scores = attention_cost(cfg.bottleneck_grid(), cfg.attention.window, AttentionMode::Tsa).unwrap_or(0);
        let per_layer = 3 * (3 * n * c * d + n * d * c) + 2 * scores * d + 2 * n * c * c * r;
        fusion += cfg.tsa_layers as u64 * per_layer;
    }
    if cfg.ablation.use_cma {
        let p = cfg.tokens as u64;
        fusion += m * (n * c * c + n * c * p + p * n * c);
        fusion += n * c * d + 2 * m * p * c * d + 2 * n * m * p * d + n * d * c + 2 * n * c * c * r;
    }
    let mut dec = 0u64;
    let lc = &cfg.level_channels;
    for l in 1..LEVELS {
        let out = lc[LEVELS - 1 - l] as u64;
        let below = if l == LEVELS - 1 { c } else { lc[LEVELS - 2 - l] as u64 };
        let skip = ch[l - 1] as u64;
        dec += vox(l) * 27 * (below + skip) * out;
        dec += if cfg.ablation.use_msg {
            n * c * m
        } else {
            vox(l) * m * skip * skip
        };
    }
    dec += vox(1) * lc[LEVELS - 2] as u64 * cfg.classes as u64;
    m * enc + fusion + dec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_examples() {
        assert_eq!(
            attention_cost([8, 8, 8], [2, 2, 2], AttentionMode::Full).unwrap(),
            262_144
        );
        assert_eq!(
            attention_cost([8, 8, 8], [2, 2, 2], AttentionMode::Tsa).unwrap(),
            40_960
        );
        assert_eq!(attention_cost([1, 1, 1], [1, 1, 1], AttentionMode::Full).unwrap(), 1);
        assert!(matches!(
            attention_cost([3, 4, 4], [2, 2, 2], AttentionMode::Tsa),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_indivisible_extents() {
        let cfg = ModelConfig::toy(2, 3, [24, 32, 32]);
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_window_not_dividing_bottleneck() {
        let mut cfg = ModelConfig::toy(2, 3, [16, 16, 16]);
        cfg.attention.window = [2, 2, 2];
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
    }
}
