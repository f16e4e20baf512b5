//! Self-checks shared by the CLI and the test suites: finite-difference
//! gradient checks of every differentiable block, and the attention cost
//! benchmark (closed form, instrumented counters, wall time).

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_store, AttnGroups, GradCheckOptions, Graph, Var};
use crate::decoder::{msg_filter, Decoder, DecoderConfig};
use crate::encoder::{EncoderKind, GpbBlock};
use crate::error::Result;
use crate::fusion::cma::{CmaBlock, CmaResidual};
use crate::fusion::token_learner::TokenLearner;
use crate::fusion::tsa::{self, AttnProj, TsaBlock};
use crate::fusion::{AttentionConfig, TokenSeq};
use crate::metrics::SegmentationMask;
use crate::model::{attention_cost, AttentionMode, Model, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::training::{cross_entropy_loss, soft_dice_loss};

/// Largest admissible relative error in the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub block: String,
    pub shape: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub pass: bool,
}

/// Deterministic random fixture: parameters from the block's own
/// initializer, jittered so no bias or gain sits at an exact default.
struct Fixture {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Fixture {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init(&mut self, f: impl FnOnce(&mut Init) -> Result<()>) -> Result<()> {
        let mut init = Init {
            store: &mut self.store,
            rng: &mut self.rng,
        };
        f(&mut init)
    }

    fn jitter(&mut self) {
        let n = Normal::new(0.0, 0.1).unwrap();
        for (_, t) in self.store.iter_mut() {
            for x in t.data_mut() {
                *x += n.sample(&mut self.rng);
            }
        }
    }

    fn uniform(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Register a differentiable input under `name`.
    fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let t = self.uniform(shape);
        self.store.insert(name, t)
    }

    /// Random readout weights for a scalar objective.
    fn readout(&mut self, shape: Vec<usize>) -> Tensor {
        self.uniform(shape)
    }

    fn check<F>(self, block: &str, shape: String, f: F) -> Result<GradRow>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let opts = GradCheckOptions {
            eps: 1e-5,
            max_entries_per_tensor: Some(6),
        };
        let r = grad_check_store(&self.store, f, opts)?;
        log::debug!("{block} {shape}: worst {:?} {:?}", r.worst, r.worst_values);
        Ok(GradRow {
            block: block.into(),
            shape,
            max_rel_error: r.max_rel_error,
            entries: r.entries,
            pass: r.max_rel_error < GRAD_TOLERANCE,
        })
    }
}

fn readout_of(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    g.weighted_sum(out, w.clone())
}

fn attn_cfg(window: [usize; 3]) -> AttentionConfig {
    AttentionConfig {
        heads: 2,
        window,
        qkv_dim: 4,
        ffn_ratio: 2,
    }
}

fn gpb_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    for (i, (grid, c)) in [([2, 2, 2], 4), ([1, 2, 3], 6), ([2, 3, 2], 3)].into_iter().enumerate() {
        let mut fx = Fixture::new(seed + i as u64);
        let block = GpbBlock {
            prefix: "gpb".into(),
            channels: c,
            mlp_ratio: 2,
            kind: EncoderKind::Gpb,
        };
        fx.init(|init| block.init(init))?;
        fx.jitter();
        let shape = vec![grid[0], grid[1], grid[2], c];
        fx.input("x", shape.clone())?;
        let w = fx.readout(shape.clone());
        rows.push(fx.check("gpb", format!("{shape:?}"), |g, s| {
            let x = g.param(s, "x")?;
            let y = block.forward(g, s, x)?;
            readout_of(g, y, &w)
        })?);
    }
    Ok(())
}

const BRANCH_CASES: [([usize; 3], [usize; 3]); 3] =
    [([2, 2, 2], [2, 2, 2]), ([3, 2, 2], [1, 2, 2]), ([2, 2, 4], [2, 2, 2])];

fn branch_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    let c = 4;
    for branch in ["axial", "planar", "window"] {
        for (i, (grid, window)) in BRANCH_CASES.into_iter().enumerate() {
            let mut fx = Fixture::new(seed + 10 + i as u64);
            let cfg = attn_cfg(window);
            let proj = AttnProj {
                prefix: "b".into(),
                channels: c,
                qkv_dim: cfg.qkv_dim,
                heads: cfg.heads,
            };
            fx.init(|init| {
                proj.init(init)?;
                match branch {
                    "axial" => init.normal("b.pos", vec![grid[0], c], 0.02),
                    "planar" => init.normal("b.pos", vec![grid[1] * grid[2], c], 0.02),
                    _ => init.normal("b.rel_bias", vec![tsa::rel_table_len(window), cfg.heads], 0.02),
                }
            })?;
            fx.jitter();
            let n: usize = grid.iter().product();
            fx.input("x", vec![n, c])?;
            let w = fx.readout(vec![n, c]);
            let name = format!("tsa_{branch}");
            rows.push(fx.check(&name, format!("grid {grid:?} window {window:?}"), |g, s| {
                let x = g.param(s, "x")?;
                let seq = TokenSeq::spatial(x, grid);
                let y = match branch {
                    "axial" => tsa::mha_axial(g, s, "b", cfg.heads, &seq)?,
                    "planar" => tsa::mha_planar(g, s, "b", cfg.heads, &seq)?,
                    _ => tsa::mha_window(g, s, "b", cfg.heads, window, &seq)?,
                };
                readout_of(g, y, &w)
            })?);
        }
    }
    Ok(())
}

fn tsa_block_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    let c = 4;
    for (i, (grid, window)) in BRANCH_CASES.into_iter().enumerate() {
        let mut fx = Fixture::new(seed + 20 + i as u64);
        let block = TsaBlock {
            prefix: "tsa".into(),
            channels: c,
            grid,
            cfg: attn_cfg(window),
        };
        fx.init(|init| block.init(init))?;
        fx.jitter();
        let n: usize = grid.iter().product();
        fx.input("x", vec![n, c])?;
        let w = fx.readout(vec![n, c]);
        rows.push(
            fx.check("tsa_block", format!("grid {grid:?} window {window:?}"), |g, s| {
                let x = g.param(s, "x")?;
                let y = block.forward(g, s, &TokenSeq::spatial(x, grid))?;
                readout_of(g, y.tokens, &w)
            })?,
        );
    }
    Ok(())
}

fn token_learner_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    for (i, (grid, c, p)) in [([2, 2, 2], 4, 2), ([1, 3, 2], 3, 3), ([2, 2, 3], 5, 4)]
        .into_iter()
        .enumerate()
    {
        let mut fx = Fixture::new(seed + 30 + i as u64);
        let tl = TokenLearner {
            prefix: "tl".into(),
            channels: c,
            tokens: p,
        };
        fx.init(|init| tl.init(init))?;
        fx.jitter();
        let shape = vec![grid[0], grid[1], grid[2], c];
        fx.input("x", shape.clone())?;
        let w = fx.readout(vec![p, c]);
        rows.push(fx.check("token_learner", format!("{shape:?} P={p}"), |g, s| {
            let x = g.param(s, "x")?;
            let y = tl.forward(g, s, x)?;
            readout_of(g, y, &w)
        })?);
    }
    Ok(())
}

fn cma_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    let c = 4;
    let cases = [
        ([2, 2, 2], 4, CmaResidual::QueryStream),
        ([1, 2, 3], 6, CmaResidual::QueryStream),
        ([2, 1, 2], 3, CmaResidual::EmbeddedTokens),
    ];
    for (i, (grid, bank_len, residual)) in cases.into_iter().enumerate() {
        let mut fx = Fixture::new(seed + 40 + i as u64);
        let block = CmaBlock {
            prefix: "cma".into(),
            channels: c,
            cfg: attn_cfg([1, 1, 1]),
            residual,
        };
        fx.init(|init| block.init(init))?;
        fx.jitter();
        let n: usize = grid.iter().product();
        fx.input("q", vec![n, c])?;
        fx.input("bank", vec![bank_len, c])?;
        fx.input("emb", vec![n, c])?;
        let w = fx.readout(vec![n, c]);
        rows.push(fx.check(
            "cma_block",
            format!("grid {grid:?} bank {bank_len} {residual:?}"),
            |g, s| {
                let q = g.param(s, "q")?;
                let bank = g.param(s, "bank")?;
                let emb = g.param(s, "emb")?;
                let y = block.forward(
                    g,
                    s,
                    &TokenSeq::spatial(q, grid),
                    &TokenSeq::flat(bank),
                    &TokenSeq::spatial(emb, grid),
                )?;
                readout_of(g, y.tokens, &w)
            },
        )?);
    }
    Ok(())
}

fn toy_decoder(m: usize, c: usize, use_msg: bool) -> Decoder {
    Decoder {
        cfg: DecoderConfig {
            level_channels: vec![3, 2, 2, 2],
            out_classes: 3,
            use_msg,
        },
        modalities: m,
        channels: c,
        skip_channels: vec![2, 2, 3, 3],
    }
}

fn msg_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    // (fused grid, level, modalities)
    for (i, (grid, level, m)) in [([1, 2, 1], 4, 2), ([1, 1, 1], 3, 3), ([2, 1, 1], 4, 2)]
        .into_iter()
        .enumerate()
    {
        let mut fx = Fixture::new(seed + 50 + i as u64);
        let c = 4;
        let dec = toy_decoder(m, c, true);
        fx.init(|init| init.linear(&format!("msg.l{level}.fc"), c, m))?;
        fx.jitter();
        let n: usize = grid.iter().product();
        fx.input("fused", vec![n, c])?;
        let up = 1 << (crate::encoder::LEVELS - level);
        let ext = grid.map(|e| e * up);
        let fc = dec.skip_channels[level - 1];
        for j in 0..m {
            fx.input(&format!("f{j}"), vec![ext[0], ext[1], ext[2], fc])?;
        }
        let w = fx.readout(vec![ext[0], ext[1], ext[2], fc]);
        rows.push(fx.check("msg", format!("grid {grid:?} level {level} M={m}"), |g, s| {
            let fused = g.param(s, "fused")?;
            let imp = dec.msg_importance(g, s, &TokenSeq::spatial(fused, grid), level)?;
            let feats = (0..m)
                .map(|j| g.param(s, &format!("f{j}")))
                .collect::<Result<Vec<_>>>()?;
            let y = msg_filter(g, imp, &feats)?;
            readout_of(g, y, &w)
        })?);
    }
    Ok(())
}

fn decoder_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    let c = 3;
    for (i, (grid, m, use_msg)) in [([1, 1, 1], 2, true), ([1, 1, 2], 1, true), ([1, 1, 1], 2, false)]
        .into_iter()
        .enumerate()
    {
        let mut fx = Fixture::new(seed + 60 + i as u64);
        let dec = toy_decoder(m, c, use_msg);
        fx.init(|init| dec.init(init))?;
        fx.jitter();
        let n: usize = grid.iter().product();
        fx.input("fused", vec![n, c])?;
        for j in 0..m {
            for l in 1..crate::encoder::LEVELS {
                let s = 1 << (l - 1);
                let e = grid.map(|g| g * 16 / s);
                fx.input(&format!("p{j}.l{l}"), vec![e[0], e[1], e[2], dec.skip_channels[l - 1]])?;
            }
        }
        let out = grid.map(|g| g * 16);
        let w = fx.readout(vec![out[0], out[1], out[2], 3]);
        let label = format!("grid {grid:?} M={m} msg={use_msg}");
        rows.push(fx.check("decoder", label, |g, s| {
            let fused = g.param(s, "fused")?;
            let mut pyramids = Vec::new();
            for j in 0..m {
                let mut levels = Vec::new();
                for l in 1..crate::encoder::LEVELS {
                    levels.push(g.param(s, &format!("p{j}.l{l}"))?);
                }
                // The top level is not read by the decoder; a placeholder keeps indices aligned.
                levels.push(fused);
                pyramids.push(levels);
            }
            let y = dec.forward(g, s, &TokenSeq::spatial(fused, grid), &pyramids)?;
            readout_of(g, y, &w)
        })?);
    }
    Ok(())
}

fn loss_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    for (i, (ext, k)) in [([2, 2, 2], 2), ([1, 3, 2], 3), ([4, 4, 4], 4)].into_iter().enumerate() {
        for loss in ["soft_dice_loss", "cross_entropy_loss"] {
            let mut fx = Fixture::new(seed + 70 + i as u64);
            fx.input("logits", vec![ext[0], ext[1], ext[2], k])?;
            let n: usize = ext.iter().product();
            let labels = (0..n).map(|_| fx.rng.random_range(0..k as u8)).collect();
            let mask = SegmentationMask::new(labels, ext, k)?;
            rows.push(fx.check(loss, format!("{ext:?} N_c={k}"), |g, s| {
                let x = g.param(s, "logits")?;
                if loss == "soft_dice_loss" {
                    soft_dice_loss(g, x, &mask, 1e-5)
                } else {
                    cross_entropy_loss(g, x, &mask)
                }
            })?);
        }
    }
    Ok(())
}

fn model_rows(seed: u64, rows: &mut Vec<GradRow>) -> Result<()> {
    let mut cfg = ModelConfig::toy(2, 3, [16; 3]);
    cfg.seed = seed;
    cfg.encoder.stage_channels = vec![4, 4, 4, 4, 4];
    cfg.level_channels = vec![4, 4, 4, 4];
    cfg.attention.qkv_dim = 4;
    cfg.tokens = 2;
    cfg.tsa_layers = 1;
    let model = Model::build(cfg)?;
    let mut fx = Fixture::new(seed + 90);
    fx.store = model.params.clone();
    fx.jitter();
    let inputs: Vec<Tensor> = (0..2).map(|_| fx.uniform(vec![16, 16, 16, 1])).collect();
    let w = fx.readout(vec![16, 16, 16, 3]);
    let mut row = {
        let opts = GradCheckOptions {
            eps: 1e-5,
            max_entries_per_tensor: Some(1),
        };
        let r = grad_check_store(
            &fx.store,
            |g, s| {
                let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let y = model.forward_with(g, s, &xs)?;
                readout_of(g, y, &w)
            },
            opts,
        )?;
        log::debug!("model: worst {:?} {:?}", r.worst, r.worst_values);
        GradRow {
            block: "model_end_to_end".into(),
            shape: "toy M=2 16³".into(),
            max_rel_error: r.max_rel_error,
            entries: r.entries,
            pass: r.max_rel_error < GRAD_TOLERANCE,
        }
    };
    row.shape = format!("{} ({} params)", row.shape, model.params.count());
    rows.push(row);
    Ok(())
}

/// Every block on three shapes each, plus one end-to-end model check.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    gpb_rows(seed, &mut rows)?;
    branch_rows(seed, &mut rows)?;
    tsa_block_rows(seed, &mut rows)?;
    token_learner_rows(seed, &mut rows)?;
    cma_rows(seed, &mut rows)?;
    msg_rows(seed, &mut rows)?;
    decoder_rows(seed, &mut rows)?;
    loss_rows(seed, &mut rows)?;
    model_rows(seed, &mut rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    /// Closed-form score entries per head and layer.
    pub full: u64,
    pub tsa: u64,
    /// Entries counted by the attention kernel while running.
    pub full_counted: u64,
    pub tsa_counted: u64,
    /// Median forward time of the attention kernel(s), milliseconds.
    pub full_ms: f64,
    pub tsa_ms: f64,
}

/// Time full vs. tri-oriented attention on random `[N, dim]` q/k/v with one
/// head; only the attention kernels are timed (projections are identical).
pub fn bench_attention(grid: [usize; 3], window: [usize; 3], dim: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let full = attention_cost(grid, window, AttentionMode::Full)?;
    let tsa_cost = attention_cost(grid, window, AttentionMode::Tsa)?;
    let n: usize = grid.iter().product();
    let mut fx = Fixture::new(seed);
    let qkv: Vec<Tensor> = (0..3).map(|_| fx.uniform(vec![n, dim])).collect();
    let dense = Arc::new(AttnGroups::dense(n, n));
    let branches = [
        Arc::new(tsa::axial_groups(grid)),
        Arc::new(tsa::planar_groups(grid)),
        Arc::new(tsa::window_groups(grid, window)?),
    ];
    let run = |groups: &[Arc<AttnGroups>]| -> Result<(u64, f64)> {
        let mut g = Graph::new();
        let [q, k, v] = [0, 1, 2].map(|i| g.constant(qkv[i].clone()));
        let start = Instant::now();
        for grp in groups {
            g.attention(q, k, v, grp.clone(), 1, None)?;
        }
        Ok((g.score_entries(), start.elapsed().as_secs_f64() * 1e3))
    };
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (mut tf, mut tt) = (Vec::new(), Vec::new());
    let (mut cf, mut ct) = (0, 0);
    for _ in 0..reps.max(1) {
        let (c, t) = run(std::slice::from_ref(&dense))?;
        cf = c;
        tf.push(t);
        let (c, t) = run(&branches)?;
        ct = c;
        tt.push(t);
    }
    Ok(BenchRow {
        grid,
        window,
        full,
        tsa: tsa_cost,
        full_counted: cf,
        tsa_counted: ct,
        full_ms: median(tf),
        tsa_ms: median(tt),
    })
}
