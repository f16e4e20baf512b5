//! Losses, AdamW, the deterministic training loop and the ablation registry.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::save_checkpoint;
use crate::data::Case;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, SegmentationMask};
use crate::model::{Ablation, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub steps: usize,
    /// Samples per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub dice_smooth: f64,
    /// Validate every k steps (0: only at the end, if a validation set is given).
    pub val_every: usize,
    /// Checkpoint every k steps (0: only the final checkpoint).
    pub checkpoint_every: usize,
    /// Write measured step times to the log; off makes logs byte-comparable.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            eps: 1e-8,
            steps: 100,
            batch_size: 1,
            seed: 0,
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            dice_smooth: 1e-5,
            val_every: 0,
            checkpoint_every: 0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas", "must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "must be positive");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        let w = [self.lambda_dice, self.lambda_ce];
        if w.iter().any(|l| !(*l >= 0.0 && l.is_finite())) || w.iter().all(|&l| l == 0.0) {
            return bad("lambda_dice/lambda_ce", "must be >= 0 with at least one positive");
        }
        if self.dice_smooth.is_nan() || self.dice_smooth < 0.0 {
            return bad("dice_smooth", "must be >= 0");
        }
        Ok(())
    }
}

fn check_logits(g: &Graph, logits: Var, target: &SegmentationMask, op: &str) -> Result<()> {
    let s = g.shape(logits);
    let [d, h, w] = target.extents();
    if s.len() != 4 || s[..3] != [d, h, w] {
        return Err(Error::dim(format!(
            "{op}: logits {s:?} do not cover mask extents {:?}",
            target.extents()
        )));
    }
    Ok(())
}

/// `1 − mean_c (2Σ p_c g_c + s)/(Σ p_c + Σ g_c + s)` with `p = softmax(logits)`.
pub fn soft_dice_loss(g: &mut Graph, logits: Var, target: &SegmentationMask, smooth: f64) -> Result<Var> {
    check_logits(g, logits, target, "soft_dice_loss")?;
    let k = g.shape(logits)[3];
    if k != target.classes() {
        return Err(Error::dim(format!(
            "soft_dice_loss: {k} logit channels but mask has N_c = {}",
            target.classes()
        )));
    }
    g.soft_dice(logits, Arc::new(target.targets()), smooth)
}

/// Mean voxel cross-entropy of `[D, H, W, N_c]` logits against `target`.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, target: &SegmentationMask) -> Result<Var> {
    check_logits(g, logits, target, "cross_entropy_loss")?;
    g.cross_entropy(logits, Arc::new(target.targets()))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `λ_dice · dice + λ_ce · ce`; both terms are returned for logging.
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    target: &SegmentationMask,
    lambda_dice: f64,
    lambda_ce: f64,
    smooth: f64,
) -> Result<LossTerms> {
    let dice = soft_dice_loss(g, logits, target, smooth)?;
    let ce = cross_entropy_loss(g, logits, target)?;
    let a = g.scale(dice, lambda_dice);
    let b = g.scale(ce, lambda_ce);
    let total = g.add(a, b)?;
    Ok(LossTerms { total, dice, ce })
}

/// AdamW moments, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (n, t) in params.iter() {
                s.insert(n, Tensor::zeros(t.shape().to_vec())).expect("unique names");
            }
            s
        };
        OptimState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Check that the moments match `params` name for name and shape for shape.
    pub fn check(&self, params: &ParamStore) -> Result<()> {
        for store in [&self.m, &self.v] {
            if store.len() != params.len() {
                return Err(Error::Contract("optimizer state does not match parameters".into()));
            }
            for (n, t) in params.iter() {
                if store.get(n).map(Tensor::shape) != Some(t.shape()) {
                    return Err(Error::Contract(format!(
                        "optimizer moment for '{n}' missing or misshaped"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One AdamW step with decoupled decay:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Parameters without a gradient entry
/// get a zero gradient. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.check(params)?;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient for '{name}' has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter '{name}'")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        let g = grads.get(name).map(Tensor::data);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            *x = *x * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optim: OptimState,
    pub log: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.nfck";

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.nfck")
}

/// Loss, gradients and loss terms for one case.
pub fn case_gradients(model: &Model, case: &Case, cfg: &TrainConfig) -> Result<(IndexMap<String, Tensor>, [f64; 3])> {
    let mut g = Graph::new();
    let inputs = model.bind_inputs(&mut g, &case.volume)?;
    let logits = model.forward(&mut g, &inputs)?;
    let terms = combined_loss(
        &mut g,
        logits,
        &case.mask,
        cfg.lambda_dice,
        cfg.lambda_ce,
        cfg.dice_smooth,
    )?;
    let vals = [terms.total, terms.dice, terms.ce].map(|v| g.value(v).data()[0]);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss on {}", case.name)));
    }
    let grads = g.backward(terms.total)?.named(&g);
    Ok((grads, vals))
}

/// Mean foreground Dice of `model` over `cases`.
pub fn mean_dice(model: &Model, cases: &[Case]) -> Result<f64> {
    Ok(evaluate(model, cases)?.mean_dice)
}

/// Seeded, single-threaded AdamW training. With `out`, writes `train.jsonl`,
/// `val.jsonl` and checkpoints there. A non-finite loss or gradient aborts
/// with an error; checkpoints already written are left untouched.
pub fn train(
    model: Model,
    cfg: &TrainConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Validation("train: empty training set".into()));
    }
    let mut model = model;
    model.params.round_to_f32();
    let mut optim = OptimState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut outcome = TrainOutcome {
        model: model.clone(),
        optim: optim.clone(),
        log: Vec::with_capacity(cfg.steps),
        validation: Vec::new(),
        checkpoints: Vec::new(),
    };

    for step in 1..=cfg.steps {
        let start = Instant::now();
        let mut acc: Option<IndexMap<String, Tensor>> = None;
        let mut sums = [0.0; 3];
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train_cases.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let (grads, vals) = case_gradients(&model, &train_cases[idx], cfg)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (n, g) in grads {
                        match a.get_mut(&n) {
                            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                            None => {
                                a.insert(n, g);
                            }
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f64;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
        }
        adamw_step(&mut model.params, &grads, &mut optim, cfg)?;
        model.params.round_to_f32();
        optim.m.round_to_f32();
        optim.v.round_to_f32();

        let b = cfg.batch_size as f64;
        let rec = StepRecord {
            step,
            loss: sums[0] / b,
            dice_loss: sums[1] / b,
            ce_loss: sums[2] / b,
            lr: cfg.lr,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        if let Some(w) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if step % 10 == 0 || step == cfg.steps {
            info!(
                "step {step}: loss {:.5} (dice {:.5}, ce {:.5})",
                rec.loss, rec.dice_loss, rec.ce_loss
            );
        }
        outcome.log.push(rec);

        let last = step == cfg.steps;
        if !val_cases.is_empty() && ((cfg.val_every > 0 && step % cfg.val_every == 0) || last) {
            let val = ValRecord {
                step,
                val_dice: mean_dice(&model, val_cases)?,
            };
            if let Some(dir) = out {
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(VAL_FILE))?;
                serde_json::to_writer(&mut f, &val)?;
                f.write_all(b"\n")?;
            }
            outcome.validation.push(val);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let p = dir.join(checkpoint_name(step));
                save_checkpoint(&p, &model, step as u64, Some(&optim))?;
                outcome.checkpoints.push(p);
            }
            if last {
                let p = dir.join(FINAL_CHECKPOINT);
                save_checkpoint(&p, &model, step as u64, Some(&optim))?;
                outcome.checkpoints.push(p);
            }
        }
    }
    outcome.model = model;
    outcome.optim = optim;
    Ok(outcome)
}

/// One row of the ablation table: encoder type plus enabled components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub encoder: EncoderKind,
    pub ablation: Ablation,
}

impl AblationVariant {
    fn new(name: &str, encoder: EncoderKind, use_tsa: bool, use_cma: bool, use_msg: bool) -> Self {
        AblationVariant {
            name: name.into(),
            encoder,
            ablation: Ablation {
                use_tsa,
                use_cma,
                use_msg,
            },
        }
    }

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        c.encoder.kind = self.encoder;
        c.ablation = self.ablation;
        c
    }
}

/// Ablation rows from CNN baseline to the full model.
pub fn ablation_registry() -> Vec<AblationVariant> {
    use EncoderKind::*;
    vec![
        AblationVariant::new("baseline1_cnn_concat", Cnn, false, false, false),
        AblationVariant::new("baseline2_gpb_concat", Gpb, false, false, false),
        AblationVariant::new("gpb_tsa", Gpb, true, false, false),
        AblationVariant::new("gpb_tsa_cma", Gpb, true, true, false),
        AblationVariant::new("pb_full", Pb, true, true, true),
        AblationVariant::new("full", Gpb, true, true, true),
    ]
}

pub fn find_variant(name: &str) -> Result<AblationVariant> {
    ablation_registry()
        .into_iter()
        .find(|v| v.name == name)
        .ok_or_else(|| Error::Config(format!("unknown ablation variant '{name}'")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub seed: u64,
    pub val_dice: f64,
}

/// Train every variant for every seed and report validation Dice. The seed
/// drives both weight init and sample order.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    train_cases: &[Case],
    val_cases: &[Case],
) -> Result<Vec<AblationResult>> {
    let jobs: Vec<(&AblationVariant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, seed)| {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let tc = TrainConfig {
                seed,
                record_wall_time: false,
                ..train_cfg.clone()
            };
            let model = Model::build(cfg)?;
            let out = train(model, &tc, train_cases, &[], None)?;
            Ok(AblationResult {
                variant: v.name.clone(),
                seed,
                val_dice: mean_dice(&out.model, val_cases)?,
            })
        })
        .collect()
}

/// Per-variant mean over seeds, in registry order of `variants`.
pub fn summarize_ablation(variants: &[AblationVariant], results: &[AblationResult]) -> Vec<(String, f64)> {
    variants
        .iter()
        .map(|v| {
            let ds: Vec<f64> = results
                .iter()
                .filter(|r| r.variant == v.name)
                .map(|r| r.val_dice)
                .collect();
            (v.name.clone(), ds.iter().sum::<f64>() / ds.len().max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = scalar_store(0.7);
        let mut st = OptimState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &IndexMap::new(), &mut st, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn zero_grad_applies_decoupled_decay() {
        let mut p = scalar_store(0.7);
        let mut st = OptimState::new(&p);
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut p, &IndexMap::new(), &mut st, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.7 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut st = OptimState::new(&p);
        let grads: IndexMap<String, Tensor> = [("p".to_string(), Tensor::scalar(f64::NAN))].into_iter().collect();
        let err = adamw_step(&mut p, &grads, &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'p'"));
        assert_eq!(p.get("p").unwrap().data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda_ce: 0.0,
            lambda_dice: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn registry_names_are_unique() {
        let r = ablation_registry();
        for (i, a) in r.iter().enumerate() {
            assert!(r[i + 1..].iter().all(|b| b.name != a.name));
        }
        assert!(find_variant("full").unwrap().ablation.use_cma);
    }
}
