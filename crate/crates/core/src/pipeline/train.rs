//! Mini-batch training with per-example seeded randomness, so results do not
//! depend on thread count or batch scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_with_params, AugmentSpec};
use super::model::{AblationFlags, Model};
use super::optim::{clip_global_norm, cosine_lr, AdamW, GradMap};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::objective::{LossBreakdown, LossWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Posterior samples per example.
    pub samples: usize,
    /// Samples for validation; defaults to `samples`.
    pub eval_samples: Option<usize>,
    pub seed: u64,
    pub flags: AblationFlags,
    pub loss: LossWeights,
    pub augment: AugmentSpec,
    /// Epochs during which a frozen-by-default tokenizer still trains.
    pub tokenizer_warmup_epochs: usize,
    pub freeze_classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 5e-5,
            min_lr: 0.0,
            warmup_steps: 0,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            samples: 8,
            eval_samples: None,
            seed: 0,
            flags: AblationFlags::default(),
            loss: LossWeights::default(),
            augment: AugmentSpec::default(),
            tokenizer_warmup_epochs: 1,
            freeze_classifier: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.samples == 0 || self.eval_samples == Some(0) {
            return Err(Error::Config("train.samples and train.eval_samples must be >= 1".into()));
        }
        for (key, v) in [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{key} = {v} must be finite and >= 0")));
            }
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "train.grad_clip_norm = {} must be > 0",
                self.grad_clip_norm
            )));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn eval_samples(&self) -> usize {
        self.eval_samples.unwrap_or(self.samples)
    }
}

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

const VAL_STREAM: u64 = u64::MAX - 1;
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub nll: f64,
    pub align: f64,
    pub kl: f64,
    pub total: f64,
    pub align_theta: f64,
    pub align_scale: f64,
    pub align_shear: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub nll: f64,
    pub align: f64,
    pub kl: f64,
    pub total: f64,
    pub val_top1: Option<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub optimizer: AdamW,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epochs_done: 0,
            optimizer: AdamW::new(cfg.weight_decay),
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }
}

fn tokenizer_trainable(model: &Model, cfg: &TrainConfig, epoch: usize) -> bool {
    !model.config.tokenizer.frozen || epoch < cfg.tokenizer_warmup_epochs
}

fn check_flags(model: &Model, cfg: &TrainConfig) -> Result<()> {
    let Some(loc) = model.localizer() else {
        return Ok(());
    };
    let expected = model.config.clone().with_flags(&cfg.flags);
    if expected.localizer.as_ref() != Some(loc) {
        return Err(Error::Config(
            "train.flags disagree with the model's localizer architecture (decomposed_heads, probabilistic, conv_localizer)"
                .into(),
        ));
    }
    Ok(())
}

/// Gradient and loss terms of one example at `(epoch, index)`.
pub fn example_gradients(
    model: &Model,
    example: &Example,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(GradMap, LossBreakdown)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, index as u64]));
    let (image, truth) = augment_with_params(&example.image, &cfg.augment, &mut rng)?;
    let noise = model.draw_noise(cfg.samples, true, &mut rng)?;
    let tok = tokenizer_trainable(model, cfg, epoch);
    let freeze_cls = cfg.freeze_classifier;
    let tape = Tape::new();
    let p = Bound::bind(&tape, &model.params, |n| {
        if n.starts_with("tok.") {
            tok
        } else if n.starts_with("cls.") {
            !freeze_cls
        } else {
            true
        }
    });
    let fwd = model.forward_train(&tape, &p, &image, example.label, &truth, &noise, &cfg.loss, &cfg.flags, tok)?;
    if !fwd.total.item().is_finite() {
        let origin = match tape.first_non_finite() {
            Some((id, op)) => format!("first non-finite tensor is node {id} ({op})"),
            None => "no non-finite intermediate found".to_string(),
        };
        return Err(Error::NonFinite(format!(
            "loss {} at epoch {epoch}, example {index}; {origin}",
            fwd.total.item()
        )));
    }
    let grads = p.collect(&fwd.total.backward()?);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {name} at epoch {epoch}, example {index}"
        )));
    }
    Ok((grads, fwd.breakdown))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.nll += b.nll / n;
        m.align += b.align / n;
        m.kl += b.kl / n;
        m.total += b.total / n;
        for k in 0..3 {
            m.per_component_align[k] += b.per_component_align[k] / n;
        }
    }
    m
}

/// Top-1 accuracy with Monte-Carlo prediction; per-example seeds derive from
/// `seed` and the example index.
pub fn accuracy(model: &Model, examples: &[Example], samples: usize, seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[VAL_STREAM, i as u64]));
            let probs = model.predict_mc(&ex.image, samples, &mut rng)?;
            Ok(argmax(&probs) == ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the remaining epochs of `state` (a fresh run when `None`), calling
/// `on_epoch` after each one.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&Model, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    check_flags(model, cfg)?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for ex in train_set {
        model.validate_image(&ex.image)?;
        if ex.label >= model.config.num_classes {
            return Err(Error::invalid(format!("label {} out of range", ex.label)));
        }
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(cfg));
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_STREAM, epoch as u64])));
        let mut epoch_terms = Vec::with_capacity(train_set.len());
        let mut lr = cfg.base_lr;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = cosine_lr(cfg.base_lr, cfg.min_lr, step, total_steps, cfg.warmup_steps);
            let results: Vec<(GradMap, LossBreakdown)> = batch
                .par_iter()
                .map(|&i| example_gradients(model, &train_set[i], cfg, epoch, i))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = GradMap::new();
            let mut terms = Vec::with_capacity(batch.len());
            for (g, t) in results {
                for (name, v) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(v.data())
                            .for_each(|(a, x)| *a += x * scale),
                        None => {
                            grads.insert(name, v.map(|x| x * scale));
                        }
                    }
                }
                terms.push(t);
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
            state.optimizer.update(&mut model.params, &grads, lr)?;
            let m = mean_breakdown(&terms);
            state.steps.push(StepLog {
                epoch,
                step,
                lr,
                grad_norm,
                nll: m.nll,
                align: m.align,
                kl: m.kl,
                total: m.total,
                align_theta: m.per_component_align[0],
                align_scale: m.per_component_align[1],
                align_shear: m.per_component_align[2],
            });
            epoch_terms.extend(terms);
        }
        let m = mean_breakdown(&epoch_terms);
        let val_top1 = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(model, val_set, cfg.eval_samples(), cfg.seed)?)
        };
        state.epochs.push(EpochLog {
            epoch,
            lr,
            nll: m.nll,
            align: m.align,
            kl: m.kl,
            total: m.total,
            val_top1,
        });
        state.epochs_done = epoch + 1;
        on_epoch(model, &state)?;
    }
    Ok(state)
}
