//! Losses, AdamW with linear warmup and cosine decay, and the two training
//! loops: per-dataset L1 regression on augmented patches, and two-stream
//! pairwise training against pseudo-labels with the fidelity loss.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_patches, DatasetManifest, Patch, Split};
use crate::error::{Error, Result};
use crate::pseudolabel::{relative_prob, PairSample};
use crate::rng::{derive_seed, derived_rng};
use crate::scorer::{
    backward_accumulate, forward, init_params, ForwardTrace, ScorerConfig, ScorerParams,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patches_per_image: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Settings for a small network trained from scratch.
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            epochs: 30,
            ..Self::finetune()
        }
    }
}

impl TrainConfig {
    /// Fine-tuning recipe for a pretrained backbone.
    pub fn finetune() -> Self {
        Self {
            batch_size: 32,
            base_lr: 2e-5,
            min_lr: 1e-8,
            warmup_epochs: 2,
            warmup_start_lr: 5e-7,
            weight_decay: 5e-4,
            epochs: 30,
            patches_per_image: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_image == 0 {
            return bad("batch_size, epochs and patches_per_image must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be less than epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based global step: linear from `warmup_start_lr` to
/// `base_lr` over the warmup steps, then cosine from `base_lr` at the first
/// post-warmup step down to `min_lr` at the final step.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        let t = step as f64 / warmup as f64;
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * t;
    }
    let span = total.saturating_sub(warmup + 1);
    let tau = if span == 0 {
        0.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    config.min_lr
        + 0.5 * (config.base_lr - config.min_lr) * (1.0 + (std::f64::consts::PI * tau).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One AdamW step with bias-corrected moments and decoupled weight decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", params.len()),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!(
                "gradient[{i}] = {} at optimizer step {}",
                grads[i],
                state.t + 1
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powf(state.t as f64);
    let bc2 = 1.0 - state.beta2.powf(state.t as f64);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Mean absolute error and its gradient `sign(pred - label) / N` (zero on ties).
pub fn l1_loss(preds: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "l1 loss needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let grad = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let d = p - l;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Per-pair fidelity between target probability `p_hat` and model probability `p`.
pub fn fidelity(p_hat: f64, p: f64) -> f64 {
    1.0 - (p_hat * p).sqrt() - ((1.0 - p_hat) * (1.0 - p)).sqrt()
}

/// Mean fidelity loss and its gradient with respect to the model probabilities.
pub fn fidelity_loss(p_hat: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p_hat.is_empty() || p_hat.len() != p.len() {
        return Err(Error::invalid(format!(
            "fidelity loss needs equal non-empty inputs, got {} and {}",
            p_hat.len(),
            p.len()
        )));
    }
    if let Some(v) = p_hat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!(
            "target probability {v} outside [0, 1]"
        )));
    }
    if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::invalid(format!(
            "model probability {v} outside (0, 1)"
        )));
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let grad = p_hat
        .iter()
        .zip(p)
        .map(|(&t, &q)| {
            loss += fidelity(t, q);
            (-0.5 * (t / q).sqrt() + 0.5 * ((1.0 - t) / (1.0 - q)).sqrt()) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Fidelity of `p_hat` against `sigmoid(diff)` and its derivative in `diff`,
/// written so neither blows up when the sigmoid saturates.
pub fn fidelity_from_diff(p_hat: f64, diff: f64) -> (f64, f64) {
    let p = relative_prob(diff, 0.0);
    let q = relative_prob(0.0, diff);
    let a = (p_hat * p).sqrt();
    let b = ((1.0 - p_hat) * q).sqrt();
    (1.0 - a - b, -0.5 * a * q + 0.5 * b * p)
}

/// Probability that the first image is better, from the two stream scores.
pub fn model_pair_probability(score_x: f64, score_y: f64) -> f64 {
    relative_prob(score_x, score_y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

fn check_finite(v: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{stage} loss, epoch {epoch} batch {batch}"),
        })
    }
}

/// Sums per-sample gradients in index order.
fn reduce_in_order(len: usize, parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for g in parts {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

struct Optimizer<'a> {
    state: OptimState,
    config: &'a TrainConfig,
    steps_per_epoch: usize,
    step: usize,
}

impl<'a> Optimizer<'a> {
    fn new(len: usize, config: &'a TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            state: OptimState::new(len),
            config,
            steps_per_epoch,
            step: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut ScorerParams,
        grad: &[f64],
        epoch: usize,
        batch: usize,
    ) -> Result<f64> {
        let lr = lr_at(self.step, self.steps_per_epoch, self.config);
        adamw_step(
            &mut params.values,
            grad,
            &mut self.state,
            lr,
            self.config.weight_decay,
        )
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} (epoch {epoch} batch {batch})"),
            },
            other => other,
        })?;
        self.step += 1;
        Ok(lr)
    }
}

/// Single-dataset training on augmented patches that inherit their image's label.
///
/// Each epoch shuffles the training images with the stream keyed
/// `"epoch/<e>"`, expands every image into `patches_per_image` random
/// (possibly mirrored) patches, and walks the patch list in batches.
pub fn train_single(
    manifest: &DatasetManifest,
    split: &Split,
    scorer_config: &ScorerConfig,
    config: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<ScorerParams> {
    config.validate()?;
    scorer_config.validate()?;
    if split.train_ids.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut train: Vec<(&crate::dataset::ImageRecord, f64)> =
        Vec::with_capacity(split.train_ids.len());
    for id in &split.train_ids {
        let rec = manifest
            .record(id)
            .ok_or_else(|| Error::MissingImage(id.clone()))?;
        let label = manifest
            .rescaled()
            .and_then(|m| m.get(id).copied())
            .ok_or_else(|| {
                Error::invalid(format!("manifest {} has no rescaled labels", manifest.name))
            })?;
        train.push((rec, label));
    }

    let mut params = init_params(scorer_config, derive_seed(config.seed, "init"))?;
    let n_patches = train.len() * config.patches_per_image;
    let steps_per_epoch = n_patches.div_ceil(config.batch_size);
    let mut opt = Optimizer::new(params.len(), config, steps_per_epoch);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = derived_rng(config.seed, &format!("epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut patches: Vec<(Patch, f64)> = Vec::with_capacity(n_patches);
        for &i in &order {
            let (rec, label) = train[i];
            for p in sample_patches(
                rec,
                config.patches_per_image,
                scorer_config.patch_size,
                true,
                &mut rng,
            )? {
                patches.push((p, label));
            }
        }

        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, batch) in patches.chunks(config.batch_size).enumerate() {
            let (loss, grad) = l1_batch_gradient(&params, batch)?;
            check_finite(loss, "single", epoch, b)?;
            lr = opt.step(&mut params, &grad, epoch, b)?;
            epoch_loss += loss * batch.len() as f64;
        }
        log(&EpochLog {
            stage: "single".into(),
            epoch,
            lr,
            loss: epoch_loss / n_patches as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(params)
}

/// Mean L1 loss of one batch of labelled patches and its parameter gradient.
pub fn l1_batch_gradient(params: &ScorerParams, batch: &[(Patch, f64)]) -> Result<(f64, Vec<f64>)> {
    let traced: Vec<(f64, ForwardTrace)> = batch
        .par_iter()
        .map(|(p, _)| forward(params, p))
        .collect::<Result<_>>()?;
    let preds: Vec<f64> = traced.iter().map(|(s, _)| *s).collect();
    let labels: Vec<f64> = batch.iter().map(|(_, l)| *l).collect();
    let (loss, dpred) = l1_loss(&preds, &labels)?;
    let parts: Vec<Vec<f64>> = traced
        .par_iter()
        .zip(&dpred)
        .map(|((_, t), &d)| {
            let mut g = vec![0.0; params.len()];
            backward_accumulate(t, params, d, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok((loss, reduce_in_order(params.len(), parts)))
}

fn lookup<'a>(crops: &'a BTreeMap<String, Patch>, id: &str) -> Result<&'a Patch> {
    crops
        .get(id)
        .ok_or_else(|| Error::MissingImage(id.to_string()))
}

/// Loss and gradient of one batch of pairs through the shared-weight streams.
/// The gradient of each pair is `dL/dd * (grad s_x - grad s_y)` with
/// `d = s_x - s_y`.
pub fn pair_batch_gradient(
    params: &ScorerParams,
    pairs: &[PairSample],
    crops: &BTreeMap<String, Patch>,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair batch"));
    }
    let n = pairs.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = pairs
        .par_iter()
        .map(|pair| {
            if !(pair.p_r > 0.0 && pair.p_r < 1.0) {
                return Err(Error::invalid(format!(
                    "pseudo-label {} for ({}, {}) outside (0, 1)",
                    pair.p_r, pair.x_id, pair.y_id
                )));
            }
            let (sx, tx) = forward(params, lookup(crops, &pair.x_id)?)?;
            let (sy, ty) = forward(params, lookup(crops, &pair.y_id)?)?;
            let (loss, d_diff) = fidelity_from_diff(pair.p_r, sx - sy);
            let mut g = vec![0.0; params.len()];
            backward_accumulate(&tx, params, d_diff / n, &mut g)?;
            backward_accumulate(&ty, params, -d_diff / n, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grad = reduce_in_order(params.len(), parts.into_iter().map(|(_, g)| g).collect());
    Ok((loss, grad))
}

/// Mean fidelity loss of `params` over a pair list.
pub fn pairwise_loss(
    params: &ScorerParams,
    pairs: &[PairSample],
    crops: &BTreeMap<String, Patch>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair list"));
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|pair| {
            let sx = forward(params, lookup(crops, &pair.x_id)?)?.0;
            let sy = forward(params, lookup(crops, &pair.y_id)?)?.0;
            Ok(fidelity_from_diff(pair.p_r, sx - sy).0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Two-stream training on pseudo-labelled pairs from a fresh initialization.
/// `crops` holds the fixed preprocessed patch of every image a pair refers to.
/// Each epoch shuffles the pair order with the stream keyed `"epoch/<e>"`.
pub fn train_pairwise(
    pairs: &[PairSample],
    crops: &BTreeMap<String, Patch>,
    scorer_config: &ScorerConfig,
    config: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<ScorerParams> {
    config.validate()?;
    scorer_config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to train on"));
    }
    let mut params = init_params(scorer_config, derive_seed(config.seed, "init"))?;
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let mut opt = Optimizer::new(params.len(), config, steps_per_epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut batch: Vec<PairSample> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = derived_rng(config.seed, &format!("epoch/{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| pairs[i].clone()));
            let (loss, grad) = pair_batch_gradient(&params, &batch, crops)?;
            check_finite(loss, "pairwise", epoch, b)?;
            lr = opt.step(&mut params, &grad, epoch, b)?;
            epoch_loss += loss * idx.len() as f64;
        }
        log(&EpochLog {
            stage: "pairwise".into(),
            epoch,
            lr,
            loss: epoch_loss / pairs.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(params)
}
