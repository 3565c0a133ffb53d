//! Loss, learning-rate schedule, AdamW and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mixup_values, spec_augment_values, AugmentConfig};
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataio::LogMelExample;
use crate::error::{Error, Result};
use crate::evaluation::{eer, f1_sens_spec, confusion, ScoredExample};
use crate::frontend::{fit_frames, standardize, FrameMode, SpectrogramConfig};
use crate::model::{self, ModelConfig, ModelParams};
use crate::params::NamedTensors;
use crate::real::Real;

/// Ratio of the final cosine learning rate to `base_lr`.
pub const MIN_LR_RATIO: f64 = 1e-2;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Peak per-step learning rate (not a published value).
    pub base_lr: f64,
    /// Not a published value either.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub betas: (f64, f64),
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            base_lr: 3e-4,
            weight_decay: 0.05,
            batch_size: 16,
            label_smoothing: 0.02,
            betas: (0.9, 0.999),
            grad_clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 0.5)"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs exceeds epochs"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be > 0"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("weight_decay must be >= 0 and grad_clip_norm > 0"));
        }
        Ok(())
    }
}

/// Smoothed binary cross-entropy and its derivative with respect to the logit.
///
/// `y' = y (1 - eps) + eps / 2`, `loss = max(z, 0) - z y' + ln(1 + e^{-|z|})`.
pub fn bce_smoothed<R: Real>(logit: R, y: f64, eps: f64) -> (R, R) {
    let yp = R::lit(y * (1.0 - eps) + eps / 2.0);
    let z = logit;
    let loss = z.max(R::zero()) - z * yp + (-z.abs()).exp().ln_1p();
    (loss, model::sigmoid(z) - yp)
}

/// Linear warmup from 0, then cosine decay reaching `base_lr * MIN_LR_RATIO`
/// at the last step (`epochs * steps_per_epoch - 1`).
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::config("steps_per_epoch must be > 0"));
    }
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return Ok(cfg.base_lr * step as f64 / warmup as f64);
    }
    let decay_steps = total.saturating_sub(1).saturating_sub(warmup);
    if decay_steps == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
    let min_lr = cfg.base_lr * MIN_LR_RATIO;
    Ok(min_lr + 0.5 * (cfg.base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<R> {
    pub m: ModelParams<R>,
    pub v: ModelParams<R>,
    pub step: u64,
}

impl<R: Real> AdamWState<R> {
    pub fn new(params: &ModelParams<R>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor; `step` is the 1-based step count.
///
/// Decay is decoupled and applied first, `theta -= lr * wd * theta`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<R: Real>(
    mut theta: ArrayViewMutD<R>,
    grad: ArrayViewD<R>,
    mut m: ArrayViewMutD<R>,
    mut v: ArrayViewMutD<R>,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    step: u64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let shrink = R::lit(1.0 - lr * weight_decay);
    let (b1r, b2r) = (R::lit(b1), R::lit(b2));
    let (lr_r, c1r, c2r, eps) = (R::lit(lr), R::lit(c1), R::lit(c2), R::lit(ADAM_EPS));
    Zip::from(&mut theta)
        .and(&grad)
        .and(&mut m)
        .and(&mut v)
        .for_each(|p, &g, m, v| {
            *p = *p * shrink;
            *m = b1r * *m + (R::one() - b1r) * g;
            *v = b2r * *v + (R::one() - b2r) * g * g;
            let m_hat = *m / c1r;
            let v_hat = *v / c2r;
            *p = *p - lr_r * m_hat / (v_hat.sqrt() + eps);
        });
}

/// Whether a tensor is decayed: matrices and higher yes; layer-norm
/// parameters and biases (rank <= 1) no.
pub fn is_decayed(ndim: usize) -> bool {
    ndim >= 2
}

pub fn adamw_step<R: Real>(
    params: &mut ModelParams<R>,
    grads: &ModelParams<R>,
    state: &mut AdamWState<R>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let step = state.step;
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        let wd = if is_decayed(p.ndim()) { cfg.weight_decay } else { 0.0 };
        adamw_update(p, g, m, v, lr, wd, cfg.betas, step);
    }
}

pub fn grad_norm<R: Real>(grads: &ModelParams<R>) -> f64 {
    let mut s = 0.0;
    grads.visit("", &mut |_, t| s += t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>());
    s.sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<R: Real>(grads: &mut ModelParams<R>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let k = R::lit(max_norm / norm);
        grads.visit_mut("", &mut |_, mut t| t.mapv_inplace(|v| v * k));
    }
    norm
}

/// Smoothed-BCE loss of one example and the gradient of every parameter.
pub fn loss_and_grad<R: Real>(
    x: ArrayView2<R>,
    y: f64,
    params: &ModelParams<R>,
    config: &ModelConfig,
    label_smoothing: f64,
) -> Result<(f64, ModelParams<R>)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_grad::<R, ChaCha8Rng>(x, y, params, config, label_smoothing, 1.0, &mut grads, None)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("gradient of {name}"),
        });
    }
    Ok((loss, grads))
}

/// Adds `weight * d loss / d params` into `grads`; returns the unweighted loss.
#[allow(clippy::too_many_arguments)]
fn accumulate_grad<R: Real, G: rand::Rng + ?Sized>(
    x: ArrayView2<R>,
    y: f64,
    params: &ModelParams<R>,
    config: &ModelConfig,
    label_smoothing: f64,
    weight: f64,
    grads: &mut ModelParams<R>,
    dropout_rng: Option<&mut G>,
) -> Result<f64> {
    let cache = model::forward_cached(x, params, config, dropout_rng)?;
    let (loss, dlogit) = bce_smoothed(cache.logit(), y, label_smoothing);
    model::backward(&cache, params, dlogit * R::lit(weight), grads, &config.encoder);
    Ok(loss.as_f64())
}

/// Mean loss over a batch and the gradient of that mean.
pub fn batch_loss_and_grad<R: Real>(
    batch: &[(Array2<R>, f64)],
    params: &ModelParams<R>,
    config: &ModelConfig,
    label_smoothing: f64,
) -> Result<(f64, ModelParams<R>)> {
    batch_grad_inner::<R, ChaCha8Rng>(batch, params, config, label_smoothing, None)
}

fn batch_grad_inner<R: Real, G: rand::Rng + ?Sized>(
    batch: &[(Array2<R>, f64)],
    params: &ModelParams<R>,
    config: &ModelConfig,
    label_smoothing: f64,
    mut dropout_rng: Option<&mut G>,
) -> Result<(f64, ModelParams<R>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (x, y) in batch {
        total += accumulate_grad(
            x.view(),
            *y,
            params,
            config,
            label_smoothing,
            w,
            &mut grads,
            dropout_rng.as_deref_mut(),
        )?;
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("gradient of {name}"),
        });
    }
    Ok((total * w, grads))
}

/// Worst relative error per tensor between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Denominator floor of the relative error, for entries whose true gradient
/// is (numerically) zero.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares [`loss_and_grad`] against central differences with step `h` on
/// every scalar parameter. `rel = |a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradient_check(
    x: ArrayView2<f64>,
    y: f64,
    params: &ModelParams<f64>,
    config: &ModelConfig,
    label_smoothing: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(x, y, params, config, label_smoothing)?;
    let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
        let z = model::forward_values(x, p, config)?;
        Ok(bce_smoothed(z, y, label_smoothing).0)
    };
    let mut probe = params.clone();
    let names: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..len {
            let orig = nth_scalar(&mut probe, ti, j, None);
            nth_scalar(&mut probe, ti, j, Some(orig + h));
            let up = loss_of(&probe)?;
            nth_scalar(&mut probe, ti, j, Some(orig - h));
            let down = loss_of(&probe)?;
            nth_scalar(&mut probe, ti, j, Some(orig));
            let numeric = (up - down) / (2.0 * h);
            let a = grads[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max(rel);
        }
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport { per_tensor })
}

/// Reads (and optionally overwrites) scalar `j` of tensor `ti`.
fn nth_scalar(p: &mut ModelParams<f64>, ti: usize, j: usize, set: Option<f64>) -> f64 {
    let mut out = 0.0;
    let mut k = 0;
    p.visit_mut("", &mut |_, mut t| {
        if k == ti {
            let cell = t.iter_mut().nth(j).expect("index in range");
            out = *cell;
            if let Some(v) = set {
                *cell = v;
            }
        }
        k += 1;
    });
    out
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub valid_f1: f64,
    pub valid_eer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_params: ModelParams<R>,
    pub final_params: ModelParams<R>,
    pub best_checkpoint: Option<PathBuf>,
}

impl<R> TrainOutcome<R> {
    pub fn best_f1(&self) -> f64 {
        self.history[self.best_epoch - 1].valid_f1
    }
}

/// Everything the loop needs beyond the data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub spectrogram: SpectrogramConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    /// Checkpoints and `metrics.csv` go here when set.
    pub out_dir: Option<PathBuf>,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if (self.model.n_mels, self.model.n_frames) != (self.spectrogram.n_mels, self.spectrogram.target_frames) {
            return Err(Error::config(format!(
                "model input ({}, {}) differs from spectrogram output ({}, {})",
                self.model.n_mels, self.model.n_frames, self.spectrogram.n_mels, self.spectrogram.target_frames
            )));
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Fits and standardizes a log-mel into model input.
pub fn prepare<R: Real, G: rand::Rng + ?Sized>(
    log_mel: &Array2<f64>,
    target_frames: usize,
    mode: FrameMode,
    rng: &mut G,
) -> Array2<R> {
    let mut x = fit_frames(log_mel, target_frames, mode, rng);
    standardize(&mut x);
    x.mapv(R::lit)
}

/// Eval-mode scores (P(fake)) for every example.
pub fn predict<R: Real>(
    examples: &[LogMelExample],
    params: &ModelParams<R>,
    config: &ModelConfig,
) -> Result<Vec<ScoredExample>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    examples
        .iter()
        .map(|e| {
            let x = prepare::<R, _>(&e.log_mel, config.n_frames, FrameMode::Eval, &mut unused);
            let z = model::forward_values(x.view(), params, config)?;
            Ok(ScoredExample {
                id: e.id(),
                score: model::sigmoid(z).as_f64(),
                label: e.entry.label,
                partitions: e.entry.partitions(),
            })
        })
        .collect()
}

fn validation_metrics(scores: &[ScoredExample]) -> (f64, Option<f64>) {
    let rates = f1_sens_spec(&confusion(scores, 0.5));
    (rates.f1, eer(scores).ok())
}

/// Trains from scratch. Fully determined by `setup.train.seed` (single
/// thread). On divergence the best checkpoint written so far stays on disk.
pub fn train_loop<R: Real>(
    train: &[LogMelExample],
    valid: &[LogMelExample],
    setup: &TrainSetup,
) -> Result<TrainOutcome<R>> {
    setup.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let tc = &setup.train;
    let cfg = &setup.model;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = ModelParams::<R>::init(cfg, &mut rng)?;
    let mut opt = AdamWState::new(&params);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);

    let mut metrics = match &setup.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
            writeln!(w, "epoch,lr,train_loss,valid_f1,valid_eer")?;
            Some(w)
        }
        None => None,
    };
    let ckpt_path = setup.out_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, ModelParams<R>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, steps_per_epoch, tc)?;
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = augment_batch::<R>(train, chunk, setup, &mut rng)?;
            let (loss, mut grads) = batch_grad_inner(&batch, &params, cfg, tc.label_smoothing, Some(&mut rng))
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step: bi },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: bi });
            }
            if let Some(c) = tc.grad_clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut opt, lr_at(step, steps_per_epoch, tc)?, tc);
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        if let Some(name) = params.first_non_finite() {
            log::warn!("parameter {name} became non-finite");
            return Err(Error::Diverged {
                epoch,
                step: steps_per_epoch - 1,
            });
        }

        let scores = predict(valid, &params, cfg)?;
        let (valid_f1, valid_eer) = validation_metrics(&scores);
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / train.len() as f64,
            valid_f1,
            valid_eer,
        };
        log::info!(
            "epoch {epoch:>3} lr {:.3e} loss {:.5} valid F1 {:.4} EER {}",
            record.lr,
            record.train_loss,
            record.valid_f1,
            record.valid_eer.map_or("-".into(), |e| format!("{e:.4}"))
        );
        if let Some(w) = metrics.as_mut() {
            writeln!(
                w,
                "{},{:e},{:.12},{:.6},{}",
                epoch,
                record.lr,
                record.train_loss,
                record.valid_f1,
                record.valid_eer.map_or(String::new(), |e| format!("{e:.6}"))
            )?;
            w.flush()?;
        }
        if best.as_ref().is_none_or(|(_, f1, _)| valid_f1 > *f1) {
            if let Some(path) = &ckpt_path {
                let meta = CheckpointMeta {
                    model: cfg.clone(),
                    spectrogram: setup.spectrogram.clone(),
                    extra: serde_json::json!({
                        "epoch": epoch,
                        "valid_f1": valid_f1,
                        "valid_eer": valid_eer,
                        "train": tc,
                        "augment": setup.augment,
                    }),
                };
                checkpoint::save(path, &meta, &params)?;
            }
            best = Some((epoch, valid_f1, params.clone()));
        }
        history.push(record);
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_params,
        final_params: params,
        best_checkpoint: ckpt_path,
    })
}

/// Train-mode crops, SpecAugment per example, then MixUp against an in-batch
/// permutation.
fn augment_batch<R: Real>(
    data: &[LogMelExample],
    idx: &[usize],
    setup: &TrainSetup,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Array2<R>, f64)>> {
    let frames = setup.model.n_frames;
    let mut xs = Vec::with_capacity(idx.len());
    for &i in idx {
        let x = prepare::<f32, _>(&data[i].log_mel, frames, FrameMode::Train, rng);
        let (x, _) = spec_augment_values(&x, &setup.augment, rng)?;
        xs.push((x, data[i].entry.label.target()));
    }
    let mut perm: Vec<usize> = (0..xs.len()).collect();
    perm.shuffle(rng);
    let mut out = Vec::with_capacity(xs.len());
    for (i, &j) in perm.iter().enumerate() {
        let (a, ya) = &xs[i];
        let (b, yb) = &xs[j];
        let m = mixup_values(a, b, *ya, *yb, &setup.augment, rng)?;
        out.push((m.values.mapv(|v| R::lit(v as f64)), m.label));
    }
    Ok(out)
}

/// Scores a checkpoint's model on a set of examples.
pub fn evaluate_checkpoint(path: &Path, examples: &[LogMelExample]) -> Result<Vec<ScoredExample>> {
    let ck = checkpoint::load::<f32>(path)?;
    predict(examples, &ck.params, &ck.meta.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_points() {
        let (l, _) = bce_smoothed(0.0f64, 1.0, 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        for y in [0.0, 0.3, 1.0] {
            let (l, _) = bce_smoothed(0.0f64, y, 0.02);
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let (l, g) = bce_smoothed(800.0f64, 1.0, 0.0);
        assert_eq!(l, 0.0);
        assert_eq!(g, 0.0);
        let (l, _) = bce_smoothed(-800.0f64, 1.0, 0.0);
        assert_eq!(l, 800.0);
    }

    #[test]
    fn bce_gradient_matches_difference() {
        for &z in &[-4.0f64, -0.3, 0.0, 1.7] {
            let h = 1e-6;
            let fd = (bce_smoothed(z + h, 0.8, 0.02).0 - bce_smoothed(z - h, 0.8, 0.02).0) / (2.0 * h);
            assert!((fd - bce_smoothed(z, 0.8, 0.02).1).abs() < 1e-9);
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 7;
        assert_eq!(lr_at(0, spe, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(5 * spe, spe, &cfg).unwrap(), cfg.base_lr);
        let last = lr_at(50 * spe - 1, spe, &cfg).unwrap();
        assert!((last - cfg.base_lr * 1e-2).abs() < 1e-12);
        assert!(lr_at(3, 0, &cfg).is_err());
    }

    #[test]
    fn lr_continuous_at_junction() {
        let cfg = TrainConfig::default();
        let spe = 100;
        let j = 5 * spe;
        let before = lr_at(j - 1, spe, &cfg).unwrap();
        let at = lr_at(j, spe, &cfg).unwrap();
        let after = lr_at(j + 1, spe, &cfg).unwrap();
        assert!((at - before).abs() <= cfg.base_lr / j as f64 + 1e-15);
        assert!((at - after).abs() < 1e-8);
    }

    #[test]
    fn adamw_single_step_textbook() {
        let mut theta = ndarray::arr1(&[1.0f64]).into_dyn();
        let g = ndarray::arr1(&[1.0f64]).into_dyn();
        let mut m = ndarray::arr1(&[0.0f64]).into_dyn();
        let mut v = m.clone();
        adamw_update(theta.view_mut(), g.view(), m.view_mut(), v.view_mut(), 0.1, 0.0, (0.9, 0.999), 1);
        // m_hat = 0.1 / 0.1 = 1, v_hat = 0.001 / 0.001 = 1
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_pure_decay_and_fixed_point() {
        let mut theta = ndarray::arr2(&[[2.0f64, -3.0]]).into_dyn();
        let g = ndarray::Array::zeros(theta.raw_dim());
        let mut m = g.clone();
        let mut v = g.clone();
        adamw_update(theta.view_mut(), g.view(), m.view_mut(), v.view_mut(), 0.1, 0.1, (0.9, 0.999), 1);
        assert!((theta[[0, 0]] - 2.0 * 0.99).abs() < 1e-15);
        assert!((theta[[0, 1]] + 3.0 * 0.99).abs() < 1e-15);
        let before = theta.clone();
        adamw_update(theta.view_mut(), g.view(), m.view_mut(), v.view_mut(), 0.1, 0.0, (0.9, 0.999), 2);
        assert_eq!(theta, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            label_smoothing: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_epochs: 60,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
