//! MixUp and SpecAugment for standardized spectrograms.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mixup_alpha: f64,
    pub mixup_prob: f64,
    pub n_time_masks: usize,
    pub time_mask_size: usize,
    pub n_freq_masks: usize,
    pub freq_mask_size: usize,
    /// Probability that each configured mask is applied.
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 2.5,
            mixup_prob: 0.5,
            n_time_masks: 2,
            time_mask_size: 8,
            n_freq_masks: 1,
            freq_mask_size: 8,
            mask_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// All augmentation switched off.
    pub fn disabled() -> Self {
        Self {
            mixup_prob: 0.0,
            mask_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::config("mixup_alpha must be > 0"));
        }
        for (name, p) in [("mixup_prob", self.mixup_prob), ("mask_prob", self.mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda<G: Rng + ?Sized>(alpha: f64, rng: &mut G) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("beta({alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// `(lambda * a + (1 - lambda) * b, lambda * ya + (1 - lambda) * yb)`.
///
/// Equal labels are returned unchanged (no rounding drift).
pub fn mix_values(a: &Array2<f32>, b: &Array2<f32>, ya: f64, yb: f64, lambda: f64) -> Result<(Array2<f32>, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("mixup of {:?} with {:?}", a.dim(), b.dim())));
    }
    if lambda == 1.0 {
        return Ok((a.clone(), ya));
    }
    let l = lambda as f32;
    let mixed = ndarray::Zip::from(a).and(b).map_collect(|&x, &y| l * x + (1.0 - l) * y);
    let label = if ya == yb { ya } else { lambda * ya + (1.0 - lambda) * yb };
    Ok((mixed, label))
}

/// MixUp outcome; `lambda` is `None` when the draw skipped mixing.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub values: Array2<f32>,
    pub label: f64,
    pub lambda: Option<f64>,
}

/// With probability `mixup_prob` mixes `a` with `b`; otherwise returns `a`.
pub fn mixup_values<G: Rng + ?Sized>(
    a: &Array2<f32>,
    b: &Array2<f32>,
    ya: f64,
    yb: f64,
    cfg: &AugmentConfig,
    rng: &mut G,
) -> Result<Mixed> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("mixup of {:?} with {:?}", a.dim(), b.dim())));
    }
    if rng.random::<f64>() >= cfg.mixup_prob {
        return Ok(Mixed {
            values: a.clone(),
            label: ya,
            lambda: None,
        });
    }
    let lambda = sample_lambda(cfg.mixup_alpha, rng)?;
    let (values, label) = mix_values(a, b, ya, yb, lambda)?;
    Ok(Mixed {
        values,
        label,
        lambda: Some(lambda),
    })
}

pub fn mixup<G: Rng + ?Sized>(
    a: &MelSpectrogram,
    b: &MelSpectrogram,
    ya: f64,
    yb: f64,
    cfg: &AugmentConfig,
    rng: &mut G,
) -> Result<(MelSpectrogram, f64)> {
    let m = mixup_values(&a.values, &b.values, ya, yb, cfg, rng)?;
    Ok((
        MelSpectrogram {
            values: m.values,
            config: a.config.clone(),
            source_id: a.source_id.clone(),
        },
        m.label,
    ))
}

/// Start offsets of the masks that fired; skipped masks are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub time_starts: Vec<usize>,
    pub freq_starts: Vec<usize>,
    pub time_size: usize,
    pub freq_size: usize,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.time_starts.is_empty() && self.freq_starts.is_empty()
    }
}

/// Draws which masks fire and where, for an `n_mels x n_frames` input.
pub fn plan_masks<G: Rng + ?Sized>(
    n_mels: usize,
    n_frames: usize,
    cfg: &AugmentConfig,
    rng: &mut G,
) -> Result<MaskPlan> {
    if cfg.time_mask_size > n_frames {
        return Err(Error::config(format!(
            "time mask {} wider than {n_frames} frames",
            cfg.time_mask_size
        )));
    }
    if cfg.freq_mask_size > n_mels {
        return Err(Error::config(format!(
            "frequency mask {} taller than {n_mels} bins",
            cfg.freq_mask_size
        )));
    }
    let mut plan = MaskPlan {
        time_size: cfg.time_mask_size,
        freq_size: cfg.freq_mask_size,
        ..Default::default()
    };
    for _ in 0..cfg.n_time_masks {
        if rng.random::<f64>() < cfg.mask_prob {
            plan.time_starts.push(rng.random_range(0..=n_frames - cfg.time_mask_size));
        }
    }
    for _ in 0..cfg.n_freq_masks {
        if rng.random::<f64>() < cfg.mask_prob {
            plan.freq_starts.push(rng.random_range(0..=n_mels - cfg.freq_mask_size));
        }
    }
    Ok(plan)
}

/// Zeroes the planned blocks in place.
pub fn apply_masks(values: &mut Array2<f32>, plan: &MaskPlan) {
    for &t0 in &plan.time_starts {
        values.slice_mut(s![.., t0..t0 + plan.time_size]).fill(0.0);
    }
    for &f0 in &plan.freq_starts {
        values.slice_mut(s![f0..f0 + plan.freq_size, ..]).fill(0.0);
    }
}

pub fn spec_augment_values<G: Rng + ?Sized>(
    values: &Array2<f32>,
    cfg: &AugmentConfig,
    rng: &mut G,
) -> Result<(Array2<f32>, MaskPlan)> {
    let plan = plan_masks(values.nrows(), values.ncols(), cfg, rng)?;
    let mut out = values.clone();
    apply_masks(&mut out, &plan);
    Ok((out, plan))
}

/// Fixed-width time and frequency masking.
pub fn spec_augment<G: Rng + ?Sized>(
    spec: &MelSpectrogram,
    cfg: &AugmentConfig,
    rng: &mut G,
) -> Result<MelSpectrogram> {
    let (values, _) = spec_augment_values(&spec.values, cfg, rng)?;
    Ok(MelSpectrogram {
        values,
        config: spec.config.clone(),
        source_id: spec.source_id.clone(),
    })
}
