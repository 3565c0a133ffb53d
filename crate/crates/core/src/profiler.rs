//! Analytic cost model (FLOPs, activations, memory) and measured
//! single-threaded throughput.
//!
//! FLOPs count a multiply-add as two operations. Per encoder layer with `n`
//! tokens, width `D` and MLP width `H`:
//!
//! | term              | FLOPs          |
//! |-------------------|----------------|
//! | Q, K, V, O        | `8 n D^2`      |
//! | scores + mixing   | `4 n^2 D`      |
//! | MLP               | `4 n D H`      |
//!
//! Tokenizers: `2 n_t D F t + 2 n_f D T f` (spectro-temporal) or
//! `2 n D p^2` (square patches). Head: `2 D`. Norms, softmax and GELU are
//! ignored.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, count_params, FrontendConfig, ModelConfig, ModelParams};
use crate::real::Real;
use crate::tokenizer::spectttra_token_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub tokenizer: u64,
    pub projections: u64,
    /// The quadratic attention term (scores and weighted sum).
    pub attention: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.projections + self.attention + self.mlp + self.head
    }
}

pub fn analytic_flops(cfg: &ModelConfig) -> Result<FlopCount> {
    cfg.validate()?;
    let n = cfg.n_tokens()? as u64;
    let enc = &cfg.encoder;
    let (d, h, l) = (enc.embed_dim as u64, enc.mlp_hidden() as u64, enc.n_layers as u64);
    let (f, t) = (cfg.n_mels as u64, cfg.n_frames as u64);
    let tokenizer = match &cfg.frontend {
        FrontendConfig::Spectttra(c) => {
            let (nt, nf) = spectttra_token_count(cfg.n_mels, cfg.n_frames, c)?;
            let nt = if c.temporal_enabled { nt as u64 } else { 0 };
            let nf = if c.spectral_enabled { nf as u64 } else { 0 };
            2 * nt * d * f * c.t as u64 + 2 * nf * d * t * c.f as u64
        }
        FrontendConfig::Vit(p) => 2 * n * d * (p.p * p.p) as u64,
    };
    Ok(FlopCount {
        tokenizer,
        projections: l * 8 * n * d * d,
        attention: l * 4 * n * n * d,
        mlp: l * 4 * n * d * h,
        head: 2 * d,
    })
}

/// Scalars materialized by one forward pass: the token matrix, each layer's
/// attention output, MLP hidden and block output, the pooled vector and the
/// logit. Attention maps are accounted separately in [`peak_bytes_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActivationCount {
    pub tokenizer: u64,
    pub encoder: u64,
    pub head: u64,
}

impl ActivationCount {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.encoder + self.head
    }
}

pub fn count_activations(cfg: &ModelConfig) -> Result<ActivationCount> {
    cfg.validate()?;
    let n = cfg.n_tokens()? as u64;
    let enc = &cfg.encoder;
    let (d, h) = (enc.embed_dim as u64, enc.mlp_hidden() as u64);
    Ok(ActivationCount {
        tokenizer: n * d,
        encoder: enc.n_layers as u64 * (n * d + n * h + n * d),
        head: d + 1,
    })
}

/// `batch * elem_bytes * (activations + heads * n^2)`: the activation set
/// plus one layer's attention maps.
pub fn peak_bytes_estimate(cfg: &ModelConfig, elem_bytes: usize, batch: usize) -> Result<u64> {
    let n = cfg.n_tokens()? as u64;
    let act = count_activations(cfg)?.total();
    Ok(batch as u64 * elem_bytes as u64 * (act + cfg.encoder.n_heads as u64 * n * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimingProtocol {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub batch_size: usize,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self {
            warmup_runs: 5,
            timed_runs: 100,
            batch_size: 1,
        }
    }
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub protocol: TimingProtocol,
    /// Mean wall time of one forward pass.
    pub mean_secs: f64,
    /// Forward calls folded into each timed sample (raised when a single call
    /// is too short for the clock).
    pub calls_per_sample: usize,
    pub timer_resolution_secs: f64,
    /// Seconds of audio processed per wall-clock second.
    pub audio_per_second: f64,
}

/// Times inference forward passes on one input (batch size 1, calling
/// thread only).
pub fn measure_speed<R: Real>(
    params: &ModelParams<R>,
    cfg: &ModelConfig,
    input: ArrayView2<R>,
    audio_secs: f64,
    protocol: TimingProtocol,
) -> Result<SpeedReport> {
    if protocol.batch_size != 1 {
        return Err(Error::config("only batch size 1 is measured"));
    }
    if protocol.timed_runs == 0 {
        return Err(Error::config("timed_runs must be > 0"));
    }
    for _ in 0..protocol.warmup_runs {
        std::hint::black_box(model::forward_values(input, params, cfg)?);
    }
    let res = timer_resolution();
    let t0 = Instant::now();
    std::hint::black_box(model::forward_values(input, params, cfg)?);
    let once = t0.elapsed();
    let mut calls = 1usize;
    if once < res * 100 {
        calls = ((res * 100).as_secs_f64() / once.as_secs_f64().max(1e-12)).ceil() as usize;
        log::warn!(
            "forward pass ({:?}) is close to the timer resolution ({:?}); folding {calls} calls per sample",
            once,
            res
        );
    }
    let mut total = Duration::ZERO;
    for _ in 0..protocol.timed_runs {
        let t = Instant::now();
        for _ in 0..calls {
            std::hint::black_box(model::forward_values(input, params, cfg)?);
        }
        total += t.elapsed();
    }
    let mean_secs = total.as_secs_f64() / (protocol.timed_runs * calls) as f64;
    Ok(SpeedReport {
        protocol,
        mean_secs,
        calls_per_sample: calls,
        timer_resolution_secs: res.as_secs_f64(),
        audio_per_second: audio_secs / mean_secs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub available_cpus: usize,
    pub threads_used: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            available_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads_used: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub label: String,
    pub n_mels: usize,
    pub n_frames: usize,
    pub n_tokens: usize,
    pub params: usize,
    pub flops: FlopCount,
    pub flops_total: u64,
    pub flops_attention: u64,
    pub activations: u64,
    pub peak_bytes_estimate: u64,
    pub speed: Option<SpeedReport>,
    pub machine: MachineInfo,
}

/// Analytic report; when `timing` is set the model is also instantiated
/// (seeded random weights and input) and timed in `f32`.
pub fn profile(cfg: &ModelConfig, audio_secs: f64, timing: Option<TimingProtocol>, seed: u64) -> Result<ProfileReport> {
    let flops = analytic_flops(cfg)?;
    let speed = match timing {
        Some(protocol) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ModelParams::<f32>::init(cfg, &mut rng)?;
            let x: Array2<f32> = crate::nn::normal((cfg.n_mels, cfg.n_frames), 1.0, &mut rng);
            Some(measure_speed(&params, cfg, x.view(), audio_secs, protocol)?)
        }
        None => None,
    };
    Ok(ProfileReport {
        label: cfg.frontend.label(),
        n_mels: cfg.n_mels,
        n_frames: cfg.n_frames,
        n_tokens: cfg.n_tokens()?,
        params: count_params(cfg)?,
        flops,
        flops_total: flops.total(),
        flops_attention: flops.attention,
        activations: count_activations(cfg)?.total(),
        peak_bytes_estimate: peak_bytes_estimate(cfg, 4, 1)?,
        speed,
        machine: MachineInfo::current(),
    })
}

pub fn write_csv<W: Write>(reports: &[ProfileReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "n_mels",
        "n_frames",
        "n_tokens",
        "params",
        "flops_total",
        "flops_attention",
        "activations",
        "peak_bytes_estimate",
        "mean_forward_secs",
        "audio_per_second",
        "warmup_runs",
        "timed_runs",
        "batch_size",
        "os",
        "arch",
        "threads",
    ])?;
    for r in reports {
        let sp = r.speed.as_ref();
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            r.label.clone(),
            r.n_mels.to_string(),
            r.n_frames.to_string(),
            r.n_tokens.to_string(),
            r.params.to_string(),
            r.flops_total.to_string(),
            r.flops_attention.to_string(),
            r.activations.to_string(),
            r.peak_bytes_estimate.to_string(),
            opt(sp.map(|s| format!("{:.6e}", s.mean_secs))),
            opt(sp.map(|s| format!("{:.3}", s.audio_per_second))),
            opt(sp.map(|s| s.protocol.warmup_runs.to_string())),
            opt(sp.map(|s| s.protocol.timed_runs.to_string())),
            opt(sp.map(|s| s.protocol.batch_size.to_string())),
            r.machine.os.clone(),
            r.machine.arch.clone(),
            r.machine.threads_used.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_text(reports: &[ProfileReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<26} {:>7} {:>10} {:>10} {:>10} {:>11} {:>9} {:>10}",
        "model", "tokens", "params(M)", "GFLOPs", "attn GF", "act (M)", "mem (MB)", "A/S"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<26} {:>7} {:>10.2} {:>10.3} {:>10.3} {:>11.2} {:>9.1} {:>10}",
            r.label,
            r.n_tokens,
            r.params as f64 / 1e6,
            r.flops_total as f64 / 1e9,
            r.flops_attention as f64 / 1e9,
            r.activations as f64 / 1e6,
            r.peak_bytes_estimate as f64 / 1e6,
            r.speed.as_ref().map_or("-".into(), |sp| format!("{:.1}", sp.audio_per_second)),
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(
            s,
            "machine: {} {} ({} cpus, {} thread used)",
            r.machine.os, r.machine.arch, r.machine.available_cpus, r.machine.threads_used
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::tokenizer::{ClipConfig, PatchConfig};

    fn gamma(frames: usize, enc: EncoderConfig) -> ModelConfig {
        ModelConfig::spectttra(128, frames, ClipConfig::gamma(), enc)
    }

    #[test]
    fn attention_term_quadruples_with_tokens() {
        let enc = EncoderConfig::default();
        let a = analytic_flops(&ModelConfig::vit(128, 128, PatchConfig { p: 16 }, enc.clone())).unwrap();
        let b = analytic_flops(&ModelConfig::vit(128, 256, PatchConfig { p: 16 }, enc)).unwrap();
        assert_eq!(b.attention, 4 * a.attention);
    }

    #[test]
    fn zero_layers_reduce_to_tokenizer_and_head() {
        let enc = EncoderConfig {
            n_layers: 0,
            ..EncoderConfig::tiny()
        };
        let cfg = gamma(128, enc);
        let a = count_activations(&cfg).unwrap();
        assert_eq!(a.total(), 43 * 16 + 16 + 1);
        let f = analytic_flops(&cfg).unwrap();
        assert_eq!(f.total(), f.tokenizer + f.head);
    }

    #[test]
    fn long_clip_ordering() {
        let enc = EncoderConfig::default();
        let g = analytic_flops(&gamma(3744, enc.clone())).unwrap();
        let v = analytic_flops(&ModelConfig::vit(128, 3744, PatchConfig { p: 16 }, enc)).unwrap();
        assert!(g.total() < v.total());
        assert!(g.attention * 10 < v.attention);
    }

    #[test]
    fn encoder_activations_scale_with_tokens() {
        let enc = EncoderConfig::tiny();
        let a = count_activations(&ModelConfig::vit(128, 256, PatchConfig { p: 16 }, enc.clone())).unwrap();
        let b = count_activations(&ModelConfig::vit(128, 128, PatchConfig { p: 16 }, enc)).unwrap();
        assert_eq!(a.encoder, 2 * b.encoder);
    }

    #[test]
    fn timer_resolution_is_positive() {
        assert!(timer_resolution() > Duration::ZERO);
    }
}
