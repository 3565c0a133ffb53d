//! Audio front end: WAV decoding, band-limited resampling and the log-mel
//! spectrogram with its deterministic / random frame-fitting policy.
//!
//! Pipeline: Hann-windowed STFT (no centering) -> power spectrum -> mel
//! projection -> `ln(mel + 1e-5)` -> pad/crop to `target_frames` ->
//! per-instance standardization (std clamped at 1e-8).
//!
//! Padding happens in the log domain with the silence floor `ln(1e-5)`, so a
//! padded region is exactly what zero-valued audio would have produced.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;
/// Lower bound on the standard deviation used for standardization.
pub const STD_CLAMP: f64 = 1e-8;

/// Mono audio with a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("audio sample {i}"),
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub target_frames: usize,
    pub fmin: f64,
    /// Upper band edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            win_length: 2048,
            hop_length: 512,
            n_mels: 128,
            target_frames: 128,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl SpectrogramConfig {
    /// Default settings for 5 s inputs (128 x 128).
    pub fn short_clip() -> Self {
        Self::default()
    }

    /// Default settings for 120 s inputs (128 x 3744).
    pub fn long_clip() -> Self {
        Self {
            target_frames: 3744,
            ..Self::default()
        }
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn fmax_hz(&self) -> f64 {
        self.fmax.unwrap_or_else(|| self.nyquist())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of STFT frames produced for `n_samples` of audio.
    pub fn natural_frames(&self, n_samples: usize) -> usize {
        if n_samples <= self.n_fft {
            1
        } else {
            1 + (n_samples - self.n_fft) / self.hop_length
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if self.n_fft == 0 || self.win_length == 0 {
            return Err(Error::config("n_fft and win_length must be positive"));
        }
        if self.win_length > self.n_fft {
            return Err(Error::config(format!(
                "win_length {} exceeds n_fft {}",
                self.win_length, self.n_fft
            )));
        }
        if self.hop_length == 0 {
            return Err(Error::config("hop_length must be >= 1"));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be >= 1"));
        }
        if self.target_frames == 0 {
            return Err(Error::config("target_frames must be >= 1"));
        }
        let fmax = self.fmax_hz();
        if fmax > self.nyquist() {
            return Err(Error::config(format!(
                "fmax {fmax} Hz exceeds Nyquist {} Hz",
                self.nyquist()
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < fmax) {
            return Err(Error::config(format!(
                "need 0 <= fmin < fmax, got fmin={} fmax={fmax}",
                self.fmin
            )));
        }
        Ok(())
    }
}

/// Standardized log-mel spectrogram, `n_mels x target_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub config: SpectrogramConfig,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Values converted to the model's element type.
    pub fn values_as<R: crate::Real>(&self) -> Array2<R> {
        self.values.mapv(|v| R::lit(v as f64))
    }
}

/// Frame fitting policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Random pad split and random crop offset.
    Train,
    /// Right padding and centered crop.
    Eval,
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

const SINC_ZERO_CROSSINGS: f64 = 32.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = PI * (u + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// The cutoff sits at the lower of the two Nyquist rates. Equal rates return
/// the input unchanged.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if audio.is_empty() {
        return Err(Error::Empty("audio"));
    }
    if target_rate == 0 {
        return Err(Error::config("target rate must be positive"));
    }
    if target_rate == audio.sample_rate {
        return Ok(audio.clone());
    }
    let in_rate = audio.sample_rate as u64;
    let out_rate = target_rate as u64;
    let n_in = audio.len();
    let n_out = ((n_in as u64 * out_rate + in_rate / 2) / in_rate).max(1) as usize;

    let step = in_rate as f64 / out_rate as f64;
    let bandwidth = (out_rate as f64 / in_rate as f64).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / bandwidth;
    let x = audio.samples();

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let centre = n as f64 * step;
        let lo = (centre - half_width).ceil().max(0.0) as usize;
        let hi = ((centre + half_width).floor() as isize).min(n_in as isize - 1);
        let mut acc = 0.0f64;
        if hi >= lo as isize {
            for (k, &xk) in x.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let d = k as f64 - centre;
                acc += xk as f64 * bandwidth * sinc(bandwidth * d) * blackman(d / half_width);
            }
        }
        out.push(acc as f32);
    }
    AudioBuffer::new(out, target_rate)
}

// ---------------------------------------------------------------------------
// Mel filterbank
// ---------------------------------------------------------------------------

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, unnormalized.
///
/// Returns `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(config: &SpectrogramConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let n_freqs = config.n_freqs();
    let centres = mel_band_edges(config);
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;

    let mut fb = Array2::<f64>::zeros((config.n_mels, n_freqs));
    for m in 0..config.n_mels {
        let (lo, mid, hi) = (centres[m], centres[m + 1], centres[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            let w = rise.min(fall);
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
    }
    Ok(fb)
}

/// The `n_mels + 2` band edges in Hz; filter `m` peaks at element `m + 1`.
pub fn mel_band_edges(config: &SpectrogramConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax_hz());
    let n = config.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// STFT and log-mel
// ---------------------------------------------------------------------------

/// Reusable STFT + filterbank state for one configuration.
pub struct MelExtractor {
    config: SpectrogramConfig,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(config: &SpectrogramConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(config)?;
        // Periodic Hann of win_length, centred inside n_fft.
        let mut window = vec![0.0; config.n_fft];
        let offset = (config.n_fft - config.win_length) / 2;
        for i in 0..config.win_length {
            window[offset + i] =
                0.5 - 0.5 * (2.0 * PI * i as f64 / config.win_length as f64).cos();
        }
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config: config.clone(),
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    /// Power spectrogram, `(n_fft/2 + 1) x frames`.
    pub fn power_spectrogram(&self, samples: &[f32]) -> Array2<f64> {
        let cfg = &self.config;
        let n_fft = cfg.n_fft;
        let frames = cfg.natural_frames(samples.len());
        let n_freqs = cfg.n_freqs();
        let mut spec = Array2::<f64>::zeros((n_freqs, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for fr in 0..frames {
            let start = fr * cfg.hop_length;
            for (i, c) in buf.iter_mut().enumerate() {
                let x = samples.get(start + i).copied().unwrap_or(0.0) as f64;
                *c = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_freqs {
                spec[[k, fr]] = buf[k].norm_sqr();
            }
        }
        spec
    }

    /// Unstandardized `ln(mel + 1e-5)` at the natural frame count.
    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<Array2<f64>> {
        if audio.is_empty() {
            return Err(Error::Empty("audio"));
        }
        if audio.sample_rate() != self.config.sample_rate {
            return Err(Error::config(format!(
                "audio at {} Hz, spectrogram expects {} Hz",
                audio.sample_rate(),
                self.config.sample_rate
            )));
        }
        let power = self.power_spectrogram(audio.samples());
        let mel = self.filterbank.dot(&power);
        Ok(mel.mapv(|v| (v + LOG_FLOOR).ln()))
    }

    /// Log-mel -> frame fitting -> standardization.
    pub fn finish<G: Rng + ?Sized>(
        &self,
        log_mel: &Array2<f64>,
        mode: FrameMode,
        rng: &mut G,
        source_id: impl Into<String>,
    ) -> MelSpectrogram {
        let mut fitted = fit_frames(log_mel, self.config.target_frames, mode, rng);
        standardize(&mut fitted);
        MelSpectrogram {
            values: fitted.mapv(|v| v as f32),
            config: self.config.clone(),
            source_id: source_id.into(),
        }
    }

    pub fn compute<G: Rng + ?Sized>(
        &self,
        audio: &AudioBuffer,
        mode: FrameMode,
        rng: &mut G,
    ) -> Result<MelSpectrogram> {
        let lm = self.log_mel(audio)?;
        Ok(self.finish(&lm, mode, rng, String::new()))
    }
}

/// Pads (with the silence floor) or crops the time axis to `target` frames.
///
/// Eval: pad on the right, crop window starts at `floor((frames - target) / 2)`.
/// Train: the pad split and the crop offset are drawn from `rng`.
pub fn fit_frames<G: Rng + ?Sized>(
    log_mel: &Array2<f64>,
    target: usize,
    mode: FrameMode,
    rng: &mut G,
) -> Array2<f64> {
    let (n_mels, frames) = log_mel.dim();
    if frames == target {
        return log_mel.clone();
    }
    if frames > target {
        let excess = frames - target;
        let start = match mode {
            FrameMode::Eval => excess / 2,
            FrameMode::Train => rng.random_range(0..=excess),
        };
        return log_mel.slice(s![.., start..start + target]).to_owned();
    }
    let deficit = target - frames;
    let left = match mode {
        FrameMode::Eval => 0,
        FrameMode::Train => rng.random_range(0..=deficit),
    };
    let mut out = Array2::from_elem((n_mels, target), LOG_FLOOR.ln());
    out.slice_mut(s![.., left..left + frames]).assign(log_mel);
    out
}

/// Zero mean, unit (population) variance over all cells, std clamped at 1e-8.
pub fn standardize(x: &mut Array2<f64>) {
    let (lo, hi) = x.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        x.fill(0.0);
        return;
    }
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_CLAMP);
    x.mapv_inplace(|v| (v - mean) / std);
}

/// One-shot mel spectrogram. Prefer [`MelExtractor`] when processing many clips.
pub fn compute_mel<G: Rng + ?Sized>(
    audio: &AudioBuffer,
    config: &SpectrogramConfig,
    mode: FrameMode,
    rng: &mut G,
) -> Result<MelSpectrogram> {
    MelExtractor::new(config)?.compute(audio, mode, rng)
}

// ---------------------------------------------------------------------------
// WAV IO
// ---------------------------------------------------------------------------

/// Reads PCM16, PCM24 or float32 WAV, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, 24) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| v as f32 / 8_388_608.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::config(format!(
                "unsupported WAV encoding {fmt:?}/{bits} bit in {}",
                path.as_ref().display()
            )))
        }
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Reads a WAV and resamples it to `target_rate`.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let audio = read_wav(path)?;
    if audio.is_empty() {
        return Err(Error::Empty("audio"));
    }
    resample(&audio, target_rate)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &x in audio.samples() {
        let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f32) -> AudioBuffer {
        let n = (rate as f64 * secs).round() as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        AudioBuffer::new(s, rate).unwrap()
    }

    fn noise(n: usize, seed: u64, amp: f32) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..n).map(|_| amp * rng.random_range(-1.0f32..1.0)).collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    fn dominant_bin(x: &[f32]) -> usize {
        let n = x.len();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft.process(&mut buf);
        (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap()
    }

    #[test]
    fn rejects_bad_audio() {
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
        assert!(AudioBuffer::new(vec![f32::NAN], 16_000).is_err());
        let empty = AudioBuffer::new(vec![], 16_000).unwrap();
        assert!(matches!(resample(&empty, 8000), Err(Error::Empty(_))));
        let one = AudioBuffer::new(vec![0.5], 16_000).unwrap();
        assert!(resample(&one, 0).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let a = noise(1234, 3, 0.3);
        let b = resample(&a, 16_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resample_lengths() {
        let a = AudioBuffer::new(vec![0.1; 8000], 8000).unwrap();
        assert_eq!(resample(&a, 16_000).unwrap().len(), 16_000);
        let b = sine(440.0, 44_100, 1.0, 0.5);
        assert_eq!(resample(&b, 16_000).unwrap().len(), 16_000);
    }

    #[test]
    fn resample_preserves_tone() {
        // 1 s at 16 kHz: FFT bin spacing is 1 Hz, so the peak must sit at 440 +- 1.
        let b = sine(440.0, 44_100, 1.0, 0.5);
        let r = resample(&b, 16_000).unwrap();
        let peak = dominant_bin(r.samples());
        assert!((439..=441).contains(&peak), "peak bin {peak}");
    }

    #[test]
    fn resample_suppresses_aliases() {
        // 7.5 kHz is above the 4 kHz Nyquist of the target rate.
        let b = sine(7_500.0, 16_000, 1.0, 0.5);
        let r = resample(&b, 8_000).unwrap();
        let rms = (r.samples()[200..7800].iter().map(|v| v * v).sum::<f32>() / 7600.0).sqrt();
        assert!(rms < 5e-3, "alias rms {rms}");
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let cfg = SpectrogramConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.dim(), (128, 1025));
        assert!(fb.iter().all(|&w| w >= 0.0));
        for row in fb.rows() {
            assert!(row.sum() > 0.0);
        }
        // every bin strictly inside (fmin, fmax) is covered
        let bin_hz = 16_000.0 / 2048.0;
        for k in 1..1024 {
            let f = k as f64 * bin_hz;
            assert!(f > 0.0 && f < 8000.0);
            assert!(fb.column(k).sum() > 0.0, "bin {k} uncovered");
        }
        let edges = mel_band_edges(&cfg);
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn filterbank_rejects_fmax_above_nyquist() {
        let cfg = SpectrogramConfig {
            fmax: Some(9000.0),
            ..Default::default()
        };
        assert!(mel_filterbank(&cfg).is_err());
    }

    #[test]
    fn shapes_for_5s_and_120s() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = noise(5 * 16_000, 1, 0.2);
        let m = compute_mel(&a, &SpectrogramConfig::short_clip(), FrameMode::Eval, &mut rng).unwrap();
        assert_eq!(m.shape(), (128, 128));
        let b = noise(120 * 16_000, 2, 0.2);
        let m = compute_mel(&b, &SpectrogramConfig::long_clip(), FrameMode::Train, &mut rng).unwrap();
        assert_eq!(m.shape(), (128, 3744));
    }

    #[test]
    fn silence_standardizes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AudioBuffer::new(vec![0.0; 40_000], 16_000).unwrap();
        let m = compute_mel(&a, &SpectrogramConfig::default(), FrameMode::Eval, &mut rng).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = noise(3 * 16_000, 5, 0.3);
        let m = compute_mel(&a, &SpectrogramConfig::default(), FrameMode::Train, &mut rng).unwrap();
        let v: Vec<f64> = m.values.iter().map(|&x| x as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn eval_is_pure_and_centre_cropped() {
        let cfg = SpectrogramConfig::default();
        let ex = MelExtractor::new(&cfg).unwrap();
        let a = noise(10 * 16_000, 4, 0.3);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let m1 = ex.compute(&a, FrameMode::Eval, &mut r1).unwrap();
        let m2 = ex.compute(&a, FrameMode::Eval, &mut r2).unwrap();
        assert_eq!(m1.values, m2.values);

        let lm = ex.log_mel(&a).unwrap();
        let frames = lm.ncols();
        assert!(frames > 128);
        let start = (frames - 128) / 2;
        let mut expect = lm.slice(s![.., start..start + 128]).to_owned();
        standardize(&mut expect);
        let expect = expect.mapv(|v| v as f32);
        assert_eq!(m1.values, expect);
    }

    #[test]
    fn eval_pads_on_the_right() {
        let lm = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = fit_frames(&lm, 6, FrameMode::Eval, &mut rng);
        assert_eq!(out.slice(s![.., ..4]), lm);
        assert!(out.slice(s![.., 4..]).iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn train_fit_uses_rng() {
        let lm = Array2::from_shape_fn((2, 50), |(i, j)| (i * 50 + j) as f64);
        let starts: std::collections::HashSet<u64> = (0..20)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                fit_frames(&lm, 10, FrameMode::Train, &mut rng)[[0, 0]] as u64
            })
            .collect();
        assert!(starts.len() > 1);
    }

    #[test]
    fn amplitude_scaling_is_removed() {
        let cfg = SpectrogramConfig::default();
        let ex = MelExtractor::new(&cfg).unwrap();
        // 6 s: longer than the target, so no silence padding enters the window.
        let a = noise(6 * 16_000, 8, 0.9);
        let scaled = AudioBuffer::new(a.samples().iter().map(|v| v * 3.0).collect(), 16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m1 = ex.compute(&a, FrameMode::Eval, &mut rng).unwrap();
        let m2 = ex.compute(&scaled, FrameMode::Eval, &mut rng).unwrap();
        let diff = (&m1.values - &m2.values).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn wrong_sample_rate_rejected() {
        let a = AudioBuffer::new(vec![0.1; 4000], 8000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(compute_mel(&a, &SpectrogramConfig::default(), FrameMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn wav_roundtrip_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = sine(220.0, 16_000, 0.1, 0.5);
        let p = dir.path().join("a.wav");
        write_wav_pcm16(&p, &a).unwrap();
        let b = read_wav(&p).unwrap();
        assert_eq!(b.len(), a.len());
        assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| (x - y).abs() < 1e-4));

        for (bits, fmt) in [(24u16, hound::SampleFormat::Int), (32, hound::SampleFormat::Float)] {
            let p = dir.path().join(format!("s{bits}.wav"));
            let spec = hound::WavSpec {
                channels: 2,
                sample_rate: 22_050,
                bits_per_sample: bits,
                sample_format: fmt,
            };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for i in 0..100 {
                let v = (i as f32 / 100.0) - 0.5;
                if bits == 24 {
                    w.write_sample((v * 8_388_607.0) as i32).unwrap();
                    w.write_sample((v * 8_388_607.0) as i32).unwrap();
                } else {
                    w.write_sample(v).unwrap();
                    w.write_sample(v).unwrap();
                }
            }
            w.finalize().unwrap();
            let r = read_wav(&p).unwrap();
            assert_eq!(r.sample_rate(), 22_050);
            assert_eq!(r.len(), 100);
            assert!((r.samples()[10] - (-0.4)).abs() < 1e-5);
        }
    }
}
