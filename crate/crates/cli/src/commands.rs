use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectttra::dataio::{self, Split, ToySpec};
use spectttra::evaluation::partitioned_report;
use spectttra::frontend::{load_audio, MelExtractor};
use spectttra::model::FrontendParams;
use spectttra::profiler::{self, TimingProtocol};
use spectttra::tokenizer::{tokenize_values, vit_patchify_values};
use spectttra::training::{self, train_loop};
use spectttra::{FrameMode, ModelParams};

use crate::config::RunConfig;
use crate::{ConfigArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.preset, args.config.as_deref())?;
    if let Some(v) = &args.variant {
        cfg.set_variant(v)?;
    }
    cfg.set_ablation(args.temporal_only, args.spectral_only)?;
    if let Some(t) = args.frames {
        cfg.spectrogram.target_frames = t;
    }
    Ok(cfg)
}

pub fn gen_toy(out: &Path, n: usize, seed: u64, duration: f64, period: f64) -> anyhow::Result<()> {
    let spec = ToySpec {
        n_per_class: n,
        seed,
        duration,
        period,
        ..ToySpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = dataio::generate_toy(&spec, out)?;
    println!("wrote {} songs, manifest {}", 2 * n, manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    args: &ConfigArgs,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(m) = manifest {
        cfg.paths.manifest = Some(m);
    }
    if let Some(o) = out {
        cfg.paths.out_dir = Some(o);
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = lr {
        cfg.train.base_lr = lr;
    }
    cfg.validate()?;
    let manifest = cfg.paths.manifest.clone().ok_or_else(|| usage("no manifest given (--manifest)"))?;
    let out_dir = cfg.paths.out_dir.clone().ok_or_else(|| usage("no output directory given (--out)"))?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    log::info!("effective configuration written to {}", out_dir.join("config.toml").display());

    let entries = dataio::load_manifest(&manifest)?;
    dataio::ensure_no_leakage(&entries)?;
    let extractor = MelExtractor::new(&cfg.spectrogram)?;
    let t0 = Instant::now();
    let train = dataio::load_log_mels(&manifest, &entries, Some(Split::Train), &extractor)?;
    let valid = dataio::load_log_mels(&manifest, &entries, Some(Split::Valid), &extractor)?;
    log::info!(
        "featurized {} train / {} valid songs in {:.1}s",
        train.len(),
        valid.len(),
        t0.elapsed().as_secs_f64()
    );
    let setup = cfg.setup();
    log::info!(
        "model {} with {} parameters, {} tokens",
        setup.model.frontend.label(),
        spectttra::model::count_params(&setup.model)?,
        setup.model.n_tokens()?
    );
    let outcome = train_loop::<f32>(&train, &valid, &setup)?;
    println!(
        "best epoch {} valid F1 {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_f1(),
        out_dir.join(training::BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse::<Split>().map(Some).map_err(usage)
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    checkpoint: &Path,
    manifest: &Path,
    split: &str,
    axes: &str,
    threshold: f64,
    out: Option<PathBuf>,
    scores_out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let split = parse_split(split)?;
    let axes: Vec<&str> = axes.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
    let ck = spectttra::checkpoint::load::<f32>(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let entries = dataio::load_manifest(manifest)?;
    let extractor = MelExtractor::new(&ck.meta.spectrogram)?;
    let examples = dataio::load_log_mels(manifest, &entries, split, &extractor)?;
    let scores = training::predict(&examples, &ck.params, &ck.meta.model)?;
    let report = partitioned_report(&scores, &axes, threshold).map_err(|e| match e {
        spectttra::Error::Config(m) => usage(m),
        other => other.into(),
    })?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        report.write_csv(BufWriter::new(File::create(&path)?))?;
        log::info!("report written to {}", path.display());
    }
    if let Some(path) = scores_out {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["id", "label", "score"])?;
        for s in &scores {
            w.write_record([s.id.clone(), s.label.to_string(), format!("{:.9}", s.score)])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn profile(
    args: &ConfigArgs,
    models: &str,
    timing: Option<(usize, usize)>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let base = resolve(args)?;
    let protocol = timing.map(|(warmup_runs, timed_runs)| TimingProtocol {
        warmup_runs,
        timed_runs,
        batch_size: 1,
    });
    let sc = &base.spectrogram;
    let audio_secs = sc.target_frames as f64 * sc.hop_length as f64 / sc.sample_rate as f64;
    let mut reports = Vec::new();
    for name in models.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let mut cfg = base.clone();
        cfg.set_variant(name)?;
        cfg.validate()?;
        reports.push(profiler::profile(&cfg.model(), audio_secs, protocol, 0)?);
    }
    print!("{}", profiler::to_text(&reports));
    if let Some(path) = out {
        profiler::write_csv(&reports, BufWriter::new(File::create(&path)?))?;
    }
    Ok(())
}

pub fn tokenize(args: &ConfigArgs, audio: &Path, seed: u64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = resolve(args)?;
    cfg.validate()?;
    let model = cfg.model();
    let audio = load_audio(audio, cfg.spectrogram.sample_rate)?;
    let extractor = MelExtractor::new(&cfg.spectrogram)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = extractor.compute(&audio, FrameMode::Eval, &mut rng)?;
    let params = ModelParams::<f32>::init(&model, &mut rng)?;
    let seq = match (&params.frontend, &model.frontend) {
        (FrontendParams::Spectttra(p), spectttra::FrontendConfig::Spectttra(c)) => {
            tokenize_values(spec.values.view(), p, c)?
        }
        (FrontendParams::Vit(p), _) => vit_patchify_values(spec.values.view(), p)?,
        _ => unreachable!("params built from the same config"),
    };
    println!(
        "{}: spectrogram {:?}, {} tokens ({} temporal, {} spectral) of width {}",
        model.frontend.label(),
        spec.shape(),
        seq.n_tokens(),
        seq.n_temporal,
        seq.n_spectral,
        seq.embed_dim()
    );
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(&path)?);
        for row in seq.tokens.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    }
    Ok(())
}
