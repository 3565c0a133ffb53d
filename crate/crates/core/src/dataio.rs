//! Manifest-driven datasets, the group leakage rule and a synthetic toy
//! corpus generator.
//!
//! Manifest header: `path,label,algorithm,fake_type,split,group_id,singer_seen,duration`.
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Label;
use crate::frontend::{load_audio, write_wav_pcm16, AudioBuffer, MelExtractor};

pub const MANIFEST_HEADER: [&str; 8] = [
    "path",
    "label",
    "algorithm",
    "fake_type",
    "split",
    "group_id",
    "singer_seen",
    "duration",
];

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "{} must be one of [{}], got {other:?}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(FakeType { Half => "half", Mostly => "mostly", Full => "full", None => "none" });
string_enum!(Split { Train => "train", Valid => "valid", Test => "test" });
string_enum!(SingerSeen { Seen => "seen", Unseen => "unseen", NotApplicable => "n/a" });

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub algorithm: String,
    pub fake_type: FakeType,
    pub split: Split,
    /// Identity of the (lyrics, style) input a song was generated from.
    pub group_id: String,
    pub singer_seen: SingerSeen,
    pub duration: f64,
}

impl ManifestEntry {
    /// Values for the evaluation partition axes.
    pub fn partitions(&self) -> BTreeMap<String, String> {
        [
            ("algorithm", self.algorithm.clone()),
            ("fake_type", self.fake_type.to_string()),
            ("singer_seen", self.singer_seen.to_string()),
            ("split", self.split.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label == Label::Real && self.fake_type != FakeType::None {
            return Err(format!("real song with fake_type {}", self.fake_type));
        }
        if self.label == Label::Fake && self.fake_type == FakeType::None {
            return Err("fake song with fake_type none".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("duration must be > 0, got {}", self.duration));
        }
        if self.group_id.trim().is_empty() {
            return Err("empty group_id".into());
        }
        if self.path.as_os_str().is_empty() {
            return Err("empty path".into());
        }
        Ok(())
    }

    fn record(&self) -> [String; 8] {
        [
            self.path.to_string_lossy().into_owned(),
            self.label.to_string(),
            self.algorithm.clone(),
            self.fake_type.to_string(),
            self.split.to_string(),
            self.group_id.clone(),
            self.singer_seen.to_string(),
            format!("{}", self.duration),
        ]
    }
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<ManifestEntry, String> {
    if rec.len() != MANIFEST_HEADER.len() {
        return Err(format!("expected {} fields, found {}", MANIFEST_HEADER.len(), rec.len()));
    }
    let field = |i: usize| rec[i].trim();
    let entry = ManifestEntry {
        path: PathBuf::from(field(0)),
        label: field(1).parse().map_err(|e: Error| e.to_string())?,
        algorithm: field(2).to_string(),
        fake_type: field(3).parse()?,
        split: field(4).parse()?,
        group_id: field(5).to_string(),
        singer_seen: field(6).parse()?,
        duration: field(7)
            .parse()
            .map_err(|_| format!("duration {:?} is not a number", field(7)))?,
    };
    entry.validate()?;
    Ok(entry)
}

/// Parses and validates a manifest. Errors carry the 1-based line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let fail = |line: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != MANIFEST_HEADER {
        return Err(fail(1, format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    let mut seen: HashMap<PathBuf, u64> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let entry = parse_row(&rec).map_err(|m| fail(line, m))?;
        if let Some(first) = seen.insert(entry.path.clone(), line) {
            return Err(fail(
                line,
                format!("path {} already listed on line {first}", entry.path.display()),
            ));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in entries {
        w.write_record(e.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Groups that appear both in train and in valid/test (which count as one
/// side). Sorted; empty means no leakage.
pub fn check_leakage(entries: &[ManifestEntry]) -> Vec<String> {
    let mut train = BTreeSet::new();
    let mut held_out = BTreeSet::new();
    for e in entries {
        match e.split {
            Split::Train => train.insert(e.group_id.as_str()),
            Split::Valid | Split::Test => held_out.insert(e.group_id.as_str()),
        };
    }
    train.intersection(&held_out).map(|g| g.to_string()).collect()
}

/// `Err(Error::Leakage)` when [`check_leakage`] finds violations.
pub fn ensure_no_leakage(entries: &[ManifestEntry]) -> Result<()> {
    let bad = check_leakage(entries);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(bad))
    }
}

pub fn resolve_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    if entry.path.is_absolute() {
        entry.path.clone()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(&entry.path)
    }
}

/// A decoded song: its manifest row and unfitted log-mel spectrogram.
#[derive(Debug, Clone)]
pub struct LogMelExample {
    pub entry: ManifestEntry,
    pub log_mel: Array2<f64>,
}

impl LogMelExample {
    pub fn id(&self) -> String {
        self.entry.path.to_string_lossy().into_owned()
    }
}

/// Loads and featurizes every entry of `split` (all entries for `None`).
pub fn load_log_mels(
    manifest: &Path,
    entries: &[ManifestEntry],
    split: Option<Split>,
    extractor: &MelExtractor,
) -> Result<Vec<LogMelExample>> {
    let rate = extractor.config().sample_rate;
    entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let audio = load_audio(resolve_path(manifest, e), rate)?;
            Ok(LogMelExample {
                entry: e.clone(),
                log_mel: extractor.log_mel(&audio)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

/// Recipe for the synthetic corpus.
///
/// Both classes share a background (three voices of random short notes,
/// modulated by pink noise, under a slowly wandering envelope) and carry the
/// same number of tone events, one per `period`. Fake songs repeat a single
/// shared motif, sample-exact, at every event. Real songs jitter each onset
/// and sound the motif on only two events, the rest at other pitches. A short
/// crop holds at most one event and can come from either class; separating
/// them takes the repetition across the whole song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub n_per_class: usize,
    pub duration: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Repetition period `R` of the fake-class motif, seconds.
    pub period: f64,
    pub motif_len: f64,
    /// Maximum onset jitter of real-class events, seconds.
    pub jitter: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_per_class: 32,
            duration: 24.0,
            seed: 7,
            sample_rate: 16_000,
            period: 4.0,
            motif_len: 1.5,
            jitter: 0.25,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 2 {
            return Err(Error::config("n_per_class must be >= 2"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be > 0"));
        }
        if !(self.motif_len > 0.0 && self.period > self.motif_len + 2.0 * self.jitter) {
            return Err(Error::config("need period > motif_len + 2 * jitter > 0"));
        }
        if !(self.duration >= self.period + self.motif_len) {
            return Err(Error::config("duration must hold at least two motif events"));
        }
        Ok(())
    }

    fn period_samples(&self) -> usize {
        (self.period * self.sample_rate as f64).round() as usize
    }
}

const MOTIF_AMP: f32 = 0.25;
const BACKGROUND_AMP: f32 = 0.04;
const N_PITCHES: usize = 16;
/// Pitch index of the shared motif; fake songs repeat it every period.
const MOTIF_PITCH: usize = 8;
/// Motif occurrences in a real song, placed at random events.
const REAL_MOTIF_EVENTS: usize = 2;

fn pitch(k: usize) -> f64 {
    // quarter-octave steps from 220 Hz
    220.0 * 2f64.powf(k as f64 / 4.0)
}

/// Pink-ish noise (Paul Kellett's economy filter) with unit-order amplitude.
fn pink_noise<G: Rng + ?Sized>(n: usize, rng: &mut G) -> Vec<f32> {
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            ((b0 + b1 + b2 + w * 0.1848) * 0.25) as f32
        })
        .collect()
}

/// Piecewise-linear random envelope with knots at irregular spacing.
fn wander_envelope<G: Rng + ?Sized>(n: usize, sr: f64, rng: &mut G) -> Vec<f32> {
    let mut knots = vec![(0usize, rng.random_range(0.5..1.0f32))];
    while knots.last().unwrap().0 < n {
        let step = (rng.random_range(0.3..1.7) * sr) as usize;
        knots.push((knots.last().unwrap().0 + step.max(1), rng.random_range(0.5..1.0)));
    }
    let mut env = Vec::with_capacity(n);
    for w in knots.windows(2) {
        let ((a, va), (b, vb)) = (w[0], w[1]);
        for i in a..b.min(n) {
            let u = (i - a) as f32 / (b - a) as f32;
            env.push(va + u * (vb - va));
        }
    }
    env
}

/// One background voice: notes of random pitch and random length.
fn voice<G: Rng + ?Sized>(n: usize, sr: f64, rng: &mut G) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = ((rng.random_range(0.3..1.5) * sr) as usize).min(n - out.len());
        let freq = 100.0 * 40f64.powf(rng.random::<f64>());
        let ramp = ((0.02 * sr) as usize).min(len / 2).max(1);
        for i in 0..len {
            let edge = i.min(len - 1 - i).min(ramp) as f64 / ramp as f64;
            out.push((edge * (std::f64::consts::TAU * freq * i as f64 / sr).sin()) as f32);
        }
    }
    out
}

fn background<G: Rng + ?Sized>(spec: &ToySpec, n: usize, rng: &mut G) -> Vec<f32> {
    let sr = spec.sample_rate as f64;
    let voices: Vec<Vec<f32>> = (0..3).map(|_| voice(n, sr, rng)).collect();
    let modulator = pink_noise(n, rng);
    let floor = pink_noise(n, rng);
    let env = wander_envelope(n, sr, rng);
    (0..n)
        .map(|i| {
            let tones: f32 = voices.iter().map(|v| v[i]).sum();
            let tones = BACKGROUND_AMP * tones * (1.0 + 0.5 * modulator[i]);
            env[i] * (tones + 0.03 * floor[i])
        })
        .collect()
}

/// A faded two-harmonic tone of `len` samples.
fn motif(freq: f64, len: usize, sr: f64) -> Vec<f32> {
    let fade = ((0.05 * sr) as usize).min(len / 2).max(1);
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let w = std::f64::consts::TAU * freq * t;
            let edge = i.min(len - 1 - i);
            let g = if edge < fade {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            (MOTIF_AMP as f64 * g * (w.sin() + 0.5 * (2.0 * w).sin())) as f32
        })
        .collect()
}

fn add_at(dst: &mut [f32], src: &[f32], start: usize) {
    for (d, s) in dst[start..].iter_mut().zip(src) {
        *d += s;
    }
}

/// Synthesizes one song.
pub fn synth_song<G: Rng + ?Sized>(spec: &ToySpec, fake: bool, rng: &mut G) -> Vec<f32> {
    let sr = spec.sample_rate as f64;
    let n = (spec.duration * sr).round() as usize;
    let m_len = (spec.motif_len * sr).round() as usize;
    let period = spec.period_samples();
    let jitter = (spec.jitter * sr) as i64;
    let mut y = background(spec, n, rng);

    let phase = rng.random_range(0..=period - m_len);
    let onsets: Vec<usize> = (0..).map(|k| phase + k * period).take_while(|&s| s + m_len <= n).collect();
    let the_motif = motif(pitch(MOTIF_PITCH), m_len, sr);
    if fake {
        for &s in &onsets {
            add_at(&mut y, &the_motif, s);
        }
    } else {
        // same event count, jittered onsets; only a few events carry the motif
        let mut carriers: Vec<usize> = (0..onsets.len()).collect();
        carriers.shuffle(rng);
        carriers.truncate(REAL_MOTIF_EVENTS);
        for (i, &s) in onsets.iter().enumerate() {
            let shifted = (s as i64 + rng.random_range(-jitter..=jitter)).clamp(0, (n - m_len) as i64) as usize;
            if carriers.contains(&i) {
                add_at(&mut y, &the_motif, shifted);
            } else {
                let k = (MOTIF_PITCH + rng.random_range(1..N_PITCHES)) % N_PITCHES;
                add_at(&mut y, &motif(pitch(k), m_len, sr), shifted);
            }
        }
    }
    let peak = y.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        let g = 0.99 / peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
    y
}

fn split_groups(groups: &mut [String], rng: &mut ChaCha8Rng) -> HashMap<String, Split> {
    groups.shuffle(rng);
    let n = groups.len();
    let n_train = ((0.6 * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let n_valid = ((n - n_train) as f64 / 2.0).ceil() as usize;
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            (g.clone(), s)
        })
        .collect()
}

/// Writes `audio/*.wav` and `manifest.csv` under `out_dir`; returns the
/// manifest path. Output is a pure function of `spec`.
pub fn generate_toy(spec: &ToySpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Fake songs come in pairs sharing a (lyrics, style) group.
    let fake_groups: Vec<String> = (0..spec.n_per_class).map(|i| format!("pair{:03}", i / 2)).collect();
    let real_groups: Vec<String> = (0..spec.n_per_class).map(|i| format!("real{i:03}")).collect();
    let mut uniq_fake: Vec<String> = fake_groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut uniq_real = real_groups.clone();
    let mut split_of = split_groups(&mut uniq_fake, &mut rng);
    split_of.extend(split_groups(&mut uniq_real, &mut rng));

    let fake_types = [FakeType::Full, FakeType::Mostly, FakeType::Half];
    let mut entries = Vec::with_capacity(2 * spec.n_per_class);
    let mut held_out_real = 0usize;
    for (class, groups) in [(Label::Real, &real_groups), (Label::Fake, &fake_groups)] {
        for (i, group) in groups.iter().enumerate() {
            let fake = class == Label::Fake;
            let samples = synth_song(spec, fake, &mut rng);
            let rel = PathBuf::from("audio").join(format!("{class}_{i:03}.wav"));
            write_wav_pcm16(out_dir.join(&rel), &AudioBuffer::new(samples, spec.sample_rate)?)?;
            let split = split_of[group];
            let singer_seen = match (class, split) {
                (Label::Fake, _) => SingerSeen::NotApplicable,
                (Label::Real, Split::Train) => SingerSeen::Seen,
                (Label::Real, _) => {
                    held_out_real += 1;
                    if held_out_real % 2 == 1 {
                        SingerSeen::Seen
                    } else {
                        SingerSeen::Unseen
                    }
                }
            };
            entries.push(ManifestEntry {
                path: rel,
                label: class,
                algorithm: if fake { ["toy_a", "toy_b"][i % 2] } else { "toy_real" }.to_string(),
                fake_type: if fake { fake_types[i % 3] } else { FakeType::None },
                split,
                group_id: group.clone(),
                singer_seen,
                duration: spec.duration,
            });
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;

    // self-check: the generator's output must pass its own validators
    let reloaded = load_manifest(&manifest)?;
    ensure_no_leakage(&reloaded)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "{}", MANIFEST_HEADER.join(",")).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn entry(group: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            path: PathBuf::from(format!("{group}_{split}.wav")),
            label: Label::Fake,
            algorithm: "a".into(),
            fake_type: FakeType::Full,
            split,
            group_id: group.into(),
            singer_seen: SingerSeen::NotApplicable,
            duration: 1.0,
        }
    }

    #[test]
    fn three_rows_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.wav,real,youtube,none,train,g0,seen,120\n\
             b.wav,fake,suno_v3_5,full,valid,g1,n/a,95.5\n\
             c.wav,fake,udio_130,half,test,g2,n/a,30\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[1].duration, 95.5);
        assert_eq!(m[2].fake_type, FakeType::Half);
    }

    #[test]
    fn real_with_fake_type_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.wav,real,youtube,none,train,g0,seen,120\nb.wav,real,youtube,full,train,g1,seen,120\n",
        );
        match load_manifest(&p) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.wav,fake,x,full,train,g0,n/a,1\na.wav,fake,x,full,test,g0,n/a,1\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 3, .. })));
    }

    #[test]
    fn bad_header_and_bad_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "path,label\na.wav,real\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        let p = write(dir.path(), "a.wav,fake,x,full,train,g0,n/a,-2\n");
        assert!(load_manifest(&p).is_err());
        let p = write(dir.path(), "a.wav,fake,x,full,dev,g0,n/a,2\n");
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn leakage_rule() {
        assert_eq!(
            check_leakage(&[entry("g1", Split::Train), entry("g1", Split::Test)]),
            vec!["g1".to_string()]
        );
        assert!(check_leakage(&[entry("g1", Split::Valid), entry("g1", Split::Test)]).is_empty());
        assert!(check_leakage(&[]).is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let es = vec![entry("g1", Split::Train), entry("g2", Split::Valid)];
        let p = dir.path().join("m.csv");
        write_manifest(&p, &es).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), es);
    }

    #[test]
    fn toy_spec_validation() {
        assert!(ToySpec {
            n_per_class: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ToySpec {
            jitter: 2.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
