//! Spectro-temporal tokenization and the square-patch baseline.
//!
//! A temporal token embeds `t` consecutive frames across all `F` mel bins; a
//! spectral token embeds `f` consecutive mel bins across all `T` frames. Each
//! branch is a bias-free strided 1-D convolution (kernel = stride = clip
//! size) followed by GELU, a learnable positional embedding and a layer norm:
//!
//! ```text
//! temporal = LayerNorm(GELU(Conv1d(x,   in=F, out=D, k=t, s=t)^T) + pos_t)
//! spectral = LayerNorm(GELU(Conv1d(x^T, in=T, out=D, k=f, s=f)^T) + pos_f)
//! tokens   = concat(temporal, spectral)
//! ```
//!
//! Trailing frames / bins that do not fill a whole clip are dropped, so the
//! token counts are `floor(T / t)` and `floor(F / f)`.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::nn::{self, LayerNormCache};
use crate::params::{join, LayerNormParams, LinearParams, NamedTensors};
use crate::Real;

/// Standard deviation of the positional-embedding and weight initializers.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `t = 3, f = 1`
    Alpha,
    /// `t = 5, f = 3`
    Beta,
    /// `t = 7, f = 5`
    Gamma,
    Custom,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" | "α" => Ok(Variant::Alpha),
            "beta" | "β" => Ok(Variant::Beta),
            "gamma" | "γ" => Ok(Variant::Gamma),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Clip sizes and branch switches of the spectro-temporal tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    /// Temporal clip size in frames.
    pub t: usize,
    /// Spectral clip size in mel bins.
    pub f: usize,
    pub variant: Variant,
    #[serde(default = "yes")]
    pub temporal_enabled: bool,
    #[serde(default = "yes")]
    pub spectral_enabled: bool,
}

fn yes() -> bool {
    true
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self::gamma()
    }
}

impl ClipConfig {
    pub fn alpha() -> Self {
        Self::sized(3, 1, Variant::Alpha)
    }

    pub fn beta() -> Self {
        Self::sized(5, 3, Variant::Beta)
    }

    pub fn gamma() -> Self {
        Self::sized(7, 5, Variant::Gamma)
    }

    pub fn custom(t: usize, f: usize) -> Self {
        Self::sized(t, f, Variant::Custom)
    }

    pub fn from_variant(v: Variant) -> Result<Self> {
        match v {
            Variant::Alpha => Ok(Self::alpha()),
            Variant::Beta => Ok(Self::beta()),
            Variant::Gamma => Ok(Self::gamma()),
            Variant::Custom => Err(Error::config("custom variant needs explicit t and f")),
        }
    }

    fn sized(t: usize, f: usize, variant: Variant) -> Self {
        Self {
            t,
            f,
            variant,
            temporal_enabled: true,
            spectral_enabled: true,
        }
    }

    /// Ablation: temporal tokens only.
    pub fn temporal_only(mut self) -> Self {
        self.spectral_enabled = false;
        self
    }

    /// Ablation: spectral tokens only.
    pub fn spectral_only(mut self) -> Self {
        self.temporal_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temporal_enabled && !self.spectral_enabled {
            return Err(Error::config("at least one of the temporal/spectral branches must be enabled"));
        }
        if self.temporal_enabled && self.t == 0 {
            return Err(Error::config("temporal clip size t must be >= 1"));
        }
        if self.spectral_enabled && self.f == 0 {
            return Err(Error::config("spectral clip size f must be >= 1"));
        }
        Ok(())
    }
}

/// Square patch side of the ViT baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub p: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { p: 16 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::config("patch size must be >= 1"));
        }
        Ok(())
    }
}

/// Square-patch token count, `floor(F/p) * floor(T/p)`.
pub fn vit_token_count(n_mels: usize, n_frames: usize, p: usize) -> Result<usize> {
    PatchConfig { p }.validate()?;
    Ok((n_mels / p) * (n_frames / p))
}

/// Spectro-temporal token counts `(floor(T/t), floor(F/f))`, zero for a
/// disabled branch.
pub fn spectttra_token_count(
    n_mels: usize,
    n_frames: usize,
    clip: &ClipConfig,
) -> Result<(usize, usize)> {
    clip.validate()?;
    let n_temporal = if clip.temporal_enabled { n_frames / clip.t } else { 0 };
    let n_spectral = if clip.spectral_enabled { n_mels / clip.f } else { 0 };
    Ok((n_temporal, n_spectral))
}

/// Token matrix with its temporal / spectral segment boundary.
///
/// Square-patch sequences report every token in `n_temporal`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<R> {
    pub tokens: Array2<R>,
    pub n_temporal: usize,
    pub n_spectral: usize,
}

impl<R: Real> TokenSequence<R> {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One tokenizer branch: conv kernel `D x in_channels x clip`, positional
/// embeddings `n_clips x D`, and its layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBranch<R> {
    pub weight: Array3<R>,
    pub pos: Array2<R>,
    pub norm: LayerNormParams<R>,
}

impl<R: Real> TokenBranch<R> {
    fn init<G: Rng + ?Sized>(dim: usize, in_ch: usize, clip: usize, n_clips: usize, rng: &mut G) -> Self {
        Self {
            weight: nn::trunc_normal((dim, in_ch, clip), INIT_STD, rng),
            pos: nn::normal((n_clips, dim), INIT_STD, rng),
            norm: LayerNormParams::new(dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn clip(&self) -> usize {
        self.weight.dim().2
    }

    pub fn n_clips(&self) -> usize {
        self.pos.nrows()
    }

    fn kernel(&self) -> ArrayView2<'_, R> {
        let (d, c, k) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((d, c * k))
            .expect("standard layout kernel")
    }
}

impl<R: Real> NamedTensors<R> for TokenBranch<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        f(join(prefix, "pos"), self.pos.view().into_dyn());
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join(prefix, "pos"), self.pos.view_mut().into_dyn());
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Trainable state of the spectro-temporal tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams<R> {
    pub temporal: Option<TokenBranch<R>>,
    pub spectral: Option<TokenBranch<R>>,
    pub embed_dim: usize,
}

impl<R: Real> TokenizerParams<R> {
    /// Initializes both branches for an `n_mels x n_frames` input.
    pub fn init<G: Rng + ?Sized>(
        n_mels: usize,
        n_frames: usize,
        clip: &ClipConfig,
        embed_dim: usize,
        rng: &mut G,
    ) -> Result<Self> {
        let (n_t, n_f) = spectttra_token_count(n_mels, n_frames, clip)?;
        if clip.temporal_enabled && n_t == 0 {
            return Err(Error::config(format!(
                "{n_frames} frames yield no temporal clip of size {}",
                clip.t
            )));
        }
        if clip.spectral_enabled && n_f == 0 {
            return Err(Error::config(format!(
                "{n_mels} mel bins yield no spectral clip of size {}",
                clip.f
            )));
        }
        if embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        let temporal = clip
            .temporal_enabled
            .then(|| TokenBranch::init(embed_dim, n_mels, clip.t, n_t, rng));
        let spectral = clip
            .spectral_enabled
            .then(|| TokenBranch::init(embed_dim, n_frames, clip.f, n_f, rng));
        Ok(Self {
            temporal,
            spectral,
            embed_dim,
        })
    }

    /// Checks that the parameters fit an `n_mels x n_frames` input under `clip`.
    pub fn check_input(&self, n_mels: usize, n_frames: usize, clip: &ClipConfig) -> Result<()> {
        let (n_t, n_f) = spectttra_token_count(n_mels, n_frames, clip)?;
        let check = |branch: &Option<TokenBranch<R>>, enabled: bool, in_ch: usize, k: usize, n: usize, what: &str| {
            match (branch, enabled) {
                (Some(b), true) => {
                    if b.in_channels() != in_ch || b.clip() != k || b.n_clips() != n {
                        return Err(Error::shape(format!(
                            "{what} branch expects in={} clip={} n={}, input gives in={in_ch} clip={k} n={n}",
                            b.in_channels(),
                            b.clip(),
                            b.n_clips()
                        )));
                    }
                    Ok(())
                }
                (None, false) => Ok(()),
                _ => Err(Error::shape(format!("{what} branch enabled flag disagrees with parameters"))),
            }
        };
        check(&self.temporal, clip.temporal_enabled, n_mels, clip.t, n_t, "temporal")?;
        check(&self.spectral, clip.spectral_enabled, n_frames, clip.f, n_f, "spectral")
    }
}

impl<R: Real> NamedTensors<R> for TokenizerParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        if let Some(b) = &self.temporal {
            b.visit(&join(prefix, "temporal"), f);
        }
        if let Some(b) = &self.spectral {
            b.visit(&join(prefix, "spectral"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        if let Some(b) = &mut self.temporal {
            b.visit_mut(&join(prefix, "temporal"), f);
        }
        if let Some(b) = &mut self.spectral {
            b.visit_mut(&join(prefix, "spectral"), f);
        }
    }
}

/// Linear patch embedding plus positional embeddings for the ViT baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedParams<R> {
    pub patch: usize,
    /// `D x p^2`
    pub proj: LinearParams<R>,
    pub pos: Array2<R>,
}

impl<R: Real> PatchEmbedParams<R> {
    pub fn init<G: Rng + ?Sized>(
        n_mels: usize,
        n_frames: usize,
        patch: &PatchConfig,
        embed_dim: usize,
        rng: &mut G,
    ) -> Result<Self> {
        let n = vit_token_count(n_mels, n_frames, patch.p)?;
        if n == 0 {
            return Err(Error::config(format!(
                "{n_mels}x{n_frames} input holds no {}x{} patch",
                patch.p, patch.p
            )));
        }
        Ok(Self {
            patch: patch.p,
            proj: LinearParams {
                weight: nn::trunc_normal((embed_dim, patch.p * patch.p), INIT_STD, rng),
                bias: ndarray::Array1::zeros(embed_dim),
            },
            pos: nn::trunc_normal((n, embed_dim), INIT_STD, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn check_input(&self, n_mels: usize, n_frames: usize) -> Result<()> {
        let n = vit_token_count(n_mels, n_frames, self.patch)?;
        if n != self.pos.nrows() {
            return Err(Error::shape(format!(
                "patch embedding built for {} tokens, input gives {n}",
                self.pos.nrows()
            )));
        }
        Ok(())
    }
}

impl<R: Real> NamedTensors<R> for PatchEmbedParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "pos"), self.pos.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(join(prefix, "pos"), self.pos.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

/// Temporal clips as rows: row `i`, column `c * t + k` holds `x[c, i*t + k]`.
pub fn temporal_patches<R: Real>(x: ArrayView2<R>, t: usize, n: usize) -> Array2<R> {
    let n_mels = x.nrows();
    let mut out = Array2::zeros((n, n_mels * t));
    for i in 0..n {
        let mut row = out.row_mut(i);
        for c in 0..n_mels {
            for k in 0..t {
                row[c * t + k] = x[[c, i * t + k]];
            }
        }
    }
    out
}

/// Spectral clips as rows: row `j`, column `c * f + k` holds `x[j*f + k, c]`
/// (channels run over frames, as in a convolution over the transposed input).
pub fn spectral_patches<R: Real>(x: ArrayView2<R>, f: usize, n: usize) -> Array2<R> {
    let n_frames = x.ncols();
    let mut out = Array2::zeros((n, n_frames * f));
    for j in 0..n {
        let mut row = out.row_mut(j);
        for k in 0..f {
            let bin = x.row(j * f + k);
            for c in 0..n_frames {
                row[c * f + k] = bin[c];
            }
        }
    }
    out
}

/// Non-overlapping `p x p` patches in row-major order over the patch grid
/// (time index fastest); cells within a patch are flattened row-major
/// (mel bin major, frame minor).
pub fn square_patches<R: Real>(x: ArrayView2<R>, p: usize) -> Array2<R> {
    let rows = x.nrows() / p;
    let cols = x.ncols() / p;
    let mut out = Array2::zeros((rows * cols, p * p));
    for pr in 0..rows {
        for pc in 0..cols {
            let mut row = out.row_mut(pr * cols + pc);
            for i in 0..p {
                for j in 0..p {
                    row[i * p + j] = x[[pr * p + i, pc * p + j]];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct BranchCache<R> {
    patches: Array2<R>,
    pre: Array2<R>,
    pub(crate) norm: LayerNormCache<R>,
}

fn branch_forward<R: Real>(patches: Array2<R>, branch: &TokenBranch<R>) -> (Array2<R>, BranchCache<R>) {
    let pre = patches.dot(&branch.kernel().t());
    let act = pre.mapv(nn::gelu) + &branch.pos;
    let (y, norm) = nn::layer_norm(act.view(), branch.norm.scale.view(), branch.norm.bias.view());
    (y, BranchCache { patches, pre, norm })
}

fn branch_backward<R: Real>(
    dy: ArrayView2<R>,
    cache: &BranchCache<R>,
    branch: &TokenBranch<R>,
    grad: &mut TokenBranch<R>,
) {
    let dact = nn::layer_norm_backward(
        dy,
        &cache.norm,
        branch.norm.scale.view(),
        grad.norm.scale.view_mut(),
        grad.norm.bias.view_mut(),
    );
    grad.pos += &dact;
    let dpre = nn::gelu_backward(&cache.pre, &dact);
    let (d, c, k) = grad.weight.dim();
    let mut dw = grad
        .weight
        .view_mut()
        .into_shape_with_order((d, c * k))
        .expect("standard layout kernel");
    ndarray::linalg::general_mat_mul(R::one(), &dpre.t(), &cache.patches, R::one(), &mut dw);
}

#[derive(Debug, Clone)]
pub(crate) struct TokenizerCache<R> {
    pub(crate) temporal: Option<BranchCache<R>>,
    pub(crate) spectral: Option<BranchCache<R>>,
}

pub(crate) fn tokenizer_forward<R: Real>(
    x: ArrayView2<R>,
    params: &TokenizerParams<R>,
) -> (TokenSequence<R>, TokenizerCache<R>) {
    let d = params.embed_dim;
    let mut parts = Vec::new();
    let mut cache = TokenizerCache {
        temporal: None,
        spectral: None,
    };
    let mut n_temporal = 0;
    let mut n_spectral = 0;
    if let Some(b) = &params.temporal {
        n_temporal = b.n_clips();
        let (y, c) = branch_forward(temporal_patches(x, b.clip(), n_temporal), b);
        parts.push(y);
        cache.temporal = Some(c);
    }
    if let Some(b) = &params.spectral {
        n_spectral = b.n_clips();
        let (y, c) = branch_forward(spectral_patches(x, b.clip(), n_spectral), b);
        parts.push(y);
        cache.spectral = Some(c);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let tokens = if views.is_empty() {
        Array2::zeros((0, d))
    } else {
        ndarray::concatenate(ndarray::Axis(0), &views).expect("matching embed dims")
    };
    (
        TokenSequence {
            tokens,
            n_temporal,
            n_spectral,
        },
        cache,
    )
}

pub(crate) fn tokenizer_backward<R: Real>(
    dtokens: ArrayView2<R>,
    cache: &TokenizerCache<R>,
    params: &TokenizerParams<R>,
    grad: &mut TokenizerParams<R>,
) {
    let mut offset = 0;
    if let (Some(b), Some(c), Some(g)) = (&params.temporal, &cache.temporal, &mut grad.temporal) {
        let n = b.n_clips();
        branch_backward(dtokens.slice(ndarray::s![offset..offset + n, ..]), c, b, g);
        offset += n;
    }
    if let (Some(b), Some(c), Some(g)) = (&params.spectral, &cache.spectral, &mut grad.spectral) {
        let n = b.n_clips();
        branch_backward(dtokens.slice(ndarray::s![offset..offset + n, ..]), c, b, g);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PatchCache<R> {
    patches: Array2<R>,
}

pub(crate) fn patch_forward<R: Real>(
    x: ArrayView2<R>,
    params: &PatchEmbedParams<R>,
) -> (TokenSequence<R>, PatchCache<R>) {
    let patches = square_patches(x, params.patch);
    let tokens = nn::linear(patches.view(), params.proj.weight.view(), Some(params.proj.bias.view())) + &params.pos;
    let n = tokens.nrows();
    (
        TokenSequence {
            tokens,
            n_temporal: n,
            n_spectral: 0,
        },
        PatchCache { patches },
    )
}

pub(crate) fn patch_backward<R: Real>(
    dtokens: ArrayView2<R>,
    cache: &PatchCache<R>,
    params: &PatchEmbedParams<R>,
    grad: &mut PatchEmbedParams<R>,
) {
    grad.pos += &dtokens;
    nn::linear_backward(
        cache.patches.view(),
        params.proj.weight.view(),
        dtokens,
        grad.proj.weight.view_mut(),
        Some(grad.proj.bias.view_mut()),
        false,
    );
}

/// Tokenizes a spectrogram matrix (`n_mels x n_frames`).
pub fn tokenize_values<R: Real>(
    x: ArrayView2<R>,
    params: &TokenizerParams<R>,
    clip: &ClipConfig,
) -> Result<TokenSequence<R>> {
    params.check_input(x.nrows(), x.ncols(), clip)?;
    Ok(tokenizer_forward(x, params).0)
}

/// Spectro-temporal tokens of a mel spectrogram: temporal tokens first, then
/// spectral tokens.
pub fn tokenize<R: Real>(
    spec: &MelSpectrogram,
    params: &TokenizerParams<R>,
    clip: &ClipConfig,
) -> Result<TokenSequence<R>> {
    tokenize_values(spec.values_as::<R>().view(), params, clip)
}

/// Square-patch tokens of a spectrogram matrix.
pub fn vit_patchify_values<R: Real>(x: ArrayView2<R>, params: &PatchEmbedParams<R>) -> Result<TokenSequence<R>> {
    params.check_input(x.nrows(), x.ncols())?;
    Ok(patch_forward(x, params).0)
}

pub fn vit_patchify<R: Real>(spec: &MelSpectrogram, params: &PatchEmbedParams<R>) -> Result<TokenSequence<R>> {
    vit_patchify_values(spec.values_as::<R>().view(), params)
}
