//! Transformer encoder, mean pooling and the binary classifier head.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `h + MLP(LN(h))`. After the
//! last block a final layer norm is applied, token rows are averaged (temporal
//! and spectral tokens jointly) and a single affine map produces the logit.
//! `sigmoid(logit)` is the probability that the input is synthetic.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::nn::{self, LayerNormCache};
use crate::params::{join, LayerNormParams, LinearParams, NamedTensors};
use crate::tokenizer::{
    self, spectttra_token_count, vit_token_count, ClipConfig, PatchCache, PatchConfig,
    PatchEmbedParams, TokenSequence, TokenizerCache, TokenizerParams, INIT_STD,
};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 384,
            n_heads: 6,
            n_layers: 12,
            mlp_ratio: 2.67,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// D=16, 2 heads, 2 layers.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            n_heads: 2,
            n_layers: 2,
            ..Self::default()
        }
    }

    /// `round(D * mlp_ratio)`; 1025 for the default encoder.
    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 {
            return Err(Error::config("embed_dim and n_heads must be >= 1"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Which tokenizer family feeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrontendConfig {
    Spectttra(ClipConfig),
    Vit(PatchConfig),
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::Spectttra(ClipConfig::gamma())
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            FrontendConfig::Spectttra(c) => c.validate(),
            FrontendConfig::Vit(p) => p.validate(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            FrontendConfig::Spectttra(c) => {
                let mut s = match c.variant {
                    tokenizer::Variant::Custom => format!("spectttra-t{}f{}", c.t, c.f),
                    v => format!("spectttra-{}", serde_json::to_value(v).unwrap().as_str().unwrap()),
                };
                if !c.spectral_enabled {
                    s.push_str("-temporal-only");
                }
                if !c.temporal_enabled {
                    s.push_str("-spectral-only");
                }
                s
            }
            FrontendConfig::Vit(p) => format!("vit-p{}", p.p),
        }
    }
}

/// Everything needed to build and run a model for a fixed input shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn spectttra(n_mels: usize, n_frames: usize, clip: ClipConfig, encoder: EncoderConfig) -> Self {
        Self {
            n_mels,
            n_frames,
            frontend: FrontendConfig::Spectttra(clip),
            encoder,
        }
    }

    pub fn vit(n_mels: usize, n_frames: usize, patch: PatchConfig, encoder: EncoderConfig) -> Self {
        Self {
            n_mels,
            n_frames,
            frontend: FrontendConfig::Vit(patch),
            encoder,
        }
    }

    /// Token count from the tokenizer calculators.
    pub fn n_tokens(&self) -> Result<usize> {
        match &self.frontend {
            FrontendConfig::Spectttra(c) => {
                let (a, b) = spectttra_token_count(self.n_mels, self.n_frames, c)?;
                Ok(a + b)
            }
            FrontendConfig::Vit(p) => vit_token_count(self.n_mels, self.n_frames, p.p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        if self.n_tokens()? == 0 {
            return Err(Error::config(format!(
                "{}x{} input yields no tokens",
                self.n_mels, self.n_frames
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum FrontendParams<R> {
    Spectttra(TokenizerParams<R>),
    Vit(PatchEmbedParams<R>),
}

impl<R: Real> NamedTensors<R> for FrontendParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        match self {
            FrontendParams::Spectttra(p) => p.visit(&join(prefix, "tokenizer"), f),
            FrontendParams::Vit(p) => p.visit(&join(prefix, "patch_embed"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        match self {
            FrontendParams::Spectttra(p) => p.visit_mut(&join(prefix, "tokenizer"), f),
            FrontendParams::Vit(p) => p.visit_mut(&join(prefix, "patch_embed"), f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<R> {
    pub q: LinearParams<R>,
    pub k: LinearParams<R>,
    pub v: LinearParams<R>,
    pub out: LinearParams<R>,
}

impl<R: Real> NamedTensors<R> for AttentionParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<R> {
    pub norm1: LayerNormParams<R>,
    pub attn: AttentionParams<R>,
    pub norm2: LayerNormParams<R>,
    pub fc1: LinearParams<R>,
    pub fc2: LinearParams<R>,
}

impl<R: Real> NamedTensors<R> for BlockParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// All trainable tensors of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    pub frontend: FrontendParams<R>,
    pub blocks: Vec<BlockParams<R>>,
    pub final_norm: LayerNormParams<R>,
    /// `1 x D`
    pub head: LinearParams<R>,
}

impl<R: Real> NamedTensors<R> for ModelParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        self.frontend.visit(prefix, f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        self.frontend.visit_mut(prefix, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn init_linear<R: Real, G: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut G) -> LinearParams<R> {
    LinearParams {
        weight: nn::trunc_normal((out_dim, in_dim), INIT_STD, rng),
        bias: Array1::zeros(out_dim),
    }
}

impl<R: Real> ModelParams<R> {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norm scales.
    pub fn init<G: Rng + ?Sized>(config: &ModelConfig, rng: &mut G) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let d = enc.embed_dim;
        let frontend = match &config.frontend {
            FrontendConfig::Spectttra(c) => {
                FrontendParams::Spectttra(TokenizerParams::init(config.n_mels, config.n_frames, c, d, rng)?)
            }
            FrontendConfig::Vit(p) => {
                FrontendParams::Vit(PatchEmbedParams::init(config.n_mels, config.n_frames, p, d, rng)?)
            }
        };
        let hidden = enc.mlp_hidden();
        let blocks = (0..enc.n_layers)
            .map(|_| BlockParams {
                norm1: LayerNormParams::new(d),
                attn: AttentionParams {
                    q: init_linear(d, d, rng),
                    k: init_linear(d, d, rng),
                    v: init_linear(d, d, rng),
                    out: init_linear(d, d, rng),
                },
                norm2: LayerNormParams::new(d),
                fc1: init_linear(hidden, d, rng),
                fc2: init_linear(d, hidden, rng),
            })
            .collect();
        Ok(Self {
            frontend,
            blocks,
            final_norm: LayerNormParams::new(d),
            head: init_linear(1, d, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.in_dim()
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.num_scalars()
    }

    /// Shape check against a configuration.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let enc = &config.encoder;
        if self.blocks.len() != enc.n_layers || self.embed_dim() != enc.embed_dim {
            return Err(Error::shape(format!(
                "parameters hold {} layers of width {}, config asks for {} x {}",
                self.blocks.len(),
                self.embed_dim(),
                enc.n_layers,
                enc.embed_dim
            )));
        }
        if let Some(b) = self.blocks.first() {
            if b.fc1.out_dim() != enc.mlp_hidden() {
                return Err(Error::shape("MLP width disagrees with mlp_ratio"));
            }
        }
        match (&self.frontend, &config.frontend) {
            (FrontendParams::Spectttra(p), FrontendConfig::Spectttra(c)) => {
                p.check_input(config.n_mels, config.n_frames, c)
            }
            (FrontendParams::Vit(p), FrontendConfig::Vit(c)) if p.patch == c.p => {
                p.check_input(config.n_mels, config.n_frames)
            }
            _ => Err(Error::shape("tokenizer family disagrees with config")),
        }
    }
}

/// Parameter count without allocating the model.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let enc = &config.encoder;
    let d = enc.embed_dim;
    let h = enc.mlp_hidden();
    let frontend = match &config.frontend {
        FrontendConfig::Spectttra(c) => {
            let (nt, nf) = spectttra_token_count(config.n_mels, config.n_frames, c)?;
            let mut n = 0;
            if c.temporal_enabled {
                n += d * config.n_mels * c.t + nt * d + 2 * d;
            }
            if c.spectral_enabled {
                n += d * config.n_frames * c.f + nf * d + 2 * d;
            }
            n
        }
        FrontendConfig::Vit(p) => {
            let n = vit_token_count(config.n_mels, config.n_frames, p.p)?;
            d * p.p * p.p + d + n * d
        }
    };
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (h * d + h) + (d * h + d);
    Ok(frontend + enc.n_layers * block + 2 * d + d + 1)
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum FrontendCache<R> {
    Spectttra(TokenizerCache<R>),
    Vit(PatchCache<R>),
    /// Tokens supplied directly; nothing to backpropagate into.
    External,
}

#[derive(Debug, Clone)]
struct BlockCache<R> {
    ln1: LayerNormCache<R>,
    a1: Array2<R>,
    q: Array2<R>,
    k: Array2<R>,
    v: Array2<R>,
    probs: Vec<Array2<R>>,
    ctx: Array2<R>,
    attn_mask: Option<Array2<R>>,
    ln2: LayerNormCache<R>,
    a2: Array2<R>,
    z1: Array2<R>,
    g: Array2<R>,
    mlp_mask: Option<Array2<R>>,
}

/// Intermediate values of one forward pass, kept for backpropagation and
/// for inspecting normalization / attention invariants.
#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    frontend: FrontendCache<R>,
    n_temporal: usize,
    n_spectral: usize,
    blocks: Vec<BlockCache<R>>,
    final_ln: LayerNormCache<R>,
    final_tokens: Array2<R>,
    pooled: Array1<R>,
    logit: R,
}

impl<R: Real> ForwardCache<R> {
    pub fn logit(&self) -> R {
        self.logit
    }

    pub fn pooled(&self) -> &Array1<R> {
        &self.pooled
    }

    /// Token rows after the final layer norm (input to pooling).
    pub fn final_tokens(&self) -> &Array2<R> {
        &self.final_tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.final_tokens.nrows()
    }

    pub fn segments(&self) -> (usize, usize) {
        (self.n_temporal, self.n_spectral)
    }

    /// Softmax matrices, one per (layer, head).
    pub fn attention_probs(&self) -> impl Iterator<Item = &Array2<R>> {
        self.blocks.iter().flat_map(|b| b.probs.iter())
    }

    /// Pre-affine normalized rows of every layer norm in the network.
    pub fn normalized_rows(&self) -> Vec<&Array2<R>> {
        let mut out = Vec::new();
        if let FrontendCache::Spectttra(c) = &self.frontend {
            out.extend(c.temporal.iter().map(|b| &b.norm.normalized));
            out.extend(c.spectral.iter().map(|b| &b.norm.normalized));
        }
        for b in &self.blocks {
            out.push(&b.ln1.normalized);
            out.push(&b.ln2.normalized);
        }
        out.push(&self.final_ln.normalized);
        out
    }
}

fn check_finite<R: Real>(x: &Array2<R>, location: impl FnOnce() -> String) -> Result<()> {
    if nn::all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite { location: location() })
    }
}

fn block_forward<R: Real, G: Rng + ?Sized>(
    x: &Array2<R>,
    p: &BlockParams<R>,
    enc: &EncoderConfig,
    mut rng: Option<&mut G>,
) -> (Array2<R>, BlockCache<R>) {
    let n = x.nrows();
    let d = enc.embed_dim;
    let dh = enc.head_dim();
    let scale = R::lit(1.0 / (dh as f64).sqrt());

    let (a1, ln1) = nn::layer_norm(x.view(), p.norm1.scale.view(), p.norm1.bias.view());
    let q = nn::linear(a1.view(), p.attn.q.weight.view(), Some(p.attn.q.bias.view()));
    let k = nn::linear(a1.view(), p.attn.k.weight.view(), Some(p.attn.k.bias.view()));
    let v = nn::linear(a1.view(), p.attn.v.weight.view(), Some(p.attn.v.bias.view()));

    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(enc.n_heads);
    for h in 0..enc.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|v| v * scale);
        nn::softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut attn = nn::linear(ctx.view(), p.attn.out.weight.view(), Some(p.attn.out.bias.view()));
    let attn_mask = nn::dropout_mask(attn.dim(), enc.dropout, rng.as_deref_mut());
    if let Some(m) = &attn_mask {
        attn *= m;
    }
    let h = x + &attn;

    let (a2, ln2) = nn::layer_norm(h.view(), p.norm2.scale.view(), p.norm2.bias.view());
    let z1 = nn::linear(a2.view(), p.fc1.weight.view(), Some(p.fc1.bias.view()));
    let g = z1.mapv(nn::gelu);
    let mut m = nn::linear(g.view(), p.fc2.weight.view(), Some(p.fc2.bias.view()));
    let mlp_mask = nn::dropout_mask(m.dim(), enc.dropout, rng.as_deref_mut());
    if let Some(mask) = &mlp_mask {
        m *= mask;
    }
    let y = h + &m;
    (
        y,
        BlockCache {
            ln1,
            a1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln2,
            a2,
            z1,
            g,
            mlp_mask,
        },
    )
}

fn encode<R: Real, G: Rng + ?Sized>(
    seq: TokenSequence<R>,
    frontend: FrontendCache<R>,
    params: &ModelParams<R>,
    enc: &EncoderConfig,
    mut rng: Option<&mut G>,
) -> Result<ForwardCache<R>> {
    check_finite(&seq.tokens, || "tokenizer output".into())?;
    let mut x = seq.tokens;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, bp) in params.blocks.iter().enumerate() {
        let (y, cache) = block_forward(&x, bp, enc, rng.as_deref_mut());
        check_finite(&y, || format!("encoder layer {i}"))?;
        blocks.push(cache);
        x = y;
    }
    let (final_tokens, final_ln) =
        nn::layer_norm(x.view(), params.final_norm.scale.view(), params.final_norm.bias.view());
    let pooled = final_tokens
        .mean_axis(Axis(0))
        .ok_or(Error::Empty("token sequence"))?;
    let logit = pooled.dot(&params.head.weight.row(0)) + params.head.bias[0];
    if !logit.is_finite() {
        return Err(Error::NonFinite {
            location: "classifier head".into(),
        });
    }
    Ok(ForwardCache {
        frontend,
        n_temporal: seq.n_temporal,
        n_spectral: seq.n_spectral,
        blocks,
        final_ln,
        final_tokens,
        pooled,
        logit,
    })
}

/// Forward pass keeping every intermediate needed by [`backward`].
///
/// `dropout_rng` enables dropout (training mode); `None` is inference.
pub fn forward_cached<R: Real, G: Rng + ?Sized>(
    x: ArrayView2<R>,
    params: &ModelParams<R>,
    config: &ModelConfig,
    dropout_rng: Option<&mut G>,
) -> Result<ForwardCache<R>> {
    if x.dim() != (config.n_mels, config.n_frames) {
        return Err(Error::shape(format!(
            "input is {:?}, model expects ({}, {})",
            x.dim(),
            config.n_mels,
            config.n_frames
        )));
    }
    params.check_config(config)?;
    let (seq, fc) = match &params.frontend {
        FrontendParams::Spectttra(p) => {
            let (seq, c) = tokenizer::tokenizer_forward(x, p);
            (seq, FrontendCache::Spectttra(c))
        }
        FrontendParams::Vit(p) => {
            let (seq, c) = tokenizer::patch_forward(x, p);
            (seq, FrontendCache::Vit(c))
        }
    };
    encode(seq, fc, params, &config.encoder, dropout_rng)
}

/// Inference forward pass on a spectrogram matrix; returns the logit.
pub fn forward_values<R: Real>(x: ArrayView2<R>, params: &ModelParams<R>, config: &ModelConfig) -> Result<R> {
    forward_cached::<R, rand::rngs::ThreadRng>(x, params, config, None).map(|c| c.logit)
}

/// Inference forward pass; returns the logit (positive class = synthetic).
pub fn forward<R: Real>(spec: &MelSpectrogram, params: &ModelParams<R>, config: &ModelConfig) -> Result<R> {
    forward_values(spec.values_as::<R>().view(), params, config)
}

/// Runs the encoder, pooling and head on an already tokenized sequence.
pub fn forward_tokens<R: Real>(tokens: ArrayView2<R>, params: &ModelParams<R>, config: &ModelConfig) -> Result<R> {
    if tokens.ncols() != params.embed_dim() {
        return Err(Error::shape("token width differs from embed_dim"));
    }
    let seq = TokenSequence {
        tokens: tokens.to_owned(),
        n_temporal: tokens.nrows(),
        n_spectral: 0,
    };
    encode::<R, rand::rngs::ThreadRng>(seq, FrontendCache::External, params, &config.encoder, None).map(|c| c.logit)
}

pub fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn block_backward<R: Real>(
    dy: Array2<R>,
    cache: &BlockCache<R>,
    p: &BlockParams<R>,
    g: &mut BlockParams<R>,
    enc: &EncoderConfig,
) -> Array2<R> {
    let dh_ = enc.head_dim();
    let scale = R::lit(1.0 / (dh_ as f64).sqrt());

    // MLP branch
    let mut dm = dy.clone();
    if let Some(mask) = &cache.mlp_mask {
        dm *= mask;
    }
    let dg = nn::linear_backward(
        cache.g.view(),
        p.fc2.weight.view(),
        dm.view(),
        g.fc2.weight.view_mut(),
        Some(g.fc2.bias.view_mut()),
        true,
    )
    .unwrap();
    let dz1 = nn::gelu_backward(&cache.z1, &dg);
    let da2 = nn::linear_backward(
        cache.a2.view(),
        p.fc1.weight.view(),
        dz1.view(),
        g.fc1.weight.view_mut(),
        Some(g.fc1.bias.view_mut()),
        true,
    )
    .unwrap();
    let mut dh = dy;
    dh += &nn::layer_norm_backward(
        da2.view(),
        &cache.ln2,
        p.norm2.scale.view(),
        g.norm2.scale.view_mut(),
        g.norm2.bias.view_mut(),
    );

    // attention branch
    let mut datt = dh.clone();
    if let Some(mask) = &cache.attn_mask {
        datt *= mask;
    }
    let dctx = nn::linear_backward(
        cache.ctx.view(),
        p.attn.out.weight.view(),
        datt.view(),
        g.attn.out.weight.view_mut(),
        Some(g.attn.out.bias.view_mut()),
        true,
    )
    .unwrap();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh_..(h + 1) * dh_];
        let dctx_h = dctx.slice(cols);
        let dprobs = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut dscores = nn::softmax_rows_backward(probs, &dprobs);
        dscores.mapv_inplace(|v| v * scale);
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    let mut da1 = Array2::zeros(cache.a1.raw_dim());
    for (dproj, lp, lg) in [
        (&dq, &p.attn.q, &mut g.attn.q),
        (&dk, &p.attn.k, &mut g.attn.k),
        (&dv, &p.attn.v, &mut g.attn.v),
    ] {
        da1 += &nn::linear_backward(
            cache.a1.view(),
            lp.weight.view(),
            dproj.view(),
            lg.weight.view_mut(),
            Some(lg.bias.view_mut()),
            true,
        )
        .unwrap();
    }
    dh + &nn::layer_norm_backward(
        da1.view(),
        &cache.ln1,
        p.norm1.scale.view(),
        g.norm1.scale.view_mut(),
        g.norm1.bias.view_mut(),
    )
}

/// Backpropagates `d loss / d logit` through the cached pass, accumulating
/// into `grads` (which must share the structure of `params`).
pub fn backward<R: Real>(
    cache: &ForwardCache<R>,
    params: &ModelParams<R>,
    dlogit: R,
    grads: &mut ModelParams<R>,
    enc: &EncoderConfig,
) {
    // head
    grads.head.weight.row_mut(0).scaled_add(dlogit, &cache.pooled);
    grads.head.bias[0] += dlogit;
    let n = cache.final_tokens.nrows();
    let dpooled = params.head.weight.row(0).mapv(|w| w * dlogit / R::from_usize(n).unwrap());
    let dfinal = Array2::from_shape_fn((n, dpooled.len()), |(_, j)| dpooled[j]);
    let mut dx = nn::layer_norm_backward(
        dfinal.view(),
        &cache.final_ln,
        params.final_norm.scale.view(),
        grads.final_norm.scale.view_mut(),
        grads.final_norm.bias.view_mut(),
    );
    for ((bc, bp), bg) in cache
        .blocks
        .iter()
        .zip(&params.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        dx = block_backward(dx, bc, bp, bg, enc);
    }
    match (&cache.frontend, &params.frontend, &mut grads.frontend) {
        (FrontendCache::Spectttra(c), FrontendParams::Spectttra(p), FrontendParams::Spectttra(g)) => {
            tokenizer::tokenizer_backward(dx.view(), c, p, g)
        }
        (FrontendCache::Vit(c), FrontendParams::Vit(p), FrontendParams::Vit(g)) => {
            tokenizer::patch_backward(dx.view(), c, p, g)
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(n_mels: usize, n_frames: usize) -> ModelConfig {
        ModelConfig::spectttra(n_mels, n_frames, ClipConfig::gamma(), EncoderConfig::tiny())
    }

    #[test]
    fn mlp_hidden_rounding() {
        assert_eq!(EncoderConfig::default().mlp_hidden(), 1025);
        assert_eq!(EncoderConfig::tiny().mlp_hidden(), 43);
    }

    #[test]
    fn encoder_config_validation() {
        let bad = EncoderConfig {
            embed_dim: 10,
            n_heads: 3,
            ..EncoderConfig::tiny()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig {
            mlp_ratio: 0.0,
            ..EncoderConfig::tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let cfg = tiny(16, 24);
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng(0)).unwrap();
        p.fill(0.0);
        let x = nn::normal((16, 24), 1.0, &mut rng(1));
        let z = forward_values(x.view(), &p, &cfg).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(sigmoid(z), 0.5);
    }

    #[test]
    fn head_param_count() {
        let head = LinearParams::<f32>::zeros(1, 384);
        assert_eq!(head.num_scalars(), 385);
    }

    #[test]
    fn analytic_count_matches_allocation() {
        for cfg in [
            tiny(16, 24),
            ModelConfig::spectttra(16, 24, ClipConfig::alpha().temporal_only(), EncoderConfig::tiny()),
            ModelConfig::vit(16, 32, PatchConfig { p: 8 }, EncoderConfig::tiny()),
            ModelConfig::spectttra(
                16,
                24,
                ClipConfig::beta(),
                EncoderConfig {
                    n_layers: 0,
                    ..EncoderConfig::tiny()
                },
            ),
        ] {
            let p = ModelParams::<f32>::init(&cfg, &mut rng(0)).unwrap();
            assert_eq!(p.count_params(), count_params(&cfg).unwrap(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_layer_count_is_tokenizer_norm_and_head() {
        let cfg = ModelConfig::spectttra(
            16,
            24,
            ClipConfig::gamma(),
            EncoderConfig {
                n_layers: 0,
                ..EncoderConfig::tiny()
            },
        );
        let p = ModelParams::<f32>::init(&cfg, &mut rng(0)).unwrap();
        let FrontendParams::Spectttra(tok) = &p.frontend else { unreachable!() };
        assert_eq!(p.count_params(), tok.num_scalars() + 2 * 16 + 17);
    }

    #[test]
    fn full_scale_param_count_in_published_bracket() {
        let cfg = ModelConfig::spectttra(128, 3744, ClipConfig::gamma(), EncoderConfig::default());
        let n = count_params(&cfg).unwrap() as f64 / 1e6;
        // reported 24 M; +-30 %
        assert!((24.0 * 0.7..=24.0 * 1.3).contains(&n), "{n} M");
    }

    #[test]
    fn permuting_tokens_leaves_logit_unchanged() {
        let cfg = tiny(16, 24);
        let p = ModelParams::<f64>::init(&cfg, &mut rng(3)).unwrap();
        let x = nn::normal((16, 24), 1.0, &mut rng(4));
        let FrontendParams::Spectttra(tok) = &p.frontend else { unreachable!() };
        let seq = tokenizer::tokenize_values(x.view(), tok, &ClipConfig::gamma()).unwrap();
        let base = forward_tokens(seq.tokens.view(), &p, &cfg).unwrap();
        assert!((base - forward_values(x.view(), &p, &cfg).unwrap()).abs() < 1e-12);
        let n = seq.n_tokens();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = seq.tokens.select(Axis(0), &perm);
        let z = forward_tokens(permuted.view(), &p, &cfg).unwrap();
        assert!((z - base).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_are_distributions_and_pooling_is_mean() {
        let cfg = tiny(16, 24);
        let p = ModelParams::<f64>::init(&cfg, &mut rng(5)).unwrap();
        let x = nn::normal((16, 24), 1.0, &mut rng(6));
        let cache = forward_cached::<f64, ChaCha8Rng>(x.view(), &p, &cfg, None).unwrap();
        assert_eq!(cache.attention_probs().count(), 4);
        for probs in cache.attention_probs() {
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        let n = cache.n_tokens() as f64;
        for j in 0..16 {
            let mean = cache.final_tokens().column(j).sum() / n;
            assert!((mean - cache.pooled()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(16, 24);
        let p = ModelParams::<f32>::init(&cfg, &mut rng(5)).unwrap();
        let x = nn::normal((16, 24), 1.0, &mut rng(6));
        let a = forward_values(x.view(), &p, &cfg).unwrap();
        let b = forward_values(x.view(), &p, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn non_finite_reports_location() {
        let cfg = tiny(16, 24);
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng(5)).unwrap();
        p.blocks[1].fc2.bias[0] = f64::NAN;
        let x = nn::normal((16, 24), 1.0, &mut rng(6));
        match forward_values(x.view(), &p, &cfg) {
            Err(Error::NonFinite { location }) => assert_eq!(location, "encoder layer 1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let cfg = tiny(16, 24);
        let p = ModelParams::<f64>::init(&cfg, &mut rng(5)).unwrap();
        let x = Array2::<f64>::zeros((16, 25));
        assert!(matches!(forward_values(x.view(), &p, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn frontend_labels() {
        assert_eq!(FrontendConfig::Spectttra(ClipConfig::gamma()).label(), "spectttra-gamma");
        assert_eq!(
            FrontendConfig::Spectttra(ClipConfig::alpha().spectral_only()).label(),
            "spectttra-alpha-spectral-only"
        );
        assert_eq!(FrontendConfig::Vit(PatchConfig { p: 16 }).label(), "vit-p16");
    }
}
