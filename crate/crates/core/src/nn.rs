//! Differentiable building blocks with hand-written backward passes.
//!
//! Weights follow the `out x in` convention, `y = x W^T + b`. Backward
//! functions accumulate parameter gradients in place (`+=`) so a batch can be
//! reduced into one gradient buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

/// Layer-norm epsilon used by every norm in the network.
pub const LN_EPS: f64 = 1e-6;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    let half = R::lit(0.5);
    half * x * (R::one() + (x * R::lit(INV_SQRT_2)).erf())
}

/// `d/dx gelu(x) = Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::lit(0.5);
    let cdf = half * (R::one() + (x * R::lit(INV_SQRT_2)).erf());
    let pdf = R::lit(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn gelu_backward<R: Real>(pre: &Array2<R>, grad_out: &Array2<R>) -> Array2<R> {
    let mut g = grad_out.clone();
    Zip::from(&mut g).and(pre).for_each(|g, &z| *g = *g * gelu_grad(z));
    g
}

/// `x W^T (+ b)`.
pub fn linear<R: Real>(x: ArrayView2<R>, w: ArrayView2<R>, b: Option<ArrayView1<R>>) -> Array2<R> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Accumulates `dW += dy^T x` and `db += sum_rows(dy)`; returns `dx = dy W`.
pub fn linear_backward<R: Real>(
    x: ArrayView2<R>,
    w: ArrayView2<R>,
    dy: ArrayView2<R>,
    dw: ArrayViewMut2<R>,
    db: Option<ArrayViewMut1<R>>,
    need_dx: bool,
) -> Option<Array2<R>> {
    let mut dw = dw;
    general_mat_mul(R::one(), &dy.t(), &x, R::one(), &mut dw);
    if let Some(mut db) = db {
        db += &dy.sum_axis(Axis(0));
    }
    need_dx.then(|| dy.dot(&w))
}

/// Cached state of one layer norm application.
#[derive(Debug, Clone)]
pub struct LayerNormCache<R> {
    /// Pre-affine normalized rows.
    pub normalized: Array2<R>,
    pub rstd: Array1<R>,
}

/// Row-wise layer norm over the last axis.
pub fn layer_norm<R: Real>(
    x: ArrayView2<R>,
    scale: ArrayView1<R>,
    bias: ArrayView1<R>,
) -> (Array2<R>, LayerNormCache<R>) {
    let d = R::from_usize(x.ncols()).unwrap();
    let eps = R::lit(LN_EPS);
    let mut normalized = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in normalized.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<R>() / d;
        *r = R::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &normalized * &scale + &bias;
    (y, LayerNormCache { normalized, rstd })
}

pub fn layer_norm_backward<R: Real>(
    dy: ArrayView2<R>,
    cache: &LayerNormCache<R>,
    scale: ArrayView1<R>,
    mut dscale: ArrayViewMut1<R>,
    mut dbias: ArrayViewMut1<R>,
) -> Array2<R> {
    dbias += &dy.sum_axis(Axis(0));
    dscale += &(&dy * &cache.normalized).sum_axis(Axis(0));
    let d = R::from_usize(dy.ncols()).unwrap();
    let dxhat = &dy * &scale;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &rs) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.normalized.rows())
        .zip(cache.rstd.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = rs / d * (d * gi - sum_g - xi * sum_gx));
    }
    dx
}

/// In-place row softmax.
pub fn softmax_rows<R: Real>(x: &mut Array2<R>) {
    for mut row in x.rows_mut() {
        let max = row.fold(R::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Given softmax output `p` and upstream `dp`, returns `dS`.
pub fn softmax_rows_backward<R: Real>(p: &Array2<R>, dp: &Array2<R>) -> Array2<R> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut out, pr), gr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.dot(&gr);
        Zip::from(&mut out)
            .and(&pr)
            .and(&gr)
            .for_each(|o, &pi, &gi| *o = pi * (gi - dot));
    }
    ds
}

/// Inverted dropout mask (entries 0 or `1/(1-p)`), `None` when inactive.
pub fn dropout_mask<R: Real, G: Rng + ?Sized>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut G>,
) -> Option<Array2<R>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = R::lit(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            R::zero()
        } else {
            keep
        }
    }))
}

/// Normal(0, std) samples truncated (by rejection) to two standard deviations.
pub fn trunc_normal<R: Real, G: Rng + ?Sized, Sh: ndarray::ShapeBuilder<Dim = D>, D: ndarray::Dimension>(
    shape: Sh,
    std: f64,
    rng: &mut G,
) -> ndarray::Array<R, D> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ndarray::Array::from_shape_simple_fn(shape, || loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break R::lit(v);
        }
    })
}

/// Plain Normal(0, std) samples.
pub fn normal<R: Real, G: Rng + ?Sized, Sh: ndarray::ShapeBuilder<Dim = D>, D: ndarray::Dimension>(
    shape: Sh,
    std: f64,
    rng: &mut G,
) -> ndarray::Array<R, D> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ndarray::Array::from_shape_simple_fn(shape, || R::lit(dist.sample(rng)))
}

pub fn all_finite<R: Real>(x: &Array2<R>) -> bool {
    x.iter().all(|v| v.is_finite())
}
