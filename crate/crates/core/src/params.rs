//! Named parameter tensors shared by the tokenizer, encoder and optimizer.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::Real;

/// A tree of named trainable tensors visited in a fixed order.
///
/// Gradient buffers and optimizer moments reuse the parameter types, so the
/// traversal order is identical for all of them.
pub trait NamedTensors<R: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>));

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, R>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, R>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn fill(&mut self, value: R) {
        self.visit_mut("", &mut |_, mut t| t.fill(value));
    }

    /// A zero-filled copy with the same structure.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(R::zero());
        z
    }

    /// First non-finite tensor, by name.
    fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit("", &mut |n, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(n);
            }
        });
        bad
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<R> {
    pub scale: Array1<R>,
    pub bias: Array1<R>,
}

impl<R: Real> LayerNormParams<R> {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }
}

impl<R: Real> NamedTensors<R> for LayerNormParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        f(join(prefix, "scale"), self.scale.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        f(join(prefix, "scale"), self.scale.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Affine map with `out x in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<R> {
    pub weight: Array2<R>,
    pub bias: Array1<R>,
}

impl<R: Real> LinearParams<R> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

impl<R: Real> NamedTensors<R> for LinearParams<R> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, R>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, R>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}
