//! Uniform traversal of learnable tensors in a fixed order.

use ndarray::{ArrayBase, Data, DataMut, Dimension};

use crate::nn::{LayerNorm, Linear, PatchConv};
use crate::real::Real;

/// A tensor as seen by the visitor: name, shape and contiguous values.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: &'a [usize],
    pub values: &'a [F],
}

/// Anything holding learnable tensors. Visit order is the serialization order.
pub trait ParamSet<F: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F]));
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |t| n += t.values.len());
        n
    }

    /// All values concatenated in visit order.
    fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |t| out.extend_from_slice(t.values));
        out
    }

    /// Overwrite all values from a flat slice in visit order.
    fn assign_flat(&mut self, flat: &[F]) {
        let mut off = 0;
        self.visit_mut(&mut |v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector has the wrong length");
    }

    /// `self += other` elementwise.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |v| {
            let n = v.len();
            for (a, b) in v.iter_mut().zip(&flat[off..off + n]) {
                *a += *b;
            }
            off += n;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array<'a, F, S, D>(
    prefix: &str,
    name: &str,
    a: &'a ArrayBase<S, D>,
    f: &mut dyn FnMut(TensorRef<'a, F>),
) where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    f(TensorRef {
        name: join(prefix, name),
        shape: a.shape(),
        values: a.as_slice().expect("parameter arrays are contiguous"),
    });
}

pub(crate) fn visit_array_mut<F, S, D>(a: &mut ArrayBase<S, D>, f: &mut dyn FnMut(&mut [F]))
where
    F: Real,
    S: DataMut<Elem = F>,
    D: Dimension,
{
    f(a.as_slice_mut().expect("parameter arrays are contiguous"));
}

impl<F: Real> ParamSet<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        visit_array(prefix, "weight", &self.weight, f);
        visit_array(prefix, "bias", &self.bias, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        visit_array_mut(&mut self.weight, f);
        visit_array_mut(&mut self.bias, f);
    }
    fn zeros_like(&self) -> Self {
        Linear::zeros(self.input_dim(), self.output_dim())
    }
}

impl<F: Real> ParamSet<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        visit_array(prefix, "gamma", &self.gamma, f);
        visit_array(prefix, "beta", &self.beta, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        visit_array_mut(&mut self.gamma, f);
        visit_array_mut(&mut self.beta, f);
    }
    fn zeros_like(&self) -> Self {
        LayerNorm::zeros(self.gamma.len())
    }
}

impl<F: Real> ParamSet<F> for PatchConv<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, F>)) {
        visit_array(prefix, "weight", &self.weight, f);
        visit_array(prefix, "bias", &self.bias, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        visit_array_mut(&mut self.weight, f);
        visit_array_mut(&mut self.bias, f);
    }
    fn zeros_like(&self) -> Self {
        PatchConv::zeros(self.bias.len())
    }
}
