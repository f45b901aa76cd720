//! Parameter containers, initialization and name-ordered traversal.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, Var};
use crate::config::NormMode;
use crate::tensor::Scalar;

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform for a `fan_in x fan_out` weight.
    Xavier,
    Normal(f64),
}

/// Source of initial tensor values.
pub trait Initializer<T> {
    fn tensor(&mut self, init: Init, rows: usize, cols: usize) -> Array2<T>;
}

/// Random initialization driven by any `Rng`.
pub struct RandomInit<'r, R>(pub &'r mut R);

impl<T: Scalar, R: Rng> Initializer<T> for RandomInit<'_, R> {
    fn tensor(&mut self, init: Init, rows: usize, cols: usize) -> Array2<T> {
        match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("xavier bound");
                Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(self.0)))
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("normal std");
                Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(self.0)))
            }
        }
    }
}

/// Allocates every tensor as zeros; used when the values come from
/// elsewhere (checkpoints, precision casts).
pub struct ZeroInit;

impl<T: Scalar> Initializer<T> for ZeroInit {
    fn tensor(&mut self, _init: Init, rows: usize, cols: usize) -> Array2<T> {
        Array2::zeros((rows, cols))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic, name-ordered traversal of every trainable tensor.
///
/// `visit` and `visit_mut` must yield tensors in the same order; optimizer
/// state and checkpoints rely on it.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>));

    fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Copies values from `other` (same structure, possibly another
    /// precision) into `self`.
    fn assign_from<U: Scalar, P: Parameters<U>>(&mut self, other: &P)
    where
        Self: Sized,
    {
        let src = other.named_tensors();
        let mut i = 0;
        self.visit_mut("", &mut |name, t| {
            let (sname, s) = &src[i];
            assert_eq!(&name, sname, "parameter layout mismatch");
            assert_eq!(t.dim(), s.dim(), "parameter shape mismatch for {name}");
            t.zip_mut_with(s, |d, &v| *d = T::of(v.to_f64_lossy()));
            i += 1;
        });
        assert_eq!(i, src.len(), "parameter count mismatch");
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut dyn Initializer<T>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.tensor(Init::Xavier, fan_in, fan_out),
            bias: init.tensor(Init::Zeros, 1, fan_out),
        }
    }

    pub fn apply<'p>(&'p self, g: &mut Graph<'p, T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Learned scale/shift of a layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(init: &mut dyn Initializer<T>, dim: usize) -> Self {
        Self {
            gamma: init.tensor(Init::Ones, 1, dim),
            beta: init.tensor(Init::Zeros, 1, dim),
        }
    }

    pub fn apply<'p>(&'p self, g: &mut Graph<'p, T>, x: Var, mode: NormMode) -> Var {
        match mode {
            NormMode::Identity => x,
            NormMode::Standard => {
                let gamma = g.param(&self.gamma);
                let beta = g.param(&self.beta);
                g.layer_norm(x, gamma, beta)
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
