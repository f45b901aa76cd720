//! Eager reverse-mode differentiation over 2-D tensors.
//!
//! Values are computed when a node is created, so a [`Graph`] doubles as
//! the plain forward evaluator. Parameters are borrowed, never copied, and
//! are identified by address so gradients can be routed back to the weight
//! structs that own them.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::tensor::{self, NormStats, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Array2<T>),
    Borrowed(&'p Array2<T>),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy(Var, Array2<T>),
    BceWithLogits(Var, Array2<T>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<*const Array2<T>, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Array2<T>>>,
    params: HashMap<*const Array2<T>, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Array2<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for a parameter tensor registered with [`Graph::param`].
    pub fn of_param(&self, p: &Array2<T>) -> Option<&Array2<T>> {
        self.params
            .get(&(p as *const _))
            .and_then(|v| self.by_node[v.0].as_ref())
    }
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input data; no gradient is tracked.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable tensor. Registering the same tensor twice returns the
    /// same node.
    pub fn param(&mut self, p: &'p Array2<T>) -> Var {
        let key = p as *const _;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(p),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = tensor::matmul(&self.value(a).view(), &self.value(b).view());
        let g = self.grad_any(&[a, b]);
        self.push(y, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).t().to_owned();
        let g = self.grad_any(&[a]);
        self.push(y, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let g = self.grad_any(&[a, b]);
        self.push(y, Op::Add(a, b), g)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let y = self.value(a) + self.value(r);
        let g = self.grad_any(&[a, r]);
        self.push(y, Op::AddRow(a, r), g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a) * c;
        let g = self.grad_any(&[a]);
        self.push(y, Op::Scale(a, c), g)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (y, stats) = tensor::layer_norm(
            &self.value(x).view(),
            &self.value(gamma).view(),
            &self.value(beta).view(),
        );
        let g = self.grad_any(&[x, gamma, beta]);
        self.push(y, Op::LayerNorm { x, gamma, beta, stats }, g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = tensor::gelu(&self.value(a).view());
        let g = self.grad_any(&[a]);
        self.push(y, Op::Gelu(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = tensor::softmax_rows(&self.value(a).view());
        let g = self.grad_any(&[a]);
        self.push(y, Op::SoftmaxRows(a), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![start..end, ..]).to_owned();
        let g = self.grad_any(&[a]);
        self.push(y, Op::SliceRows(a, start), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.grad_any(&[a]);
        self.push(y, Op::SliceCols(a, start), g)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let y = self.value(a).select(Axis(0), rows);
        let g = self.grad_any(&[a]);
        self.push(y, Op::GatherRows(a, rows.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let g = self.grad_any(parts);
        self.push(y, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let g = self.grad_any(parts);
        self.push(y, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let y = tensor::mean_rows(&self.value(a).view());
        let g = self.grad_any(&[a]);
        self.push(y, Op::MeanRows(a), g)
    }

    /// Soft-target cross entropy summed over rows; result is `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, target: Array2<T>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), target.dim(), "cross_entropy target shape");
        let mut total = T::zero();
        for (zr, yr) in z.rows().into_iter().zip(target.rows()) {
            let (l, _) = tensor::cross_entropy_row(&zr.to_vec(), &yr.to_vec());
            total += l;
        }
        let g = self.grad_any(&[logits]);
        self.push(tensor::row(&[total]), Op::CrossEntropy(logits, target), g)
    }

    /// Binary cross entropy with logits summed over all entries; `1 x 1`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Array2<T>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), target.dim(), "bce target shape");
        let mut total = T::zero();
        for (zr, yr) in z.rows().into_iter().zip(target.rows()) {
            total += tensor::bce_with_logits_row(&zr.to_vec(), &yr.to_vec());
        }
        let g = self.grad_any(&[logits]);
        self.push(tensor::row(&[total]), Op::BceWithLogits(logits, target), g)
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(&node.op, Var(i), &dy, &mut grads);
            grads[i] = Some(dy);
        }

        Gradients {
            by_node: grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, op: &Op<T>, out: Var, dy: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut acc = |v: Var, g: Array2<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].needs_grad {
                    acc(*a, dy.dot(&bv.t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, av.t().dot(dy));
                }
            }
            Op::Transpose(a) => acc(*a, dy.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, dy.clone());
                acc(*r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, dy * *c),
            Op::LayerNorm { x, gamma, beta, stats } => {
                let gv = self.value(*gamma);
                let xhat = &stats.normalized;
                if self.nodes[gamma.0].needs_grad {
                    acc(*gamma, (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[beta.0].needs_grad {
                    acc(*beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[x.0].needs_grad {
                    let n = T::from_usize(xhat.ncols()).unwrap();
                    let dxhat = dy * gv;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dhx = dh.iter().zip(xh).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                        let inv = stats.inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dhx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let mut dx = dy.clone();
                dx.zip_mut_with(xv, |d, &x| *d *= tensor::gelu_grad(x));
                acc(*a, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(out);
                let mut dx = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot = yr.iter().zip(dr).fold(T::zero(), |s, (&p, &d)| s + p * d);
                    for c in 0..y.ncols() {
                        dx[[r, c]] = yr[c] * (dr[c] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::SliceRows(a, start) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                dx.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(*a, dx);
            }
            Op::GatherRows(a, rows) => {
                let mut dx = Array2::zeros(self.value(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &dy.row(i);
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    acc(p, dy.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    acc(p, dy.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::MeanRows(a) => {
                let xv = self.value(*a);
                let n = T::from_usize(xv.nrows()).unwrap();
                let row = dy.row(0).mapv(|v| v / n);
                let mut dx = Array2::zeros(xv.dim());
                for mut r in dx.rows_mut() {
                    r.assign(&row);
                }
                acc(*a, dx);
            }
            Op::CrossEntropy(a, target) => {
                let z = self.value(*a);
                let scale = dy[[0, 0]];
                let mut dx = Array2::zeros(z.dim());
                for (r, (zr, yr)) in z.rows().into_iter().zip(target.rows()).enumerate() {
                    let g = tensor::cross_entropy_row_grad(&zr.to_vec(), &yr.to_vec());
                    for (c, v) in g.into_iter().enumerate() {
                        dx[[r, c]] = v * scale;
                    }
                }
                acc(*a, dx);
            }
            Op::BceWithLogits(a, target) => {
                let z = self.value(*a);
                let scale = dy[[0, 0]];
                let mut dx = z.mapv(tensor::sigmoid);
                dx -= target;
                dx *= scale;
                acc(*a, dx);
            }
        }
    }
}
