//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every forward operation pushes
//! one node holding its output and whatever it needs for the backward pass, so
//! node order is already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Parameters live in a [`ParamStore`] outside the graph and are
//! borrowed (not copied) into it as leaves.

use std::borrow::Cow;
use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`, where `op` optionally transposes the
/// stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; strides address only inside each buffer.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(op, format!("extents must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {n} values but {len} were given"),
        ));
    }
    Ok(())
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::numeric(op, format!("non-finite value {} at flat index {i}", data[i]))),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape, data.len())?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; the leading extent for higher ranks.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of length {} for tensor {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered table of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = true;
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&mut self.tensors)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients of a finished backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for &(id, var) in &grads.params {
            if let Some(g) = grads.get(var) {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedFill {
        x: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        floored: Vec<bool>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        smoothing: T,
    },
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Score written into disallowed attention positions before the softmax.
pub const MASK_FILL: f64 = -1e9;

/// Floor applied to per-vector variance in layer normalization.
pub const VARIANCE_FLOOR: f64 = 1e-10;

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: Option<&'a ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Graph without parameters, in evaluation mode.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            dropout_rng: None,
        }
    }

    pub fn with_params(params: &'a ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Switches on training behaviour (dropout) with a seeded generator.
    pub fn training(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Owned leaf; gradients are tracked when the tensor requires them.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad;
        self.push("input", t.shape, t.data, Op::Leaf, needs)
    }

    /// Leaf borrowed for the lifetime of the graph.
    pub fn borrow(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        check_finite("input", &t.data)?;
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        check_shape("constant", &shape, data.len())?;
        self.push("constant", shape, data, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Each parameter maps to one node per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {:?}{} x {:?}{}",
                    self.shape(a),
                    if trans_a { "ᵀ" } else { "" },
                    self.shape(b),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), trans_a, self.value(b), trans_b, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
            needs,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), needs)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias { x, bias }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor }, needs)
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu(x), needs)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| xs[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xs[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        )
    }

    /// Replaces entries where `keep` is false by [`MASK_FILL`].
    pub fn masked_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} entries for shape {:?}", keep.len(), self.shape(x)),
            ));
        }
        let fill = T::of(MASK_FILL);
        let out = self
            .value(x)
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(
            "masked_fill",
            shape,
            out,
            Op::MaskedFill {
                x,
                keep: keep.to_vec(),
            },
            needs,
        )
    }

    /// Normalizes each last-axis vector to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if c < 2 {
            return Err(Error::shape("layer_norm", "last axis must have at least 2 entries"));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for input {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let floor = T::of(VARIANCE_FLOOR);
        let n = T::from_usize(c).unwrap();
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / c;
        let mut normalized = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is_floored = var < floor;
            let r = T::one() / var.max(floor).sqrt();
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
            inv_std.push(r);
            floored.push(is_floored);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
                floored,
            },
            needs,
        )
    }

    /// Gathers rows of `table` (vocab × d) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids given"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Sub-matrix `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice", x)?;
        if rows.is_empty() || cols.is_empty() || rows.end > r || cols.end > c {
            return Err(Error::shape(
                "slice",
                format!("rows {rows:?} cols {cols:?} of a {r}x{c} matrix"),
            ));
        }
        let xs = self.value(x);
        if cols.start == 0 && cols.end == c {
            let out = xs[rows.start * c..rows.end * c].to_vec();
            let needs = self.needs(x);
            return self.push(
                "slice",
                vec![rows.len(), c],
                out,
                Op::Slice { x, rows, cols },
                needs,
            );
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&xs[i * c + cols.start..i * c + cols.end]);
        }
        let needs = self.needs(x);
        let shape = vec![rows.len(), cols.len()];
        self.push("slice", shape, out, Op::Slice { x, rows, cols }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let rows = self.matrix_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            vec![rows, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let cols = self.matrix_dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push("sum", vec![1], vec![s], Op::Sum(x), needs)
    }

    /// Inverted dropout: scales kept units by 1/(1-p) while training, identity
    /// otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Usage(format!("dropout probability {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, needs)
    }

    /// Weighted sum over rows of token-level cross-entropy between
    /// `softmax(logits)` and the (optionally smoothed) one-hot target.
    /// Rows with zero weight contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        smoothing: f64,
    ) -> Result<Var> {
        let (r, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{} targets / {} weights for {r} rows",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target id {bad} outside vocabulary of {v}"),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Usage(format!("label smoothing {smoothing} not in [0, 1)")));
        }
        let eps = T::of(smoothing);
        let uniform = eps / T::from_usize(v).unwrap();
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, row) in xs.chunks(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            if weights[i] == T::zero() {
                continue;
            }
            let mut ce = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[i * v + j] = logp.exp();
                let q = uniform + if j == targets[i] { T::one() - eps } else { T::zero() };
                if q > T::zero() {
                    ce = ce - q * logp;
                }
            }
            total = total + weights[i] * ce;
        }
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                smoothing: eps,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<'a, T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc_buf(grads, a) {
                    if trans_a {
                        gemm(k, n, m, bv, trans_b, gout, true, ga, true);
                    } else {
                        gemm(m, n, k, gout, false, bv, !trans_b, ga, true);
                    }
                }
                if let Some(gb) = self.acc_buf(grads, b) {
                    if trans_b {
                        gemm(n, m, k, gout, true, av, trans_a, gb, true);
                    } else {
                        gemm(k, m, n, av, !trans_a, gout, false, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc_buf(grads, v) {
                        g.iter_mut().zip(gout).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(g) = self.acc_buf(grads, a) {
                    for ((x, &d), &o) in g.iter_mut().zip(gout).zip(bv.iter()) {
                        *x = *x + d * o;
                    }
                }
                if let Some(g) = self.acc_buf(grads, b) {
                    for ((x, &d), &o) in g.iter_mut().zip(gout).zip(av.iter()) {
                        *x = *x + d * o;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(g) = self.acc_buf(grads, x) {
                    g.iter_mut().zip(gout).for_each(|(x, &d)| *x = *x + d);
                }
                if let Some(g) = self.acc_buf(grads, bias) {
                    let c = g.len();
                    for row in gout.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(g) = self.acc_buf(grads, x) {
                    g.iter_mut().zip(gout).for_each(|(x, &d)| *x = *x + d * factor);
                }
            }
            &Op::Relu(x) => {
                let xs = self.value(x);
                if let Some(g) = self.acc_buf(grads, x) {
                    for ((gx, &d), &v) in g.iter_mut().zip(gout).zip(xs.iter()) {
                        if v > T::zero() {
                            *gx = *gx + d;
                        }
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(g) = self.acc_buf(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|j| gout[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                g[p] = g[p] + y[p] * (gout[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedFill { x, keep } => {
                if let Some(g) = self.acc_buf(grads, *x) {
                    for ((gx, &d), &k) in g.iter_mut().zip(gout).zip(keep) {
                        if k {
                            *gx = *gx + d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
                floored,
            } => {
                let c = self.shape(*gain)[0];
                let gv = self.value(*gain);
                let n = T::from_usize(c).unwrap();
                if let Some(g) = self.acc_buf(grads, *x) {
                    for (r, (grow, hrow)) in gout.chunks(c).zip(normalized.chunks(c)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(gv.iter()).map(|(&d, &w)| d * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = if floored[r] {
                            T::zero()
                        } else {
                            dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n
                        };
                        for j in 0..c {
                            let p = r * c + j;
                            g[p] = g[p] + inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(g) = self.acc_buf(grads, *gain) {
                    for (grow, hrow) in gout.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            g[j] = g[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(g) = self.acc_buf(grads, *bias) {
                    for grow in gout.chunks(c) {
                        g.iter_mut().zip(grow).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.acc_buf(grads, *table) {
                    for (row, &i) in gout.chunks(d).zip(ids) {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &v)| *x = *x + v);
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                let c = self.shape(*x)[1];
                let w = cols.len();
                if let Some(g) = self.acc_buf(grads, *x) {
                    for (r, row) in rows.clone().zip(gout.chunks(w)) {
                        g[r * c + cols.start..r * c + cols.end]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, &v)| *x = *x + v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(g) = self.acc_buf(grads, p) {
                        for (r, grow) in g.chunks_mut(w).enumerate() {
                            let src = &gout[r * total + offset..r * total + offset + w];
                            grow.iter_mut().zip(src).for_each(|(x, &v)| *x = *x + v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(g) = self.acc_buf(grads, p) {
                        g.iter_mut()
                            .zip(&gout[offset..offset + n])
                            .for_each(|(x, &v)| *x = *x + v);
                    }
                    offset += n;
                }
            }
            &Op::Sum(x) => {
                let d = gout[0];
                if let Some(g) = self.acc_buf(grads, x) {
                    g.iter_mut().for_each(|v| *v = *v + d);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.acc_buf(grads, *x) {
                    for ((gx, &d), &m) in g.iter_mut().zip(gout).zip(mask) {
                        *gx = *gx + d * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                smoothing,
            } => {
                let v = self.shape(*logits)[1];
                let d = gout[0];
                let uniform = *smoothing / T::from_usize(v).unwrap();
                if let Some(g) = self.acc_buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..v {
                            let q = uniform + if j == t { T::one() - *smoothing } else { T::zero() };
                            let p = r * v + j;
                            g[p] = g[p] + d * w * (probs[p] - q);
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]; detached from the graph's borrows.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }
}

/// Numerically stable log-softmax of one row, in double precision.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Usage(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval_scalar(op: &'static str, g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let value = g.value(v);
    if value.len() != 1 {
        return Err(Error::Usage(format!("{op}: function must return a scalar")));
    }
    if !value[0].is_finite() {
        return Err(Error::numeric(op, "function value is not finite"));
    }
    Ok(value[0])
}

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns the maximum over components of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, Var) -> Result<Var>,
{
    check_step(step)?;
    let analytic = {
        let mut g = Graph::new();
        let xv = g.input(x.clone().with_grad())?;
        let out = f(&mut g, xv)?;
        eval_scalar("grad_check", &g, out)?;
        let grads = g.backward(out)?;
        grads
            .get(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(t)?;
        let out = f(&mut g, xv)?;
        eval_scalar("grad_check", &g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Central-difference gradient check of a scalar function of every parameter
/// in `store`; same error measure as [`grad_check`].
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
{
    check_step(step)?;
    let mut grads = ParamStore::clone(store);
    grads.zero_grads();
    {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        eval_scalar("grad_check", &g, out)?;
        let gr = g.backward(out)?;
        grads.accumulate(&gr)?;
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic = grads
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let fp = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                eval_scalar("grad_check", &g, out)?
            };
            probe.get_mut(id).data_mut()[i] = orig - step;
            let fm = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                eval_scalar("grad_check", &g, out)?
            };
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_error(a, (fp - fm) / (2.0 * step)));
        }
    }
    Ok(worst)
}
