//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and are borrowed by the tape, so many tapes can run
//! concurrently against one store (one tape per instance, per thread).
//! Vectors are represented as `1 x n` matrices throughout.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot/Xavier uniform over `rows + cols`.
    XavierUniform,
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Named, ordered collection of learnable matrices.
///
/// Each parameter's initial value depends only on the store seed and the
/// parameter name, so adding or removing one parameter never shifts the
/// initialisation of the others.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a new parameter. Panics if the name is already taken.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let value = match init {
            Init::Zeros => Matrix::zeros((rows, cols)),
            Init::Ones => Matrix::ones((rows, cols)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Matrix::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            }
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Matrix::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            }
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound);
                Matrix::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
            }
        };
        self.insert(name, value)
    }

    /// Registers a parameter with an explicit value.
    pub fn insert(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradient of one parameter produced by a single tape.
#[derive(Debug, Clone)]
pub enum ParamGrad {
    Dense(Matrix),
    /// Row-sparse gradient from embedding lookups.
    Rows(BTreeMap<usize, Array1<f64>>),
}

impl ParamGrad {
    pub fn add_into(&self, target: &mut Matrix, scale: f64) {
        match self {
            ParamGrad::Dense(g) => target.scaled_add(scale, g),
            ParamGrad::Rows(rows) => {
                for (&r, g) in rows {
                    target.row_mut(r).scaled_add(scale, g);
                }
            }
        }
    }

    pub fn to_dense(&self, shape: (usize, usize)) -> Matrix {
        let mut m = Matrix::zeros(shape);
        self.add_into(&mut m, 1.0);
        m
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Drops node gradients, keeping only the parameter part.
    pub fn into_params(self) -> BTreeMap<ParamId, ParamGrad> {
        self.params
    }
}

/// Dense gradient accumulator sized to a parameter store.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Option<Matrix>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(
        &mut self,
        store: &ParamStore,
        grads: &BTreeMap<ParamId, ParamGrad>,
        scale: f64,
    ) {
        for (&id, g) in grads {
            let slot = self.grads[id.0].get_or_insert_with(|| Matrix::zeros(store.get(id).dim()));
            g.add_into(slot, scale);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Array1<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SumRows(Var, usize, usize),
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        edge_k: Option<Var>,
        edge_v: Option<Var>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Nll(Var, Vec<usize>),
    Sum(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation for later differentiation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    log_softmax_rows(x).mapv(f64::exp)
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    edge_k: Option<&Matrix>,
    edge_v: Option<&Matrix>,
    heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let (n, d) = q.dim();
    let m = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let mut scores = qh.dot(&kh.t());
        if let Some(ek) = edge_k {
            for i in 0..n {
                for j in 0..m {
                    let e = ek.slice(s![i * m + j, h * dh..(h + 1) * dh]);
                    scores[[i, j]] += qh.row(i).dot(&e);
                }
            }
        }
        scores.mapv_inplace(|x| x * scale);
        let p = softmax_rows(&scores);
        let mut oh = p.dot(&v.slice(cols));
        if let Some(ev) = edge_v {
            for i in 0..n {
                let mut row = oh.row_mut(i);
                for j in 0..m {
                    let e = ev.slice(s![i * m + j, h * dh..(h + 1) * dh]);
                    row.scaled_add(p[[i, j]], &e);
                }
            }
        }
        out.slice_mut(cols).assign(&oh);
        probs.push(p);
    }
    (out, probs)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never needs gradients (inference).
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input whose gradient should be reported by `backward`.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Param(id),
            needs_grad: self.grad_enabled && !store.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.nodes[v.0].value.get()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + &r.row(0);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        self.push(value, Op::OneMinus(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let mut xhat = xv - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), &[a])
    }

    /// Selects rows by index (with repetition). Used for embedding lookups.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn row(&mut self, a: Var, row: usize) -> Var {
        self.gather_rows(a, &[row])
    }

    /// Sums rows `start..end` into a `1 x n` row.
    pub fn sum_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self
            .value(a)
            .slice(s![start..end, ..])
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.push(value, Op::SumRows(a, start, end), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `n x d`, `k` and `v` are `m x d`. Optional edge terms are
    /// `(n * m) x d` with row `i * m + j` belonging to the pair `(i, j)`; they
    /// are added to the keys and values of that pair before the dot product
    /// and the weighted sum.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        edge_k: Option<Var>,
        edge_v: Option<Var>,
        heads: usize,
    ) -> Var {
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            edge_k.map(|e| self.value(e)),
            edge_v.map(|e| self.value(e)),
            heads,
        );
        let mut inputs = vec![q, k, v];
        inputs.extend(edge_k);
        inputs.extend(edge_v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                edge_k,
                edge_v,
                heads,
                probs,
            },
            &inputs,
        )
    }

    /// Attention probabilities of the most recent attention node `a`, one
    /// `n x m` matrix per head.
    pub fn attention_probs(&self, a: Var) -> Option<&[Matrix]> {
        match &self.nodes[a.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Negative log-likelihood `-sum_r logp[r, targets[r]]` as a scalar.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Var {
        let lp = self.value(log_probs);
        assert_eq!(lp.nrows(), targets.len(), "nll: one target per row");
        let total: f64 = targets.iter().enumerate().map(|(r, &t)| -lp[[r, t]]).sum();
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::Nll(log_probs, targets.to_vec()),
            &[log_probs],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum(a), &[a])
    }

    /// Adds scalar nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut iter = parts.iter();
        let first = *iter.next().expect("add_scalars: empty");
        iter.fold(first, |acc, &p| self.add(acc, p))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Array1<f64>>> = BTreeMap::new();
        grads[loss.0] = Some(Matrix::ones(self.value(loss).dim()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut sparse);
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, ParamGrad> = BTreeMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].as_ref() {
                params.insert(id, ParamGrad::Dense(g.clone()));
            }
        }
        for (id, rows) in sparse {
            match params.get_mut(&id) {
                Some(ParamGrad::Dense(g)) => {
                    for (r, row) in rows {
                        g.row_mut(r).scaled_add(1.0, &row);
                    }
                }
                _ => {
                    params.insert(id, ParamGrad::Rows(rows));
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        node: &Node<'p>,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        sparse: &mut BTreeMap<ParamId, BTreeMap<usize, Array1<f64>>>,
    ) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, factor) => {
                if self.wants(*a) {
                    acc(*a, g * *factor);
                }
            }
            Op::OneMinus(a) => {
                if self.wants(*a) {
                    acc(*a, -g);
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let y = node.value.get();
                    acc(*a, Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y)));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = node.value.get();
                    acc(*a, Zip::from(g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    acc(*a, Zip::from(g).and(x).map_collect(|&g, &x| g * gelu_grad(x)));
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let p = node.value.get().mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, g - &(&p * &gsum));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let d = xhat.ncols() as f64;
                    let dxhat = g * &self.value(*gamma).row(0);
                    let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut dx = &dxhat * d - &sum_dxhat - &(xhat * &sum_dxhat_xhat);
                    dx *= &(inv_std / d).insert_axis(Axis(1));
                    acc(*x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.wants(p) {
                        acc(p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.wants(p) {
                        acc(p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.wants(*a) {
                    let mut full = Matrix::zeros(self.value(*a).dim());
                    full.slice_mut(s![.., *start..*end]).assign(g);
                    acc(*a, full);
                }
            }
            Op::GatherRows(a, rows) => {
                if self.wants(*a) {
                    if let Op::Param(id) = self.nodes[a.0].op {
                        let entry = sparse.entry(id).or_default();
                        for (k, &r) in rows.iter().enumerate() {
                            entry
                                .entry(r)
                                .and_modify(|row| *row += &g.row(k))
                                .or_insert_with(|| g.row(k).to_owned());
                        }
                    } else {
                        let mut full = Matrix::zeros(self.value(*a).dim());
                        for (k, &r) in rows.iter().enumerate() {
                            full.row_mut(r).scaled_add(1.0, &g.row(k));
                        }
                        acc(*a, full);
                    }
                }
            }
            Op::SumRows(a, start, end) => {
                if self.wants(*a) {
                    let mut full = Matrix::zeros(self.value(*a).dim());
                    for r in *start..*end {
                        full.row_mut(r).assign(&g.row(0));
                    }
                    acc(*a, full);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    acc(*a, g.t().to_owned());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                edge_k,
                edge_v,
                heads,
                probs,
            } => {
                let grads_in = self.attention_backward(g, *q, *k, *v, *edge_k, *edge_v, *heads, probs);
                let [dq, dk, dv, dek, dev] = grads_in;
                if self.wants(*q) {
                    acc(*q, dq);
                }
                if self.wants(*k) {
                    acc(*k, dk);
                }
                if self.wants(*v) {
                    acc(*v, dv);
                }
                if let Some(e) = edge_k {
                    if self.wants(*e) {
                        acc(*e, dek);
                    }
                }
                if let Some(e) = edge_v {
                    if self.wants(*e) {
                        acc(*e, dev);
                    }
                }
            }
            Op::Nll(lp, targets) => {
                if self.wants(*lp) {
                    let scale = g[[0, 0]];
                    let mut d = Matrix::zeros(self.value(*lp).dim());
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] = -scale;
                    }
                    acc(*lp, d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc(*a, Matrix::from_elem(self.value(*a).dim(), g[[0, 0]]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        q: Var,
        k: Var,
        v: Var,
        edge_k: Option<Var>,
        edge_v: Option<Var>,
        heads: usize,
        probs: &[Matrix],
    ) -> [Matrix; 5] {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let ek = edge_k.map(|e| self.value(e));
        let ev = edge_v.map(|e| self.value(e));
        let (n, d) = qv.dim();
        let m = kv.nrows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dq = Matrix::zeros((n, d));
        let mut dk = Matrix::zeros((m, d));
        let mut dv = Matrix::zeros((m, d));
        let mut dek = if ek.is_some() { Matrix::zeros((n * m, d)) } else { Matrix::zeros((0, 0)) };
        let mut dev = if ev.is_some() { Matrix::zeros((n * m, d)) } else { Matrix::zeros((0, 0)) };

        for (h, p) in probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let gh = g.slice(cols);
            // dP = dOut (V + Ev)^T
            let mut dp = gh.dot(&vv.slice(cols).t());
            if let Some(ev) = ev {
                for i in 0..n {
                    for j in 0..m {
                        let e = ev.slice(s![i * m + j, h * dh..(h + 1) * dh]);
                        dp[[i, j]] += gh.row(i).dot(&e);
                        dev.slice_mut(s![i * m + j, h * dh..(h + 1) * dh])
                            .scaled_add(p[[i, j]], &gh.row(i));
                    }
                }
            }
            dv.slice_mut(cols).scaled_add(1.0, &p.t().dot(&gh));
            // softmax backward
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = p * &(&dp - &row_dot);
            ds.mapv_inplace(|x| x * scale);
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            dq.slice_mut(cols).scaled_add(1.0, &ds.dot(&kh));
            dk.slice_mut(cols).scaled_add(1.0, &ds.t().dot(&qh));
            if let Some(ek) = ek {
                let mut dq_h = dq.slice_mut(cols);
                for i in 0..n {
                    for j in 0..m {
                        let e = ek.slice(s![i * m + j, h * dh..(h + 1) * dh]);
                        dq_h.row_mut(i).scaled_add(ds[[i, j]], &e);
                        dek.slice_mut(s![i * m + j, h * dh..(h + 1) * dh])
                            .scaled_add(ds[[i, j]], &qh.row(i));
                    }
                }
            }
        }
        [dq, dk, dv, dek, dev]
    }
}

/// Finite-difference helpers for gradient checks.
pub mod testing {
    use super::*;

    /// Relative error `|a - b| / max(|a|, |b|)` over whole matrices, with
    /// an absolute floor for gradients that are essentially zero.
    pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
        if scale < 1e-10 {
            diff
        } else {
            diff / scale
        }
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    pub fn numeric_grad(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut grad = Matrix::zeros(x.dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let up = f(&probe);
            probe[[r, c]] = orig - h;
            let down = f(&probe);
            probe[[r, c]] = orig;
            grad[[r, c]] = (up - down) / (2.0 * h);
        }
        grad
    }

    pub fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Matrix::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
    }
}
