//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every value is a 2-D array; scalars are `1 x 1`. A [`Graph`] borrows a
//! [`ParamSet`] immutably, records operations as they are applied, and
//! [`Graph::backward`] returns gradients for every node and every parameter.
//! Graphs are cheap and per-example; shapes may differ between examples.

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, converted element type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.to_f64().unwrap()))).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamSet`]; untouched parameters stay `None`.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub values: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n: usize) -> Self {
        Grads { values: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.values[id.0].as_ref()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<T> {
        self.values[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (mine, theirs) in self.values.iter_mut().zip(&other.values) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => *m += g,
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.values.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.values.iter().flatten().map(|g| g.iter().map(|&x| x * x).sum::<T>()).sum::<T>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<T>, inv_std: Array1<T> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<(usize, usize)>,
        kv_segs: Vec<(usize, usize)>,
        probs: Vec<Array2<T>>,
    },
    JointKl { tag: Var, ptr: Var, blocks: Vec<JointBlock<T>> },
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    StackRows(Vec<(Var, usize)>),
    SoftmaxKl { logits: Var, gold: Array2<T>, probs: Array2<T> },
    WeightedSum(Var, Array2<T>),
}

/// Rows of one example in the stacked slot matrix and its columns in the
/// stacked pointer score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointSpan {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

struct JointBlock<T> {
    span: JointSpan,
    gold: Array2<T>,
    weight: T,
    probs: Array2<T>,
}

struct Node<T> {
    value: Option<Array2<T>>,
    shape: (usize, usize),
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    pub params: Grads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the objective with respect to an intermediate node.
    pub fn of(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;

fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: T = row.iter().cloned().sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        let shape = value.dim();
        self.nodes.push(Node { value: Some(value), shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    /// A constant input; receives a gradient but propagates nothing.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The parameter as a node; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let shape = self.params.get(id).dim();
        self.nodes.push(Node { value: None, shape, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        self.push(out, Op::Gather { table, rows: rows.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Array2<T>) -> Var {
        let out = &self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        let n = T::of(c as f64);
        let mut xhat = Array2::zeros((r, c));
        let mut inv_std = Array1::zeros(r);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[i] = inv;
            Zip::from(xhat.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * inv);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Unmasked multi-head scaled dot-product attention over already projected
    /// `q` (`Tq x d`), `k` and `v` (`Tk x d`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, tk) = (self.shape(q).0, self.shape(k).0);
        self.attention_segments(q, k, v, heads, vec![(0, tq)], vec![(0, tk)])
    }

    /// Block-diagonal attention for row-stacked examples: query rows in
    /// `q_segs[i]` attend only to key rows in `kv_segs[i]`.
    pub fn attention_segments(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<(usize, usize)>,
        kv_segs: Vec<(usize, usize)>,
    ) -> Var {
        assert_eq!(q_segs.len(), kv_segs.len(), "segment counts differ");
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Array2::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads * q_segs.len());
        for (&(q0, q1), &(k0, k1)) in q_segs.iter().zip(&kv_segs) {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = qv.slice(s![q0..q1, cols.clone()]).dot(&kv.slice(s![k0..k1, cols.clone()]).t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows(&mut p);
                out.slice_mut(s![q0..q1, cols.clone()]).assign(&p.dot(&vv.slice(s![k0..k1, cols])));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, q_segs, kv_segs, probs })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a), self.value(b)]).expect("row counts differ");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row `i` of the output is row `rows[i].1` of node `rows[i].0`.
    pub fn stack_rows(&mut self, rows: Vec<(Var, usize)>) -> Var {
        let width = self.shape(rows[0].0).1;
        let mut out = Array2::zeros((rows.len(), width));
        for (i, &(v, r)) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.value(v).row(r));
        }
        self.push(out, Op::StackRows(rows))
    }

    /// Mean over rows of `KL(gold_r || softmax(logits_r))`; gold rows sum to one.
    pub fn softmax_kl(&mut self, logits: Var, gold: Array2<T>) -> Var {
        let mut probs = self.value(logits).to_owned();
        assert_eq!(probs.dim(), gold.dim(), "gold shape mismatch");
        softmax_rows(&mut probs);
        let lv = self.value(logits);
        let mut total = T::zero();
        for ((lrow, grow), _) in lv.rows().into_iter().zip(gold.rows()).zip(probs.rows()) {
            let max = lrow.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for (&l, &g) in lrow.iter().zip(grow.iter()) {
                if g > T::zero() {
                    total += g * (g.ln() - (l - lse));
                }
            }
        }
        let rows = T::of(gold.nrows() as f64);
        let out = Array2::from_elem((1, 1), total / rows);
        self.push(out, Op::SoftmaxKl { logits, gold, probs })
    }

    /// Weighted sum over examples of the mean row KL between each example's
    /// gold rows and the softmax of its joint scores
    /// `[tag[rows] | ptr[rows, cols]]`.
    pub fn joint_kl(&mut self, tag: Var, ptr: Var, blocks: Vec<(JointSpan, Array2<T>, T)>) -> Var {
        let (tv, pv) = (self.value(tag), self.value(ptr));
        let mut total = T::zero();
        let mut stored = Vec::with_capacity(blocks.len());
        for (span, gold, weight) in blocks {
            let (r0, r1) = span.rows;
            let (c0, c1) = span.cols;
            let logits = ndarray::concatenate(Axis(1), &[tv.slice(s![r0..r1, ..]), pv.slice(s![r0..r1, c0..c1])]).expect("row counts differ");
            assert_eq!(logits.dim(), gold.dim(), "gold shape mismatch");
            let mut probs = logits.clone();
            softmax_rows(&mut probs);
            let mut kl = T::zero();
            for (lrow, grow) in logits.rows().into_iter().zip(gold.rows()) {
                let max = lrow.iter().cloned().fold(T::neg_infinity(), T::max);
                let lse = max + lrow.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                for (&l, &g) in lrow.iter().zip(grow.iter()) {
                    if g > T::zero() {
                        kl += g * (g.ln() - (l - lse));
                    }
                }
            }
            total += weight * kl / T::of((r1 - r0) as f64);
            stored.push(JointBlock { span, gold, weight, probs });
        }
        self.push(Array2::from_elem((1, 1), total), Op::JointKl { tag, ptr, blocks: stored })
    }

    /// `Σ a ⊙ w` as a `1 x 1` node.
    pub fn weighted_sum(&mut self, a: Var, w: Array2<T>) -> Var {
        let out = Array2::from_elem((1, 1), (&self.value(a) * &w).sum());
        self.push(out, Op::WeightedSum(a, w))
    }

    /// Reverse pass from a `1 x 1` objective.
    pub fn backward(&self, objective: Var) -> Gradients<T> {
        assert_eq!(self.shape(objective), (1, 1), "objective must be scalar");
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pg = Grads::new(self.params.len());
        g[objective.0] = Some(Array2::from_elem((1, 1), T::one()));

        fn acc<T: Scalar>(g: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            }
        }

        for i in (0..=objective.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    *pg.slot(*id, self.nodes[i].shape) += &dy;
                }
                Op::Gather { table, rows } => {
                    let shape = self.params.get(*table).dim();
                    let t = pg.slot(*table, shape);
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = t.row_mut(r);
                        row += &dy.row(k);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut g, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, dy.clone());
                }
                Op::Scale(a, s) => acc(&mut g, *a, dy.mapv(|x| x * *s)),
                Op::MulConst(a, c) => acc(&mut g, *a, &dy * c),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &dy;
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = T::of(xhat.ncols() as f64);
                    acc(&mut g, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *gamma, (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &dy * &self.value(*gamma);
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d: T = dh.sum();
                        let sum_dx: T = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / c;
                        Zip::from(dx.row_mut(r))
                            .and(dh)
                            .and(xh)
                            .for_each(|o, &d, &h| *o = k * (c * d - sum_d - h * sum_dx));
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Attention { q, k, v, heads, q_segs, kv_segs, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    let blocks = q_segs.iter().zip(kv_segs).flat_map(|(a, b)| (0..*heads).map(move |h| (*a, *b, h)));
                    for (((q0, q1), (k0, k1), h), p) in blocks.zip(probs) {
                        let cols = h * dh..(h + 1) * dh;
                        let doh = dy.slice(s![q0..q1, cols.clone()]);
                        let dp = doh.dot(&vv.slice(s![k0..k1, cols.clone()]).t());
                        dv.slice_mut(s![k0..k1, cols.clone()]).assign(&p.t().dot(&doh));
                        let mut ds = &dp * p;
                        let row_dot = ds.sum_axis(Axis(1));
                        for (mut row, (prow, &rd)) in ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(row_dot.iter())) {
                            Zip::from(&mut row).and(&prow).for_each(|o, &pp| *o = (*o - pp * rd) * scale);
                        }
                        dq.slice_mut(s![q0..q1, cols.clone()]).assign(&ds.dot(&kv.slice(s![k0..k1, cols.clone()])));
                        dk.slice_mut(s![k0..k1, cols.clone()]).assign(&ds.t().dot(&qv.slice(s![q0..q1, cols])));
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    acc(&mut g, *a, dy.slice(s![.., ..ca]).to_owned());
                    acc(&mut g, *b, dy.slice(s![.., ca..]).to_owned());
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    acc(&mut g, *a, d);
                }
                Op::StackRows(rows) => {
                    let mut per: HashMap<Var, Array2<T>> = HashMap::new();
                    for (k, &(v, r)) in rows.iter().enumerate() {
                        let shape = self.shape(v);
                        let d = per.entry(v).or_insert_with(|| Array2::zeros(shape));
                        let mut row = d.row_mut(r);
                        row += &dy.row(k);
                    }
                    let mut per: Vec<(Var, Array2<T>)> = per.into_iter().collect();
                    per.sort_by_key(|(v, _)| v.0);
                    for (v, d) in per {
                        acc(&mut g, v, d);
                    }
                }
                Op::SoftmaxKl { logits, gold, probs } => {
                    let k = dy[[0, 0]] / T::of(gold.nrows() as f64);
                    let d = (probs - gold).mapv(|x| x * k);
                    acc(&mut g, *logits, d);
                }
                Op::JointKl { tag, ptr, blocks } => {
                    let mut dt = Array2::zeros(self.shape(*tag));
                    let mut dp = Array2::zeros(self.shape(*ptr));
                    let v = dt.ncols();
                    for b in blocks {
                        let (r0, r1) = b.span.rows;
                        let (c0, c1) = b.span.cols;
                        let k = dy[[0, 0]] * b.weight / T::of((r1 - r0) as f64);
                        let d = (&b.probs - &b.gold).mapv(|x| x * k);
                        dt.slice_mut(s![r0..r1, ..]).assign(&d.slice(s![.., ..v]));
                        dp.slice_mut(s![r0..r1, c0..c1]).assign(&d.slice(s![.., v..]));
                    }
                    acc(&mut g, *tag, dt);
                    acc(&mut g, *ptr, dp);
                }
                Op::WeightedSum(a, w) => {
                    let k = dy[[0, 0]];
                    acc(&mut g, *a, w.mapv(|x| x * k));
                }
            }
            g[i] = Some(dy);
        }
        Gradients { nodes: g, params: pg }
    }
}
