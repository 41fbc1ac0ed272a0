//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse creation order, so gradient accumulation order is fixed
//! and results are bit-reproducible.

use crate::error::{Error, Result};

use super::{ParamStore, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    /// Keeps `sigmoid(2·c·(x + a·x³))` from the forward pass.
    Gelu(Var, Vec<T>),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mse {
        x: Var,
        target: Vec<T>,
    },
    InfoNce {
        q: Var,
        keys: Vec<T>,
        negatives: Vec<T>,
        n_neg: usize,
        tau: T,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients aligned with the store that was bound; tensors
    /// that did not influence the loss get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = store
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        for &(idx, var) in &self.params {
            if let Some(g) = self.get(var) {
                for (o, &v) in out[idx].iter_mut().zip(g) {
                    *o = *o + v;
                }
            }
        }
        out
    }
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap_or(&1);
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn swap(s: (isize, isize)) -> (isize, isize) {
    (s.1, s.0)
}

fn ensure_finite<T: Real>(value: &[T], what: &str) -> Result<()> {
    if T::all_finite(value) {
        return Ok(());
    }
    match value.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "{what} produced {} at element {i}",
            value[i]
        ))),
        None => Ok(()),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated")
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        tracked: bool,
        what: &str,
    ) -> Result<Var> {
        ensure_finite(&value, what)?;
        Ok(self.push(shape, value, op, tracked))
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} with {} values",
                value.len()
            )));
        }
        self.push_checked(shape, value, Op::Leaf, false, "constant")
    }

    /// Registers parameter `idx` of a store as a differentiable leaf.
    pub fn param(&mut self, idx: usize, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.params.push((idx, v));
        v
    }

    /// Binds every tensor of `store`, differentiable.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        (0..store.len()).map(|i| self.param(i, store.tensor(i))).collect()
    }

    /// Binds every tensor of `store` as a constant (no gradient path).
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store
            .tensors()
            .iter()
            .map(|t| self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false))
            .collect()
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.rows_cols(a);
        let (rb, cb) = self.rows_cols(b);
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (m, k, sa) = if ta {
            (ca, ra, (1, ca as isize))
        } else {
            (ra, ca, (ca as isize, 1))
        };
        let (k2, n, sb) = if tb {
            (cb, rb, (1, cb as isize))
        } else {
            (rb, cb, (cb as isize, 1))
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            sa,
            self.value(b),
            sb,
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_checked(vec![m, n], out, Op::MatMul { a, b, ta, tb }, tracked, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        self.push_checked(shape, out, Op::Add(a, b), tracked, "add")
    }

    /// Adds a length-`d` row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.value(row).len() != d {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(d.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b);
        }
        let tracked = self.tracked(x) || self.tracked(row);
        let shape = self.shape(x).to_vec();
        self.push_checked(shape, out, Op::AddRow(x, row), tracked, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * s).collect();
        let tracked = self.tracked(x);
        let shape = self.shape(x).to_vec();
        self.push_checked(shape, out, Op::Scale(x, s), tracked, "scale")
    }

    /// `x·W + b` for `x: n×din`, `W: din×dout`, `b: dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// GELU, tanh approximation, evaluated as `x·σ(2z)` with
    /// `z = c·(x + a·x³)` (the identity `½(1 + tanh z) = σ(2z)`).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c2 = T::lit(2.0 * GELU_C);
        let a = T::lit(GELU_A);
        let xv = self.value(x);
        let sig: Vec<T> = xv
            .iter()
            .map(|&v| T::one() / (T::one() + (-(c2 * (v + a * v * v * v))).exp()))
            .collect();
        let out: Vec<T> = xv.iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let tracked = self.tracked(x);
        let shape = self.shape(x).to_vec();
        self.push_checked(shape, out, Op::Gelu(x, sig), tracked, "gelu")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push_checked(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            tracked,
            "softmax",
        )
    }

    /// Layer normalization over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm affine params must have {d} values"
            )));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let shape = self.shape(x).to_vec();
        self.push_checked(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
            "layer_norm",
        )
    }

    /// Scales each row to unit L2 norm. Rows with norm below `eps` are an error.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let nrm = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            if nrm < eps {
                return Err(Error::Numeric(format!(
                    "row {r} has norm {nrm} below {eps}; cannot normalize"
                )));
            }
            for j in 0..d {
                out[r * d + j] = row[j] / nrm;
            }
            norms.push(nrm);
        }
        let tracked = self.tracked(x);
        let shape = self.shape(x).to_vec();
        self.push_checked(shape, out, Op::L2Normalize { x, norms }, tracked, "l2_normalize")
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(x);
        self.push_checked(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            tracked,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.rows_cols(p).1)
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != d {
                return Err(Error::Dimension(format!(
                    "concat_rows width {c} differs from {d}"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push_checked(
            vec![rows, d],
            out,
            Op::ConcatRows(parts.to_vec()),
            tracked,
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if start + len > d {
            return Err(Error::Dimension(format!(
                "columns {start}..{} out of range for width {d}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let tracked = self.tracked(x);
        self.push_checked(
            vec![n, len],
            out,
            Op::SliceCols { x, start },
            tracked,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.rows_cols(p).0)
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != n {
                return Err(Error::Dimension(format!(
                    "concat_cols height {r} differs from {n}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push_checked(
            vec![n, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            tracked,
            "concat_cols",
        )
    }

    /// Mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if n == 0 {
            return Err(Error::Dimension("mean over zero rows".into()));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                out[j] = out[j] + xv[r * d + j];
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let tracked = self.tracked(x);
        self.push_checked(vec![1, d], out, Op::MeanRows(x), tracked, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |s, &v| s + v);
        let tracked = self.tracked(x);
        self.push_checked(vec![1], vec![s], Op::Sum(x), tracked, "sum")
    }

    /// Mean squared error against a constant target over all elements.
    /// An empty input gives 0 (and a warning).
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(Error::Dimension(format!(
                "mse of {} values against {} targets",
                xv.len(),
                target.len()
            )));
        }
        let loss = if xv.is_empty() {
            log::warn!("mse over an empty set; loss defined as 0");
            T::zero()
        } else {
            // compensated: finite-difference checks difference two of these
            let (mut s, mut c) = (T::zero(), T::zero());
            for (&a, &b) in xv.iter().zip(target) {
                let y = (a - b) * (a - b) - c;
                let t = s + y;
                c = (t - s) - y;
                s = t;
            }
            s / T::lit(xv.len() as f64)
        };
        let tracked = self.tracked(x);
        self.push_checked(
            vec![1],
            vec![loss],
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            tracked,
            "mse",
        )
    }

    /// Batch-mean InfoNCE. `q` is `B×d`; `keys` holds the `B` positive keys and
    /// `negatives` a shared `K×d` bank; both are constants.
    pub fn info_nce(&mut self, q: Var, keys: &[T], negatives: &[T], tau: T) -> Result<Var> {
        if tau <= T::zero() {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let (b, d) = self.rows_cols(q);
        if keys.len() != b * d || negatives.len() % d.max(1) != 0 {
            return Err(Error::Dimension(format!(
                "info_nce: q {b}x{d}, {} key values, {} negative values",
                keys.len(),
                negatives.len()
            )));
        }
        let n_neg = if d == 0 { 0 } else { negatives.len() / d };
        let (loss, probs) = info_nce_forward(self.value(q), keys, negatives, b, d, n_neg, tau);
        let tracked = self.tracked(q);
        self.push_checked(
            vec![1],
            vec![loss],
            Op::InfoNce {
                q,
                keys: keys.to_vec(),
                negatives: negatives.to_vec(),
                n_neg,
                tau,
                probs,
            },
            tracked,
            "info_nce",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param | Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].tracked;
        let buf = |grads: &mut [Option<Vec<T>>], v: Var| -> Vec<T> {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = dims2(&nodes[a.0].shape);
                let (rb, cb) = dims2(&nodes[b.0].shape);
                let (m, k, sa) = if *ta {
                    (ca, ra, (1, ca as isize))
                } else {
                    (ra, ca, (ca as isize, 1))
                };
                let (n, sb) = if *tb {
                    (rb, (1, cb as isize))
                } else {
                    (cb, (cb as isize, 1))
                };
                let sg = (n as isize, 1);
                if want(*a) {
                    let mut ga = buf(grads, *a);
                    T::gemm(m, n, k, g, sg, &nodes[b.0].value, swap(sb), T::one(), &mut ga, sa);
                    grads[a.0] = Some(ga);
                }
                if want(*b) {
                    let mut gb = buf(grads, *b);
                    T::gemm(k, m, n, &nodes[a.0].value, swap(sa), g, sg, T::one(), &mut gb, sb);
                    grads[b.0] = Some(gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        let mut gv = buf(grads, v);
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                        grads[v.0] = Some(gv);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    let mut gx = buf(grads, *x);
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v);
                    grads[x.0] = Some(gx);
                }
                if want(*row) {
                    let mut gr = buf(grads, *row);
                    let d = gr.len().max(1);
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
                    }
                    grads[row.0] = Some(gr);
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    let mut gx = buf(grads, *x);
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * *s);
                    grads[x.0] = Some(gx);
                }
            }
            Op::Gelu(x, sig) => {
                if want(*x) {
                    let c2 = T::lit(2.0 * GELU_C);
                    let three_a = T::lit(3.0 * GELU_A);
                    let mut gx = buf(grads, *x);
                    for (((o, &v), &s), &gi) in gx.iter_mut().zip(&nodes[x.0].value).zip(sig).zip(g) {
                        let dz = c2 * (T::one() + three_a * v * v);
                        let d = s + v * s * (T::one() - s) * dz;
                        *o = *o + gi * d;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if want(*x) {
                    let y = &node.value;
                    let mut gx = buf(grads, *x);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                dot = dot + g[at(j)] * y[at(j)];
                            }
                            for j in 0..*len {
                                gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let n = rstd.len();
                let gam = &nodes[gamma.0].value;
                if want(*gamma) {
                    let mut gg = buf(grads, *gamma);
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    grads[gamma.0] = Some(gg);
                }
                if want(*beta) {
                    let mut gb = buf(grads, *beta);
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                    grads[beta.0] = Some(gb);
                }
                if want(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut gx = buf(grads, *x);
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gam[j];
                            dxh[j] = v;
                            m1 = m1 + v;
                            m2 = m2 + v * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let h = xhat[r * d + j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxh[j] - m1 - h * m2);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::L2Normalize { x, norms } => {
                if want(*x) {
                    let y = &node.value;
                    let d = if norms.is_empty() { 0 } else { y.len() / norms.len() };
                    let mut gx = buf(grads, *x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dot = y[row.clone()]
                            .iter()
                            .zip(&g[row.clone()])
                            .fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in row {
                            gx[j] = gx[j] + (g[j] - y[j] * dot) / nrm;
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::GatherRows { x, idx } => {
                if want(*x) {
                    let d = dims2(&node.shape).1;
                    let mut gx = buf(grads, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[src * d + j] = gx[src * d + j] + g[r * d + j];
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if want(p) {
                        let mut gp = buf(grads, p);
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(o, &v)| *o = *o + v);
                        grads[p.0] = Some(gp);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (n, len) = dims2(&node.shape);
                    let d = dims2(&nodes[x.0].shape).1;
                    let mut gx = buf(grads, *x);
                    for r in 0..n {
                        for j in 0..len {
                            let at = r * d + start + j;
                            gx[at] = gx[at] + g[r * len + j];
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let w = dims2(&nodes[p.0].shape).1;
                    if want(p) {
                        let mut gp = buf(grads, p);
                        for r in 0..n {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + g[r * total + off + j];
                            }
                        }
                        grads[p.0] = Some(gp);
                    }
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                if want(*x) {
                    let (n, d) = dims2(&nodes[x.0].shape);
                    let inv = T::one() / T::lit(n as f64);
                    let mut gx = buf(grads, *x);
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + g[j] * inv;
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    let mut gx = buf(grads, *x);
                    gx.iter_mut().for_each(|o| *o = *o + g[0]);
                    grads[x.0] = Some(gx);
                }
            }
            Op::Mse { x, target } => {
                if want(*x) && !target.is_empty() {
                    let xv = &nodes[x.0].value;
                    let s = T::lit(2.0) * g[0] / T::lit(target.len() as f64);
                    let mut gx = buf(grads, *x);
                    for ((o, &a), &b) in gx.iter_mut().zip(xv).zip(target) {
                        *o = *o + s * (a - b);
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::InfoNce {
                q,
                keys,
                negatives,
                n_neg,
                tau,
                probs,
            } => {
                if want(*q) {
                    let (b, d) = dims2(&nodes[q.0].shape);
                    let s = g[0] / (T::lit(b as f64) * *tau);
                    let width = n_neg + 1;
                    let mut gq = buf(grads, *q);
                    for r in 0..b {
                        let p = &probs[r * width..(r + 1) * width];
                        let out = &mut gq[r * d..(r + 1) * d];
                        let kp = &keys[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + s * (p[0] - T::one()) * kp[j];
                        }
                        for (nidx, &pn) in p[1..].iter().enumerate() {
                            let neg = &negatives[nidx * d..(nidx + 1) * d];
                            for j in 0..d {
                                out[j] = out[j] + s * pn * neg[j];
                            }
                        }
                    }
                    grads[q.0] = Some(gq);
                }
            }
        }
    }
}

/// Forward InfoNCE kernel shared by the tape op and the scalar API.
/// Returns the batch-mean loss and the `B×(1+K)` softmax over
/// `[positive, negatives…]`.
pub(crate) fn info_nce_forward<T: Real>(
    q: &[T],
    keys: &[T],
    negatives: &[T],
    b: usize,
    d: usize,
    n_neg: usize,
    tau: T,
) -> (T, Vec<T>) {
    let width = n_neg + 1;
    let mut neg_sims = vec![T::zero(); b * n_neg];
    if n_neg > 0 {
        T::gemm(
            b,
            d,
            n_neg,
            q,
            (d as isize, 1),
            negatives,
            (1, d as isize),
            T::zero(),
            &mut neg_sims,
            (n_neg as isize, 1),
        );
    }
    let mut probs = vec![T::zero(); b * width];
    let mut total = T::zero();
    for r in 0..b {
        let qr = &q[r * d..(r + 1) * d];
        let kr = &keys[r * d..(r + 1) * d];
        let pos = qr.iter().zip(kr).fold(T::zero(), |s, (&x, &y)| s + x * y) / tau;
        let row = &mut probs[r * width..(r + 1) * width];
        row[0] = pos;
        for n in 0..n_neg {
            row[n + 1] = neg_sims[r * n_neg + n] / tau;
        }
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        let lse = mx + sum.ln();
        total = total + (lse - pos);
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    let loss = if b == 0 {
        T::zero()
    } else {
        total / T::lit(b as f64)
    };
    (loss, probs)
}
