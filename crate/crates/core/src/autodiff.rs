//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends one node
//! holding its output value and the inputs it needs for the backward rule;
//! [`Tape::backward`] walks the nodes once, newest first, and leaves
//! `dL/dnode` in the nodes that need it. The op set is closed: only what the
//! graph-adapter model needs, with no general broadcasting.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    RowSoftmax(Var),
    MaskedRowSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SqFrobenius(Var),
    MeanPool {
        input: Var,
        segments: Rc<[usize]>,
        counts: Vec<usize>,
    },
    SelectColumn(Var, usize),
    ConcatCols(Vec<Var>),
    AddBias(Var, Var),
    WeightedSum {
        terms: Vec<(usize, Var)>,
        weights: Var,
        row: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Rc<[f64]>,
        mask: Rc<[bool]>,
        valid: usize,
    },
}

/// Row-compressed nonzeros of a constant, in column order within each row.
#[derive(Debug)]
struct SparseRows {
    starts: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseRows {
    fn new(t: &Tensor) -> Self {
        let mut starts = Vec::with_capacity(t.rows() + 1);
        let mut entries = Vec::new();
        for i in 0..t.rows() {
            starts.push(entries.len());
            entries.extend(
                t.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v)),
            );
        }
        starts.push(entries.len());
        SparseRows { starts, entries }
    }

    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.starts[i]..self.starts[i + 1]]
    }

    /// `out += self * b`.
    fn matmul_into(&self, b: &[f64], out: &mut [f64], n: usize) {
        for i in 0..self.starts.len() - 1 {
            let out_row = &mut out[i * n..(i + 1) * n];
            for &(p, av) in self.row(i) {
                for (o, bv) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += self^T * g`.
    fn matmul_tn_into(&self, g: &[f64], out: &mut [f64], n: usize) {
        for i in 0..self.starts.len() - 1 {
            let g_row = &g[i * n..(i + 1) * n];
            for &(p, av) in self.row(i) {
                for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    sparse: Option<SparseRows>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    finished: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `dL/dv` after [`Tape::backward`], if `v` is on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad();
        let value = Tensor::from_vec(t.rows(), t.cols(), t.data().to_vec()).expect("shape already validated");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            sparse: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.with_requires_grad(false),
            op: Op::Leaf,
            needs_grad: false,
            sparse: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant that is mostly zeros, such as a batch adjacency. Products
    /// with it as the left operand only visit its nonzeros.
    pub fn sparse_constant(&mut self, t: Tensor) -> Var {
        let sparse = Some(SparseRows::new(&t));
        self.nodes.push(Node {
            value: t.with_requires_grad(false),
            op: Op::Leaf,
            needs_grad: false,
            sparse,
        });
        Var(self.nodes.len() - 1)
    }

    /// Writes the gradient of `v` into the gradient slot of `param`.
    pub fn store_grad(&self, v: Var, param: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => param.set_grad(g.to_vec()),
            None => {
                param.zero_grad();
                Ok(())
            }
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.finished {
            return Err(Error::State("tape already differentiated".into()));
        }
        if !value.all_finite() {
            return Err(Error::Numeric(name.into()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            sparse: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        match &self.nodes[a.0].sparse {
            Some(sp) => sp.matmul_into(bv.data(), &mut out, n),
            None => matmul_into(av.data(), bv.data(), &mut out, m, k, n),
        }
        let out = Tensor::from_vec(m, n, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_vec(av.rows(), av.cols(), av.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// `a * s` for a 1x1 tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(dim_err("scale_by", self.value(a), sv));
        }
        let factor = sv.data()[0];
        let out = self.map(a, |x| x * factor);
        self.push("scale_by", out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mask = vec![true; av.len()];
        let out = masked_softmax_rows(av, &mask);
        self.push("row_softmax", out, Op::RowSoftmax(a), &[a])
    }

    /// Softmax restricted to the entries where `mask` is true; masked-out
    /// entries are exactly zero and receive no gradient. Every row needs at
    /// least one unmasked entry.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::contract(format!(
                "mask of length {} for a {}x{} input",
                mask.len(),
                av.rows(),
                av.cols()
            )));
        }
        for i in 0..av.rows() {
            if !mask[i * av.cols()..(i + 1) * av.cols()].iter().any(|m| *m) {
                return Err(Error::contract(format!("row {i} has no unmasked entry")));
            }
        }
        let out = masked_softmax_rows(av, mask);
        self.push("masked_row_softmax", out, Op::MaskedRowSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum of squared entries.
    pub fn sq_frobenius(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sq_norm();
        self.push("sq_frobenius", Tensor::scalar(s), Op::SqFrobenius(a), &[a])
    }

    /// Row-wise mean over contiguous segments. `segments[i]` is the output row
    /// of input row `i`; ids must be non-decreasing and cover `0..count`.
    pub fn mean_pool(&mut self, a: Var, segments: Rc<[usize]>, count: usize) -> Result<Var> {
        let av = self.value(a);
        if segments.len() != av.rows() {
            return Err(Error::contract(format!(
                "{} segment ids for {} rows",
                segments.len(),
                av.rows()
            )));
        }
        if segments.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("segment ids must be sorted"));
        }
        let mut counts = vec![0usize; count];
        for &s in segments.iter() {
            if s >= count {
                return Err(Error::contract(format!("segment id {s} out of range 0..{count}")));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|c| *c == 0) {
            return Err(Error::contract(format!("segment {empty} is empty")));
        }
        let d = av.cols();
        let mut out = vec![0.0; count * d];
        for (i, &s) in segments.iter().enumerate() {
            for (o, x) in out[s * d..(s + 1) * d].iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        for (s, c) in counts.iter().enumerate() {
            for o in &mut out[s * d..(s + 1) * d] {
                *o /= *c as f64;
            }
        }
        let out = Tensor::from_vec(count, d, out)?;
        self.push(
            "mean_pool",
            out,
            Op::MeanPool {
                input: a,
                segments,
                counts,
            },
            &[a],
        )
    }

    pub fn select_column(&mut self, a: Var, col: usize) -> Result<Var> {
        let av = self.value(a);
        if col >= av.cols() {
            return Err(Error::contract(format!(
                "column {col} of a {}x{} tensor",
                av.rows(),
                av.cols()
            )));
        }
        let data = (0..av.rows()).map(|i| av.get(i, col)).collect();
        let out = Tensor::from_vec(av.rows(), 1, data)?;
        self.push("select_column", out, Op::SelectColumn(a, col), &[a])
    }

    /// Places the columns of all inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first), pv));
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            for i in 0..rows {
                for j in 0..pv.cols() {
                    out.set(i, offset + j, pv.get(i, j));
                }
            }
            offset += pv.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim_err("add_bias", av, bv));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        self.push("add_bias", out, Op::AddBias(a, b), &[a, b])
    }

    /// `Σ weights[row, col] * term` over `(col, term)` pairs. Columns not
    /// listed contribute nothing.
    pub fn weighted_sum(&mut self, terms: &[(usize, Var)], weights: Var, row: usize) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::contract("weighted_sum of no terms"));
        };
        let wv = self.value(weights);
        if row >= wv.rows() {
            return Err(Error::contract(format!("weight row {row} of {}", wv.rows())));
        }
        let shape = self.value(first).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(col, t) in terms {
            let wv = self.value(weights);
            if col >= wv.cols() {
                return Err(Error::contract(format!("weight column {col} of {}", wv.cols())));
            }
            let w = wv.get(row, col);
            let tv = self.value(t);
            if tv.shape() != shape {
                return Err(dim_err("weighted_sum", self.value(first), tv));
            }
            for (o, x) in out.data_mut().iter_mut().zip(tv.data()) {
                *o += w * x;
            }
        }
        let mut inputs: Vec<Var> = terms.iter().map(|(_, v)| *v).collect();
        inputs.push(weights);
        self.push(
            "weighted_sum",
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
                row,
            },
            &inputs,
        )
    }

    /// Mean binary cross-entropy with logits over the entries where `mask` is
    /// true, in the overflow-free form `max(x,0) - x*y + ln(1 + e^-|x|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<[f64]>, mask: Rc<[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || mask.len() != lv.len() {
            return Err(Error::contract(format!(
                "{} targets / {} mask entries for {} logits",
                targets.len(),
                mask.len(),
                lv.len()
            )));
        }
        let valid = mask.iter().filter(|m| **m).count();
        if valid == 0 {
            return Err(Error::contract("every label in the batch is masked"));
        }
        let mut total = 0.0;
        for ((x, y), m) in lv.data().iter().zip(targets.iter()).zip(mask.iter()) {
            if *m {
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let out = Tensor::scalar(total / valid as f64);
        self.push(
            "bce_with_logits",
            out,
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                valid,
            },
            &[logits],
        )
    }

    /// Back-propagates from the scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.finished {
            return Err(Error::State("backward called twice on the same tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        self.finished = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_nt_into(g, bv.data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    match &self.nodes[a.0].sparse {
                        Some(sp) => sp.matmul_tn_into(g, gb, n),
                        None => matmul_tn_into(av.data(), g, gb, m, k, n),
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if needs(*b) {
                    axpy(slot(grads, *b, g.len()), sign, g);
                }
            }
            Op::Scale(a, factor) => axpy(slot(grads, *a, g.len()), *factor, g),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).data()[0];
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), factor, g);
                }
                if needs(*s) {
                    let dot: f64 = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, g.len());
                for ((o, gi), x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *x > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::RowSoftmax(a) | Op::MaskedRowSoftmax(a) => {
                // dx_j = y_j (g_j - Σ_i y_i g_i); masked entries have y = 0.
                let cols = out.cols();
                let ga = slot(grads, *a, g.len());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                for o in slot(grads, *a, n) {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let share = g[0] / n as f64;
                for o in slot(grads, *a, n) {
                    *o += share;
                }
            }
            Op::SqFrobenius(a) => {
                let av = self.value(*a);
                axpy(slot(grads, *a, av.len()), 2.0 * g[0], av.data());
            }
            Op::MeanPool {
                input,
                segments,
                counts,
            } => {
                let iv = self.value(*input);
                let d = iv.cols();
                let gi = slot(grads, *input, iv.len());
                for (i, &s) in segments.iter().enumerate() {
                    let share = 1.0 / counts[s] as f64;
                    for j in 0..d {
                        gi[i * d + j] += g[s * d + j] * share;
                    }
                }
            }
            Op::SelectColumn(a, col) => {
                let av = self.value(*a);
                let cols = av.cols();
                let ga = slot(grads, *a, av.len());
                for (i, gv) in g.iter().enumerate() {
                    ga[i * cols + col] += gv;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pc = pv.cols();
                    if needs(*p) {
                        let gp = slot(grads, *p, pv.len());
                        for i in 0..pv.rows() {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if needs(*b) {
                    let c = out.cols();
                    let gb = slot(grads, *b, c);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                }
            }
            Op::WeightedSum { terms, weights, row } => {
                let wv = self.value(*weights);
                let wcols = wv.cols();
                let wlen = wv.len();
                for &(col, t) in terms {
                    let w = wv.get(*row, col);
                    if needs(t) {
                        axpy(slot(grads, t, g.len()), w, g);
                    }
                    if needs(*weights) {
                        let dot: f64 = g.iter().zip(self.value(t).data()).map(|(x, y)| x * y).sum();
                        slot(grads, *weights, wlen)[row * wcols + col] += dot;
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                valid,
            } => {
                let lv = self.value(*logits);
                let scale = g[0] / *valid as f64;
                let gl = slot(grads, *logits, lv.len());
                for (i, x) in lv.data().iter().enumerate() {
                    if mask[i] {
                        gl[i] += scale * (sigmoid(*x) - targets[i]);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax_rows(a: &Tensor, mask: &[bool]) -> Tensor {
    let cols = a.cols();
    let mut out = Tensor::zeros(a.rows(), cols);
    for r in 0..a.rows() {
        let row = a.row(r);
        let m = &mask[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .zip(m)
            .filter(|(_, keep)| **keep)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..cols {
            if m[j] {
                let e = (row[j] - max).exp();
                out.set(r, j, e);
                total += e;
            }
        }
        for j in 0..cols {
            let v = out.get(r, j) / total;
            out.set(r, j, v);
        }
    }
    out
}
