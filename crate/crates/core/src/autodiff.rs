//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed leaves tagged with their store index, so a backward pass can
//! hand back one gradient per parameter. Only the operations the encoder
//! needs are provided.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 × n` row over every row of the left operand.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    ReplaceRows {
        x: Var,
        start: usize,
        rows: Var,
    },
    NormalizeRows(Var),
    /// Summed cross-entropy of each row against its target column.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// `(param index, gradient)` for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Layer normalization without scale/shift; returns `(x̂, 1/σ per row)`.
pub fn standardize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    (xhat, inv)
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, index: usize, value: &'a Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(index),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a store parameter (used by tests and
    /// gradient checks on intermediate inputs).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            param: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std) = standardize_rows(self.value(x));
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
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

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let v = self.value(x).select(Axis(1), cols);
        self.push(
            v,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of rows `start..end` as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        assert!(end > start, "mean over an empty row range");
        let v = self
            .value(x)
            .slice(s![start..end, ..])
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows { x, start, end }, &[x])
    }

    /// Copy of `x` with rows `start..start + rows.nrows()` replaced by `rows`.
    pub fn replace_rows(&mut self, x: Var, start: usize, rows: Var) -> Var {
        let r = self.value(rows).clone();
        let mut v = self.value(x).clone();
        v.slice_mut(s![start..start + r.nrows(), ..]).assign(&r);
        self.push(v, Op::ReplaceRows { x, start, rows }, &[x, rows])
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = crate::linalg::normalize_rows(self.value(x));
        self.push(v, Op::NormalizeRows(x), &[x])
    }

    /// `Σ_r -log softmax(logits_r)[targets_r]` as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        let probs = softmax_rows(l);
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].ln())
            .sum();
        // ln of a tiny probability loses precision; recompute via log-sum-exp.
        let loss = if loss.is_finite() {
            loss
        } else {
            targets
                .iter()
                .enumerate()
                .map(|(r, &t)| {
                    let row = l.row(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
                })
                .sum()
        };
        let v = Array2::from_elem((1, 1), loss);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Sum of several `1 × 1` nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Option<Var> {
        let mut it = parts.iter();
        let mut acc = *it.next()?;
        for &p in it {
            acc = self.add(acc, p);
        }
        Some(acc)
    }

    /// Reverse pass seeded with `d out / d v` for each `(v, seed)` pair.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
            Op::Gelu(a) => {
                let d = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * gelu_grad(x));
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * self.value(*gamma);
                    let mut dx = Mat::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..g.ncols() {
                            dx[[r, c]] = is / n * (n * dh[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let mut d = out * g;
                for (mut row, y) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&y, |v, &y| *v -= y * dot);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Mat::zeros(t.raw_dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(r);
                }
                accumulate(&mut grads[table.0], d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Mat::zeros(self.value(*x).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let mut d = Mat::zeros(self.value(*x).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::SelectRows { x, rows } => {
                let mut d = Mat::zeros(self.value(*x).raw_dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::SelectCols { x, cols } => {
                let mut d = Mat::zeros(self.value(*x).raw_dim());
                for (c, &src) in cols.iter().enumerate() {
                    let mut col = d.column_mut(src);
                    col += &g.column(c);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::MeanRows { x, start, end } => {
                let mut d = Mat::zeros(self.value(*x).raw_dim());
                let k = (*end - *start) as f64;
                let share = g.row(0).mapv(|v| v / k);
                for r in *start..*end {
                    d.row_mut(r).assign(&share);
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::ReplaceRows { x, start, rows } => {
                let k = self.value(*rows).nrows();
                if self.needs(*x) {
                    let mut d = g.clone();
                    d.slice_mut(s![*start..*start + k, ..]).fill(0.0);
                    accumulate(&mut grads[x.0], d);
                }
                if self.needs(*rows) {
                    accumulate(
                        &mut grads[rows.0],
                        g.slice(s![*start..*start + k, ..]).to_owned(),
                    );
                }
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let n = xv.row(r).dot(&xv.row(r)).sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let y = xv.row(r).mapv(|v| v / n);
                    let yg = y.dot(&g.row(r));
                    for c in 0..xv.ncols() {
                        d[[r, c]] = (g[[r, c]] - y[c] * yg) / n;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut d = probs * scale;
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= scale;
                }
                accumulate(&mut grads[logits.0], d);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
