//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix (scalars are `1x1`). A [`Graph`]
//! is built fresh for each forward pass; calling [`Graph::backward`] walks the
//! tape once in reverse and leaves gradients for every node that depends on a
//! gradient-tracking leaf. Constant leaves (inputs, detached copies) never
//! receive a gradient.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
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
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    SmoothL1(Var, f64),
    GatherRows(Var, Vec<usize>),
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        input: Var,
        offsets: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    NormalizeCols {
        input: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    PickRows(Var, Vec<usize>),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// A tape of differentiable operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

const NORM_EPS: f64 = 1e-24;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        debug_assert!(
            value.iter().all(|v| !v.is_nan()),
            "NaN produced by {:?}",
            op
        );
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.tracked(v))
    }

    /// Gradient-tracking leaf (a parameter or a checked input).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::MatMulT(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.any_tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    /// `x + row` with `row` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1xC row");
        let value = self.value(x) + self.value(row);
        let t = self.any_tracked(&[x, row]);
        self.push(value, Op::AddRow(x, row), t)
    }

    /// `x * row` with `row` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1xC row");
        let value = self.value(x) * self.value(row);
        let t = self.any_tracked(&[x, row]);
        self.push(value, Op::MulRow(x, row), t)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        let t = self.tracked(x);
        self.push(value, Op::Scale(x, factor), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let t = self.tracked(x);
        self.push(value, Op::Relu(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let t = self.tracked(x);
        self.push(value, Op::Tanh(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let t = self.tracked(x);
        self.push(value, Op::Exp(x), t)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let t = self.tracked(x);
        self.push(value, Op::Abs(x), t)
    }

    /// Elementwise Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let value = self.value(x).mapv(|v| {
            let a = v.abs();
            if a < beta {
                0.5 * v * v / beta
            } else {
                a - 0.5 * beta
            }
        });
        let t = self.tracked(x);
        self.push(value, Op::SmoothL1(x, beta), t)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        let t = self.tracked(x);
        self.push(value, Op::GatherRows(x, rows.to_vec()), t)
    }

    /// Column-wise max over contiguous row segments `offsets[s]..offsets[s+1]`.
    /// An empty segment yields a zero row that passes no gradient.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Var {
        let input = self.value(x);
        let cols = input.ncols();
        let segs = offsets.len() - 1;
        let mut value = Array2::zeros((segs, cols));
        let mut argmax = vec![usize::MAX; segs * cols];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            for j in 0..cols {
                let mut best = lo;
                let mut best_v = input[[lo, j]];
                for r in lo + 1..hi {
                    let v = input[[r, j]];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                value[[s, j]] = best_v;
                argmax[s * cols + j] = best;
            }
        }
        let t = self.tracked(x);
        self.push(value, Op::SegmentMax { input: x, argmax }, t)
    }

    /// Column-wise mean over contiguous row segments. Segments must be non-empty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Var {
        let input = self.value(x);
        let segs = offsets.len() - 1;
        let mut value = Array2::zeros((segs, input.ncols()));
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(hi > lo, "segment_mean: empty segment {s}");
            let mean = input
                .slice(s![lo..hi, ..])
                .mean_axis(Axis(0))
                .expect("non-empty segment");
            value.row_mut(s).assign(&mean);
        }
        let t = self.tracked(x);
        self.push(
            value,
            Op::SegmentMean {
                input: x,
                offsets: offsets.to_vec(),
            },
            t,
        )
    }

    /// Mean over all rows, `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.shape(x).0;
        self.segment_mean(x, &[0, n])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let t = self.any_tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let t = self.any_tracked(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let t = self.tracked(x);
        self.push(value, Op::SliceCols(x, start), t)
    }

    /// Standardize each column with the mean and biased variance of its rows.
    pub fn normalize_cols(&mut self, x: Var, eps: f64) -> Var {
        let input = self.value(x);
        let n = input.nrows() as f64;
        let mean = input.mean_axis(Axis(0)).expect("rows");
        let centered = input - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone());
        let value = centered * &inv;
        let t = self.tracked(x);
        self.push(value, Op::NormalizeCols { input: x, inv_std }, t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let t = self.tracked(x);
        self.push(value, Op::SoftmaxRows(x), t)
    }

    /// Row-wise log-softmax using the max-shifted log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        let t = self.tracked(x);
        self.push(value, Op::LogSoftmaxRows(x), t)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = (row.dot(&row) + NORM_EPS).sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let t = self.tracked(x);
        self.push(value, Op::L2NormalizeRows { input: x, norms }, t)
    }

    /// `out[i] = x[i, cols[i]]`, producing an `n x 1` column.
    pub fn pick_rows(&mut self, x: Var, cols: &[usize]) -> Var {
        let input = self.value(x);
        assert_eq!(input.nrows(), cols.len(), "pick_rows: one column per row");
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| input[[i, cols[i]]]);
        let t = self.tracked(x);
        self.push(value, Op::PickRows(x, cols.to_vec()), t)
    }

    /// Row sums, `n x c -> n x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(x);
        self.push(value, Op::SumCols(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let t = self.tracked(x);
        self.push(value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = Array2::from_elem((1, 1), m.sum() / m.len().max(1) as f64);
        let t = self.tracked(x);
        self.push(value, Op::Mean(x), t)
    }

    /// `sum_i weights[i] * terms[i]` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.scalar(0.0))
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the last backward target with respect to `v`, zeros when
    /// `v` does not influence it.
    pub fn grad_or_zeros(&self, v: Var) -> Mat {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(self.shape(v)))
    }

    /// Accumulate d(loss)/d(node) for every tracked node. `loss` must be `1x1`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward target must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, gout: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, gout.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(gout));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, gout.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, gout.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, gout.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, -gout);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, gout * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, gout * self.value(*a));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gout.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.tracked(*x) {
                    self.accumulate(grads, *x, gout * self.value(*row));
                }
                if self.tracked(*row) {
                    let g = (gout * self.value(*x))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accumulate(grads, *row, g);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, gout * *f),
            Op::Relu(x) => {
                let mut g = gout.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(&node.value)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => self.accumulate(grads, *x, gout * &node.value),
            Op::Abs(x) => {
                let mut g = gout.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    *g *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::SmoothL1(x, beta) => {
                let mut g = gout.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    *g *= if v.abs() < *beta {
                        v / beta
                    } else {
                        v.signum()
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::GatherRows(x, rows) => {
                let mut g = Array2::zeros(self.shape(*x));
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(src);
                    dst += &gout.row(r);
                }
                self.accumulate(grads, *x, g);
            }
            Op::SegmentMax { input, argmax } => {
                let mut g = Array2::zeros(self.shape(*input));
                let cols = gout.ncols();
                for (k, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        g[[r, k % cols]] += gout[[k / cols, k % cols]];
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::SegmentMean { input, offsets } => {
                let mut g = Array2::zeros(self.shape(*input));
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let share = &gout.row(s) / (hi - lo) as f64;
                    for r in lo..hi {
                        g.row_mut(r).assign(&share);
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.tracked(p) {
                        self.accumulate(grads, p, gout.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.tracked(p) {
                        self.accumulate(grads, p, gout.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let mut g = Array2::zeros(self.shape(*x));
                let w = gout.ncols();
                g.slice_mut(s![.., *start..*start + w]).assign(gout);
                self.accumulate(grads, *x, g);
            }
            Op::NormalizeCols { input, inv_std } => {
                let y = &node.value;
                let n = y.nrows() as f64;
                let mean_g = gout.sum_axis(Axis(0)) / n;
                let mean_gy = (gout * y).sum_axis(Axis(0)) / n;
                let inv = ndarray::Array1::from(inv_std.clone());
                let g = (gout - &mean_g - &(y * &mean_gy)) * &inv;
                self.accumulate(grads, *input, g);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let dot = (gout * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = y * &(gout - &dot);
                self.accumulate(grads, *x, g);
            }
            Op::LogSoftmaxRows(x) => {
                let p = node.value.mapv(f64::exp);
                let total = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = gout - &(p * &total);
                self.accumulate(grads, *x, g);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let mut g = gout.clone();
                for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let proj = yr.dot(&gout.row(r));
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|gv, &yv| *gv = (*gv - yv * proj) / norms[r]);
                }
                self.accumulate(grads, *input, g);
            }
            Op::PickRows(x, cols) => {
                let mut g = Array2::zeros(self.shape(*x));
                for (r, &c) in cols.iter().enumerate() {
                    g[[r, c]] += gout[[r, 0]];
                }
                self.accumulate(grads, *x, g);
            }
            Op::SumCols(x) => {
                let (n, c) = self.shape(*x);
                let g = Array2::from_shape_fn((n, c), |(r, _)| gout[[r, 0]]);
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let g = Array2::from_elem(self.shape(*x), gout[[0, 0]]);
                self.accumulate(grads, *x, g);
            }
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let n = (shape.0 * shape.1).max(1) as f64;
                let g = Array2::from_elem(shape, gout[[0, 0]] / n);
                self.accumulate(grads, *x, g);
            }
        }
    }
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report = check_gradients(&inputs, &f, &GradCheckOptions::default());
        assert!(
            report.max_rel_error < 1e-6,
            "max relative error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[5.0], [6.0]]);
        let c = g.matmul(a, b);
        assert_eq!(g.value(c), &array![[17.0], [39.0]]);
        let ct = g.matmul_t(a, a);
        assert_eq!(g.value(ct), &array![[5.0, 11.0], [11.0, 25.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(array![[1.0, -2.0]]);
        let c = g.constant(array![[3.0, 4.0]]);
        let d = g.detach(p);
        let prod = g.mul(p, c);
        let prod2 = g.mul(prod, d);
        let loss = g.sum(prod2);
        g.backward(loss);
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(p).unwrap(), &array![[3.0, -8.0]]);
    }

    #[test]
    fn linear_algebra_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            randn(&mut rng, 4, 3),
            randn(&mut rng, 3, 5),
            randn(&mut rng, 1, 5),
        ];
        check(inputs, |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let h = g.tanh(h);
            let t = g.transpose(h);
            let m = g.matmul_t(t, t);
            let e = g.scale(m, 0.1);
            let e = g.exp(e);
            g.mean(e)
        });
    }

    #[test]
    fn normalization_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            randn(&mut rng, 6, 4),
            randn(&mut rng, 1, 4),
            randn(&mut rng, 6, 4),
        ];
        check(inputs, |g, v| {
            let n = g.normalize_cols(v[0], 1e-5);
            let n = g.mul_row(n, v[1]);
            let l = g.l2_normalize_rows(n);
            let w = g.mul(l, v[2]);
            let s = g.softmax_rows(w);
            let ls = g.log_softmax_rows(w);
            let a = g.mul(s, ls);
            g.sum(a)
        });
    }

    #[test]
    fn indexing_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![randn(&mut rng, 5, 3), randn(&mut rng, 5, 2)];
        check(inputs, |g, v| {
            let gathered = g.gather_rows(v[0], &[4, 0, 0, 2, 1, 3]);
            let mx = g.segment_max(gathered, &[0, 2, 2, 6]);
            let mn = g.segment_mean(v[0], &[0, 1, 5]);
            let cat = g.concat_cols(&[v[0], v[1]]);
            let sl = g.slice_cols(cat, 2, 5);
            let stacked = g.concat_rows(&[sl, v[0]]);
            let sl = g.gather_rows(stacked, &[6, 1, 9, 3, 0]);
            let pk = g.pick_rows(sl, &[0, 1, 2, 0, 1]);
            let rs = g.sum_cols(mx);
            let a = g.sum(rs);
            let b = g.sum(mn);
            let c = g.sum(pk);
            g.weighted_sum(&[(a, 1.0), (b, 0.5), (c, 2.0)])
        });
    }

    #[test]
    fn piecewise_ops_pass_gradcheck() {
        let inputs = vec![array![[0.7, -1.3, 0.2], [-0.05, 2.5, -0.4]]];
        check(inputs, |g, v| {
            let r = g.relu(v[0]);
            let a = g.abs(v[0]);
            let s = g.smooth_l1(v[0], 0.5);
            let sum = g.add(r, a);
            let sum = g.sub(sum, s);
            g.sum(sum)
        });
    }

    #[test]
    fn empty_segment_max_is_zero() {
        let mut g = Graph::new();
        let x = g.param(array![[1.0, 5.0], [3.0, 2.0]]);
        let m = g.segment_max(x, &[0, 0, 2]);
        assert_eq!(g.value(m), &array![[0.0, 0.0], [3.0, 5.0]]);
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        let v = [1000.0, 1000.0];
        let lse = log_sum_exp(v.iter().copied());
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
