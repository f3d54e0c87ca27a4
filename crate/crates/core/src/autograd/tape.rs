use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    OuterAdd(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LayerNormRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Dropout(Var, Vec<f64>),
    Bce(Var, Vec<f64>, f64),
    NaryGrouped { scores: Var, argmax_pos: usize, neg: Vec<usize>, eps: f64 },
    CrossEntropy(Var, Vec<usize>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode autodiff tape.
///
/// Parameters are borrowed from a [`ParamStore`]; each parameter becomes one
/// leaf on first use. The tape is single-use: build, call [`Tape::backward`], drop.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    dropout_rng: ChaCha8Rng,
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: Grads,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. a value created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            training: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Tape that applies dropout, drawing masks from a stream seeded with `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        let mut t = Self::new(params);
        t.training = true;
        t.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            op => children(op).iter().any(|c| self.nodes[c.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is retained (see [`Gradients::wrt`]).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(self.value(a), false, self.value(b), false);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(self.value(a), false, self.value(b), true);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the `1×C` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `out[i][j] = col[i] + row[j]` for an `R×1` column and a `1×C` row.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Var {
        let (cv, rv) = (self.value(col), self.value(row));
        assert_eq!(cv.cols(), 1);
        assert_eq!(rv.rows(), 1);
        let mut out = Matrix::zeros(cv.rows(), rv.cols());
        for i in 0..cv.rows() {
            let ci = cv.data()[i];
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o = ci + r;
            }
        }
        self.push(out, Op::OuterAdd(col, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×C` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), None);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row softmax restricted to entries where `mask` is true. Masked entries
    /// are exactly zero; a row with no allowed entries is all zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len(), "mask size mismatch");
        let cols = av.cols();
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), Some(&mask[r * cols..(r + 1) * cols]));
        }
        self.push(out, Op::MaskedSoftmaxRows(a))
    }

    /// Row-wise standardisation `(x − μ)/σ` with no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(idx.len(), av.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Matrix::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Column means, as a `1×C` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        let n = av.rows() as f64;
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x / n;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Inverted dropout; identity on evaluation tapes or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.dropout_rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout(a, mask))
    }

    /// Mean binary cross-entropy of probabilities `probs` against `targets`,
    /// with probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64], eps: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.len(), targets.len(), "bce target count mismatch");
        let n = targets.len() as f64;
        let loss: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &r)| {
                let c = s.clamp(eps, 1.0 - eps);
                -(r * c.ln() + (1.0 - r) * (1.0 - c).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Matrix::scalar(loss), Op::Bce(probs, targets.to_vec(), eps))
    }

    /// Grouped n-ary loss: mean of `−log(1 − s)` over `neg` plus
    /// `−log(max_{pos} s)`. The max is taken at record time; ties resolve to
    /// the earliest entry of `pos`. Panics if `pos` is empty.
    pub fn nary_grouped(&mut self, scores: Var, pos: &[usize], neg: &[usize], eps: f64) -> Var {
        assert!(!pos.is_empty(), "grouped loss needs at least one positive");
        let sv = self.value(scores).data();
        let clamp = |s: f64| s.clamp(eps, 1.0 - eps);
        let mut argmax_pos = pos[0];
        for &p in &pos[1..] {
            if sv[p] > sv[argmax_pos] {
                argmax_pos = p;
            }
        }
        let neg_term = if neg.is_empty() {
            0.0
        } else {
            neg.iter().map(|&i| -(1.0 - clamp(sv[i])).ln()).sum::<f64>() / neg.len() as f64
        };
        let loss = neg_term - clamp(sv[argmax_pos]).ln();
        self.push(Matrix::scalar(loss), Op::NaryGrouped { scores, argmax_pos, neg: neg.to_vec(), eps })
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count mismatch");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// `Σ wᵢ·xᵢ` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut param_grads = self.params.zero_grads();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Input => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads, &mut param_grads);
        }
        Gradients { params: param_grads, nodes: grads }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], pg: &mut Grads) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&m),
                slot => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::Param(id) => pg.accumulate(*id, g),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, gemm(g, false, val(*b), true));
                }
                if wants(*b) {
                    acc(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    acc(*a, gemm(g, false, val(*b), false));
                }
                if wants(*b) {
                    acc(*b, gemm(g, true, val(*a), false));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if wants(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::OuterAdd(col, row) => {
                if wants(*col) {
                    acc(*col, row_sums(g));
                }
                if wants(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*row) {
                    acc(*row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(a, slope) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { slope * d })),
            Op::Elu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { d * x.exp() })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNormRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gm = gr.iter().sum::<f64>() / n;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - gm - yv * gym);
                    }
                }
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(p, Matrix::from_vec(rows, cols, data));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let cols = av.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let n = av.rows() as f64;
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x / n;
                    }
                }
                acc(*a, ga);
            }
            Op::Dropout(a, mask) => {
                let mut ga = g.clone();
                for (o, m) in ga.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(*a, ga);
            }
            Op::Bce(p, targets, eps) => {
                let pv = val(*p);
                let n = targets.len() as f64;
                let d = g.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&s, &r)| {
                        if s < *eps || s > 1.0 - eps {
                            0.0
                        } else {
                            d * (-r / s + (1.0 - r) / (1.0 - s)) / n
                        }
                    })
                    .collect();
                acc(*p, Matrix::from_vec(pv.rows(), pv.cols(), data));
            }
            Op::NaryGrouped { scores, argmax_pos, neg, eps } => {
                let sv = val(*scores);
                let d = g.item();
                let inside = |s: f64| s >= *eps && s <= 1.0 - eps;
                let mut gs = Matrix::zeros(sv.rows(), sv.cols());
                let data = gs.data_mut();
                for &i in neg {
                    let s = sv.data()[i];
                    if inside(s) {
                        data[i] += d / (neg.len() as f64 * (1.0 - s));
                    }
                }
                let s = sv.data()[*argmax_pos];
                if inside(s) {
                    data[*argmax_pos] -= d / s;
                }
                acc(*scores, gs);
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = val(*logits);
                let n = targets.len() as f64;
                let d = g.item();
                let mut gl = lv.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    softmax_in_place(row, None);
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= d / n;
                    }
                }
                acc(*logits, gl);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, Matrix::scalar(w * g.item()));
                }
            }
        }
    }
}

fn children(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::AddRow(a, b)
        | Op::OuterAdd(a, b)
        | Op::Mul(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Elu(a)
        | Op::Sigmoid(a)
        | Op::SoftmaxRows(a)
        | Op::MaskedSoftmaxRows(a)
        | Op::LayerNormRows(a)
        | Op::GatherRows(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::MeanRows(a)
        | Op::Dropout(a, _)
        | Op::Bce(a, _, _)
        | Op::CrossEntropy(a, _) => vec![*a],
        Op::NaryGrouped { scores, .. } => vec![*scores],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let allowed = |k: usize| mask.is_none_or(|m| m[k]);
    let mut m = f64::NEG_INFINITY;
    for (k, &x) in row.iter().enumerate() {
        if allowed(k) && x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for (k, x) in row.iter_mut().enumerate() {
        if allowed(k) {
            *x = (*x - m).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

fn row_sums(g: &Matrix) -> Matrix {
    Matrix::column_vector((0..g.rows()).map(|r| g.row(r).iter().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_input, relative_error, DEFAULT_STEP};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Contracts `x` against a fixed random weight into a scalar.
    fn project(tape: &mut Tape, x: Var) -> Var {
        let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
        let w = tape.constant(random(r, c, 99));
        let y = tape.mul(x, w);
        let left = tape.constant(Matrix::filled(1, r, 1.0));
        let right = tape.constant(Matrix::filled(c, 1, 1.0));
        let y = tape.matmul(left, y);
        tape.matmul(y, right)
    }

    fn check(name: &str, rows: usize, cols: usize, build: impl Fn(&mut Tape, Var) -> Var) {
        let params = ParamStore::new();
        let x = random(rows, cols, 7);
        let r = check_input(&params, &x, |t, v| {
            let y = build(t, v);
            project(t, y)
        }, DEFAULT_STEP);
        assert!(r.rel_error < 1e-6, "{name}: {}", r.rel_error);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        check("matmul", 3, 4, |t, x| {
            let w = t.constant(random(4, 2, 1));
            t.matmul(x, w)
        });
        check("matmul_nt", 3, 4, |t, x| {
            let w = t.constant(random(5, 4, 1));
            let a = t.matmul_nt(x, w);
            let b = t.matmul_nt(w, x);
            let bt = t.transpose(b);
            t.add(a, bt)
        });
        check("self matmul", 3, 3, |t, x| t.matmul(x, x));
        check("sub/add", 3, 4, |t, x| {
            let c = t.constant(random(3, 4, 2));
            let a = t.sub(c, x);
            t.add(a, x)
        });
        check("add_row/mul_row", 3, 4, |t, x| {
            let r = t.slice_rows(x, 1, 1);
            let a = t.add_row(x, r);
            t.mul_row(a, r)
        });
        check("outer_add", 3, 3, |t, x| {
            let c = t.slice_cols(x, 0, 1);
            let r = t.slice_rows(x, 2, 1);
            t.outer_add(c, r)
        });
        check("pointwise", 3, 4, |t, x| {
            let a = t.scale(x, 1.7);
            let a = t.leaky_relu(a, 0.2);
            let b = t.elu(x);
            let c = t.sigmoid(x);
            let s = t.mul(a, b);
            let s = t.add(s, c);
            let d = t.relu(x);
            t.add(s, d)
        });
        check("softmax", 3, 4, |t, x| t.softmax_rows(x));
        check("masked softmax", 3, 3, |t, x| {
            t.masked_softmax_rows(x, &[true, false, true, false, false, false, true, true, true])
        });
        check("layer norm", 3, 5, |t, x| t.layer_norm_rows(x));
        check("gather/concat", 3, 4, |t, x| {
            let g = t.gather_rows(x, &[2, 0, 2]);
            let c = t.concat_rows(&[g, x]);
            let h = t.slice_cols(c, 1, 2);
            t.concat_cols(&[h, c])
        });
        check("mean", 4, 3, |t, x| t.mean_rows(x));
        check("bce", 2, 3, |t, x| {
            let p = t.sigmoid(x);
            t.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 1e-7)
        });
        check("grouped", 1, 5, |t, x| {
            let p = t.sigmoid(x);
            t.nary_grouped(p, &[0, 3], &[1, 2, 4], 1e-7)
        });
        check("cross entropy", 3, 4, |t, x| t.cross_entropy(x, &[0, 3, 1]));
        check("weighted sum", 2, 2, |t, x| {
            let a = t.cross_entropy(x, &[0, 1]);
            let m = t.mean_rows(x);
            let b = t.cross_entropy(m, &[1]);
            t.weighted_sum(&[(a, 0.3), (b, 2.0)])
        });
    }

    #[test]
    fn dropout_is_identity_when_evaluating() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(random(4, 4, 3));
        assert_eq!(tape.dropout(x, 0.5), x);
        let mut tape = Tape::training(&params, 1);
        let x = tape.input(random(40, 40, 3));
        let y = tape.dropout(x, 0.5);
        let zeros = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert!((600..1000).contains(&zeros), "{zeros}");
    }

    #[test]
    fn clamped_bce_has_no_gradient() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let p = tape.input(Matrix::from_vec(1, 2, vec![0.0, 0.5]));
        let l = tape.bce(p, &[1.0, 1.0], 1e-7);
        let g = tape.backward(l);
        let gp = g.wrt(p).unwrap();
        assert_eq!(gp.data()[0], 0.0);
        assert!(relative_error(&[gp.data()[1]], &[-1.0]) < 1e-12);
    }
}
