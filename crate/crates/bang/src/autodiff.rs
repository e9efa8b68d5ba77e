//! Minimal reverse-mode automatic differentiation over dense f32
//! matrices. One [`Graph`] is built per forward pass; [`Graph::backward`]
//! walks the tape in reverse. Everything is 2-D: vectors are `[1 x n]`
//! rows, scalars `[1 x 1]`.
//!
//! Correctness is certified by the finite-difference suite in
//! `tests/gradients.rs`; summation order is fixed, so results are
//! bitwise reproducible for a fixed input.

use ndarray::{Array2, Axis};

pub type Idx = usize;

enum Op {
    Leaf,
    /// C = A . B
    MatMul(Idx, Idx),
    /// C = A . B^T
    MatMulNT(Idx, Idx),
    Add(Idx, Idx),
    /// [m x n] + [1 x n]
    AddBroadcastRow(Idx, Idx),
    /// [m x n] * [1 x n]
    MulBroadcastRow(Idx, Idx),
    /// elementwise + constant (no gradient for the constant)
    AddConst(Idx),
    /// elementwise * constant (dropout masks, padding)
    MulConst(Idx, Array2<f32>),
    Scale(Idx, f32),
    SoftmaxRows(Idx),
    Gelu(Idx),
    /// per-row zero-mean unit-variance normalization
    LayerNormRows(Idx),
    /// out[i, :] = a[idx[i], :]
    GatherRows(Idx, Vec<usize>),
    /// out[q, k] = param[head, idx[q * k_len + k]]
    BiasLookup {
        param: Idx,
        head: usize,
        idx: std::rc::Rc<Vec<usize>>,
        shape: (usize, usize),
    },
    ConcatRows(Vec<Idx>),
    SliceRows(Idx, usize),
    ConcatCols(Vec<Idx>),
    SliceCols(Idx, usize),
    /// per-row label-smoothed NLL of logits against targets -> [m x 1]
    SmoothedNllRows {
        logits: Idx,
        targets: Vec<usize>,
        eps: f32,
    },
    /// scalar = sum_i w_i * a[i, 0]
    DotConstCol(Idx, Vec<f32>),
}

struct Node {
    value: Array2<f32>,
    grad: Option<Array2<f32>>,
    op: Op,
    needs_grad: bool,
    /// cached softmax output for SmoothedNllRows backward
    aux: Option<Array2<f32>>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f32 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
        }
    }

    fn push(&mut self, value: Array2<f32>, op: Op, needs_grad: bool) -> Idx {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            aux: None,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: Idx) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Array2<f32>, needs_grad: bool) -> Idx {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, id: Idx) -> &Array2<f32> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: Idx) -> Option<&Array2<f32>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Idx, b: Idx) -> Idx {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_nt(&mut self, a: Idx, b: Idx) -> Idx {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    pub fn add(&mut self, a: Idx, b: Idx) -> Idx {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: Idx, row: Idx) -> Idx {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[row].value.row(0);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddBroadcastRow(a, row), g)
    }

    pub fn mul_row(&mut self, a: Idx, row: Idx) -> Idx {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value * &self.nodes[row].value.row(0);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::MulBroadcastRow(a, row), g)
    }

    pub fn add_const(&mut self, a: Idx, c: &Array2<f32>) -> Idx {
        let v = &self.nodes[a].value + c;
        let g = self.ng(a);
        self.push(v, Op::AddConst(a), g)
    }

    pub fn mul_const(&mut self, a: Idx, c: Array2<f32>) -> Idx {
        let v = &self.nodes[a].value * &c;
        let g = self.ng(a);
        self.push(v, Op::MulConst(a, c), g)
    }

    pub fn scale(&mut self, a: Idx, k: f32) -> Idx {
        let v = &self.nodes[a].value * k;
        let g = self.ng(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn softmax_rows(&mut self, a: Idx) -> Idx {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f32 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn gelu(&mut self, a: Idx) -> Idx {
        let v = self.nodes[a].value.mapv(gelu);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn layer_norm_rows(&mut self, a: Idx) -> Idx {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        let g = self.ng(a);
        self.push(v, Op::LayerNormRows(a), g)
    }

    pub fn gather_rows(&mut self, a: Idx, idx: Vec<usize>) -> Idx {
        let src = &self.nodes[a].value;
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        let g = self.ng(a);
        self.push(v, Op::GatherRows(a, idx), g)
    }

    /// Bucketed bias lookup: `idx` is a row-major `[m x k]` bucket index
    /// grid shared across heads; `param` is `[n_heads x n_buckets]`.
    pub fn bias_lookup(
        &mut self,
        param: Idx,
        head: usize,
        idx: std::rc::Rc<Vec<usize>>,
        shape: (usize, usize),
    ) -> Idx {
        let p = &self.nodes[param].value;
        let mut v = Array2::zeros(shape);
        for q in 0..shape.0 {
            for k in 0..shape.1 {
                v[(q, k)] = p[(head, idx[q * shape.1 + k])];
            }
        }
        let g = self.ng(param);
        self.push(v, Op::BiasLookup { param, head, idx, shape }, g)
    }

    pub fn concat_rows(&mut self, parts: Vec<Idx>) -> Idx {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts), g)
    }

    pub fn slice_rows(&mut self, a: Idx, start: usize, len: usize) -> Idx {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: Vec<Idx>) -> Idx {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts), g)
    }

    pub fn slice_cols(&mut self, a: Idx, start: usize, len: usize) -> Idx {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a, start), g)
    }

    /// Per-row label-smoothed negative log-likelihood: for row i,
    /// `-( (1-eps) * logp[y_i] + eps/V * sum_j logp[j] )`.
    pub fn smoothed_nll_rows(&mut self, logits: Idx, targets: Vec<usize>, eps: f32) -> Idx {
        let x = &self.nodes[logits].value;
        let m = x.nrows();
        let vlen = x.ncols() as f32;
        let mut probs = Array2::zeros(x.raw_dim());
        let mut out = Array2::zeros((m, 1));
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f32>().ln();
            let mean_logp: f32 = row.iter().map(|e| e - lse).sum::<f32>() / vlen;
            let logp_t = x[(i, targets[i])] - lse;
            out[(i, 0)] = -((1.0 - eps) * logp_t + eps * mean_logp);
            for j in 0..x.ncols() {
                probs[(i, j)] = (x[(i, j)] - lse).exp();
            }
        }
        let g = self.ng(logits);
        let id = self.push(out, Op::SmoothedNllRows { logits, targets, eps }, g);
        self.nodes[id].aux = Some(probs);
        id
    }

    /// Scalar weighted sum over a column vector.
    pub fn dot_const_col(&mut self, a: Idx, weights: Vec<f32>) -> Idx {
        let x = &self.nodes[a].value;
        debug_assert_eq!(x.ncols(), 1);
        let s: f32 = x
            .column(0)
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum();
        let g = self.ng(a);
        self.push(
            Array2::from_elem((1, 1), s),
            Op::DotConstCol(a, weights),
            g,
        )
    }

    fn accum(&mut self, id: Idx, delta: Array2<f32>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a `[1 x 1]` root.
    pub fn backward(&mut self, root: Idx) {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "backward root must be scalar");
        self.nodes[root].grad = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dout) = self.nodes[id].grad.take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    self.nodes[id].grad = Some(dout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = dout.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&dout);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = dout.dot(&self.nodes[b].value);
                    let db = dout.t().dot(&self.nodes[a].value);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accum(a, dout.clone());
                    self.accum(b, dout);
                }
                Op::AddBroadcastRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let drow = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(a, dout);
                    self.accum(row, drow);
                }
                Op::MulBroadcastRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let da = &dout * &self.nodes[row].value.row(0);
                    let drow = (&dout * &self.nodes[a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accum(a, da);
                    self.accum(row, drow);
                }
                Op::AddConst(a) => {
                    let a = *a;
                    self.accum(a, dout);
                }
                Op::MulConst(a, c) => {
                    let a = *a;
                    let da = &dout * c;
                    self.accum(a, da);
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    self.accum(a, dout * k);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = &self.nodes[id].value;
                    let mut dx = &dout * y;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s: f32 = drow.sum();
                        drow.iter_mut()
                            .zip(yrow.iter())
                            .for_each(|(d, &yv)| *d -= s * yv);
                    }
                    self.accum(a, dx);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let dx = &dout * &self.nodes[a].value.mapv(gelu_deriv);
                    self.accum(a, dx);
                }
                Op::LayerNormRows(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let y = &self.nodes[id].value;
                    let mut dx = Array2::zeros(x.raw_dim());
                    for ((xrow, yrow), (drow, mut dxrow)) in x
                        .rows()
                        .into_iter()
                        .zip(y.rows())
                        .zip(dout.rows().into_iter().zip(dx.rows_mut()))
                    {
                        let n = xrow.len() as f32;
                        let mean = xrow.sum() / n;
                        let var =
                            xrow.iter().map(|e| (e - mean) * (e - mean)).sum::<f32>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mean_d: f32 = drow.sum() / n;
                        let mean_dy: f32 = drow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(d, y)| d * y)
                            .sum::<f32>()
                            / n;
                        for ((dx, &d), &yv) in
                            dxrow.iter_mut().zip(drow.iter()).zip(yrow.iter())
                        {
                            *dx = inv * (d - mean_d - yv * mean_dy);
                        }
                    }
                    self.accum(a, dx);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let mut da = Array2::zeros(self.nodes[a].value.raw_dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut out = da.row_mut(r);
                        out += &dout.row(i);
                    }
                    self.accum(a, da);
                }
                Op::BiasLookup { param, head, idx, shape } => {
                    let (param, head, shape) = (*param, *head, *shape);
                    let idx = idx.clone();
                    let mut dp = Array2::zeros(self.nodes[param].value.raw_dim());
                    for q in 0..shape.0 {
                        for k in 0..shape.1 {
                            dp[(head, idx[q * shape.1 + k])] += dout[(q, k)];
                        }
                    }
                    self.accum(param, dp);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p].value.nrows();
                        let dp = dout.slice(ndarray::s![start..start + len, ..]).to_owned();
                        start += len;
                        self.accum(p, dp);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (a, start) = (*a, *start);
                    let mut da = Array2::zeros(self.nodes[a].value.raw_dim());
                    let len = dout.nrows();
                    da.slice_mut(ndarray::s![start..start + len, ..])
                        .assign(&dout);
                    self.accum(a, da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let len = self.nodes[p].value.ncols();
                        let dp = dout.slice(ndarray::s![.., start..start + len]).to_owned();
                        start += len;
                        self.accum(p, dp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (a, start) = (*a, *start);
                    let mut da = Array2::zeros(self.nodes[a].value.raw_dim());
                    let len = dout.ncols();
                    da.slice_mut(ndarray::s![.., start..start + len])
                        .assign(&dout);
                    self.accum(a, da);
                }
                Op::SmoothedNllRows { logits, targets, eps } => {
                    let (logits, eps) = (*logits, *eps);
                    let targets = targets.clone();
                    let probs = self.nodes[id].aux.as_ref().unwrap();
                    let vlen = probs.ncols() as f32;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let w = dout[(i, 0)];
                        for j in 0..dl.ncols() {
                            let q = if j == t { 1.0 - eps } else { 0.0 } + eps / vlen;
                            dl[(i, j)] = w * (dl[(i, j)] - q);
                        }
                    }
                    self.accum(logits, dl);
                }
                Op::DotConstCol(a, weights) => {
                    let a = *a;
                    let w = dout[(0, 0)];
                    let da = Array2::from_shape_vec(
                        (weights.len(), 1),
                        weights.iter().map(|wi| wi * w).collect(),
                    )
                    .unwrap();
                    self.accum(a, da);
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite differences against the tape for one scalar-valued
    /// builder closure.
    fn gradcheck<F>(input: Array2<f32>, f: F)
    where
        F: Fn(&mut Graph, Idx) -> Idx,
    {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let loss = f(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x).unwrap().clone();

        let h = 1e-3f32;
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let eval = |v: f32| {
                    let mut p = input.clone();
                    p[(i, j)] = v;
                    let mut g = Graph::new();
                    let x = g.leaf(p, false);
                    let loss = f(&mut g, x);
                    g.value(loss)[(0, 0)]
                };
                let num = (eval(input[(i, j)] + h) - eval(input[(i, j)] - h)) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = num.abs().max(a.abs()).max(1e-4);
                assert!(
                    (num - a).abs() / denom < 1e-2,
                    "grad mismatch at ({i},{j}): fd={num} tape={a}"
                );
            }
        }
    }

    fn sum_all(g: &mut Graph, x: Idx) -> Idx {
        let (m, n) = g.value(x).dim();
        let ones = Array2::from_elem((n, 1), 1.0f32);
        let o = g.leaf(ones, false);
        let col = g.matmul(x, o);
        g.dot_const_col(col, vec![1.0; m])
    }

    #[test]
    fn matmul_grad() {
        let b_val = arr2(&[[0.3f32, -1.2, 0.4], [0.7, 0.1, -0.5]]);
        gradcheck(arr2(&[[1.0f32, 2.0], [0.5, -0.3], [0.2, 0.9]]), move |g, x| {
            let b = g.leaf(b_val.clone(), false);
            let y = g.matmul(x, b);
            let y = g.gelu(y);
            sum_all(g, y)
        });
    }

    #[test]
    fn softmax_layernorm_grad() {
        gradcheck(arr2(&[[0.3f32, -0.8, 1.2, 0.05], [2.0, -0.4, 0.1, 0.6]]), |g, x| {
            let y = g.layer_norm_rows(x);
            let y = g.softmax_rows(y);
            let b = g.leaf(arr2(&[[0.5f32], [1.5], [-0.7], [0.2]]), false);
            let col = g.matmul(y, b);
            g.dot_const_col(col, vec![1.0, -2.0])
        });
    }

    #[test]
    fn nll_and_gather_grad() {
        gradcheck(arr2(&[[0.1f32, 0.2], [-0.4, 0.9], [0.3, -0.3]]), |g, x| {
            let rows = g.gather_rows(x, vec![2, 0, 1, 1]);
            let w = g.leaf(arr2(&[[0.8f32, -0.2, 0.4], [0.1, 0.9, -0.6]]), false);
            let logits = g.matmul(rows, w);
            let nll = g.smoothed_nll_rows(logits, vec![0, 2, 1, 0], 0.1);
            g.dot_const_col(nll, vec![0.25; 4])
        });
    }

    #[test]
    fn bias_lookup_grad() {
        let idx = std::rc::Rc::new(vec![0usize, 1, 2, 1, 0, 2]);
        gradcheck(arr2(&[[0.3f32, -0.5, 0.8], [0.2, 0.0, -0.1]]), move |g, x| {
            let b = g.bias_lookup(x, 1, idx.clone(), (2, 3));
            let sm = g.softmax_rows(b);
            let w = g.leaf(arr2(&[[0.9f32], [-0.3], [0.6]]), false);
            let col = g.matmul(sm, w);
            g.dot_const_col(col, vec![1.0, -1.5])
        });
    }

    #[test]
    fn concat_slice_grad() {
        gradcheck(arr2(&[[0.5f32, -1.0], [0.25, 0.75], [1.5, -0.5]]), |g, x| {
            let a = g.slice_rows(x, 0, 2);
            let b = g.slice_rows(x, 1, 2);
            let c = g.concat_rows(vec![a, b]);
            let c1 = g.slice_cols(c, 0, 1);
            let c2 = g.slice_cols(c, 1, 1);
            let d = g.concat_cols(vec![c2, c1]);
            let d = g.gelu(d);
            sum_all(g, d)
        });
    }

    #[test]
    fn masked_softmax_row_is_delta() {
        let mut g = Graph::new();
        let x = g.leaf(arr2(&[[0.3f32, 0.7, -0.2]]), false);
        let mask = arr2(&[[-1e9f32, 0.0, -1e9]]);
        let y = g.add_const(x, &mask);
        let sm = g.softmax_rows(y);
        let v = g.value(sm);
        assert!((v[(0, 1)] - 1.0).abs() < 1e-6);
        assert!(v[(0, 0)].abs() < 1e-6 && v[(0, 2)].abs() < 1e-6);
    }
}
