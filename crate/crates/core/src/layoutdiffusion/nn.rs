//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices, sized for small graph transformers.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Entries drawn from N(0, std^2).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul shapes");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, x) in orow.iter_mut().zip(brow) {
                    *o += a * x;
                }
            }
        }
        out
    }

    /// `self^T * b`.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn shapes");
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, x) in orow.iter_mut().zip(brow) {
                    *o += a * x;
                }
            }
        }
        out
    }

    /// `self * b^T`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt shapes");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// Adds a 1 x c row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a 1 x c row.
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    /// Row-wise standardization; keeps 1/std per row.
    Normalize(Var, Vec<f64>),
    SoftmaxRows(Var),
    /// `a + sum_r consts[r] * p[idx[r]]`
    AddWeighted(Var, Rc<Vec<Mat>>, Var, Vec<usize>),
    Cols(Var, usize),
    HCat(Vec<Var>),
    Gather(Var, Vec<usize>),
    /// Mean squared difference to a target over selected rows; 1 x 1.
    MaskedMse(Var, Rc<Mat>, Vec<usize>),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

/// Records a computation over parameters borrowed from `params` so it can be
/// differentiated once.
pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Mat>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Const, Some(m))
    }

    pub fn param(&mut self, i: usize) -> Var {
        self.push(Op::Param(i), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(v))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), Some(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(v))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, v.cols), "add_row shapes");
        for chunk in v.data.chunks_mut(r.cols) {
            for (x, b) in chunk.iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), Some(v))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, v.cols), "mul_row shapes");
        for chunk in v.data.chunks_mut(r.cols) {
            for (x, b) in chunk.iter_mut().zip(&r.data) {
                *x *= b;
            }
        }
        self.push(Op::MulRow(a, row), Some(v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), Some(v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(Op::Scale(a, s), Some(v))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= sigmoid(*x));
        self.push(Op::Silu(a), Some(v))
    }

    /// Row-wise zero mean, unit variance.
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv = Vec::with_capacity(x.rows);
        for row in v.data.chunks_mut(x.cols) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|y| *y = (*y - mean) * r);
            inv.push(r);
        }
        self.push(Op::Normalize(a, inv), Some(v))
    }

    /// Softmax along each row; `-inf` entries get zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for row in v.data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for y in row.iter_mut() {
                *y = (*y - m).exp();
                s += *y;
            }
            row.iter_mut().for_each(|y| *y /= s);
        }
        self.push(Op::SoftmaxRows(a), Some(v))
    }

    pub fn add_weighted(&mut self, a: Var, consts: Rc<Vec<Mat>>, p: Var, idx: Vec<usize>) -> Var {
        let mut v = self.value(a).clone();
        let pv = self.value(p);
        for (c, &i) in consts.iter().zip(&idx) {
            let w = pv.data[i];
            for (x, y) in v.data.iter_mut().zip(&c.data) {
                *x += w * y;
            }
        }
        self.push(Op::AddWeighted(a, consts, p, idx), Some(v))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Op::Cols(a, start), Some(v))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "hcat rows");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(Op::HCat(parts.to_vec()), Some(v))
    }

    /// Rows of `a` selected by `idx` (embedding lookup).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
        }
        self.push(Op::Gather(a, idx), Some(v))
    }

    pub fn masked_mse(&mut self, a: Var, target: Rc<Mat>, rows: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut s = 0.0;
        for &r in &rows {
            for (p, t) in x.row(r).iter().zip(target.row(r)) {
                s += (p - t).powi(2);
            }
        }
        let n = (rows.len() * x.cols).max(1) as f64;
        self.push(Op::MaskedMse(a, target, rows), Some(Mat::from_vec(1, 1, vec![s / n])))
    }

    /// Backpropagates from the scalar `out` and returns the gradient of every
    /// parameter used on the tape, summed over uses.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let o = self.value(out);
        grads[out.0] = Some(Mat::filled(o.rows, o.cols, 1.0));
        let mut param_grads: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => x.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(x) => x.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (x, y) in gr.data.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut gr = Mat::zeros(1, g.cols);
                    let mut ga = g.clone();
                    for (chunk, (gc, xc)) in ga
                        .data
                        .chunks_mut(g.cols)
                        .zip(g.data.chunks(g.cols).zip(x.data.chunks(g.cols)))
                    {
                        for c in 0..g.cols {
                            gr.data[c] += gc[c] * xc[c];
                            chunk[c] *= r.data[c];
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(&self.value(*b).data) {
                        *x *= y;
                    }
                    let mut gb = g;
                    for (x, y) in gb.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= y;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    for (x, &z) in ga.data.iter_mut().zip(&self.value(*a).data) {
                        let s = sigmoid(z);
                        *x *= s * (1.0 + z * (1.0 - s));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Normalize(a, inv) => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols as f64;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mg = gy.iter().sum::<f64>() / n;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = inv[r] * (gy[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = node.value.as_ref().unwrap();
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..p.cols {
                            ga.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::AddWeighted(a, consts, p, idx) => {
                    let pv = self.value(*p);
                    let mut gp = Mat::zeros(pv.rows, pv.cols);
                    for (c, &k) in consts.iter().zip(idx) {
                        gp.data[k] += c.data.iter().zip(&g.data).map(|(x, y)| x * y).sum::<f64>();
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *a, g);
                }
                Op::Cols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        ga.data[r * x.cols + start..r * x.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::HCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.data[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Gather(a, idx) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (r, &k) in idx.iter().enumerate() {
                        for c in 0..x.cols {
                            ga.data[k * x.cols + c] += g.data[r * x.cols + c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedMse(a, target, rows) => {
                    let x = self.value(*a);
                    let n = (rows.len() * x.cols).max(1) as f64;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for &r in rows {
                        for c in 0..x.cols {
                            ga.data[r * x.cols + c] =
                                g.data[0] * 2.0 * (x.at(r, c) - target.at(r, c)) / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        param_grads
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.step += 1;
        let b1 = 1.0 - self.beta1.powi(self.step as i32);
        let b2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / b1;
                let vh = v.data[i] / b2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
