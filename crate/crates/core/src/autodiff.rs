//! Minimal reverse-mode tape over dense row-major `f64` matrices.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the nodes in reverse creation order and accumulates gradients only
//! for nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`. All loops run in a fixed index order so results are
//! bit-reproducible.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// `out[rows_a, cols_b] += a @ b`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n, m] += a[n, k] @ b[m, k]^T`.
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

/// `out[k, m] += a[n, k]^T @ b[n, m]`.
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let b_row = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    out
}

/// Marker for a padded (all-zero) row in [`Graph::gather_rows`].
pub const ZERO_ROW: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Softmax(Var),
    Tanh(Var),
    Sigmoid(Var),
    RmsNorm(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<u32>>),
    Reshape(Var),
    Sum(Var),
    Mse(Var, Rc<Vec<f64>>),
    /// Scalar output with a precomputed gradient w.r.t. its single input.
    Scalar(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub const RMS_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a @ b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols, "matmul_bt inner dimension");
        let mut out = Mat::zeros(va.rows, vb.rows);
        matmul_bt_acc(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.rows);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the `[1, cols]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((vb.rows, vb.cols), (1, va.cols), "add_row shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&vb.data)
            {
                *o += bv;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows {
            softmax_in_place(&mut out.data[r * out.cols..(r + 1) * out.cols]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.tanh()).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(
            va.rows,
            va.cols,
            va.data.iter().map(|&x| sigmoid(x)).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise RMS normalization without a learned gain.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RmsNorm(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        assert!(start + width <= va.cols, "slice_cols out of range");
        let mut out = Mat::zeros(va.rows, width);
        for r in 0..va.rows {
            out.data[r * width..(r + 1) * width]
                .copy_from_slice(&va.data[r * va.cols + start..r * va.cols + start + width]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let va = self.value(a);
        assert!(start + count <= va.rows, "slice_rows out of range");
        let out = Mat::from_vec(
            count,
            va.cols,
            va.data[start * va.cols..(start + count) * va.cols].to_vec(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + vp.cols].copy_from_slice(vp.row(r));
            }
            offset += vp.cols;
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows cols");
            data.extend_from_slice(&vp.data);
            rows += vp.rows;
        }
        let rg = self.rg(parts);
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Row gather: output row `i` copies input row `map[i]`, or zeros for
    /// [`ZERO_ROW`].
    pub fn gather_rows(&mut self, a: Var, map: Rc<Vec<u32>>) -> Var {
        let va = self.value(a);
        let cols = va.cols;
        let mut out = Mat::zeros(map.len(), cols);
        for (i, &src) in map.iter().enumerate() {
            if src != ZERO_ROW {
                out.data[i * cols..(i + 1) * cols].copy_from_slice(va.row(src as usize));
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, map), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size");
        let out = Mat::from_vec(rows, cols, va.data.clone());
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a), rg)
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&mut self, a: Var, target: Rc<Vec<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), target.len(), "mse size");
        let n = va.len() as f64;
        let s: f64 = va
            .data
            .iter()
            .zip(target.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a]);
        self.push(Mat::from_vec(1, 1, vec![s / n]), Op::Mse(a, target), rg)
    }

    /// A scalar function of `a` whose value and gradient were computed
    /// outside the tape.
    pub fn scalar_fn(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(self.value(a).len(), grad.len(), "scalar_fn gradient size");
        let rg = self.rg(&[a]);
        self.push(Mat::from_vec(1, 1, vec![value]), Op::Scalar(a, grad), rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Mat>], v: Var) -> Option<&'a mut Mat> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(node.value.rows, node.value.cols)))
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G @ B^T
                    matmul_bt_acc(&g.data, &vb.data, &mut ga.data, g.rows, g.cols, vb.rows);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = A^T @ G
                    matmul_at_acc(&va.data, &g.data, &mut gb.data, va.rows, va.cols, g.cols);
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G @ B
                    matmul_acc(&g.data, &vb.data, &mut ga.data, g.rows, g.cols, vb.cols);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = G^T @ A
                    matmul_at_acc(&g.data, &va.data, &mut gb.data, g.rows, g.cols, va.cols);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..g.rows {
                        gb.data.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.data.iter_mut().zip(&g.data).zip(&vb) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.data.iter_mut().zip(&g.data).zip(&va) {
                        *x += gy * av;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let out = &mut ga.data[r * y.cols..(r + 1) * y.cols];
                        for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &t), &q) in ga.data.iter_mut().zip(&y.data).zip(&g.data) {
                        *o += q * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &s), &q) in ga.data.iter_mut().zip(&y.data).zip(&g.data) {
                        *o += q * s * (1.0 - s);
                    }
                }
            }
            Op::RmsNorm(a) => {
                let x = self.value(*a);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    let n = x.cols as f64;
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / n;
                        let out = &mut ga.data[r * x.cols..(r + 1) * x.cols];
                        for ((o, &yy), &gg) in out.iter_mut().zip(yr).zip(gr) {
                            *o += inv * (gg - yy * dot);
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let cols = ga.cols;
                    for r in 0..g.rows {
                        let dst = &mut ga.data[r * cols + start..r * cols + start + g.cols];
                        dst.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let off = start * ga.cols;
                    ga.data[off..off + g.len()]
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..g.rows {
                            let src = &g.data[r * g.cols + offset..r * g.cols + offset + width];
                            gp.data[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.data
                            .iter_mut()
                            .zip(&g.data[offset..offset + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, map) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let cols = ga.cols;
                    for (i, &src) in map.iter().enumerate() {
                        if src == ZERO_ROW {
                            continue;
                        }
                        let s = src as usize;
                        ga.data[s * cols..(s + 1) * cols]
                            .iter_mut()
                            .zip(g.row(i))
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                let s = g.scalar();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Mse(a, target) => {
                let s = g.scalar();
                let va = self.value(*a).data.clone();
                if let Some(ga) = self.acc(grads, *a) {
                    let k = 2.0 * s / va.len() as f64;
                    for ((o, x), y) in ga.data.iter_mut().zip(&va).zip(target.iter()) {
                        *o += k * (x - y);
                    }
                }
            }
            Op::Scalar(a, local) => {
                let s = g.scalar();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.data.iter_mut().zip(local).for_each(|(x, y)| *x += s * y);
                }
            }
        }
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

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Central-difference check of d(f)/d(leaf) for every leaf entry.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone(), true)).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("leaf gradient");
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).scalar() - gm.value(om).scalar()) / (2.0 * h);
                let a = analytic.data[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-5, "input {k} entry {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(3, 4, &mut rng),
            random(4, 2, &mut rng),
            random(5, 4, &mut rng),
        ];
        check(inputs, |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let cbt = g.matmul_bt(v[0], v[2]);
            let s1 = g.sum(ab);
            let t = g.tanh(cbt);
            let s2 = g.sum(t);
            let sq = g.mul(s1, s2);
            g.add(sq, s1)
        });
    }

    #[test]
    fn softmax_rmsnorm_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = random(3, 5, &mut rng);
        let inputs = vec![random(3, 5, &mut rng)];
        check(inputs, move |g, v| {
            let w = g.constant(weights.clone());
            let n = g.rms_norm(v[0]);
            let s = g.softmax(n);
            let sg = g.sigmoid(v[0]);
            let a = g.mul(s, w);
            let b = g.mul(sg, w);
            let c = g.add(a, b);
            g.sum(c)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(4, 6, &mut rng), random(1, 3, &mut rng)];
        let target = Rc::new((0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let weights = random(8, 3, &mut rng);
        check(inputs, move |g, v| {
            let left = g.slice_cols(v[0], 1, 3);
            let right = g.slice_cols(v[0], 3, 3);
            let both = g.concat_rows(&[left, right]);
            let biased = g.add_row(both, v[1]);
            let w = g.constant(weights.clone());
            let weighted = g.mul(biased, w);
            let top = g.slice_rows(weighted, 2, 4);
            let gathered = g.gather_rows(top, Rc::new(vec![3, ZERO_ROW, 0, 0]));
            let joined = g.concat_cols(&[gathered, gathered]);
            let flat = g.reshape(joined, 2, 12);
            let first = g.slice_rows(flat, 0, 1);
            let scaled = g.scale(first, 0.7);
            g.mse(scaled, target.clone())
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Mat::filled(2, 2, 1.0), true);
        let b = g.leaf(Mat::filled(2, 2, 2.0), false);
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0, 1001.0, -50.0];
        softmax_in_place(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
