//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks it in reverse.
//! All arithmetic is `f64`. Leaves created with `requires_grad = false` (frozen
//! parameters, detached targets) never receive a gradient, and neither does
//! anything computed only from them.

use super::tensor::{Tensor, TensorBundle};

#[derive(Clone, Debug, PartialEq)]
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
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.matrix_dims();
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a (m×k) · b (k×n)`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        // Four rows of `b` per pass over the output row.
        for p in (0..k4).step_by(4) {
            let [a0, a1, a2, a3] = [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]];
            let b0 = &b.data[p * n..(p + 1) * n];
            let b1 = &b.data[(p + 1) * n..(p + 2) * n];
            let b2 = &b.data[(p + 2) * n..(p + 3) * n];
            let b3 = &b.data[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for p in k4..k {
            let aip = arow[p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Mat::from_vec(m, n, out)
}

/// `a (m×n) · bᵀ` where `b` is (k×n).
fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    // Transposing first keeps the inner loop a contiguous axpy.
    matmul(a, &transpose(b))
}

fn transpose(b: &Mat) -> Mat {
    let mut t = vec![0.0; b.data.len()];
    for r in 0..b.rows {
        for c in 0..b.cols {
            t[c * b.rows + r] = b.data[r * b.cols + c];
        }
    }
    Mat::from_vec(b.cols, b.rows, t)
}

/// `aᵀ · b` where `a` is (m×k) and `b` is (m×n).
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * n];
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let b0 = &b.data[i * n..(i + 1) * n];
        let b1 = &b.data[(i + 1) * n..(i + 2) * n];
        let b2 = &b.data[(i + 2) * n..(i + 3) * n];
        let b3 = &b.data[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let [a0, a1, a2, a3] = [
                a.data[i * k + p],
                a.data[(i + 1) * k + p],
                a.data[(i + 2) * k + p],
                a.data[(i + 3) * k + p],
            ];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
    }
    for i in m4..m {
        let brow = &b.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Mat::from_vec(k, n, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    BroadcastRows(Var),
    Interleave(Vec<Var>),
    TakeToken(Var, usize, usize),
    SumCols(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Statistics of one training-mode batch-norm call, used to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Bind every tensor of `bundle` as a leaf.
    pub fn bind(&mut self, bundle: &TensorBundle, trainable: bool) -> Bound {
        let vars = bundle
            .entries()
            .iter()
            .map(|(_, t)| self.leaf(Mat::from_tensor(t), trainable))
            .collect();
        Bound {
            names: bundle.entries().iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a (m×n)` plus row vector `b (1×n)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        assert_eq!(av.cols, bv.cols, "bias width");
        let mut out = av.clone();
        for row in out.data.chunks_mut(av.cols) {
            for (o, &b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddBias(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "elementwise shape mismatch");
        Mat {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, f64::min);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Min(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat row mismatch");
                data.extend_from_slice(m.row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let m = self.value(a);
        assert!(start + width <= m.cols, "column slice out of range");
        let data = (0..m.rows)
            .flat_map(|r| m.row(r)[start..start + width].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Mat::from_vec(m.rows, width, data), Op::SliceCols(a, start), rg)
    }

    /// Row `r` of `a` as a 1×cols matrix.
    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let m = self.value(a);
        assert!(r < m.rows, "row index out of range");
        let v = Mat::from_vec(1, m.cols, m.row(r).to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::SelectRow(a, r), rg)
    }

    /// Repeat a 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, 1, "broadcast source must be a row");
        let data = (0..rows).flat_map(|_| m.data.iter().copied()).collect();
        let v = Mat::from_vec(rows, m.cols, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::BroadcastRows(a), rg)
    }

    /// Stack `t` token matrices (each B×d) into a (B·t)×d matrix where row
    /// `b·t + i` is row `b` of token `i`.
    pub fn interleave(&mut self, tokens: &[Var]) -> Var {
        let first = self.value(tokens[0]);
        let (b, d, t) = (first.rows, first.cols, tokens.len());
        let mut data = vec![0.0; b * t * d];
        for (i, tok) in tokens.iter().enumerate() {
            let m = self.value(*tok);
            assert!(m.rows == b && m.cols == d, "token shape mismatch");
            for r in 0..b {
                data[(r * t + i) * d..(r * t + i + 1) * d].copy_from_slice(m.row(r));
            }
        }
        let rg = self.rg(tokens);
        self.push(Mat::from_vec(b * t, d, data), Op::Interleave(tokens.to_vec()), rg)
    }

    /// Token `index` of every set in an interleaved (B·tokens)×d matrix.
    pub fn take_token(&mut self, a: Var, tokens: usize, index: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows % tokens, 0, "rows not a multiple of token count");
        let b = m.rows / tokens;
        let data = (0..b)
            .flat_map(|r| m.row(r * tokens + index).iter().copied())
            .collect();
        let v = Mat::from_vec(b, m.cols, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::TakeToken(a, tokens, index), rg)
    }

    /// Row sums: m×n → m×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Mean of all entries → 1×1.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.data.iter().sum::<f64>() / m.data.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Per-row normalisation with learned gain and bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let m = self.value(x);
        let (rows, cols) = (m.rows, m.cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for c in 0..cols {
                xhat.data[r * cols + c] = (row[c] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = self.affine_rows(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Training-mode batch normalisation over rows; returns the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let m = self.value(x);
        let (rows, cols) = (m.rows, m.cols);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / rows as f64 + NORM_EPS).sqrt())
            .collect();
        let var_unbiased = var
            .iter()
            .map(|v| if rows > 1 { v / (rows - 1) as f64 } else { 0.0 })
            .collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                xhat.data[r * cols + c] = (m.at(r, c) - mean[c]) * inv_std[c];
            }
        }
        let out = self.affine_rows(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (v, BatchStats { mean, var_unbiased })
    }

    /// Evaluation-mode batch normalisation with fixed per-column statistics.
    pub fn fixed_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let m = self.value(x);
        let (rows, cols) = (m.rows, m.cols);
        assert!(mean.len() == cols && var.len() == cols, "running statistics width");
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                xhat.data[r * cols + c] = (m.at(r, c) - mean[c]) * inv_std[c];
            }
        }
        let out = self.affine_rows(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    fn affine_rows(&self, xhat: &Mat, gamma: Var, beta: Var) -> Mat {
        let (g, b) = (self.value(gamma), self.value(beta));
        assert!(g.data.len() == xhat.cols && b.data.len() == xhat.cols, "norm affine width");
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(xhat.cols) {
            for ((o, gv), bv) in row.iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        out
    }

    /// Scaled dot-product attention over sets of `tokens` rows, `heads` heads.
    ///
    /// `q`, `k`, `v` are (B·tokens)×d in the [`Graph::interleave`] layout; the
    /// result has the same shape with heads concatenated along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert!(qm.same_shape(km) && qm.same_shape(vm), "q/k/v shape mismatch");
        assert_eq!(qm.rows % tokens, 0, "rows not a multiple of token count");
        assert_eq!(qm.cols % heads, 0, "model width not divisible by heads");
        let (d, sets) = (qm.cols, qm.rows / tokens);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; sets * heads * tokens * tokens];
        let mut out = Mat::zeros(qm.rows, d);
        let mut scores = vec![0.0; tokens];
        for s in 0..sets {
            let base = s * tokens;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..tokens {
                    let qi = &qm.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &km.row(base + j)[cols.clone()];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let poff = ((s * heads + h) * tokens + i) * tokens;
                    for j in 0..tokens {
                        let p = scores[j] / z;
                        probs[poff + j] = p;
                        let vj = &vm.row(base + j)[cols.clone()];
                        let orow = &mut out.data[(base + i) * d..(base + i + 1) * d];
                        for (o, &vv) in orow[cols.clone()].iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid out
    /// as `[set][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Gradients of the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let rv = self.value(root);
        assert!(rv.rows == 1 && rv.cols == 1, "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::AddBias(a, b) => {
                acc(*a, g.clone());
                if self.requires_grad(*b) {
                    let mut db = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (d, v) in db.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, elementwise(g, bv, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    acc(*b, elementwise(g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, elementwise(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => {
                acc(*a, elementwise(g, &node.value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Exp(a) => acc(*a, elementwise(g, &node.value, |gv, y| gv * y)),
            Op::Log(a) => acc(*a, elementwise(g, self.value(*a), |gv, x| gv / x)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(
                    *a,
                    elementwise(g, x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
                );
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(g.rows, g.cols);
                let mut gb = Mat::zeros(g.rows, g.cols);
                for i in 0..g.data.len() {
                    if av.data[i] <= bv.data[i] {
                        ga.data[i] = g.data[i];
                    } else {
                        gb.data[i] = g.data[i];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.requires_grad(*p) {
                        let data = (0..g.rows)
                            .flat_map(|r| g.row(r)[offset..offset + w].iter().copied())
                            .collect();
                        acc(*p, Mat::from_vec(g.rows, w, data));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    d.data[r * src.cols + start..r * src.cols + start + g.cols]
                        .copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::SelectRow(a, r) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.rows, src.cols);
                d.data[r * src.cols..(r + 1) * src.cols].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::BroadcastRows(a) => {
                let mut d = Mat::zeros(1, g.cols);
                for row in g.data.chunks(g.cols) {
                    for (o, v) in d.data.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::Interleave(tokens) => {
                let t = tokens.len();
                let b = g.rows / t;
                for (i, tok) in tokens.iter().enumerate() {
                    if !self.requires_grad(*tok) {
                        continue;
                    }
                    let data = (0..b).flat_map(|r| g.row(r * t + i).iter().copied()).collect();
                    acc(*tok, Mat::from_vec(b, g.cols, data));
                }
            }
            Op::TakeToken(a, tokens, index) => {
                let src = self.value(*a);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    let dst = (r * tokens + index) * src.cols;
                    d.data[dst..dst + src.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let src = self.value(*a);
                let data = (0..src.rows)
                    .flat_map(|r| std::iter::repeat_n(g.data[r], src.cols))
                    .collect();
                acc(*a, Mat::from_vec(src.rows, src.cols, data));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let v = g.data[0] / src.data.len() as f64;
                acc(*a, Mat::from_vec(src.rows, src.cols, vec![v; src.data.len()]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = &self.value(*gamma).data;
                let (rows, cols) = (g.rows, g.cols);
                if self.requires_grad(*x) {
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let n = cols as f64;
                        for c in 0..cols {
                            dx.data[r * cols + c] =
                                inv_std[r] / n * (n * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                    acc(*x, dx);
                }
                let (dg, db) = affine_param_grads(g, xhat);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = &self.value(*gamma).data;
                let (rows, cols) = (g.rows, g.cols);
                if self.requires_grad(*x) {
                    let mut s1 = vec![0.0; cols];
                    let mut s2 = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxh = g.at(r, c) * gam[c];
                            s1[c] += dxh;
                            s2[c] += dxh * xhat.at(r, c);
                        }
                    }
                    let n = rows as f64;
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxh = g.at(r, c) * gam[c];
                            dx.data[r * cols + c] =
                                inv_std[c] / n * (n * dxh - s1[c] - xhat.at(r, c) * s2[c]);
                        }
                    }
                    acc(*x, dx);
                }
                let (dg, db) = affine_param_grads(g, xhat);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = &self.value(*gamma).data;
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for row in dx.data.chunks_mut(g.cols) {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v *= gam[c] * inv_std[c];
                        }
                    }
                    acc(*x, dx);
                }
                let (dg, db) = affine_param_grads(g, xhat);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (tokens, heads) = (*tokens, *heads);
                let d = qm.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let sets = qm.rows / tokens;
                let mut dq = Mat::zeros(qm.rows, d);
                let mut dk = Mat::zeros(qm.rows, d);
                let mut dv = Mat::zeros(qm.rows, d);
                let mut dp = vec![0.0; tokens];
                for s in 0..sets {
                    let base = s * tokens;
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..tokens {
                            let poff = ((s * heads + h) * tokens + i) * tokens;
                            let p = &probs[poff..poff + tokens];
                            let gi = &g.row(base + i)[c0..c0 + dh];
                            for j in 0..tokens {
                                let vj = &vm.row(base + j)[c0..c0 + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &gv) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * gv;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..tokens {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &km.row(base + j)[c0..c0 + dh];
                                let qi = &qm.row(base + i)[c0..c0 + dh];
                                let dqi = &mut dq.data[(base + i) * d + c0..(base + i) * d + c0 + dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let dkj = &mut dk.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

fn elementwise(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn affine_param_grads(g: &Mat, xhat: &Mat) -> (Mat, Mat) {
    let mut dg = Mat::zeros(1, g.cols);
    let mut db = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for c in 0..g.cols {
            dg.data[c] += g.at(r, c) * xhat.at(r, c);
            db.data[c] += g.at(r, c);
        }
    }
    (dg, db)
}

/// A bundle bound into a graph: one leaf per entry, in bundle order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Bind explicit f64 values, e.g. perturbed copies for finite differences.
    pub fn from_leaves(g: &mut Graph, names: &[String], leaves: Vec<(Mat, bool)>) -> Bound {
        assert_eq!(names.len(), leaves.len());
        let vars = leaves.into_iter().map(|(m, rg)| g.leaf(m, rg)).collect();
        Bound {
            names: names.to_vec(),
            vars,
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.try_get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-entry gradients aligned with the bundle (None where none flowed).
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Mat>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}
