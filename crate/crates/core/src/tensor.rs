//! Dense f64 matrices and a small reverse-mode tape.
//!
//! Everything in the models is expressed over 2-D matrices (channels x tokens
//! or weights), so the tape only needs a handful of ops. Backward closures
//! capture parent node ids and read values from the tape, so no values are
//! duplicated. `Graph::new(false)` gives an inference-only tape that skips
//! recording backward closures.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                x * std
            })
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        // SAFETY: dimensions are checked above; all three buffers are dense
        // row-major with the strides passed here.
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                other.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                other.cols as isize,
                1,
            );
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert!(self.same_shape(other), "zip shapes");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &Mat) {
        assert!(self.same_shape(other), "add shapes");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert!(self.same_shape(other), "diff shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }
}

pub type Id = usize;

type BackFn = Box<dyn Fn(&[Mat], &Mat, &mut [Option<Mat>])>;

pub struct Graph {
    values: Vec<Mat>,
    backs: Vec<Option<BackFn>>,
    grad: bool,
}

fn acc(grads: &mut [Option<Mat>], id: Id, delta: Mat) {
    match &mut grads[id] {
        Some(g) => g.add_in_place(&delta),
        slot => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new(grad: bool) -> Self {
        Graph { values: Vec::new(), backs: Vec::new(), grad }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn value(&self, id: Id) -> &Mat {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Mat, back: Option<BackFn>) -> Id {
        self.values.push(value);
        self.backs.push(if self.grad { back } else { None });
        self.values.len() - 1
    }

    pub fn input(&mut self, m: Mat) -> Id {
        self.push(m, None)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let out = self.values[a].matmul(&self.values[b]);
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                acc(grads, a, g.matmul(&vals[b].transpose()));
                acc(grads, b, vals[a].transpose().matmul(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let out = self.values[a].transpose();
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, a, g.transpose());
            })),
        )
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let out = self.values[a].zip(&self.values[b], |x, y| x + y);
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let out = self.values[a].zip(&self.values[b], |x, y| x - y);
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, a, g.clone());
                acc(grads, b, g.scale(-1.0));
            })),
        )
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let out = self.values[a].zip(&self.values[b], |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                acc(grads, a, g.zip(&vals[b], |gi, bi| gi * bi));
                acc(grads, b, g.zip(&vals[a], |gi, ai| gi * ai));
            })),
        )
    }

    pub fn scale(&mut self, a: Id, s: f64) -> Id {
        let out = self.values[a].scale(s);
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, a, g.scale(s));
            })),
        )
    }

    /// Broadcast-add a column vector (rows x 1) to every column of `a`.
    pub fn add_bias(&mut self, a: Id, bias: Id) -> Id {
        let m = &self.values[a];
        let b = &self.values[bias];
        assert_eq!(b.cols, 1, "bias must be a column vector");
        assert_eq!(b.rows, m.rows, "bias rows");
        let mut out = m.clone();
        for i in 0..out.rows {
            let bv = b.data[i];
            for j in 0..out.cols {
                out.data[i * out.cols + j] += bv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                acc(grads, a, g.clone());
                let mut gb = Mat::zeros(g.rows, 1);
                for i in 0..g.rows {
                    gb.data[i] = g.data[i * g.cols..(i + 1) * g.cols].iter().sum();
                }
                acc(grads, bias, gb);
            })),
        )
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let out = self.values[a].map(|x| x / (1.0 + (-x).exp()));
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let da = g.zip(&vals[a], |gi, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gi * (s + x * s * (1.0 - s))
                });
                acc(grads, a, da);
            })),
        )
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let m = &self.values[a];
        let mut out = Mat::zeros(m.rows, m.cols);
        for i in 0..m.rows {
            let row = &m.data[i * m.cols..(i + 1) * m.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m.cols {
                let e = (row[j] - mx).exp();
                out.data[i * m.cols + j] = e;
                z += e;
            }
            for j in 0..m.cols {
                out.data[i * m.cols + j] /= z;
            }
        }
        let id = self.push(
            out,
            Some(Box::new(move |_vals, _g, _grads| {
                unreachable!("patched below");
            })),
        );
        // Softmax backward needs its own output value, so patch with the id.
        if self.grad {
            self.backs[id] = Some(Box::new(move |vals, g, grads| {
                let y = &vals[id];
                let mut da = Mat::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let yr = &y.data[i * y.cols..(i + 1) * y.cols];
                    let gr = &g.data[i * g.cols..(i + 1) * g.cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols {
                        da.data[i * y.cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, a, da);
            }));
        }
        id
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s = self.values[a].sum();
        let (r, c) = (self.values[a].rows, self.values[a].cols);
        self.push(
            Mat::from_vec(1, 1, vec![s]),
            Some(Box::new(move |_vals, g, grads| {
                let gv = g.data[0];
                acc(grads, a, Mat::from_vec(r, c, vec![gv; r * c]));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.values[a].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0]].cols;
        let mut data = Vec::new();
        let mut row_offsets = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let m = &self.values[p];
            assert_eq!(m.cols, cols, "concat_rows cols");
            row_offsets.push((p, off, m.rows));
            off += m.rows;
            data.extend_from_slice(&m.data);
        }
        let out = Mat::from_vec(off, cols, data);
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for &(p, start, rows) in &row_offsets {
                    let part = Mat::from_vec(
                        rows,
                        g.cols,
                        g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                    );
                    acc(grads, p, part);
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Id, start: usize, len: usize) -> Id {
        let m = &self.values[a];
        assert!(start + len <= m.rows, "slice_rows bounds");
        let (rows, cols) = (m.rows, m.cols);
        let out = Mat::from_vec(len, cols, m.data[start * cols..(start + len) * cols].to_vec());
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let mut da = Mat::zeros(rows, cols);
                da.data[start * cols..(start + len) * cols].copy_from_slice(&g.data);
                acc(grads, a, da);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0]].rows;
        let total: usize = parts.iter().map(|&p| self.values[p].cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut meta = Vec::with_capacity(parts.len());
        let mut off = 0;
        for &p in parts {
            let m = &self.values[p];
            assert_eq!(m.rows, rows, "concat_cols rows");
            for i in 0..rows {
                out.data[i * total + off..i * total + off + m.cols]
                    .copy_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
            }
            meta.push((p, off, m.cols));
            off += m.cols;
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                for &(p, start, cols) in &meta {
                    let mut part = Mat::zeros(g.rows, cols);
                    for i in 0..g.rows {
                        part.data[i * cols..(i + 1) * cols]
                            .copy_from_slice(&g.data[i * g.cols + start..i * g.cols + start + cols]);
                    }
                    acc(grads, p, part);
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Id {
        let m = &self.values[a];
        assert!(start + len <= m.cols, "slice_cols bounds");
        let (rows, cols) = (m.rows, m.cols);
        let mut out = Mat::zeros(rows, len);
        for i in 0..rows {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&m.data[i * cols + start..i * cols + start + len]);
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let mut da = Mat::zeros(rows, cols);
                for i in 0..rows {
                    da.data[i * cols + start..i * cols + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                acc(grads, a, da);
            })),
        )
    }

    /// Group `k` adjacent columns into one, stacking their channels:
    /// (r, c) -> (r*k, c/k). out[j*r + i, g] = a[i, g*k + j].
    pub fn fold_cols(&mut self, a: Id, k: usize) -> Id {
        let m = &self.values[a];
        assert!(m.cols % k == 0, "fold_cols divisibility");
        let (r, c) = (m.rows, m.cols);
        let groups = c / k;
        let mut out = Mat::zeros(r * k, groups);
        for i in 0..r {
            for g in 0..groups {
                for j in 0..k {
                    out.data[(j * r + i) * groups + g] = m.data[i * c + g * k + j];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, gr, grads| {
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    for g in 0..groups {
                        for j in 0..k {
                            da.data[i * c + g * k + j] = gr.data[(j * r + i) * groups + g];
                        }
                    }
                }
                acc(grads, a, da);
            })),
        )
    }

    /// Inverse of `fold_cols`: (r*k, c) -> (r, c*k).
    pub fn unfold_cols(&mut self, a: Id, k: usize) -> Id {
        let m = &self.values[a];
        assert!(m.rows % k == 0, "unfold_cols divisibility");
        let r = m.rows / k;
        let groups = m.cols;
        let mut out = Mat::zeros(r, groups * k);
        for i in 0..r {
            for g in 0..groups {
                for j in 0..k {
                    out.data[i * groups * k + g * k + j] = m.data[(j * r + i) * groups + g];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, gr, grads| {
                let mut da = Mat::zeros(r * k, groups);
                for i in 0..r {
                    for g in 0..groups {
                        for j in 0..k {
                            da.data[(j * r + i) * groups + g] = gr.data[i * groups * k + g * k + j];
                        }
                    }
                }
                acc(grads, a, da);
            })),
        )
    }

    /// Backpropagate from a scalar node; returns one gradient slot per node id.
    pub fn backward(&self, loss: Id) -> Vec<Option<Mat>> {
        assert!(self.grad, "backward on inference-only graph");
        let lv = &self.values[loss];
        assert_eq!(lv.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.backs[id] {
                back(&self.values, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    /// Central finite differences on a scalar-valued function of one matrix.
    fn fd_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat, eps: f64) -> Mat {
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check_op(build: impl Fn(&mut Graph, Id) -> Id, rows: usize, cols: usize, seed: u64) {
        let mut r = rng(seed);
        let x = Mat::randn(rows, cols, 1.0, &mut r);
        let mut g = Graph::new(true);
        let xi = g.input(x.clone());
        let out = build(&mut g, xi);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        let analytic = grads[xi].clone().unwrap();
        let numeric = fd_grad(
            &|m: &Mat| {
                let mut g2 = Graph::new(false);
                let xi2 = g2.input(m.clone());
                let out2 = build(&mut g2, xi2);
                g2.value(out2).sum()
            },
            &x,
            1e-6,
        );
        let denom = numeric.sq_norm().sqrt().max(1e-8);
        let diff = analytic.zip(&numeric, |a, b| a - b).sq_norm().sqrt();
        assert!(diff / denom < 1e-6, "relative grad error {}", diff / denom);
    }

    #[test]
    fn grad_matmul() {
        let mut r = rng(1);
        let w = Mat::randn(4, 3, 1.0, &mut r);
        check_op(
            move |g, x| {
                let wi = g.input(w.clone());
                g.matmul(wi, x)
            },
            3,
            5,
            2,
        );
    }

    #[test]
    fn grad_softmax() {
        // square the softmax output so the loss is not constant
        check_op(
            |g, x| {
                let s = g.softmax_rows(x);
                g.mul(s, s)
            },
            4,
            6,
            3,
        );
    }

    #[test]
    fn grad_silu() {
        check_op(|g, x| g.silu(x), 3, 3, 4);
    }

    #[test]
    fn grad_mul_and_bias() {
        let mut r = rng(5);
        let b = Mat::randn(4, 1, 1.0, &mut r);
        check_op(
            move |g, x| {
                let bi = g.input(b.clone());
                let y = g.add_bias(x, bi);
                g.mul(y, y)
            },
            4,
            5,
            6,
        );
    }

    #[test]
    fn grad_fold_unfold_roundtrip() {
        check_op(
            |g, x| {
                let f = g.fold_cols(x, 4);
                let u = g.unfold_cols(f, 4);
                g.mul(u, u)
            },
            3,
            8,
            7,
        );
        // fold then unfold is the identity on values
        let mut r = rng(8);
        let x = Mat::randn(2, 8, 1.0, &mut r);
        let mut g = Graph::new(false);
        let xi = g.input(x.clone());
        let f = g.fold_cols(xi, 2);
        let u = g.unfold_cols(f, 2);
        assert_eq!(g.value(u), &x);
    }

    #[test]
    fn grad_slicing() {
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 2);
                let c = g.concat_rows(&[b, a]);
                let d = g.slice_cols(c, 1, 3);
                g.mul(d, d)
            },
            4,
            5,
            9,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(10);
        let x = Mat::randn(7, 9, 3.0, &mut r);
        let mut g = Graph::new(false);
        let xi = g.input(x);
        let s = g.softmax_rows(xi);
        let v = g.value(s);
        for i in 0..v.rows {
            let sum: f64 = (0..v.cols).map(|j| v.get(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
