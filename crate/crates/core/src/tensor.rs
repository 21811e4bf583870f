//! Dense row-major `f64` tensors with an optional gradient slot.
//!
//! Only 1-D, 2-D and 3-D shapes are used. The free functions here are the
//! forward kernels; [`crate::tape::Tape`] records them for differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive mask value standing in for negative infinity.
pub const MASK_SENTINEL: f64 = -1e30;

/// Anything at or below this is treated as masked.
pub(crate) const MASK_THRESHOLD: f64 = -1e29;

#[inline]
pub(crate) fn is_masked(x: f64) -> bool {
    x <= MASK_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
    #[serde(skip)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::contract(format!(
                "tensor rank must be 1..=3, got {:?}",
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Build a 2-D tensor from nested rows. Panics on ragged input; intended
    /// for tests and small literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor {
            shape: vec![r, c],
            data: rows.concat(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor, or `(1, n)` for a vector.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [b, r, c] => (b * r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// `out[m×n] += a[m×k] · b[k×n]` on raw slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::contract("transpose expects a 2-D tensor"));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Pointwise operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let binary = |name, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        let b = b.ok_or_else(|| Error::contract(format!("{name} needs two operands")))?;
        same_shape(name, a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape.clone(), data)
    };
    match op {
        Elementwise::Add => binary("add", |x, y| x + y),
        Elementwise::Sub => binary("sub", |x, y| x - y),
        Elementwise::Mul => binary("mul", |x, y| x * y),
        Elementwise::Relu => Tensor::new(a.shape.clone(), a.data.iter().map(|&x| x.max(0.0)).collect()),
        Elementwise::Scale(s) => Tensor::new(a.shape.clone(), a.data.iter().map(|&x| x * s).collect()),
    }
}

/// Row-wise softmax of `scores + mask` written into `out`. `mask` has
/// `cols` columns and is indexed by `row % mask_rows`, so an `[n×n]` mask
/// applies blockwise to stacked `[B·n × n]` scores.
pub(crate) fn softmax_rows_into(
    scores: &[f64],
    mask: &[f64],
    cols: usize,
    out: &mut [f64],
) -> Result<()> {
    let mask_rows = mask.len() / cols;
    for (r, (row, out_row)) in scores.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let m = &mask[(r % mask_rows) * cols..(r % mask_rows + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for (&s, &mv) in row.iter().zip(m) {
            if !is_masked(mv) {
                max = max.max(s + mv);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        for ((o, &s), &mv) in out_row.iter_mut().zip(row).zip(m) {
            *o = if is_masked(mv) { 0.0 } else { (s + mv - max).exp() };
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    Ok(())
}

/// Numerically stable row softmax with an additive mask of `0` / [`MASK_SENTINEL`].
pub fn softmax_rows(scores: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    let (r, c) = scores.dims2();
    let (mr, mc) = additive_mask.dims2();
    if mc != c || mr == 0 || r % mr != 0 {
        return Err(Error::Shape {
            op: "softmax_rows",
            left: scores.shape.clone(),
            right: additive_mask.shape.clone(),
        });
    }
    let mut out = vec![0.0; r * c];
    softmax_rows_into(&scores.data, &additive_mask.data, c, &mut out)?;
    Tensor::new(scores.shape.clone(), out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    probe.grad = None;
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe)?;
        probe.data[i] = orig - eps;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} during finite differencing"
            )));
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape.clone(), grad)
}
