use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row counts above this are split across the rayon pool.
const PAR_ROWS: usize = 256;

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a 2-D view; vectors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_same(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.as_matrix("matmul")?;
        let (k2, m) = other.as_matrix("matmul")?;
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * m];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a = &self.data[i * k..(i + 1) * k];
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if n >= PAR_ROWS && m > 0 {
            out.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.chunks_mut(m).enumerate().for_each(kernel);
        }
        Tensor::matrix(n, m, out)
    }

    /// Elementwise sum. `other` may also be a single row broadcast over the rows of `self`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            return self.zip_same(other, "add", |a, b| a + b);
        }
        if self.broadcasts_row(other) {
            let c = self.cols();
            let mut data = self.data.clone();
            for row in data.chunks_mut(c) {
                for (v, &b) in row.iter_mut().zip(&other.data) {
                    *v += b;
                }
            }
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(Error::shape("add", &self.shape, &other.shape))
    }

    pub(crate) fn broadcasts_row(&self, other: &Tensor) -> bool {
        self.shape.len() == 2
            && other.len() == self.cols()
            && matches!(other.shape.as_slice(), [_] | [1, _])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul", |a, b| a * b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Squared Euclidean distances between the rows of `self` (n×d) and `other` (m×d).
    pub fn pairwise_sqdist(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.as_matrix("pairwise_sqdist")?;
        let (m, d2) = other.as_matrix("pairwise_sqdist")?;
        if d != d2 {
            return Err(Error::shape("pairwise_sqdist", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * m];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a = &self.data[i * d..(i + 1) * d];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = sqdist(a, &other.data[j * d..(j + 1) * d]);
            }
        };
        if n >= PAR_ROWS && m > 0 {
            out.par_chunks_mut(m).enumerate().for_each(kernel);
        } else if m > 0 {
            out.chunks_mut(m).enumerate().for_each(kernel);
        }
        Tensor::matrix(n, m, out)
    }

    /// Square root. Values in `[-SQRT_SLACK, 0)` are round-off and clamp to zero.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&v) = self.data.iter().find(|&&v| v < -SQRT_SLACK || v.is_nan()) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        Ok(self.map(|v| v.max(0.0).sqrt()))
    }

    /// Natural log; requires strictly positive entries.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(&v) = self.data.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.map(f64::ln))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.cols().max(1);
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        Ok(Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64))
    }
}

pub(crate) const SQRT_SLACK: f64 = 1e-12;

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// The primitives the tape knows how to differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    PairwiseSqdist,
    Sqrt,
    Scale(f64),
    SoftmaxRows,
    Log,
    Sum,
    Mean,
}

impl Primitive {
    pub fn arity(self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::PairwiseSqdist => 2,
            _ => 1,
        }
    }
}

/// Evaluates a primitive without recording it.
pub fn forward_primitive(op: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != op.arity() {
        return Err(Error::Contract(format!(
            "{op:?} takes {} inputs, got {}",
            op.arity(),
            inputs.len()
        )));
    }
    let a = inputs[0];
    match op {
        Primitive::MatMul => a.matmul(inputs[1]),
        Primitive::Add => a.add(inputs[1]),
        Primitive::Sub => a.sub(inputs[1]),
        Primitive::Mul => a.mul(inputs[1]),
        Primitive::Relu => Ok(a.relu()),
        Primitive::PairwiseSqdist => a.pairwise_sqdist(inputs[1]),
        Primitive::Sqrt => a.sqrt(),
        Primitive::Scale(c) => Ok(a.scale(c)),
        Primitive::SoftmaxRows => Ok(a.softmax_rows()),
        Primitive::Log => a.log(),
        Primitive::Sum => Ok(a.sum()),
        Primitive::Mean => a.mean(),
    }
}
