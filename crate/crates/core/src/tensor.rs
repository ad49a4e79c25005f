//! Dense row-major `f64` tensors.
//!
//! Only rank 0 (scalar), rank 1 and rank 2 are used by the model; most
//! kernels here are written for rank-2 matrices and treat vectors as
//! `[1, n]` rows where that is convenient.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        if r.shape.len() > 2 {
            return Err(Error::shape("Tensor", format!("rank {} is unsupported", r.shape.len())));
        }
        let numel = r
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape("Tensor", "element count overflows"))?;
        if numel != r.data.len() {
            return Err(Error::shape(
                "Tensor",
                format!("shape {:?} needs {} values, got {}", r.shape, numel, r.data.len()),
            ));
        }
        Ok(Self {
            shape: r.shape,
            data: r.data,
        })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::shape("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor; vectors are reported as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.dims2();
        let (k2, m) = other.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · otherᵀ`, the shape of a linear layer `h Wᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self> {
        let (n, k) = self.dims2();
        let (m, k2) = other.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Self> {
        let (k, n) = self.dims2();
        let (k2, m) = other.dims2();
        if k != k2 {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Mean over the row axis, returned as a `[1, cols]` row.
    pub fn mean_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row_slice(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        for o in &mut out {
            *o *= inv;
        }
        Self {
            shape: vec![1, c],
            data: out,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
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
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub fn log_softmax_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }
}

/// Cosine similarity of two equally sized tensors; `None` when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, -1.0, 0.5], vec![2.0, 0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.shape(), &[3, 3]);
        assert_eq!(ab.get(0, 0), 5.0);
        assert_eq!(ab, a.matmul_t(&b.transpose()).unwrap());
        assert_eq!(ab, a.transpose().t_matmul(&b).unwrap());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1000.0, 1000.0, 0.0]]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            assert!((s.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let ls = t.log_softmax_rows();
        for (a, b) in s.data().iter().zip(ls.data()) {
            assert!((a.ln() - b).abs() < 1e-12 || *a == 0.0);
        }
    }

    #[test]
    fn mean_rows_is_column_mean() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.mean_rows().data(), &[2.0, 3.0]);
    }

    #[test]
    fn deserialize_validates_shape() {
        assert!(serde_json::from_str::<Tensor>(r#"{"shape":[2,2],"data":[1,2,3]}"#).is_err());
        let t: Tensor = serde_json::from_str(r#"{"shape":[1,2],"data":[1.5,-2]}"#).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn cosine_of_zero_is_undefined() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }
}
