//! Dense row-major `f64` tensors.
//!
//! All reductions accumulate strictly left to right so that two replicas
//! evaluating the same expression produce bit-identical results.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};

/// Tensors keyed by parameter name, in parameter-store order.
pub type TensorMap = IndexMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(structural!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
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

    /// A zero-dimensional tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(structural!("expected a matrix, got shape {:?}", other)),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(structural!(
                "expected a single value, got shape {:?}",
                self.shape
            ))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(structural!(
                "{}: shape {:?} vs {:?}",
                what,
                self.shape,
                other.shape
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "elementwise op")?;
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

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| s * x)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += s * other`, elementwise.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Row-major matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(structural!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                b.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `a (m×k) · bᵀ` where `b` is `n×k`.
    pub fn matmul_t(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(structural!(
                "matmul_t inner dimensions differ: {:?} x {:?}ᵀ",
                self.shape,
                b.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).fold(0.0, |acc, (&x, &y)| acc + x * y);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
    pub fn t_matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(structural!(
                "t_matmul outer dimensions differ: {:?}ᵀ x {:?}",
                self.shape,
                b.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Gather rows of a matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(structural!("row {} out of range for {} rows", i, r));
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![rows.len(), c], out)
    }

    /// Population variance of all elements.
    pub fn population_variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.sum() / n;
        self.data
            .iter()
            .fold(0.0, |acc, &x| acc + (x - mean) * (x - mean))
            / n
    }
}

/// Whole-map arithmetic used by optimizers and estimators.
pub trait TensorMapExt {
    fn zeros_like(&self) -> TensorMap;
    fn scaled(&self, s: f64) -> TensorMap;
    /// `self += s * other`; both maps must have identical keys and shapes.
    fn axpy(&mut self, s: f64, other: &TensorMap) -> Result<()>;
    fn dot(&self, other: &TensorMap) -> Result<f64>;
    fn norm_sq(&self) -> f64;
    /// All values concatenated in key order.
    fn flatten(&self) -> Vec<f64>;
    fn numel(&self) -> usize;
}

impl TensorMapExt for TensorMap {
    fn zeros_like(&self) -> TensorMap {
        self.iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    fn scaled(&self, s: f64) -> TensorMap {
        self.iter().map(|(k, t)| (k.clone(), t.scale(s))).collect()
    }

    fn axpy(&mut self, s: f64, other: &TensorMap) -> Result<()> {
        if self.len() != other.len() {
            return Err(structural!(
                "tensor maps differ in size: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        for (k, t) in self.iter_mut() {
            let o = other
                .get(k)
                .ok_or_else(|| structural!("tensor map is missing `{}`", k))?;
            t.axpy(s, o)?;
        }
        Ok(())
    }

    fn dot(&self, other: &TensorMap) -> Result<f64> {
        let mut acc = 0.0;
        for (k, t) in self {
            let o = other
                .get(k)
                .ok_or_else(|| structural!("tensor map is missing `{}`", k))?;
            acc += t.dot(o)?;
        }
        Ok(acc)
    }

    fn norm_sq(&self) -> f64 {
        self.values().fold(0.0, |acc, t| acc + t.norm_sq())
    }

    fn flatten(&self) -> Vec<f64> {
        self.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn numel(&self) -> usize {
        self.values().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), c);
        let at = a.transpose().unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), c);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&a),
            Err(crate::error::Error::Structural(_))
        ));
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(Tensor::filled(&[4], 2.5).population_variance(), 0.0);
        let t = Tensor::from_vec(vec![1.0, 3.0]);
        assert_eq!(t.population_variance(), 1.0);
    }
}
