use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{ensure, Error, Result};

/// Dense row-major array with shape metadata.
///
/// A rank-0 tensor (`shape == []`) holds one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| S::cast(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::contract(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        ensure!(
            self.data.len() == 1,
            "item() on tensor with shape {:?}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::cast(x.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.f64()).sum()
    }

    /// Stacks equal-length rows into a matrix.
    pub fn stack_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "stack_rows: ragged rows"
        );
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// Selects rows by index into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            ensure!(i < rows, "row index {i} out of range for {rows} rows");
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![indices.len(), cols], data)
    }
}

/// Stable `log Σ exp(v_i)` with max-shift and `f64` accumulation.
pub fn logsumexp<S: Scalar>(v: &[S]) -> Result<S> {
    ensure!(!v.is_empty(), "logsumexp of an empty vector");
    ensure!(
        v.iter().all(|x| x.is_finite()),
        "logsumexp input must be finite"
    );
    Ok(S::cast(logsumexp_f64(v.iter().map(|x| x.f64()))))
}

pub(crate) fn logsumexp_f64(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims2().unwrap(), (2, 3));
        assert_eq!(Tensor::<f32>::scalar(1.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn logsumexp_examples() {
        let a = 1.7_f64;
        assert!((logsumexp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-12);
        let big = logsumexp(&[1000.0_f32, 1000.0]).unwrap();
        assert!(big.is_finite());
        assert!((big as f64 - (1000.0 + 2f64.ln())).abs() < 1e-3);
        // ln(1 + e^2) evaluated at double precision
        let expected = (1.0 + 2f64.exp()).ln();
        assert!((expected - 2.126928).abs() < 1e-6);
        assert!((logsumexp(&[2.0_f64, 0.0]).unwrap() - expected).abs() < 1e-12);
        assert!(logsumexp::<f32>(&[]).is_err());
    }

    #[test]
    fn gather_and_stack() {
        let t = Tensor::<f32>::matrix(3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4., 5., 0., 1.]);
        let s = Tensor::stack_rows(&[t.row(1), t.row(1)]).unwrap();
        assert_eq!(s.data(), &[2., 3., 2., 3.]);
        assert!(t.gather_rows(&[3]).is_err());
    }
}
