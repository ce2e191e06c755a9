//! Dense tensors and the numeric kernels behind every registry op.
//!
//! Tensors are immutable once built. Data lives behind an `Arc` so a tensor
//! can be cloned cheaply and shared across threads.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Engine-unique tensor token. Never reused within one engine instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorId(pub u64);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// What a buffer is for, as seen by the footprint ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Input,
    Weight,
    Intermediate,
    FadDerivative,
    Gradient,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Input,
        Category::Weight,
        Category::Intermediate,
        Category::FadDerivative,
        Category::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Input => "input",
            Category::Weight => "weight",
            Category::Intermediate => "intermediate",
            Category::FadDerivative => "fad-derivative",
            Category::Gradient => "gradient",
        }
    }
}

/// Element counts per axis. Rank ≥ 1 and every extent positive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    /// Shape `[1]`, used for scalars.
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn vector(n: usize) -> Result<Self> {
        Shape::new(vec![n])
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Shape::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Rows and columns when viewed as a matrix. Rank-1 shapes are row vectors.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.0.as_slice() {
            [n] => Some((1, *n)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    id: TensorId,
    shape: Shape,
    data: Arc<[f64]>,
    category: Category,
}

impl Tensor {
    pub(crate) fn new(
        id: TensorId,
        shape: Shape,
        data: Vec<f64>,
        category: Category,
    ) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            id,
            shape,
            data: data.into(),
            category,
        })
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Contents of a tensor before it has been given an id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Dense { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let data = vec![value; shape.numel()];
        Dense { shape, data }
    }
}

pub fn ew_unary(t: &[f64], kernel: impl Fn(f64) -> f64) -> Vec<f64> {
    t.iter().map(|&x| kernel(x)).collect()
}

pub fn ew_binary(a: &[f64], b: &[f64], kernel: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "element-wise operands have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| kernel(x, y)).collect())
}

/// Row-major `(m×k) · (k×n)`.
pub fn matmul(a: &[f64], a_shape: &Shape, b: &[f64], b_shape: &Shape) -> Result<Dense> {
    let (m, k) = a_shape
        .as_matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("matmul lhs has rank {}", a_shape.rank())))?;
    let (k2, n) = b_shape
        .as_matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("matmul rhs has rank {}", b_shape.rank())))?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {a_shape} · {b_shape}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    Ok(Dense {
        shape: Shape::matrix(m, n)?,
        data: out,
    })
}

pub fn transpose(a: &[f64], shape: &Shape) -> Result<Dense> {
    let (r, c) = shape
        .as_matrix()
        .ok_or_else(|| Error::ShapeMismatch(format!("transpose of rank {}", shape.rank())))?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    Ok(Dense {
        shape: Shape::matrix(c, r)?,
        data: out,
    })
}

pub fn reduce_sum(t: &[f64]) -> f64 {
    t.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_and_empty() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![2, 0]).is_err());
        assert_eq!(Shape::new(vec![2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn dense_length_checked() {
        assert!(Dense::new(Shape::vector(3).unwrap(), vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn ew_binary_add() {
        assert_eq!(
            ew_binary(&[1.0, 2.0], &[3.0, 4.0], |a, b| a + b).unwrap(),
            vec![4.0, 6.0]
        );
        assert!(ew_binary(&[1.0], &[1.0, 2.0], |a, b| a + b).is_err());
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Shape::matrix(1, 2).unwrap();
        let b = Shape::matrix(2, 1).unwrap();
        let out = matmul(&[1.0, 2.0], &a, &[3.0, 4.0], &b).unwrap();
        assert_eq!(out.data, vec![11.0]);
        assert_eq!(out.shape.dims(), &[1, 1]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Shape::matrix(2, 3).unwrap();
        let b = Shape::matrix(2, 3).unwrap();
        assert!(matmul(&[0.0; 6], &a, &[0.0; 6], &b).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let s = Shape::matrix(2, 3).unwrap();
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = transpose(&data, &s).unwrap();
        assert_eq!(t.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = transpose(&t.data, &t.shape).unwrap();
        assert_eq!(back.data, data.to_vec());
    }

    #[test]
    fn reduce_sum_basic() {
        assert_eq!(reduce_sum(&[1.0, 2.0, 3.0]), 6.0);
    }
}
