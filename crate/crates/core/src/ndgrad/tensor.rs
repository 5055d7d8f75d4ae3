use std::fmt;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// Always kept in standard (C) layout so that [`Tensor::data`] is a plain
/// slice in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    array: ArrayD<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let array = ArrayD::from_shape_vec(IxDyn(shape), data).expect("length checked");
        Ok(Self { array })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            array: ArrayD::from_elem(IxDyn(&[]), value),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            array: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            array: ArrayD::from_elem(IxDyn(shape), value),
        }
    }

    /// Row vector / matrix helpers used all over the tests.
    pub fn vector(data: &[f64]) -> Self {
        Self::new(&[data.len()], data.to_vec()).expect("vector shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub(crate) fn from_array(array: ArrayD<f64>) -> Self {
        let array = if array.is_standard_layout() {
            array
        } else {
            array.as_standard_layout().into_owned()
        };
        Self { array }
    }

    pub fn shape(&self) -> &[usize] {
        self.array.shape()
    }

    pub fn len(&self) -> usize {
        self.array.len()
    }

    pub fn is_empty(&self) -> bool {
        self.array.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.array.ndim()
    }

    pub fn data(&self) -> &[f64] {
        self.array
            .as_slice()
            .expect("tensor kept in standard layout")
    }

    pub fn into_data(self) -> Vec<f64> {
        let (data, offset) = self.array.into_raw_vec_and_offset();
        debug_assert!(matches!(offset, None | Some(0)));
        data
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.array
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_array(self.array.mapv(f))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Select rows of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::from_array(self.array.select(Axis(0), rows))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data().to_vec())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &self.data())
            .finish()
    }
}

impl From<f64> for Tensor {
    fn from(v: f64) -> Self {
        Tensor::scalar(v)
    }
}

/// Numpy-style broadcast of two shapes (trailing alignment, size-1 axes stretch).
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Reduce `array` by summation down to `target` (inverse of broadcasting).
pub(crate) fn sum_to(array: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = array.clone();
    let extra = out.ndim() - target.len();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &extent) in target.iter().enumerate() {
        if extent == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}
