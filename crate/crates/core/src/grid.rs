//! Dense row-major grids of rank 1 to 5.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 5, "grid rank must be 1..=5");
        assert!(shape.iter().all(|&d| d > 0), "grid extents must be positive: {shape:?}");
        let n = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 5 {
            return Err(Error::InvalidArgument(format!("grid rank {} not in 1..=5", shape.len())));
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("zero extent on axis {axis}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("grid", "data", n, data.len()));
        }
        Ok(Grid {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut g = Self::zeros(shape);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = f(i);
        }
        g
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Grid { shape: vec![n], data }
    }

    pub fn scalar(v: T) -> Self {
        Grid {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn randn(shape: &[usize], scale: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(scale * rng.normal()))
    }

    /// Entries drawn i.i.d. uniformly from `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.uniform_in(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", "size", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Index of the first axis whose extent differs from `other`.
    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.rank() != other.rank() {
            return Err(Error::shape(op, "rank", self.rank(), other.rank()));
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::shape(op, axis.to_string(), a, b));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Element of a rank-3 grid.
    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn at3_mut(&mut self, c: usize, i: usize, j: usize) -> &mut T {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[(c * h + i) * w + j]
    }

    /// Channel plane `c` of a rank-3 grid (or frame-major slab of rank 4).
    pub fn plane(&self, c: usize) -> &[T] {
        let n: usize = self.shape[1..].iter().product();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n: usize = self.shape[1..].iter().product();
        &mut self.data[c * n..(c + 1) * n]
    }
}

impl<T: Scalar> std::ops::Add for &Grid<T> {
    type Output = Grid<T>;
    fn add(self, rhs: Self) -> Grid<T> {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl<T: Scalar> std::ops::Sub for &Grid<T> {
    type Output = Grid<T>;
    fn sub(self, rhs: Self) -> Grid<T> {
        self.zip_map(rhs, |a, b| a - b)
    }
}
