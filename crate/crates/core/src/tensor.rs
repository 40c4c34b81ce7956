//! Dense `f64` tensors and named, ordered parameter stores.
//!
//! Every reduction in this module runs left to right over the row-major
//! flattening, so results are reproducible bit for bit.

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::StructuralMismatch(format!(
                "shape {shape:?} must be a non-empty list of positive dims"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::StructuralMismatch(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len().max(1)], data: if data.is_empty() { vec![0.0] } else { data } }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    /// Leading dimension when viewed as a matrix; a vector is one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Named, ordered collection of parameter tensors.
///
/// Two stores are congruent when names, order and shapes all agree; every
/// binary operation checks congruence first.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradients share the exact layout of the store they differentiate.
pub type GradStore = ParamStore;

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            if names.contains(&name) {
                return Err(Error::StructuralMismatch(format!("duplicate parameter name `{name}`")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    /// Builds a single-entry store, handy for small numeric checks.
    pub fn from_vec(name: &str, values: Vec<f64>) -> Self {
        Self { names: vec![name.to_string()], tensors: vec![Tensor::vector(values)] }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Number of named entries.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all entries.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn is_congruent(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::StructuralMismatch(format!(
                "parameter names differ ({} vs {} entries)",
                self.names.len(),
                other.names.len()
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::StructuralMismatch(format!(
                    "`{name}` has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Flattened concatenation in entry order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    /// Store congruent with `self` holding `values` in flattened order.
    pub fn with_flat(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.total_len() {
            return Err(Error::StructuralMismatch(format!(
                "flat vector has {} values, store needs {}",
                values.len(),
                self.total_len()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in &mut out.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// Mutable access to the `i`-th scalar of the flattened store.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.len() {
                return &mut t.data_mut()[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Elementwise combination of two congruent stores.
    pub fn zip_map(&self, other: &ParamStore, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_congruent(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            })
            .collect();
        Ok(Self { names: self.names.clone(), tensors })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()))
            .collect();
        Self { names: self.names.clone(), tensors }
    }
}

/// `a·x + b·y`, elementwise over congruent stores.
pub fn axpy(a: f64, x: &ParamStore, b: f64, y: &ParamStore) -> Result<ParamStore> {
    x.zip_map(y, |xi, yi| a * xi + b * yi)
}

/// Inner product over the flattened concatenation.
pub fn dot(x: &ParamStore, y: &ParamStore) -> Result<f64> {
    x.check_congruent(y)?;
    let mut acc = 0.0;
    for (a, b) in x.tensors.iter().zip(&y.tensors) {
        for (p, q) in a.data().iter().zip(b.data()) {
            acc += p * q;
        }
    }
    Ok(acc)
}

pub fn norm(x: &ParamStore) -> f64 {
    let mut acc = 0.0;
    for v in x.values() {
        acc += v * v;
    }
    acc.sqrt()
}

/// Euclidean distance `‖x − y‖₂`.
pub fn distance(x: &ParamStore, y: &ParamStore) -> Result<f64> {
    x.check_congruent(y)?;
    let mut acc = 0.0;
    for (p, q) in x.values().zip(y.values()) {
        let d = p - q;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Cosine of the angle between two flattened stores; 0 when either is zero.
pub fn cosine(x: &ParamStore, y: &ParamStore) -> Result<f64> {
    let d = dot(x, y)?;
    let n = norm(x) * norm(y);
    Ok(if n == 0.0 { 0.0 } else { d / n })
}
