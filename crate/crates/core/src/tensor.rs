//! Dense row-major `f64` tensors and named parameter collections.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("valid zero shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row of scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Gathers rows of a tensor whose leading axis indexes examples.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let width: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&self.data[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Trainable parameters: tensors keyed by unique names, kept in lexicographic
/// name order. The flat view concatenates tensors in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::config(format!(
                "duplicate parameter name {:?}",
                w[0].0
            )));
        }
        Ok(ParamVector { entries })
    }

    pub fn empty() -> Self {
        ParamVector { entries: vec![] }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    /// Number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with the layout of `template` from flat values.
    pub fn unflatten(flat: &[f64], template: &ParamVector) -> Result<ParamVector> {
        let expected = template.total_len();
        if flat.len() != expected {
            return Err(Error::Length {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let entries = template
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.len();
                let mut copy = t.clone();
                copy.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
                (name.clone(), copy)
            })
            .collect();
        Ok(ParamVector { entries })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn is_congruent(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn check_congruent(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        if self.is_congruent(other) {
            return Ok(());
        }
        let lhs: Vec<usize> = self.entries.iter().map(|(_, t)| t.len()).collect();
        let rhs: Vec<usize> = other.entries.iter().map(|(_, t)| t.len()).collect();
        Err(Error::Shape { op, lhs, rhs })
    }

    /// `self + alpha * other`, elementwise over congruent vectors.
    pub fn add_scaled(&self, other: &ParamVector, alpha: f64) -> Result<ParamVector> {
        self.check_congruent(other, "add_scaled")?;
        let mut out = self.clone();
        for ((_, t), (_, o)) in out.entries.iter_mut().zip(&other.entries) {
            for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                *x += alpha * y;
            }
        }
        Ok(out)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in &mut self.entries {
            t.data_mut().iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Name of the first tensor containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Gradient of a scalar with respect to a [`ParamVector`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(ParamVector);

impl GradVector {
    pub fn zeros_like(params: &ParamVector) -> Self {
        GradVector(params.zeros_like())
    }

    pub fn from_params(v: ParamVector) -> Self {
        GradVector(v)
    }

    pub fn from_flat(flat: &[f64], template: &ParamVector) -> Result<Self> {
        ParamVector::unflatten(flat, template).map(GradVector)
    }

    pub fn as_params(&self) -> &ParamVector {
        &self.0
    }

    pub fn into_params(self) -> ParamVector {
        self.0
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        self.0.tensor_mut(i)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.scale(alpha);
    }

    /// Accumulates `alpha * other` in place.
    pub fn axpy(&mut self, alpha: f64, other: &GradVector) -> Result<()> {
        self.0 = self.0.add_scaled(&other.0, alpha)?;
        Ok(())
    }

    /// Errors with the offending parameter name if any entry is non-finite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.0.first_non_finite() {
            Some(name) => Err(Error::non_finite(format!("{context}: gradient of {name}"))),
            None => Ok(()),
        }
    }
}

impl Deref for GradVector {
    type Target = ParamVector;

    fn deref(&self) -> &ParamVector {
        &self.0
    }
}
