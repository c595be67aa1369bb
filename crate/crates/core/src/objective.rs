//! Loss functions as seen by optimizers, SAM, and the sharpness probes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{GradVector, ParamVector, Tensor};

/// A set of examples: one feature row (or token row) and one label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let rows = features.shape().first().copied().unwrap_or(1);
        if features.rank() != 2 || rows != labels.len() {
            return Err(Error::Shape {
                op: "batch",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Batch { features, labels })
    }

    /// Placeholder for losses that do not read data.
    pub fn unit() -> Self {
        Batch {
            features: Tensor::zeros(&[1, 1]),
            labels: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Examples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous shard `j` of `m` equal shards. Requires `len % m == 0`.
    pub fn shard(&self, j: usize, m: usize) -> Batch {
        let size = self.len() / m;
        let idx: Vec<usize> = (j * size..(j + 1) * size).collect();
        self.select(&idx)
    }
}

/// A scalar loss over parameters alone.
pub trait LossFn: Sync {
    fn loss(&self, params: &ParamVector) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, GradVector)>;
}

/// A loss over parameters and a batch of examples, e.g. a model's mean
/// training loss.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradVector)>;
}

/// An [`Objective`] with its batch fixed.
pub struct OnBatch<'a, O: ?Sized> {
    pub objective: &'a O,
    pub batch: &'a Batch,
}

impl<'a, O: Objective + ?Sized> OnBatch<'a, O> {
    pub fn new(objective: &'a O, batch: &'a Batch) -> Self {
        OnBatch { objective, batch }
    }
}

impl<O: Objective + ?Sized> LossFn for OnBatch<'_, O> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.objective.loss(params, self.batch)
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, GradVector)> {
        self.objective.loss_and_grad(params, self.batch)
    }
}

/// Lifts a [`LossFn`] to an [`Objective`] that ignores the batch.
pub struct DataFree<L>(pub L);

impl<L: LossFn> Objective for DataFree<L> {
    fn loss(&self, params: &ParamVector, _batch: &Batch) -> Result<f64> {
        self.0.loss(params)
    }

    fn loss_and_grad(&self, params: &ParamVector, _batch: &Batch) -> Result<(f64, GradVector)> {
        self.0.loss_and_grad(params)
    }
}

/// `L(w) = ½ Σ_i a_i w_i²` over the flat parameter view.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    pub curvature: Vec<f64>,
}

impl DiagonalQuadratic {
    pub fn new(curvature: Vec<f64>) -> Self {
        DiagonalQuadratic { curvature }
    }

    fn check(&self, params: &ParamVector) -> Result<Vec<f64>> {
        let flat = params.flatten();
        if flat.len() != self.curvature.len() {
            return Err(Error::Length {
                expected: self.curvature.len(),
                actual: flat.len(),
            });
        }
        Ok(flat)
    }
}

impl LossFn for DiagonalQuadratic {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        let w = self.check(params)?;
        Ok(0.5
            * w.iter()
                .zip(&self.curvature)
                .map(|(x, a)| a * x * x)
                .sum::<f64>())
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, GradVector)> {
        let loss = self.loss(params)?;
        let w = params.flatten();
        let g: Vec<f64> = w.iter().zip(&self.curvature).map(|(x, a)| a * x).collect();
        Ok((loss, GradVector::from_flat(&g, params)?))
    }
}

/// Central finite-difference gradient,
/// `(L(w + h e_i) - L(w - h e_i)) / 2h` for every scalar coordinate.
pub fn fd_gradient<F>(lossfn: F, params: &ParamVector, h: f64, exec: Exec) -> Result<GradVector>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync + Send,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let flat = params.flatten();
    let names: Vec<String> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| format!("{name}[{i}]")))
        .collect();
    let probe = |i: usize, delta: f64| -> Result<f64> {
        let mut w = flat.clone();
        w[i] += delta;
        let l = lossfn(&ParamVector::unflatten(&w, params)?)?;
        if !l.is_finite() {
            return Err(Error::non_finite(format!(
                "finite-difference probe at {}",
                names[i]
            )));
        }
        Ok(l)
    };
    let g = par::try_map_indexed(exec, flat.len(), |i| {
        let up = probe(i, h).map_err(|e| annotate(e, &names[i]))?;
        let down = probe(i, -h).map_err(|e| annotate(e, &names[i]))?;
        Ok::<f64, Error>((up - down) / (2.0 * h))
    })?;
    GradVector::from_flat(&g, params)
}

fn annotate(e: Error, coord: &str) -> Error {
    match e {
        Error::NonFinite { context } if !context.contains(coord) => {
            Error::non_finite(format!("{context} (probe at {coord})"))
        }
        other => other,
    }
}

/// Largest `|a - b| / (floor + |b|)` over all coordinates.
pub fn max_relative_error(a: &GradVector, b: &GradVector, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / (floor + y.abs()))
        .fold(0.0, f64::max)
}
