//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are evaluated eagerly as they are recorded; [`Tape::backward`]
//! sweeps the tape in reverse from a scalar loss. Only the operations the
//! model zoo needs are provided. Broadcasting is limited to adding a bias row
//! to every row of a matrix.

use crate::error::{Error, Result};
use crate::tensor::{GradVector, ParamVector, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mean(Var),
    Sum(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Interprets a tensor as a matrix: rank 2 as-is, rank 1 as a single row.
fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        [c] => Some((1, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of `v`, rejecting non-finite results.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Usage(format!(
                "expected a scalar, found shape {:?}",
                t.shape()
            )));
        }
        let x = t.data()[0];
        if !x.is_finite() {
            return Err(Error::non_finite("forward loss"));
        }
        Ok(x)
    }

    /// Records a constant input (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records every tensor of `params` as a differentiable leaf. Names that
    /// are already bound keep their existing leaf, so several forward passes
    /// can share one tape.
    pub fn bind_params(&mut self, params: &ParamVector) -> Vec<Var> {
        params
            .iter()
            .map(|(name, t)| {
                if let Ok(v) = self.param(name) {
                    return v;
                }
                let v = self.push(t.clone().with_grad(), Op::Param, true);
                self.params.push((name.to_string(), v));
                v
            })
            .collect()
    }

    /// Bound parameter by name.
    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Usage(format!("parameter {name:?} is not bound on this tape")))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a)).ok_or_else(|| self.shape_err("matmul", a, b))?;
        let (k2, n) = match self.shape(b) {
            [r, c] => (*r, *c),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op_name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a bias vector of length `cols` to every row of a matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a)).ok_or_else(|| self.shape_err("add_bias", a, bias))?;
        if self.shape(bias) != [n] {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let bd = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(bd) {
                *x += b;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    fn row_dims(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.value(a)).ok_or_else(|| Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: vec![],
        })
    }

    /// Row-wise softmax of a matrix (or a single vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.row_dims(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.row_dims(a, "log_softmax")?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a), ng))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.row_dims(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &mut probs[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            total += lse - row[y];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let t = Tensor::scalar(total / m as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.shape_err("mse", pred, target));
        }
        let p = self.value(pred).data();
        let q = self.value(target).data();
        let s: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / p.len() as f64);
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(t, Op::Mse(pred, target), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    /// Gathers rows of an embedding table `[vocab, dim]` into `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => {
                return Err(Error::Shape {
                    op: "embedding",
                    lhs: s.to_vec(),
                    rhs: vec![ids.len()],
                })
            }
        };
        if let Some(&token) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { token, vocab: v });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor::scalar(src.data().iter().sum::<f64>() / src.len() as f64);
        let ng = self.ng(a);
        self.push(t, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.row_dims(a, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, width],
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let t = Tensor::new(vec![m, width], data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceCols { src: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (m, _) = self.row_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == m => widths.push(*c),
                _ => return Err(self.shape_err("concat_cols", first, p)),
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape {
                    op: "slice_rows",
                    lhs: s.to_vec(),
                    rhs: vec![start, count],
                })
            }
        };
        if count == 0 || start + count > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, count],
            });
        }
        let data = self.value(a).data()[start * n..(start + count) * n].to_vec();
        let t = Tensor::new(vec![count, n], data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceRows { src: a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, n) = self.row_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == n => rows += r,
                _ => return Err(self.shape_err("concat_rows", first, p)),
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.row_dims(x, "layer_norm")?;
        if self.shape(gain) != [n] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [n] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every bound parameter.
    /// Parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<GradVector> {
        let grads = self.backward_all(loss)?;
        let entries = self
            .params
            .iter()
            .map(|(name, v)| {
                let shape = self.shape(*v).to_vec();
                let t = match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone())?,
                    None => Tensor::zeros(&shape),
                };
                Ok((name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradVector::from_params(ParamVector::new(entries)?))
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a node that has not been evaluated".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a)).expect("checked in forward");
                let n = self.shape(*b)[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                // dA = dY · Bᵀ
                acc(*a, &mut |g| {
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            g[i * k + p] += dyr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dY
                acc(*b, &mut |g| {
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ad[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, d) in g[p * n..(p + 1) * n].iter_mut().zip(dyr) {
                                *o += x * d;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(o, d)| *o -= d));
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).len();
                acc(*a, &mut |g| add_into(g, dy));
                acc(*bias, &mut |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &mut |g| {
                    for ((o, d), y) in g.iter_mut().zip(dy).zip(bd) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, d), x) in g.iter_mut().zip(dy).zip(ad) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(dy).for_each(|(o, d)| *o += c * d)
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((o, d), xi) in g.iter_mut().zip(dy).zip(x) {
                        if *xi > 0.0 {
                            *o += d;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for ((o, d), yi) in g.iter_mut().zip(dy).zip(y) {
                        *o += d * (1.0 - yi * yi);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = as_matrix(&node.value).expect("matrix").1;
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((o, d), yi) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += yi * (d - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = as_matrix(&node.value).expect("matrix").1;
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = dr.iter().sum();
                        for ((o, d), yi) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += d - yi.exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let n = probs.len() / m;
                let scale = dy[0] / m as f64;
                acc(*logits, &mut |g| {
                    for (i, &y) in labels.iter().enumerate() {
                        let gr = &mut g[i * n..(i + 1) * n];
                        for (o, p) in gr.iter_mut().zip(&probs[i * n..(i + 1) * n]) {
                            *o += scale * p;
                        }
                        gr[y] -= scale;
                    }
                });
            }
            Op::Mse(p, q) => {
                let pd = self.value(*p).data();
                let qd = self.value(*q).data();
                let c = 2.0 * dy[0] / pd.len() as f64;
                acc(*p, &mut |g| {
                    for ((o, x), y) in g.iter_mut().zip(pd).zip(qd) {
                        *o += c * (x - y);
                    }
                });
                acc(*q, &mut |g| {
                    for ((o, x), y) in g.iter_mut().zip(pd).zip(qd) {
                        *o -= c * (x - y);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, dy)),
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("matrix");
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Mean(a) => {
                let c = dy[0] / self.value(*a).len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|o| *o += c));
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|o| *o += dy[0])),
            Op::SliceCols { src, start } => {
                let n = as_matrix(self.value(*src)).expect("matrix").1;
                let w = node.value.dims2().expect("matrix").1;
                acc(*src, &mut |g| {
                    for (i, dr) in dy.chunks(w).enumerate() {
                        add_into(&mut g[i * n + start..i * n + start + w], dr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2().expect("matrix").1;
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc(*p, &mut |g| {
                        for (i, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &dy[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { src, start } => {
                let n = self.shape(*src)[1];
                acc(*src, &mut |g| {
                    add_into(&mut g[start * n..start * n + dy.len()], dy)
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |g| add_into(g, &dy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gd = self.value(*gain).data();
                acc(*bias, &mut |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
                acc(*gain, &mut |g| {
                    for (dr, hr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, d), h) in g.iter_mut().zip(dr).zip(hr) {
                            *o += d * h;
                        }
                    }
                });
                acc(*x, &mut |g| {
                    for (i, ((gr, dr), hr)) in g
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        // dxhat = dy * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = dr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let (m1, m2) = (s1 / n as f64, s2 / n as f64);
                        for j in 0..n {
                            let dh = dr[j] * gd[j];
                            gr[j] += rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
