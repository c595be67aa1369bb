use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::{Batch, Objective};
use crate::rng::Stream;
use crate::tensor::{GradVector, ParamVector, Tensor};

use super::glorot_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected classifier; the last layer emits logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        MlpSpec {
            layer_sizes,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("MLP layer sizes must be at least 1"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `Σ (fan_in + 1) · fan_out` over layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer:02}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer:02}.bias")
    }
}

/// Glorot-uniform weights from the `init_seed` stream; zero biases.
pub fn mlp_init(spec: &MlpSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(2 * spec.num_layers());
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut rng = Stream::new(spec.init_seed, l as u64, "init/mlp");
        entries.push((
            MlpSpec::weight_name(l),
            glorot_uniform(&mut rng, fan_in, fan_out),
        ));
        entries.push((MlpSpec::bias_name(l), Tensor::zeros(&[fan_out])));
    }
    ParamVector::new(entries)
}

fn check_batch(spec: &MlpSpec, batch: &Batch) -> Result<()> {
    if batch.features.rank() != 2 || batch.width() != spec.input_width() {
        return Err(Error::Shape {
            op: "mlp input",
            lhs: batch.features.shape().to_vec(),
            rhs: vec![batch.len(), spec.input_width()],
        });
    }
    let classes = spec.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Records the forward pass and returns the logits node.
pub fn mlp_logits(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Var> {
    spec.validate()?;
    check_batch(spec, batch)?;
    tape.bind_params(params);
    let mut h = tape.constant(batch.features.clone());
    for l in 0..spec.num_layers() {
        let w = tape.param(&MlpSpec::weight_name(l))?;
        let b = tape.param(&MlpSpec::bias_name(l))?;
        let z = tape.matmul(h, w)?;
        h = tape.add_bias(z, b)?;
        if l + 1 < spec.num_layers() {
            h = match spec.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
            };
        }
    }
    Ok(h)
}

/// Mean cross-entropy of the MLP over `batch`.
pub fn mlp_loss(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = mlp_logits(&mut tape, spec, params, batch)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    tape.scalar(loss)
}

pub fn mlp_loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, GradVector)> {
    let mut tape = Tape::new();
    let logits = mlp_logits(&mut tape, spec, params, batch)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let value = tape.scalar(loss)?;
    Ok((value, tape.backward(loss)?))
}

impl Objective for MlpSpec {
    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        mlp_loss(self, params, batch)
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradVector)> {
        mlp_loss_and_grad(self, params, batch)
    }
}
