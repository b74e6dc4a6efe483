use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{gemm, Operand};
use super::params::{ParamSet, ParamVars};
use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn on_tape(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// One entry per hidden layer.
    pub activations: Vec<Activation>,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// Same activation on every hidden layer.
    pub fn uniform(layer_widths: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        let n_hidden = layer_widths.len().saturating_sub(2);
        Self {
            layer_widths,
            activations: vec![hidden; n_hidden],
            output_activation: output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::contract("an MLP needs at least input and output widths"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::contract("MLP widths must be positive"));
        }
        if self.activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::dim(
                "hidden activations",
                self.layer_widths.len() - 2,
                self.activations.len(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers() {
            self.output_activation
        } else {
            self.activations[layer]
        }
    }
}

/// A multilayer perceptron whose parameters live in a [`ParamSet`] under
/// `"{prefix}.l{i}.weight"` (`[out, in]`) and `"{prefix}.l{i}.bias"` (`[out]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            spec,
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.bias", self.prefix)
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        for l in 0..self.spec.layers() {
            let (fan_in, out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..out * fan_in)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let b = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
            ps.insert(self.weight_name(l), Tensor::new(vec![out, fan_in], w).expect("sized"));
            ps.insert(self.bias_name(l), Tensor::new(vec![out], b).expect("sized"));
        }
        ps
    }

    pub fn init_zeros(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for l in 0..self.spec.layers() {
            let (fan_in, out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            ps.insert(self.weight_name(l), Tensor::zeros(&[out, fan_in]));
            ps.insert(self.bias_name(l), Tensor::zeros(&[out]));
        }
        ps
    }

    fn layer_params<'p>(&self, params: &'p ParamSet, l: usize) -> Result<(&'p Tensor, &'p Tensor)> {
        let wn = self.weight_name(l);
        let bn = self.bias_name(l);
        let w = params
            .get(&wn)
            .ok_or_else(|| Error::contract(format!("missing parameter {wn}")))?;
        let b = params
            .get(&bn)
            .ok_or_else(|| Error::contract(format!("missing parameter {bn}")))?;
        let (fan_in, out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
        if w.shape() != [out, fan_in] {
            return Err(Error::dim(format!("{wn} elements"), out * fan_in, w.len()));
        }
        if b.len() != out {
            return Err(Error::dim(bn, out, b.len()));
        }
        Ok((w, b))
    }

    /// Single-input forward pass.
    pub fn forward(&self, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::row(input.to_vec());
        Ok(self.forward_batch(params, &x)?.into_data())
    }

    /// Forward pass over the rows of `x` (`[B, in]`), without recording a tape.
    pub fn forward_batch(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let b = x.rows();
        if x.cols() != self.spec.input_width() {
            return Err(Error::dim(
                format!("{} layer 0 input", self.prefix),
                self.spec.input_width(),
                x.cols(),
            ));
        }
        let mut cur = x.data().to_vec();
        for l in 0..self.spec.layers() {
            let (w, bias) = self.layer_params(params, l)?;
            let (fan_in, out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let mut next = vec![0.0; b * out];
            gemm(
                b,
                fan_in,
                out,
                Operand::rows(&cur, fan_in),
                Operand::transposed(w.data(), fan_in),
                0.0,
                &mut next,
            );
            let act = self.spec.activation(l);
            for row in next.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bias.data()) {
                    *v = act.apply(*v + bb);
                }
            }
            cur = next;
        }
        Tensor::matrix(b, self.spec.output_width(), cur)
    }

    /// Forward pass recorded on `tape` so gradients can flow to the
    /// parameters registered in `vars` and to `x`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, vars: &ParamVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.spec.input_width() {
            return Err(Error::dim(
                format!("{} layer 0 input", self.prefix),
                self.spec.input_width(),
                tape.value(x).cols(),
            ));
        }
        self.forward_tape_from(tape, vars, x, 0)
    }

    /// Continues a taped forward pass at layer `start`; `x` is that layer's input.
    pub fn forward_tape_from(&self, tape: &mut Tape<'_>, vars: &ParamVars, x: Var, start: usize) -> Result<Var> {
        let mut h = x;
        for l in start..self.spec.layers() {
            let wn = self.weight_name(l);
            let bn = self.bias_name(l);
            let w = vars
                .get(&wn)
                .ok_or_else(|| Error::contract(format!("parameter {wn} not on tape")))?;
            let b = vars
                .get(&bn)
                .ok_or_else(|| Error::contract(format!("parameter {bn} not on tape")))?;
            let z = tape
                .matmul_t(h, w)
                .map_err(|e| layer_error(&self.prefix, l, e))?;
            let z = tape.add_row(z, b).map_err(|e| layer_error(&self.prefix, l, e))?;
            h = self.spec.activation(l).on_tape(tape, z);
        }
        Ok(h)
    }
}

fn layer_error(prefix: &str, layer: usize, e: Error) -> Error {
    match e {
        Error::Dimension {
            context,
            expected,
            actual,
        } => Error::Dimension {
            context: format!("{prefix} layer {layer}: {context}"),
            expected,
            actual,
        },
        other => other,
    }
}

/// Plain single-input forward pass for a network whose parameters use an
/// empty-prefix naming scheme.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
    Mlp::new("", spec.clone())?.forward(params, input)
}
