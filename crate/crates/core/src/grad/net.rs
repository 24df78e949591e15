//! Parameters and small dense networks.
//!
//! A [`Parameter`] is a named `rows x cols` value buffer with a parallel
//! gradient buffer. A [`DenseNet`] is a stack of affine layers with per-layer
//! activations, initialized Glorot-style: weights uniform in `[-a, a]` with
//! `a = sqrt(6 / (fan_in + fan_out))`, biases zero, from a seeded generator.

use super::{Binder, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named value/gradient pair. Vectors use `cols == 1`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Self {
            name: name.to_string(),
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    /// Uniform init in `[-bound, bound]`, row-major draw order.
    pub fn uniform(name: &str, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(name, rows, cols);
        for v in &mut p.values {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat index of `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything exposing an ordered list of parameters. The order is the
/// declaration order and is stable across calls; optimizers and checkpoint
/// serialization both rely on it.
pub trait ParamBlock {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Build from layer widths `dims = [in, h1, ..., out]` and one activation
    /// per layer (`activations.len() == dims.len() - 1`).
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(
            activations.len(),
            dims.len() - 1,
            "one activation per layer"
        );
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &activation))| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Parameter::uniform(
                        &format!("layer{i}.weight"),
                        fan_out,
                        fan_in,
                        bound,
                        rng,
                    ),
                    bias: Parameter::zeros(&format!("layer{i}.bias"), fan_out, 1),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows
    }

    /// Plain value-space forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, net expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut y = Vec::with_capacity(layer.weight.rows);
            for r in 0..layer.weight.rows {
                let mut acc = layer.bias.values[r];
                for (c, &xc) in x.iter().enumerate() {
                    acc += layer.weight.values[layer.weight.at(r, c)] * xc;
                }
                y.push(layer.activation.apply(acc));
            }
            x = y;
        }
        Ok(x)
    }

    /// Recorded forward pass. `bind` must belong to the block whose parameter
    /// list contains this net's parameters starting at `slot_offset`, in
    /// `params()` order (weight, bias per layer).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        slot_offset: usize,
        input: &[Var],
    ) -> Result<Vec<Var>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, net expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let wslot = slot_offset + 2 * l;
            let bslot = wslot + 1;
            let mut y = Vec::with_capacity(layer.weight.rows);
            for r in 0..layer.weight.rows {
                let mut acc = bind.var(tape, bslot, &layer.bias, r);
                for (c, &xc) in x.iter().enumerate() {
                    let w = bind.var(tape, wslot, &layer.weight, layer.weight.at(r, c));
                    let term = tape.mul(w, xc);
                    acc = tape.add(acc, term);
                }
                y.push(layer.activation.apply_tape(tape, acc));
            }
            x = y;
        }
        Ok(x)
    }
}

impl ParamBlock for DenseNet {
    fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_layer_identity_forward() {
        // weight [[2]], bias [1]: input [3] -> [7].
        let mut rng = rng::stream(0, &[0]);
        let mut net = DenseNet::new(&[1, 1], &[Activation::Identity], &mut rng);
        net.layers[0].weight.values[0] = 2.0;
        net.layers[0].bias.values[0] = 1.0;
        let out = net.forward(&[3.0]).unwrap();
        assert_eq!(out, vec![7.0]);
    }

    #[test]
    fn zero_net_maps_everything_to_zero() {
        let mut rng = rng::stream(0, &[1]);
        let mut net = DenseNet::new(&[3, 4, 1], &[Activation::Tanh, Activation::Tanh], &mut rng);
        for p in net.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        for input in [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]] {
            let out = net.forward(&input).unwrap();
            assert_eq!(out, vec![0.0]);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mut rng = rng::stream(0, &[2]);
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = || {
            let mut rng = rng::stream(42, &[7]);
            DenseNet::new(
                &[4, 8, 2],
                &[Activation::Tanh, Activation::Identity],
                &mut rng,
            )
        };
        let (a, b) = (build(), build());
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.values, pb.values, "same seed must give same init");
        }
        let bound0 = (6.0f64 / (4.0 + 8.0)).sqrt();
        for &v in &a.layers[0].weight.values {
            assert!(v.abs() < bound0);
        }
        assert!(a.layers[0].bias.values.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let mut rng = rng::stream(9, &[3]);
        let net = DenseNet::new(
            &[3, 5, 2],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        );
        let input = [0.3, -1.1, 0.7];
        let plain = net.forward(&input).unwrap();

        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&net);
        let ivars: Vec<Var> = input.iter().map(|&x| tape.leaf(x)).collect();
        let out = net.forward_tape(&mut tape, &mut bind, 0, &ivars).unwrap();
        for (v, p) in out.iter().zip(&plain) {
            assert_eq!(tape.value(*v), *p, "recorded and plain paths must agree");
        }
    }
}
