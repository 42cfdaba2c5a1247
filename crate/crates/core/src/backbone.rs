//! Graph-convolution backbone: `H' = σ(Â H W)` stacked `depth` times.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Uniform(-s, s) with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w: Tensor,
    pub activation: Activation,
}

/// One propagation step `σ(a_hat · h · w)`, evaluated as `a_hat · (h · w)`.
pub fn layer_forward(tape: &mut Tape, w: Var, a_hat: Var, h: Var, activation: Activation) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let z = tape.matmul(a_hat, hw)?;
    match activation {
        Activation::Relu => tape.relu(z),
        Activation::Identity => Ok(z),
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    layers: Vec<GcnLayer>,
    frozen: bool,
}

impl Backbone {
    /// Glorot-initialized stack; relu on hidden layers, identity on the last.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, depth: usize, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("backbone depth must be at least 1"));
        }
        if d_in == 0 || d_hidden == 0 {
            return Err(Error::config("backbone widths must be positive"));
        }
        let layers = (0..depth)
            .map(|l| GcnLayer {
                w: glorot_uniform(if l == 0 { d_in } else { d_hidden }, d_hidden, rng).with_requires_grad(true),
                activation: if l + 1 == depth {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Backbone { layers, frozen: false })
    }

    pub fn from_layers(layers: Vec<GcnLayer>, frozen: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("backbone depth must be at least 1"));
        }
        for pair in layers.windows(2) {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(Error::Dimension {
                    op: "backbone layer chain",
                    lhs: pair[0].w.shape(),
                    rhs: pair[1].w.shape(),
                });
            }
        }
        let mut b = Backbone { layers, frozen: false };
        b.set_frozen(frozen);
        Ok(b)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn layers(&self) -> &[GcnLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GcnLayer] {
        &mut self.layers
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen weights are recorded as constants and never updated.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for l in &mut self.layers {
            l.w.set_requires_grad(!frozen);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    /// Records every layer weight on the tape, in layer order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().map(|l| tape.leaf(&l.w)).collect()
    }

    /// The plain stack with nothing attached.
    pub fn forward_plain(&self, tape: &mut Tape, weights: &[Var], a_hat: Var, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, w) in self.layers.iter().zip(weights) {
            h = layer_forward(tape, *w, a_hat, h, layer.activation)?;
        }
        Ok(h)
    }
}
