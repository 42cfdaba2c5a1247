//! Low-rank residual adapters `z' = z + f(z; U, V)` and the bank holding
//! `k` of them per insertion layer.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::glorot_uniform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The residual map `f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdapterKind {
    /// `f(z) = z U V`
    #[default]
    Linear,
    /// `f(z) = relu(z U) V`
    Relu,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Linear => "linear",
            AdapterKind::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AdapterKind::Linear),
            "relu" => Ok(AdapterKind::Relu),
            other => Err(Error::config(format!("unknown adapter kind {other:?}"))),
        }
    }
}

/// Checks `1 <= r` and `r <= d / min_ratio`.
pub fn check_rank(d: usize, r: usize, min_ratio: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::contract("adapter rank must be at least 1"));
    }
    if r * min_ratio > d {
        return Err(Error::contract(format!(
            "adapter rank {r} is not low-rank for width {d} (need r <= d/{min_ratio})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub id: usize,
    pub layer: usize,
    pub u: Tensor,
    pub v: Tensor,
}

impl AdapterParams {
    /// Glorot-uniform `U`, zero `V`: the adapter starts as the identity.
    pub fn new<R: Rng + ?Sized>(d: usize, r: usize, layer: usize, id: usize, rng: &mut R) -> Self {
        AdapterParams {
            id,
            layer,
            u: glorot_uniform(d, r, rng).with_requires_grad(true),
            v: Tensor::zeros(r, d).with_requires_grad(true),
        }
    }

    pub fn d(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// Exactly `2 d r`.
    pub fn num_params(&self) -> usize {
        self.u.len() + self.v.len()
    }

    pub fn name(&self) -> String {
        format!("adapter.{}.{}", self.layer, self.id)
    }
}

/// `z + f(z; U, V)`.
pub fn adapter_forward(tape: &mut Tape, u: Var, v: Var, z: Var, kind: AdapterKind) -> Result<Var> {
    let d = tape.value(u).rows();
    if tape.value(z).cols() != d {
        return Err(Error::Dimension {
            op: "adapter_forward",
            lhs: tape.value(z).shape(),
            rhs: tape.value(u).shape(),
        });
    }
    let mut down = tape.matmul(z, u)?;
    if kind == AdapterKind::Relu {
        down = tape.relu(down)?;
    }
    let up = tape.matmul(down, v)?;
    tape.add(z, up)
}

/// Tape handles of one adapter's `(U, V)`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub u: Var,
    pub v: Var,
}

#[derive(Clone, Debug)]
pub struct AdapterBank {
    /// `(backbone layer, adapters ordered by id)`, sorted by layer.
    slots: Vec<(usize, Vec<AdapterParams>)>,
    kind: AdapterKind,
}

impl AdapterBank {
    pub fn new<R: Rng + ?Sized>(
        layers: &[usize],
        k: usize,
        d: usize,
        r: usize,
        kind: AdapterKind,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("adapter count must be at least 1"));
        }
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let slots = sorted
            .into_iter()
            .map(|l| (l, (0..k).map(|i| AdapterParams::new(d, r, l, i, rng)).collect()))
            .collect();
        Ok(AdapterBank { slots, kind })
    }

    pub fn from_slots(slots: Vec<(usize, Vec<AdapterParams>)>, kind: AdapterKind) -> Result<Self> {
        for (layer, adapters) in &slots {
            let Some(first) = adapters.first() else {
                return Err(Error::contract(format!("layer {layer} has no adapters")));
            };
            for (i, a) in adapters.iter().enumerate() {
                if a.d() != first.d() || a.rank() != first.rank() || a.v.shape() != (a.rank(), a.d()) {
                    return Err(Error::integrity(format!(
                        "{} does not match the shapes of its layer",
                        a.name()
                    )));
                }
                if a.id != i || a.layer != *layer {
                    return Err(Error::integrity(format!("{} stored out of order", a.name())));
                }
            }
        }
        Ok(AdapterBank { slots, kind })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn layers(&self) -> Vec<usize> {
        self.slots.iter().map(|(l, _)| *l).collect()
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        self.slots.iter().any(|(l, _)| *l == layer)
    }

    /// Adapters per insertion layer (0 for an empty bank).
    pub fn k(&self) -> usize {
        self.slots.first().map_or(0, |(_, a)| a.len())
    }

    pub fn rank(&self) -> usize {
        self.slots.first().map_or(0, |(_, a)| a[0].rank())
    }

    pub fn adapters(&self, layer: usize) -> Result<&[AdapterParams]> {
        self.slots
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, a)| a.as_slice())
            .ok_or_else(|| Error::contract(format!("no adapters at layer {layer}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterParams> {
        self.slots.iter().flat_map(|(_, a)| a.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AdapterParams> {
        self.slots.iter_mut().flat_map(|(_, a)| a.iter_mut())
    }

    /// Drops adapter `id` from every layer and renumbers the rest.
    pub fn remove(&mut self, id: usize) -> Result<()> {
        if id >= self.k() {
            return Err(Error::contract(format!("no adapter {id}")));
        }
        if self.k() == 1 {
            return Err(Error::contract("cannot remove the last adapter"));
        }
        for (_, adapters) in &mut self.slots {
            adapters.remove(id);
            for (i, a) in adapters.iter_mut().enumerate() {
                a.id = i;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(AdapterParams::num_params).sum()
    }

    /// Records every `(U, V)` pair, layer-major then by id.
    pub fn register(&self, tape: &mut Tape) -> Vec<Vec<AdapterVars>> {
        self.slots
            .iter()
            .map(|(_, adapters)| {
                adapters
                    .iter()
                    .map(|a| AdapterVars {
                        u: tape.leaf(&a.u),
                        v: tape.leaf(&a.v),
                    })
                    .collect()
            })
            .collect()
    }

    pub(crate) fn slot_index(&self, layer: usize) -> Result<usize> {
        self.slots
            .iter()
            .position(|(l, _)| *l == layer)
            .ok_or_else(|| Error::contract(format!("no adapters at layer {layer}")))
    }

    /// `[z'_1 .. z'_k]` at `layer`, ordered by adapter id.
    pub fn bank_forward(&self, tape: &mut Tape, vars: &[Vec<AdapterVars>], layer: usize, z: Var) -> Result<Vec<Var>> {
        let slot = self.slot_index(layer)?;
        vars[slot]
            .iter()
            .map(|a| adapter_forward(tape, a.u, a.v, z, self.kind))
            .collect()
    }
}
