//! Parameter storage and the small layers the models are assembled from.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::numerics::{Rng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_STD: f64 = 0.02;

/// What a parameter is, which decides initialization and regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// `[in, out]` matrix; subject to the max-norm constraint.
    Weight,
    Bias,
    Norm,
    Embedding,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameters of one model. Names are `prefix.local`.
#[derive(Clone, Debug)]
pub struct ParamStore {
    prefix: String,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
            params: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, local: &str, value: Tensor, kind: ParamKind) -> ParamId {
        let name = format!("{}.{}", self.prefix, local);
        debug_assert!(self.by_name(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Puts a parameter on the tape: a named leaf, or a constant when frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        let p = &self.params[id.0];
        if p.frozen {
            tape.constant(p.value.clone())
        } else {
            tape.param(&p.name, &p.value)
        }
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose local name starts with `local_prefix`.
    pub fn count_prefix(&self, local_prefix: &str) -> usize {
        let full = format!("{}.{}", self.prefix, local_prefix);
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&full))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = pred(&p.name);
        }
    }

    /// SHA-256 over the names, shapes and little-endian bytes of the selected
    /// parameters.
    pub fn digest(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-a, a))
}

pub fn embedding_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| EMBED_STD * rng.normal())
}

/// Everything a forward pass needs besides its input.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub store: &'a ParamStore,
    pub rng: &'a mut Rng,
    pub training: bool,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn bind(&self, id: ParamId) -> Var<'t> {
        self.store.bind(self.tape, id)
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            glorot_uniform(rng, fan_in, fan_out),
            ParamKind::Weight,
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Bias);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&ctx.bind(self.weight))?.add(&ctx.bind(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), ParamKind::Norm),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Norm),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&ctx.bind(self.gamma), &ctx.bind(self.beta), LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_head_count() {
        let mut store = ParamStore::new("m");
        let mut rng = Rng::new(0);
        Linear::new(&mut store, &mut rng, "head", 96, 3);
        assert_eq!(store.num_scalars(), 3 * 96 + 3);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(1);
        let w = glorot_uniform(&mut rng, 10, 6);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new("m");
        let id = store.add("w", Tensor::ones(&[2]), ParamKind::Bias);
        store.set_frozen(|_| true);
        let tape = Tape::new();
        let v = store.bind(&tape, id);
        assert!(!v.requires_grad());
        let g = tape.backward(v.sum().unwrap()).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new("m");
        let id = store.add("w", Tensor::ones(&[2]), ParamKind::Bias);
        let before = store.digest(|_| true);
        assert_eq!(before, store.digest(|_| true));
        store.get_mut(id).value.data_mut()[0] = 2.0;
        assert_ne!(before, store.digest(|_| true));
    }
}
