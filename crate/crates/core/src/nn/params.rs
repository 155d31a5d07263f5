use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How a declared parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

/// A learnable tensor a layer needs, before any values exist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDecl {
    pub fn weight(path: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> Self {
        Self {
            path: path.into(),
            shape: shape.to_vec(),
            kind: ParamKind::Weight { fan_in, fan_out },
        }
    }

    pub fn bias(path: impl Into<String>, len: usize) -> Self {
        Self {
            path: path.into(),
            shape: vec![len],
            kind: ParamKind::Bias,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Weights ~ U(±√(6/(fan_in+fan_out))), biases zero.
    #[default]
    XavierUniform,
}

/// All learnable weights, keyed by hierarchical path and enumerated in
/// lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

/// Per-path generator so that a parameter's initial value depends only on
/// (seed, path), not on which other parameters exist.
fn path_rng(seed: u64, path: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(path.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fill an empty store from declarations. Deterministic under `seed`.
    pub fn init_params(&mut self, decls: &[ParamDecl], scheme: InitScheme, seed: u64) -> Result<()> {
        if !self.params.is_empty() {
            return Err(Error::Usage(
                "init_params called on a non-empty parameter store".into(),
            ));
        }
        let mut fresh = BTreeMap::new();
        for d in decls {
            let value = match (scheme, d.kind) {
                (InitScheme::XavierUniform, ParamKind::Weight { fan_in, fan_out }) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::uniform(&d.shape, -a, a, &mut path_rng(seed, &d.path))
                }
                (_, ParamKind::Bias) => Tensor::zeros(&d.shape),
            };
            if fresh.insert(d.path.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate parameter path `{}`", d.path)));
            }
        }
        self.params = fresh;
        Ok(())
    }

    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        store.init_params(decls, InitScheme::XavierUniform, seed)?;
        Ok(store)
    }

    /// Insert or replace a parameter.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Push every parameter onto the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(p, t)| (p.clone(), tape.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Push every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(p, t)| (p.clone(), tape.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters as tape variables for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after `tape.backward`, zero-filled for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(p, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (p.clone(), g)
            })
            .collect()
    }
}
