use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Bound, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Head count and model width; each head attends in `dim / heads` dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaSpec {
    pub heads: usize,
    pub dim: usize,
}

impl MhaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * Linear::param_count(self.dim, self.dim)
    }
}

/// Multi-head self-attention over a set of tokens, without positional encoding.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub spec: MhaSpec,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, spec: MhaSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        Ok(Self {
            spec,
            q: Linear::new(format!("{prefix}.q"), d, d),
            k: Linear::new(format!("{prefix}.k"), d, d),
            v: Linear::new(format!("{prefix}.v"), d, d),
            o: Linear::new(format!("{prefix}.o"), d, d),
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(Linear::decls)
            .collect()
    }

    pub fn key_prefix(&self) -> &str {
        &self.k.prefix
    }

    /// `tokens: K×d → K×d`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, tokens: Var) -> Result<Var> {
        match tape.shape(tokens) {
            [_, d] if *d == self.spec.dim => {}
            s => {
                return Err(Error::shape(
                    "mha",
                    format!("expected K×{}, got {s:?}", self.spec.dim),
                ))
            }
        }
        let q = self.q.forward_rows(tape, params, tokens)?;
        let k = self.k.forward_rows(tape, params, tokens)?;
        let v = self.v.forward_rows(tape, params, tokens)?;
        let dh = self.spec.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        self.o.forward_rows(tape, params, merged)
    }
}
