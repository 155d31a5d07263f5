use serde::{Deserialize, Serialize};

use super::layers::{Activation, Linear};
use super::params::{Bound, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Layer widths `[d_in, h1, …, d_out]` and the activation between affine layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], activation: Activation) -> Self {
        Self {
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| Linear::param_count(w[0], w[1]))
            .sum()
    }
}

/// Alternating affine + activation, with a final affine layer and no output activation.
/// A single-width spec is the identity.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(Linear::decls).collect()
    }

    fn run(
        &self,
        tape: &mut Tape,
        params: &Bound,
        mut x: Var,
        step: impl Fn(&Linear, &mut Tape, &Bound, Var) -> Result<Var>,
    ) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = step(layer, tape, params, x)?;
            if i + 1 < self.layers.len() {
                x = self.spec.activation.apply(tape, x)?;
            }
        }
        Ok(x)
    }

    /// Rows are samples: `n×d_in → n×d_out`. A rank-1 input is treated as one row.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let x = match shape[..] {
            [d] => tape.reshape(x, &[1, d])?,
            _ => x,
        };
        let y = self.run(tape, params, x, Linear::forward_rows)?;
        if shape.len() == 1 {
            tape.reshape(y, &[self.spec.d_out()])
        } else {
            Ok(y)
        }
    }

    /// Columns are samples: `d_in×n → d_out×n`.
    pub fn forward_cols(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        self.run(tape, params, x, Linear::forward_cols)
    }
}
