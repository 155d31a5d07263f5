use super::{AffinityMatrix, Correlation, PrototypeSet, Stage};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, MhaSpec, Mlp, MlpSpec, MultiHeadAttention, ParamDecl};
use crate::tensor::{Tape, Var};

/// `A = Eᵀ E` for node embeddings `E: C×K`.
pub fn adjacency(tape: &mut Tape, embedding: Var) -> Result<AffinityMatrix> {
    tape.value(embedding).dims2("adjacency")?;
    let et = tape.transpose(embedding)?;
    let a = tape.matmul(et, embedding)?;
    Ok(AffinityMatrix { values: a })
}

/// Channel-kernel branch: self-attention over prototype tokens, mean over
/// tokens, then a C→C→C MLP.
#[derive(Clone, Debug)]
pub struct KernelWeight {
    pub channels: usize,
    mha: MultiHeadAttention,
    mlp: Mlp,
}

impl KernelWeight {
    pub fn new(prefix: &str, channels: usize, heads: usize) -> Result<Self> {
        let mha = MultiHeadAttention::new(
            &format!("{prefix}.mha"),
            MhaSpec {
                heads,
                dim: channels,
            },
        )?;
        let mlp = Mlp::new(
            &format!("{prefix}.mlp"),
            MlpSpec::new(&[channels, channels, channels], Activation::Relu),
        )?;
        Ok(Self { channels, mha, mlp })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.mha.decls();
        d.extend(self.mlp.decls());
        d
    }

    pub fn mha(&self) -> &MultiHeadAttention {
        &self.mha
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
}

/// `W = MLP(mean_k MHA(Pᵀ))`, a length-`C` vector.
pub fn kernel_weight(
    tape: &mut Tape,
    params: &Bound,
    branch: &KernelWeight,
    prototypes: PrototypeSet,
) -> Result<Var> {
    if prototypes.stage != Stage::Raw {
        return Err(Error::Usage("kernel weight is computed from raw prototypes".into()));
    }
    let (c, _) = tape.value(prototypes.values).dims2("kernel_weight")?;
    if c != branch.channels {
        return Err(Error::shape(
            "kernel_weight",
            format!("branch expects {} channels, prototypes have {c}", branch.channels),
        ));
    }
    let tokens = tape.transpose(prototypes.values)?;
    let attended = branch.mha.forward(tape, params, tokens)?;
    let pooled = tape.mean_axis(attended, 0)?;
    branch.mlp.forward(tape, params, pooled)
}

/// `P′_i = W ⊙ P_i` for every column `i`.
pub fn reweight(tape: &mut Tape, prototypes: PrototypeSet, kernel: Var) -> Result<PrototypeSet> {
    let (c, _) = tape.value(prototypes.values).dims2("reweight")?;
    if tape.shape(kernel) != [c] {
        return Err(Error::shape(
            "reweight",
            format!("kernel of shape {:?} cannot scale {c} channels", tape.shape(kernel)),
        ));
    }
    let w = tape.reshape(kernel, &[c, 1])?;
    let values = tape.mul(prototypes.values, w)?;
    Ok(PrototypeSet {
        values,
        stage: Stage::Reweighted,
    })
}

/// `P″ = P′ · Softmax(A)`, with the softmax taken down each column so every
/// refined prototype is a convex combination of re-weighted ones.
/// Returns the refined set and the column-stochastic allocation matrix.
pub fn refine(tape: &mut Tape, reweighted: PrototypeSet, affinity: AffinityMatrix) -> Result<(PrototypeSet, Var)> {
    let (_, k) = tape.value(reweighted.values).dims2("refine")?;
    if tape.shape(affinity.values) != [k, k] {
        return Err(Error::shape(
            "refine",
            format!(
                "affinity {:?} does not match {k} prototypes",
                tape.shape(affinity.values)
            ),
        ));
    }
    let alloc = tape.softmax(affinity.values, 0)?;
    let values = tape.matmul(reweighted.values, alloc)?;
    Ok((
        PrototypeSet {
            values,
            stage: Stage::Refined,
        },
        alloc,
    ))
}

/// Per-pixel similarity of refined prototypes with input features: `K×H×W`.
pub fn correlate(tape: &mut Tape, refined: PrototypeSet, input: Var, mode: Correlation) -> Result<Var> {
    let (c, k) = tape.value(refined.values).dims2("correlate")?;
    let (ci, h, w) = tape.value(input).dims3("correlate")?;
    if c != ci {
        return Err(Error::shape(
            "correlate",
            format!("prototypes have {c} channels, features have {ci}"),
        ));
    }
    let flat = tape.reshape(input, &[c, h * w])?;
    let scores = match mode {
        Correlation::Dot => {
            let pt = tape.transpose(refined.values)?;
            let s = tape.matmul(pt, flat)?;
            tape.scale(s, 1.0 / c as f64)?
        }
        Correlation::Cosine => {
            let p = unit_columns(tape, refined.values)?;
            let f = unit_columns(tape, flat)?;
            let pt = tape.transpose(p)?;
            tape.matmul(pt, f)?
        }
    };
    tape.reshape(scores, &[k, h, w])
}

fn unit_columns(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let sq = tape.mul(x, x)?;
    let s = tape.sum_axis(sq, 0)?;
    let s = tape.add_scalar(s, 1e-12)?;
    let norm = tape.sqrt(s)?;
    let norm = tape.reshape(norm, &[1, n])?;
    tape.div(x, norm)
}
