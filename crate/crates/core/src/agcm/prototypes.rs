use super::{AttentionMap, PrototypeSet, Stage};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d};
use crate::tensor::{Tape, Var};

/// Attention-weighted average pooling of pixel features into `K` prototypes.
///
/// A 1×1 convolution produces `K` logit maps; a softmax over the `H·W` pixels
/// turns each into a pooling kernel `S_k`, and `P = I_flat · Sᵀ`.
pub fn generate_prototypes(
    tape: &mut Tape,
    params: &Bound,
    attention_conv: &Conv2d,
    input: Var,
) -> Result<(PrototypeSet, AttentionMap)> {
    let (c, h, w) = match *tape.shape(input) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("generate_prototypes", format!("expected C×H×W, got {s:?}"))),
    };
    if c != attention_conv.c_in {
        return Err(Error::Config(format!(
            "attention conv `{}` expects {} channels, features have {c}",
            attention_conv.prefix, attention_conv.c_in
        )));
    }
    let k = attention_conv.c_out;
    if h * w < k {
        crate::warn::warn_once(format!("{k} prototypes pooled from only {} pixels", h * w));
    }
    let logits = attention_conv.forward(tape, params, input)?;
    let logits = tape.reshape(logits, &[k, h * w])?;
    let s = tape.softmax(logits, 1)?;
    let flat = tape.reshape(input, &[c, h * w])?;
    let st = tape.transpose(s)?;
    let p = tape.matmul(flat, st)?;
    Ok((
        PrototypeSet {
            values: p,
            stage: Stage::Raw,
        },
        AttentionMap { values: s },
    ))
}
