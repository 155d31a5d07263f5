//! Parameterized layers on top of the tape.

mod layers;
mod mha;
mod mlp;
mod params;

pub use layers::{Activation, Conv2d, Linear};
pub use mha::{MhaSpec, MultiHeadAttention};
pub use mlp::{Mlp, MlpSpec};
pub use params::{Bound, InitScheme, ParamDecl, ParamKind, ParameterStore};
