//! Adaptive graph convolution module.
//!
//! Given input features `I` (C×H×W) the module
//!
//! 1. pools `K` prototype vectors `P = I · Sᵀ` with a spatial softmax attention `S`,
//! 2. embeds the prototypes with `N` EdgeConv layers over a kNN graph,
//! 3. builds the affinity `A = φ(P)ᵀ φ(P)`,
//! 4. derives a channel kernel `W = MLP(MHA(P))` and re-weights `P′ = W ⊙ P`,
//! 5. refines `P″ = P′ · Softmax(A)`,
//! 6. correlates every pixel of `I` with each refined prototype.
//!
//! The output is `I` with the `K` correlation maps appended as channels.

mod graph;
mod prototypes;
mod refine;

pub use graph::{edgeconv_layer, embed_prototypes, knn_graph, EdgeConv, KnnGraph};
pub use prototypes::generate_prototypes;
pub use refine::{adjacency, correlate, kernel_weight, refine, reweight, KernelWeight};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, MhaSpec, ParamDecl};
use crate::tensor::{Tape, Var};

/// Which pipeline stage a prototype matrix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// `P`, straight from attention pooling.
    Raw,
    /// `P′ = W ⊙ P`.
    Reweighted,
    /// `P″ = P′ · Softmax(A)`.
    Refined,
}

/// `C×K` prototype matrix on a tape; column `k` is prototype `k`.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeSet {
    pub values: Var,
    pub stage: Stage,
}

/// `K×HW` spatial attention; every row is a probability distribution over pixels.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub values: Var,
}

/// `K×K` Gram matrix of prototype embeddings.
#[derive(Clone, Copy, Debug)]
pub struct AffinityMatrix {
    pub values: Var,
}

/// How refined prototypes are compared with pixel features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// `⟨P″_k, I_p⟩ / C`
    #[default]
    Dot,
    /// `⟨P″_k, I_p⟩ / (‖P″_k‖ ‖I_p‖)`
    Cosine,
}

/// Module hyperparameters apart from the channel width, which comes from the host feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgcmOptions {
    /// Number of prototypes `K`.
    pub prototypes: usize,
    /// Number of EdgeConv layers `N`.
    pub edgeconv_layers: usize,
    /// Neighbours per node in the kNN graph.
    pub k_nn: usize,
    /// Hidden width of the EdgeConv edge MLP.
    pub edge_hidden: usize,
    /// Attention heads in the kernel-weight branch.
    pub heads: usize,
    /// Rebuild the kNN graph from each EdgeConv layer's input instead of once from `P`.
    pub dynamic_graph: bool,
    pub correlation: Correlation,
}

impl Default for AgcmOptions {
    fn default() -> Self {
        Self {
            prototypes: 8,
            edgeconv_layers: 3,
            k_nn: 2,
            edge_hidden: 16,
            heads: 2,
            dynamic_graph: false,
            correlation: Correlation::Dot,
        }
    }
}

impl AgcmOptions {
    pub fn with_channels(&self, channels: usize) -> AgcmConfig {
        AgcmConfig {
            channels,
            options: self.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgcmConfig {
    /// Channel width `C` of the input features.
    pub channels: usize,
    pub options: AgcmOptions,
}

impl AgcmConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.options;
        if self.channels == 0 || o.prototypes == 0 || o.edgeconv_layers == 0 || o.edge_hidden == 0 {
            return Err(Error::Config(format!(
                "AGCM needs C, K, N and edge_hidden ≥ 1 (C={}, K={}, N={}, edge_hidden={})",
                self.channels, o.prototypes, o.edgeconv_layers, o.edge_hidden
            )));
        }
        if o.k_nn == 0 || o.k_nn >= o.prototypes {
            return Err(Error::Config(format!(
                "k_nn must lie in [1, K−1]; got k_nn={} with K={}",
                o.k_nn, o.prototypes
            )));
        }
        MhaSpec {
            heads: o.heads,
            dim: self.channels,
        }
        .validate()
    }

    /// Closed-form number of scalar parameters of one module.
    pub fn param_count(&self) -> usize {
        let (c, o) = (self.channels, &self.options);
        let attention = Conv2d::param_count(c, o.prototypes, 1);
        let edge_layer = (o.edge_hidden * 2 * c + o.edge_hidden) + (c * o.edge_hidden + c);
        let mha = MhaSpec {
            heads: o.heads,
            dim: c,
        }
        .param_count();
        let mlp = 2 * (c * c + c);
        attention + o.edgeconv_layers * edge_layer + mha + mlp
    }
}

/// Every intermediate of one forward pass, for inspection and testing.
#[derive(Clone, Debug)]
pub struct AgcmTrace {
    pub attention: AttentionMap,
    pub prototypes: PrototypeSet,
    pub graph: KnnGraph,
    pub embedding: Var,
    pub affinity: AffinityMatrix,
    pub kernel: Var,
    pub reweighted: PrototypeSet,
    pub allocation: Var,
    pub refined: PrototypeSet,
    pub scores: Var,
    pub output: Var,
}

/// One AGCM instance with its parameter prefix.
#[derive(Clone, Debug)]
pub struct Agcm {
    pub config: AgcmConfig,
    attention: Conv2d,
    edge_layers: Vec<EdgeConv>,
    kernel: KernelWeight,
}

impl Agcm {
    pub fn new(prefix: &str, config: AgcmConfig) -> Result<Self> {
        config.validate()?;
        let (c, o) = (config.channels, &config.options);
        let attention = Conv2d::pointwise(format!("{prefix}.attn_conv"), c, o.prototypes);
        let edge_layers = (0..o.edgeconv_layers)
            .map(|l| EdgeConv::new(&format!("{prefix}.edgeconv.{l}"), c, o.edge_hidden, c))
            .collect::<Result<_>>()?;
        let kernel = KernelWeight::new(prefix, c, o.heads)?;
        Ok(Self {
            config,
            attention,
            edge_layers,
            kernel,
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.attention.decls();
        d.extend(self.edge_layers.iter().flat_map(EdgeConv::decls));
        d.extend(self.kernel.decls());
        d
    }

    /// Parameters that shift a softmax's logits by the same amount along the
    /// normalized axis: the attention-conv bias and the attention key bias.
    /// Their gradient is identically zero.
    pub fn shift_invariant_params(&self) -> Vec<String> {
        vec![
            format!("{}.bias", self.attention.prefix),
            format!("{}.bias", self.kernel.mha().key_prefix()),
        ]
    }

    pub fn attention_conv(&self) -> &Conv2d {
        &self.attention
    }

    pub fn edge_layers(&self) -> &[EdgeConv] {
        &self.edge_layers
    }

    pub fn kernel_branch(&self) -> &KernelWeight {
        &self.kernel
    }

    /// `I: C×H×W → (C+K)×H×W`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, input: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, params, input)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, params: &Bound, input: Var) -> Result<AgcmTrace> {
        let c = self.config.channels;
        let o = &self.config.options;
        if tape.shape(input).first() != Some(&c) || tape.shape(input).len() != 3 {
            return Err(Error::shape(
                "agcm",
                format!("expected {c}×H×W input, got {:?}", tape.shape(input)),
            ));
        }
        let (prototypes, attention) = generate_prototypes(tape, params, &self.attention, input)?;
        let graph = knn_graph(tape.value(prototypes.values), o.k_nn)?;
        let embedding = embed_prototypes(
            tape,
            params,
            &self.edge_layers,
            prototypes.values,
            &graph,
            o.dynamic_graph,
        )?;
        let affinity = adjacency(tape, embedding)?;
        let kernel = kernel_weight(tape, params, &self.kernel, prototypes)?;
        let reweighted = reweight(tape, prototypes, kernel)?;
        let (refined, allocation) = refine(tape, reweighted, affinity)?;
        let scores = correlate(tape, refined, input, o.correlation)?;
        let output = tape.concat(&[input, scores], 0)?;
        Ok(AgcmTrace {
            attention,
            prototypes,
            graph,
            embedding,
            affinity,
            kernel,
            reweighted,
            allocation,
            refined,
            scores,
            output,
        })
    }
}
