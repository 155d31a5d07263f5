//! Finite-difference check of every AGCM stage in isolation and of the whole
//! module, with fault localization when a stage fails.

use std::fmt::Write as _;

use agcm_core::agcm::{
    adjacency, embed_prototypes, generate_prototypes, kernel_weight, knn_graph, refine, reweight, Agcm,
    AffinityMatrix, AgcmOptions, PrototypeSet, Stage,
};
use agcm_core::nn::{Bound, ParamDecl, ParameterStore};
use agcm_core::tensor::battery::{localize_fault, op_cases, Reduction};
use agcm_core::tensor::{grad_check_many, GradCheckOptions};
use agcm_core::{Error, OpKind, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::GradcheckConfig;

pub const GRADCHECK_HEADER: &str = "stage,max_rel_err,tolerance,checked,status";

pub const STAGES: [&str; 6] = [
    "prototype_pooling",
    "adjacency",
    "kernel_weight",
    "reweight",
    "refine",
    "end_to_end",
];

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: &'static str,
    pub tolerance: f64,
    /// `Err` holds the message of a check that could not complete.
    pub outcome: std::result::Result<StageCheck, String>,
}

#[derive(Clone, Debug)]
pub struct StageCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub ops: Vec<OpKind>,
    /// Where the worst error occurred, e.g. `agcm.mha.q.weight[5]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl StageResult {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(c) if c.max_rel_err < self.tolerance)
    }

    pub fn csv_line(&self) -> String {
        let status = if self.passed() { "pass" } else { "fail" };
        match &self.outcome {
            Ok(c) => format!("{},{:e},{:e},{},{status}", self.stage, c.max_rel_err, self.tolerance, c.checked),
            Err(_) => format!("{},NaN,{:e},0,{status}", self.stage, self.tolerance),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub stages: Vec<StageResult>,
    /// Ops implicated by the failing stages; empty when everything passes.
    pub suspects: Vec<OpKind>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.stages.iter().all(StageResult::passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRADCHECK_HEADER}\n");
        for s in &self.stages {
            let _ = writeln!(out, "{}", s.csv_line());
        }
        out
    }
}

pub fn parse_fault(name: Option<&str>) -> Result<Option<OpKind>> {
    name.map(|n| {
        OpKind::from_name(n).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op `{n}`; known ops: {}", known.join(", ")))
        })
    })
    .transpose()
}

/// Scalar probe `Σ R ⊙ (y − y₀)` with fixed random weights `R`, so every
/// output element contributes to the checked gradient. Subtracting the
/// unperturbed output `y₀` leaves the gradient unchanged but keeps the probe
/// near zero, so its rounding error stays far below the finite-difference
/// signal.
fn probe(tape: &mut Tape, y: Var, weights: &Tensor, base: &Tensor) -> Result<Var> {
    let y0 = tape.constant(base.clone());
    let d = tape.sub(y, y0)?;
    let r = tape.constant(weights.clone());
    let z = tape.mul(d, r)?;
    tape.sum_all(z)
}

/// Parameters of one stage: those under test, and those held constant.
struct StageParams {
    checked: Vec<ParamDecl>,
    fixed: Vec<(String, Tensor)>,
}

impl StageParams {
    fn names(&self, leading: &str) -> Vec<String> {
        std::iter::once(leading.to_string())
            .chain(self.checked.iter().map(|d| d.path.clone()))
            .collect()
    }

    fn bind(&self, tape: &mut Tape, vars: &[Var]) -> Bound {
        let mut pairs: Vec<(String, Var)> = self
            .checked
            .iter()
            .map(|d| d.path.clone())
            .zip(vars.iter().copied())
            .collect();
        for (path, t) in &self.fixed {
            pairs.push((path.clone(), tape.constant(t.clone())));
        }
        Bound::from_pairs(pairs)
    }
}

struct Fixture {
    agcm: Agcm,
    store: ParameterStore,
    input: Tensor,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let options = AgcmOptions {
            prototypes: cfg.prototypes,
            edgeconv_layers: cfg.edgeconv_layers,
            k_nn: cfg.k_nn,
            edge_hidden: cfg.edge_hidden,
            heads: cfg.heads,
            ..AgcmOptions::default()
        };
        let agcm = Agcm::new("agcm", options.with_channels(cfg.channels))?;
        let store = ParameterStore::from_decls(&agcm.decls(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let input = Tensor::uniform(&[cfg.channels, cfg.height, cfg.width], -1.0, 1.0, &mut rng);
        Ok(Self {
            agcm,
            store,
            input,
            rng,
        })
    }

    fn value(&self, path: &str) -> Tensor {
        self.store.get(path).expect("declared parameter").clone()
    }

    /// Split `decls` into checked parameters and the shift-invariant ones,
    /// whose exact gradient is zero and whose finite differences are pure
    /// round-off; the latter are held constant.
    fn stage_params(&self, decls: Vec<ParamDecl>) -> (StageParams, Vec<Tensor>) {
        let invariant = self.agcm.shift_invariant_params();
        let (fixed, checked): (Vec<_>, Vec<_>) = decls.into_iter().partition(|d| invariant.contains(&d.path));
        let values = checked.iter().map(|d| self.value(&d.path)).collect();
        let fixed = fixed.into_iter().map(|d| (d.path.clone(), self.value(&d.path))).collect();
        (StageParams { checked, fixed }, values)
    }

    /// Intermediate values of one forward pass, used as inputs of the
    /// isolated stages.
    fn intermediates(&self) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let x = tape.constant(self.input.clone());
        let trace = self.agcm.forward_traced(&mut tape, &params, x)?;
        Ok((
            tape.value(trace.prototypes.values).clone(),
            tape.value(trace.kernel).clone(),
            tape.value(trace.reweighted.values).clone(),
            tape.value(trace.affinity.values).clone(),
        ))
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Check `f`, which maps the stage inputs to the stage output, through a
/// random probe of that output.
fn run_stage<F>(
    stage: &'static str,
    tolerance: f64,
    names: Vec<String>,
    inputs: Vec<Tensor>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    f: F,
) -> StageResult
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut check = || -> Result<StageCheck> {
        let base = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = f(&mut tape, &vars)?;
            tape.value(y).clone()
        };
        let weights = Tensor::uniform(base.shape(), -1.0, 1.0, rng);
        let r = grad_check_many(
            |tape, v| {
                let y = f(tape, v)?;
                probe(tape, y, &weights, &base)
            },
            &inputs,
            opts,
        )?;
        Ok(StageCheck {
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            ops: r.ops,
            worst: format!("{}[{}]", names[r.worst.0], r.worst.1),
            analytic: r.analytic,
            numeric: r.numeric,
        })
    };
    StageResult {
        stage,
        tolerance,
        outcome: check().map_err(|e| e.to_string()),
    }
}

/// Check every stage. Failing stages are cross-referenced with per-op
/// checks to name the ops whose backward rules disagree with finite
/// differences.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let fault = parse_fault(cfg.fault.as_deref())?;
    if cfg.height * cfg.width > 64 {
        log::warn!("gradcheck on {}×{} features may be slow", cfg.height, cfg.width);
    }
    let fx = Fixture::new(cfg)?;
    let opts = GradCheckOptions {
        h: cfg.h,
        fault,
        seed: cfg.seed,
        ..Default::default()
    };
    let (p, w, p_rw, a) = fx.intermediates()?;
    let mut rng = fx.rng.clone();
    let k_nn = cfg.k_nn;
    let tol = cfg.tolerance;
    let mut stages = Vec::with_capacity(STAGES.len());

    let conv = fx.agcm.attention_conv().clone();
    let (sp, values) = fx.stage_params(conv.decls());
    let mut inputs = vec![fx.input.clone()];
    inputs.extend(values);
    stages.push(run_stage(STAGES[0], tol, sp.names("input"), inputs, &opts, &mut rng, |tape, v| {
        let params = sp.bind(tape, &v[1..]);
        let (p, _) = generate_prototypes(tape, &params, &conv, v[0])?;
        Ok(p.values)
    }));

    let layers = fx.agcm.edge_layers().to_vec();
    let (sp, values) = fx.stage_params(layers.iter().flat_map(|l| l.decls()).collect());
    let mut inputs = vec![p.clone()];
    inputs.extend(values);
    stages.push(run_stage(STAGES[1], tol, sp.names("prototypes"), inputs, &opts, &mut rng, |tape, v| {
        let params = sp.bind(tape, &v[1..]);
        let graph = knn_graph(tape.value(v[0]), k_nn)?;
        let e = embed_prototypes(tape, &params, &layers, v[0], &graph, false)?;
        let a = adjacency(tape, e)?;
        Ok(a.values)
    }));

    let branch = fx.agcm.kernel_branch().clone();
    let (sp, values) = fx.stage_params(branch.decls());
    let mut inputs = vec![p.clone()];
    inputs.extend(values);
    stages.push(run_stage(STAGES[2], tol, sp.names("prototypes"), inputs, &opts, &mut rng, |tape, v| {
        let params = sp.bind(tape, &v[1..]);
        let raw = PrototypeSet {
            values: v[0],
            stage: Stage::Raw,
        };
        let w = kernel_weight(tape, &params, &branch, raw)?;
        Ok(w)
    }));

    stages.push(run_stage(STAGES[3], tol, names(&["prototypes", "kernel"]), vec![p, w], &opts, &mut rng, |tape, v| {
        let raw = PrototypeSet {
            values: v[0],
            stage: Stage::Raw,
        };
        let p = reweight(tape, raw, v[1])?;
        Ok(p.values)
    }));

    stages.push(run_stage(STAGES[4], tol, names(&["reweighted", "affinity"]), vec![p_rw, a], &opts, &mut rng, |tape, v| {
        let p = PrototypeSet {
            values: v[0],
            stage: Stage::Reweighted,
        };
        let (refined, _) = refine(tape, p, AffinityMatrix { values: v[1] })?;
        Ok(refined.values)
    }));

    let (sp, values) = fx.stage_params(fx.agcm.decls());
    let mut inputs = vec![fx.input.clone()];
    inputs.extend(values);
    let agcm = &fx.agcm;
    stages.push(run_stage(STAGES[5], cfg.end_to_end_tolerance, sp.names("input"), inputs, &opts, &mut rng, |tape, v| {
        let params = sp.bind(tape, &v[1..]);
        let out = agcm.forward(tape, &params, v[0])?;
        Ok(out)
    }));

    let suspects = if stages.iter().all(StageResult::passed) {
        Vec::new()
    } else {
        suspect_ops(&stages, cfg.seed, fault)?
    };
    Ok(GradcheckReport { stages, suspects })
}

fn suspect_ops(stages: &[StageResult], seed: u64, fault: Option<OpKind>) -> Result<Vec<OpKind>> {
    let mut results: Vec<(Vec<OpKind>, bool)> = stages
        .iter()
        .filter_map(|s| s.outcome.as_ref().ok().map(|c| (c.ops.clone(), s.passed())))
        .collect();
    for case in op_cases() {
        for reduction in [Reduction::WeightedSum, Reduction::Projection] {
            let r = case.check(reduction, seed, fault)?;
            results.push((r.ops, r.max_rel_err < 1e-4));
        }
    }
    Ok(localize_fault(&results))
}
