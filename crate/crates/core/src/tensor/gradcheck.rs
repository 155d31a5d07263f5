//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many randomly chosen elements per input (all when `None`).
    pub max_elements: Option<usize>,
    /// Seed for element sampling.
    pub seed: u64,
    /// Corrupt the backward rule of one op kind (negative-control hook).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_elements: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input and flat element where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Op kinds recorded by the checked function.
    pub ops: Vec<OpKind>,
    /// Every checked element.
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item().map_err(|_| {
        Error::Usage(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            tape.value(v).shape()
        ))
    })
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..Default::default()
    };
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_err)
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient check over several inputs at once. `f` receives one leaf per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let ops = tape.op_kinds();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        ops,
        entries: Vec::new(),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_elements {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let base = input.data()[e];
            work[which].data_mut()[e] = base + opts.h;
            let plus = eval(&work);
            work[which].data_mut()[e] = base - opts.h;
            let minus = eval(&work);
            work[which].data_mut()[e] = base;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    return Err(Error::Numeric(format!(
                        "non-finite function value perturbing input {which}, element {e}"
                    )))
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[which].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.entries.push(GradCheckEntry {
                input: which,
                element: e,
                analytic: a,
                numeric,
                rel_err: err,
            });
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (which, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
