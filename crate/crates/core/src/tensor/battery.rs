//! Gradient checks of every differentiable op in isolation, and fault
//! localization from a set of pass/fail results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_many, ConvGeometry, GradCheckOptions, GradCheckReport, OpKind, Tape, Tensor, Var};
use crate::error::Result;

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One op applied to random inputs drawn uniformly from `[lo, hi)`.
#[derive(Clone)]
pub struct OpCase {
    pub kind: OpKind,
    pub inputs: Vec<(Vec<usize>, f64, f64)>,
    build: Build,
}

/// How an op's output is turned into a scalar. Two reductions with disjoint
/// op sets let a faulty reduction op be told apart from the op under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// `sum(y ⊙ r)`.
    WeightedSum,
    /// `reshape(y, 1×n) · r`.
    Projection,
}

fn case(kind: OpKind, inputs: &[(&[usize], f64, f64)], build: Build) -> OpCase {
    OpCase {
        kind,
        inputs: inputs.iter().map(|&(s, lo, hi)| (s.to_vec(), lo, hi)).collect(),
        build,
    }
}

/// One case per differentiable op kind.
pub fn op_cases() -> Vec<OpCase> {
    use OpKind::*;
    const U: f64 = 1.0;
    vec![
        case(MatMul, &[(&[3, 4], -U, U), (&[4, 2], -U, U)], |t, v| t.matmul(v[0], v[1])),
        case(Transpose, &[(&[3, 4], -U, U)], |t, v| t.transpose(v[0])),
        case(Reshape, &[(&[2, 6], -U, U)], |t, v| t.reshape(v[0], &[3, 4])),
        case(Add, &[(&[3, 4], -U, U), (&[1, 4], -U, U)], |t, v| t.add(v[0], v[1])),
        case(Sub, &[(&[3, 4], -U, U), (&[3, 1], -U, U)], |t, v| t.sub(v[0], v[1])),
        case(Mul, &[(&[3, 4], -U, U), (&[3, 4], -U, U)], |t, v| t.mul(v[0], v[1])),
        case(Div, &[(&[3, 4], -U, U), (&[3, 4], 0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        case(Scale, &[(&[5], -U, U)], |t, v| t.scale(v[0], -1.7)),
        case(AddScalar, &[(&[5], -U, U)], |t, v| t.add_scalar(v[0], 0.3)),
        case(Softmax, &[(&[3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        case(Conv2d, &[(&[2, 5, 5], -U, U), (&[3, 2, 3, 3], -U, U)], |t, v| {
            t.conv2d(v[0], v[1], ConvGeometry::new(2, 1, 1))
        }),
        case(Sum, &[(&[3, 4], -U, U)], |t, v| t.sum_axis(v[0], 0)),
        case(Mean, &[(&[3, 4], -U, U)], |t, v| t.mean_axis(v[0], 1)),
        case(Max, &[(&[3, 4], -U, U)], |t, v| Ok(t.max_axis(v[0], 1)?.0)),
        case(Relu, &[(&[6], -U, U)], |t, v| t.relu(v[0])),
        case(Sigmoid, &[(&[6], -3.0, 3.0)], |t, v| t.sigmoid(v[0])),
        case(Exp, &[(&[6], -2.0, 2.0)], |t, v| t.exp(v[0])),
        case(Log, &[(&[6], 0.2, 3.0)], |t, v| t.log(v[0])),
        case(Sqrt, &[(&[6], 0.2, 3.0)], |t, v| t.sqrt(v[0])),
        case(Clamp, &[(&[6], -U, U)], |t, v| t.clamp(v[0], -0.5, 0.5)),
        case(Concat, &[(&[2, 3], -U, U), (&[1, 3], -U, U)], |t, v| t.concat(&[v[0], v[1]], 0)),
        case(Slice, &[(&[3, 5], -U, U)], |t, v| t.slice(v[0], 1, 1, 4)),
        case(IndexSelect, &[(&[3, 4], -U, U)], |t, v| t.index_select(v[0], 1, &[2, 0, 2, 3])),
        case(Upsample, &[(&[2, 2, 3], -U, U)], |t, v| t.upsample2x(v[0])),
    ]
}

impl OpCase {
    pub fn sample_inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.inputs
            .iter()
            .map(|(shape, lo, hi)| Tensor::uniform(shape, *lo, *hi, rng))
            .collect()
    }

    /// Gradient check of this op under `reduction`, with inputs and reduction
    /// weights drawn from `seed`.
    pub fn check(&self, reduction: Reduction, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = self.sample_inputs(&mut rng);
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = (self.build)(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let n: usize = out_shape.iter().product();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = self.build;
        let opts = GradCheckOptions {
            fault,
            ..Default::default()
        };
        grad_check_many(
            |tape, vars| {
                let y = build(tape, vars)?;
                match reduction {
                    Reduction::WeightedSum => {
                        let r = tape.constant(Tensor::new(&out_shape, weights.clone())?);
                        let z = tape.mul(y, r)?;
                        tape.sum_all(z)
                    }
                    Reduction::Projection => {
                        let r = tape.constant(Tensor::new(&[n, 1], weights.clone())?);
                        let row = tape.reshape(y, &[1, n])?;
                        tape.matmul(row, r)
                    }
                }
            },
            &inputs,
            &opts,
        )
    }
}

/// Ops present in every failing check and in no passing one.
pub fn localize_fault(results: &[(Vec<OpKind>, bool)]) -> Vec<OpKind> {
    let mut suspects: Option<Vec<OpKind>> = None;
    for (ops, passed) in results {
        if !passed {
            suspects = Some(match suspects {
                None => ops.clone(),
                Some(s) => s.into_iter().filter(|k| ops.contains(k)).collect(),
            });
        }
    }
    let mut suspects = suspects.unwrap_or_default();
    for (ops, passed) in results {
        if *passed {
            suspects.retain(|k| !ops.contains(k));
        }
    }
    suspects.sort_by_key(|k| k.name());
    suspects.dedup();
    suspects.retain(|&k| k != OpKind::Leaf);
    suspects
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_case() {
        let kinds: Vec<OpKind> = op_cases().iter().map(|c| c.kind).collect();
        for k in OpKind::ALL {
            assert!(k == OpKind::Leaf || kinds.contains(&k), "{k}");
        }
    }

    #[test]
    fn localizes_reduction_op_fault() {
        for fault in [OpKind::Mul, OpKind::Sum, OpKind::MatMul, OpKind::Exp] {
            let mut results = Vec::new();
            for c in op_cases() {
                for red in [Reduction::WeightedSum, Reduction::Projection] {
                    let r = c.check(red, 1, Some(fault)).unwrap();
                    results.push((r.ops.clone(), r.max_rel_err < 1e-4));
                }
            }
            assert_eq!(localize_fault(&results), vec![fault]);
        }
    }
}
