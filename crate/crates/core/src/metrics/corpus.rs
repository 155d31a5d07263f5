use std::fmt::Write as _;

use super::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRow {
    pub id: String,
    pub report: EvalReport,
}

/// Per-image measures over an evaluation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusReport {
    pub rows: Vec<CorpusRow>,
}

pub const CSV_HEADER: &str = "id,f_beta,mae,e_measure,s_measure";

impl CorpusReport {
    /// Evaluate `(id, prediction, ground truth)` triples.
    pub fn evaluate<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, &'a Tensor, &'a Tensor)>,
    {
        let rows = items
            .into_iter()
            .map(|(id, pred, gt)| {
                let report = evaluate(pred, gt).map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("image {id}: {m}")),
                    other => other,
                })?;
                Ok(CorpusRow { id, report })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Column means; all zeros for an empty corpus.
    pub fn mean(&self) -> EvalReport {
        let n = self.rows.len();
        if n == 0 {
            return EvalReport::default();
        }
        let mut m = EvalReport::default();
        for r in &self.rows {
            m.f_beta += r.report.f_beta;
            m.mae += r.report.mae;
            m.e_measure += r.report.e_measure;
            m.s_measure += r.report.s_measure;
        }
        let n = n as f64;
        EvalReport {
            f_beta: m.f_beta / n,
            mae: m.mae / n,
            e_measure: m.e_measure / n,
            s_measure: m.s_measure / n,
        }
    }

    /// One row per image followed by a `mean` row. Values are written in
    /// shortest round-trip form so they parse back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let line = |out: &mut String, id: &str, r: &EvalReport| {
            let _ = writeln!(out, "{id},{},{},{},{}", r.f_beta, r.mae, r.e_measure, r.s_measure);
        };
        for row in &self.rows {
            line(&mut out, &row.id, &row.report);
        }
        line(&mut out, "mean", &self.mean());
        out
    }
}
