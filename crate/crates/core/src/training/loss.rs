use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied inside the logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean binary cross-entropy of a predicted mask against a binary mask.
///
/// For binary `g` the per-pixel term reduces to `−log q` with
/// `q = g·p + (1 − g)·(1 − p)`, which is what gets recorded.
pub fn bce_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("prediction {:?} vs ground truth {:?}", tape.shape(pred), gt.shape()),
        ));
    }
    if let Some(i) = gt.data().iter().position(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::Data(format!(
            "bce_loss: ground truth must be binary, found {} at element {i}",
            gt.data()[i]
        )));
    }
    let sign = Tensor::new(gt.shape(), gt.data().iter().map(|g| 2.0 * g - 1.0).collect())?;
    let offset = Tensor::new(gt.shape(), gt.data().iter().map(|g| 1.0 - g).collect())?;
    let sign = tape.constant(sign);
    let offset = tape.constant(offset);
    let q = tape.mul(pred, sign)?;
    let q = tape.add(q, offset)?;
    let q = tape.clamp(q, LOG_FLOOR, 1.0)?;
    let l = tape.log(q)?;
    let m = tape.mean_all(l)?;
    tape.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_against_ones_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 3, 3], 0.5));
        let l = bce_loss(&mut tape, p, &Tensor::ones(&[1, 3, 3])).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_is_finite() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
        let gt = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let l = bce_loss(&mut tape, p, &gt).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn soft_ground_truth_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 1, 2], 0.5));
        let gt = Tensor::full(&[1, 1, 2], 0.5);
        assert!(matches!(bce_loss(&mut tape, p, &gt), Err(Error::Data(_))));
    }
}
