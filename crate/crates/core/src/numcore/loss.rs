use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Predictions are clamped to `[BCE_FLOOR, 1 - BCE_FLOOR]` before the log.
pub const BCE_FLOOR: f64 = 1e-7;

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err(format!("loss over {} predictions and {} targets", pred.len(), target.len())));
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_FLOOR, 1.0 - BCE_FLOOR);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Differentiable mean binary cross-entropy of `pred` against constant targets.
pub fn bce_on_tape(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = tape.shape(pred);
    if shape != target.shape() {
        return Err(shape_err(format!("bce: {shape:?} vs {:?}", target.shape())));
    }
    let p = tape.clamp(pred, BCE_FLOOR, 1.0 - BCE_FLOOR);
    let t = tape.leaf(target.clone());
    let one_minus_t = tape.leaf(target.map(|v| 1.0 - v));
    let log_p = tape.ln(p);
    let one_minus_p = tape.offset(tape.scale(p, -1.0), 1.0);
    let log_q = tape.ln(one_minus_p);
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(one_minus_t, log_q)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(tape.mean(s), -1.0))
}

pub fn mse_on_tape(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.leaf(target.clone());
    let d = tape.sub(pred, t)?;
    Ok(tape.mean(tape.square(d)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_prediction_costs_ln2() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn exact_prediction_hits_the_floor() {
        let l = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l > 0.0 && l < 2e-7);
    }

    #[test]
    fn hand_evaluated_pair() {
        // -(ln 0.9 + ln 0.9) / 2
        let l = bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-14);
    }

    #[test]
    fn tape_matches_plain() {
        let pred = [0.2, 0.7, 0.999_999_99];
        let target = [0.0, 1.0, 0.3];
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(pred.to_vec()).unwrap());
        let l = bce_on_tape(&tape, p, &Tensor::vector(target.to_vec()).unwrap()).unwrap();
        assert!((tape.item(l).unwrap() - bce_loss(&pred, &target).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        assert!(mse_loss(&[], &[]).is_err());
    }
}
