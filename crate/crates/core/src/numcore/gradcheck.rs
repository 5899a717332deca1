use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Worst coordinate found by [`grad_check_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose difference stencil crossed a ReLU or clamp kink.
    pub non_smooth: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, returning the maximum relative error over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)?;
    Ok(report.max_rel_error)
}

/// One coordinate of a gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradEntry {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Both stencil points lie on the same linear piece as the point itself.
    pub smooth: bool,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Every coordinate's analytic and central-difference derivative, plus the
/// function value at the point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub value: f64,
    pub entries: Vec<GradEntry>,
}

pub fn grad_compare_many<F>(f: F, points: &[Tensor], step: f64) -> Result<GradComparison>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check step {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<(f64, Vec<i8>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok((tape.item(out)?, tape.piece_pattern()))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.item(out)?;
    let pattern = tape.piece_pattern();
    let grads = tape.backward(out).map_err(|e| match e {
        Error::NonFinite(what) => Error::Numeric(format!("non-finite {what}")),
        other => other,
    })?;

    let mut entries = Vec::new();
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for ci in 0..points[ti].len() {
            let orig = points[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let (plus, plus_pattern) = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let (minus, minus_pattern) = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at ({ti}, {ci})")));
            }
            let smooth = plus_pattern == pattern && minus_pattern == pattern;
            entries.push(GradEntry { tensor: ti, coord: ci, analytic: analytic.data()[ci], numeric, smooth });
        }
    }
    Ok(GradComparison { value, entries })
}

/// Multi-input form of [`grad_check`].
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let cmp = grad_compare_many(f, points, step)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: cmp.entries.len(),
        non_smooth: cmp.entries.iter().filter(|e| !e.smooth).count(),
    };
    for e in &cmp.entries {
        let err = e.rel_error();
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (e.tensor, e.coord);
            report.analytic = e.analytic;
            report.numeric = e.numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let err = grad_check(|t, _x| Ok(t.leaf(Tensor::scalar(4.0))), &p, GRAD_CHECK_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn half_squared_norm() {
        let p = Tensor::vector(vec![0.3, -0.7, 1.9, 2.5]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.square(x);
                Ok(t.scale(t.sum(sq), 0.5))
            },
            &p,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu's adjoint is wrong exactly at a kink: f(x) = relu(x) at x = 0
        // has one-sided slopes 0 and 1, the central difference gives 0.5.
        let p = Tensor::vector(vec![0.0]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(t.relu(x))), &p, GRAD_CHECK_STEP).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn kink_crossings_are_flagged() {
        let points = [Tensor::vector(vec![0.0, 0.5, -3e-6]).unwrap()];
        let cmp = grad_compare_many(|t, x| Ok(t.sum(t.relu(x[0]))), &points, GRAD_CHECK_STEP).unwrap();
        let smooth: Vec<bool> = cmp.entries.iter().map(|e| e.smooth).collect();
        assert_eq!(smooth, [false, true, false]);
        let report = grad_check_many(|t, x| Ok(t.sum(t.relu(x[0]))), &points, GRAD_CHECK_STEP).unwrap();
        assert_eq!(report.non_smooth, 2);
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &p, 0.0).is_err());
    }
}
