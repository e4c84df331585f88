use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, over every coordinate of every input.
///
/// `f` receives a tape and one variable per entry of `points`; it must
/// return a scalar.
pub fn grad_check<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("grad_check eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = tape.with_value(out, |t| t.data()[0]);
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation"));
        }
        Ok(value)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (idx, point) in points.iter().enumerate() {
        for coord in 0..point.len() {
            let x0 = point.data()[coord];
            work[idx].data_mut()[coord] = x0 + eps;
            let plus = eval(&work)?;
            work[idx].data_mut()[coord] = x0 - eps;
            let minus = eval(&work)?;
            work[idx].data_mut()[coord] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx].data()[coord];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (idx, coord);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn linear_function_is_near_exact() {
        let w = Tensor::matrix(1, 3, vec![0.5, -1.25, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let w = t.constant(w.clone());
                let y = t.matmul(w, v[0])?;
                t.sum(y)
            },
            &[Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let r = grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
