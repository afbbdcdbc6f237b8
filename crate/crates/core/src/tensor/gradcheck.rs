//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor), where
    /// `floor` is 1e-3 of the largest analytic magnitude (at least 1e-12), so
    /// near-zero entries are judged against the gradient's overall scale.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    /// (analytic, numeric) at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn eval(params: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with half-width `step`, over every element of every
/// parameter.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    drop(g);

    let again = eval(params, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Graph(format!(
            "grad_check: closure is not deterministic ({base} vs {again})"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let scale = vars
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(params[pi].shape());
                &zeros
            }
        };
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            probe[pi].data_mut()[e] = orig + step;
            let plus = eval(&probe, &f)?;
            probe[pi].data_mut()[e] = orig - step;
            let minus = eval(&probe, &f)?;
            probe[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
                report.worst_values = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_essentially_exact() {
        let p = Tensor::new([3], vec![0.7, -1.3, 2.1]).unwrap();
        let r = grad_check(&[p], 1e-6, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let p = Tensor::new([3], vec![0.7, -1.3, 2.1]).unwrap();
        // Forward is x^3 but the declared derivative is 2x.
        let r = grad_check(&[p], 1e-6, |g, v| {
            let c = g.map(v[0], |x| (x * x * x, 2.0 * x))?;
            g.sum_all(c)
        })
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn nondeterministic_closure_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let p = Tensor::new([1], vec![1.0]).unwrap();
        let err = grad_check(&[p], 1e-6, |g, v| {
            calls.set(calls.get() + 1.0);
            let s = g.scale(v[0], calls.get())?;
            g.sum_all(s)
        })
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"));
    }
}
