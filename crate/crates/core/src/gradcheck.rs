//! Central finite-difference verification of analytic gradients.

use crate::error::{input, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max |analytic - cd| / max(|analytic|, |cd|, 1e-8)` over every input element.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Analytic and central-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn eval<T: Real, F>(f: &F, inputs: &[Tensor<T>], with_grad: bool) -> Result<(f64, Option<Vec<Tensor<T>>>)>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss);
    if value.numel() != 1 {
        return Err(input(format!("gradcheck: function returned shape {:?}, not a scalar", value.shape())));
    }
    let v = value.data()[0].f64();
    if !with_grad {
        return Ok((v, None));
    }
    let grads = if g.requires_grad(loss) {
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&var, t)| g.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        inputs.iter().map(|t| Tensor::zeros(t.shape())).collect()
    };
    Ok((v, Some(grads)))
}

/// Compares the reverse-mode gradient of the scalar function `f` against
/// central differences with step `eps` on every element of every input.
pub fn gradcheck_report<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    gradcheck_report_steps(f, inputs, &vec![eps; inputs.len()])
}

/// As [`gradcheck_report`], with its own step per input. Inputs the function
/// is linear in can take a large step, which keeps rounding noise down.
pub fn gradcheck_report_steps<T: Real, F>(f: F, inputs: &[Tensor<T>], steps: &[f64]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if steps.len() != inputs.len() {
        return Err(input(format!("gradcheck: {} steps for {} inputs", steps.len(), inputs.len())));
    }
    if let Some(e) = steps.iter().find(|e| !(**e > 0.0)) {
        return Err(input(format!("gradcheck: eps must be positive, got {}", e)));
    }
    let (v0, grads) = eval(&f, inputs, true)?;
    let (v1, _) = eval(&f, inputs, false)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(input("gradcheck: function is not deterministic across identical calls"));
    }
    let grads = grads.expect("requested gradients");
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), checked: 0 };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let eps = steps[ti];
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + T::c(eps);
            let (fp, _) = eval(&f, &work, false)?;
            work[ti].data_mut()[j] = orig - T::c(eps);
            let (fm, _) = eval(&f, &work, false)?;
            work[ti].data_mut()[j] = orig;
            // The realised step, which differs from eps after rounding to T.
            let h = (orig + T::c(eps)).f64() - (orig - T::c(eps)).f64();
            let cd = (fp - fm) / h;
            let a = grads[ti].data()[j].f64();
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, j));
                report.worst_values = (a, cd);
            }
        }
    }
    Ok(report)
}

/// Maximum relative gradient error; see [`gradcheck_report`].
pub fn gradcheck<T: Real, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    Ok(gradcheck_report(f, inputs, eps)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 2], |i| i[3] as f64);
        let err = gradcheck(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| 0.3 + (i[1] * 4 + i[2] * 2 + i[3]) as f64 * 0.17);
        let err = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn stochastic_function_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::<f64>::full([1, 1, 1, 2], 1.0);
        let r = gradcheck(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.scale(v[0], calls.get() as f64);
                Ok(g.sum(s))
            },
            &[x],
            1e-6,
        );
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }
}
