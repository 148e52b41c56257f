use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub passed: bool,
    pub element_count: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::arg(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    Ok((tape, vars, out))
}

/// Checks the reverse-mode gradient of the scalar function `f` against
/// central finite differences `(f(x+ε) − f(x−ε)) / 2ε`, element by element.
///
/// The relative difference uses the denominator `max(|a|, |b|, 1e-8)`.
/// `f` must be deterministic; run it with dropout disabled.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::arg("epsilon must be positive"));
    }
    let (tape, vars, out) = eval_scalar(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut perturbed = inputs.to_vec();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut count = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + epsilon;
            let (t, _, o) = eval_scalar(&f, &perturbed)?;
            let plus = t.value(o).item();
            perturbed[i].data_mut()[j] = orig - epsilon;
            let (t, _, o) = eval_scalar(&f, &perturbed)?;
            let minus = t.value(o).item();
            perturbed[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic[i].data()[j];
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            count += 1;
        }
    }
    Ok(GradCheckReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        passed: max_rel <= tolerance,
        element_count: count,
    })
}
