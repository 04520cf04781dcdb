use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor4, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Records `build` over `values` and returns `<cotangent, output>` plus the tape.
fn evaluate<F>(values: &[Tensor4<f64>], build: &F, cotangent: &[f64]) -> Result<(f64, Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let phi = tape.value(out).data().iter().zip(cotangent).map(|(a, b)| a * b).sum();
    Ok((phi, tape, vars, out))
}

/// Checks every input element of `build` in 64-bit.
///
/// `build` records a computation over `inputs` (all registered as parameters)
/// and returns its output. Non-scalar outputs are reduced against a fixed
/// pseudo-random cotangent so that every output element is exercised.
pub fn grad_check<F>(inputs: &[Tensor4<f64>], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, probe, _, out) = evaluate(inputs, &build, &[])?;
    let out_len = probe.value(out).len();
    drop(probe);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let cotangent: Vec<f64> = (0..out_len).map(|_| rng.gen_range(0.5..1.5)).collect();

    let (_, mut tape, vars, out) = evaluate(inputs, &build, &cotangent)?;
    tape.backward_with(out, &cotangent)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe_values = inputs.to_vec();
    for (ti, (t, grads)) in inputs.iter().zip(&analytic).enumerate() {
        for (e, (&orig, &a)) in t.data().iter().zip(grads).enumerate() {
            probe_values[ti].data_mut()[e] = orig + step;
            let plus = evaluate(&probe_values, &build, &cotangent)?.0;
            probe_values[ti].data_mut()[e] = orig - step;
            let minus = evaluate(&probe_values, &build, &cotangent)?.0;
            probe_values[ti].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, e));
            }
        }
    }
    Ok(report)
}
