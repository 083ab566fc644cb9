use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±eps probe crossed a non-smooth point (relu kink,
    /// max switch, pooling argmax change) and were left out.
    pub skipped: usize,
    /// `(input, element)` with the worst error.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of `build` against central differences
/// over every element of every input.
///
/// The built output is reduced to a scalar by a fixed random projection.
/// Errors are `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], proj: Option<&[f64]>| -> Result<(Graph, Var, Vec<Var>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let weights = match proj {
            Some(p) => p.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6bd_c4ec);
                (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        };
        let loss = g.weighted_sum(out, weights.clone())?;
        Ok((g, loss, vars, weights))
    };

    let (mut g0, loss0, vars0, proj) = eval(inputs, None)?;
    g0.backward(loss0)?;
    let sig0 = g0.kink_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars0.iter().enumerate() {
        let analytic = g0.grad(*var).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (gp, lp, _, _) = eval(&probe, Some(&proj))?;
            probe[i].data_mut()[j] = orig - eps;
            let (gm, lm, _, _) = eval(&probe, Some(&proj))?;
            probe[i].data_mut()[j] = orig;
            if gp.kink_signature() != sig0 || gm.kink_signature() != sig0 {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((i, j));
                }
            }
        }
    }
    Ok(report)
}
