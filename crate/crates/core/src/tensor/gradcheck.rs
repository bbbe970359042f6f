use rand::seq::SliceRandom;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_probes: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Maximum of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_error: f64,
    /// Coordinates compared.
    pub probes: usize,
    /// Coordinates whose `+step` or `-step` evaluation changed a discrete
    /// branch (a ReLU region, a pooling winner, an interpolation cell).
    /// They are replaced by further coordinates of the same tensor while
    /// any remain.
    pub kinks: usize,
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives one leaf per input and returns any tensor; non-scalar
/// outputs are contracted with fixed random weights so every output element
/// takes part. Returns the maximum over probed coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(inputs, build, opts)?.max_error)
}

/// [`finite_diff_check`] with probe statistics.
pub fn finite_diff_report<F>(inputs: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = rng::seeded(opts.seed);

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &leaves)?;
    let base_signature = g.branch_signature();
    let out_shape = g.shape(out);
    let weights = (out_shape.numel() > 1).then(|| Tensor::<f64>::rand_uniform(out_shape, -1.0, 1.0, &mut rng));
    let loss = match &weights {
        Some(w) => g.weighted_sum(out, w)?,
        None => out,
    };
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&v| g.grad(v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        let value = match &weights {
            Some(w) => g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            None => g.value(out).data()[0],
        };
        Ok((value, g.branch_signature()))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (t, grad) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..inputs[t].len()).collect();
        order.shuffle(&mut rng);
        let mut done = 0;
        for i in order {
            if done == opts.max_probes {
                break;
            }
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.step;
            let (plus, sig_plus) = eval(&work)?;
            work[t].data_mut()[i] = orig - opts.step;
            let (minus, sig_minus) = eval(&work)?;
            work[t].data_mut()[i] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.max_error = report.max_error.max(err);
            report.probes += 1;
            done += 1;
        }
    }
    Ok(report)
}
