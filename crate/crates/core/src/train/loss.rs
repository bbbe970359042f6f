use crate::error::{Error, Result};
use crate::metrics::compensated_sum;
use crate::model::LossMode;
use crate::tensor::{Graph, Operation, Real, Tensor, Var};

struct ReconstructionLossOp {
    mode: LossMode,
    eps: f64,
}

impl<T: Real> Operation<T> for ReconstructionLossOp {
    fn name(&self) -> &'static str {
        match self.mode {
            LossMode::Charbonnier => "charbonnier_loss",
            LossMode::Mse => "mse_loss",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let scale = grad_output.data()[0] / T::from_f64(pred.len() as f64);
        let eps2 = T::from_f64(self.eps * self.eps);
        let two = T::from_f64(2.0);
        let d: Vec<T> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let diff = p - t;
                match self.mode {
                    LossMode::Charbonnier => diff / (diff * diff + eps2).sqrt() * scale,
                    LossMode::Mse => two * diff * scale,
                }
            })
            .collect();
        let dp = Tensor::from_vec(pred.shape(), d).expect("shape");
        let dt = needs[1].then(|| dp.map(|v| -v));
        vec![needs[0].then_some(dp), dt]
    }
}

/// Mean per-element reconstruction loss: `sqrt(diff^2 + eps^2)` for
/// Charbonnier, `diff^2` for MSE.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mode: LossMode, eps: f64) -> Result<Var> {
    let (sp, st) = (g.shape(pred), g.shape(target));
    if sp != st {
        return Err(Error::shape("reconstruction_loss", sp, st));
    }
    let eps2 = eps * eps;
    let total = compensated_sum(g.value(pred).data().iter().zip(g.value(target).data()).map(|(&p, &t)| {
        let d = (p - t).to_f64();
        match mode {
            LossMode::Charbonnier => (d * d + eps2).sqrt(),
            LossMode::Mse => d * d,
        }
    }));
    let value = Tensor::scalar(T::from_f64(total / sp.numel().max(1) as f64));
    Ok(g.record(ReconstructionLossOp { mode, eps }, &[pred, target], value))
}
