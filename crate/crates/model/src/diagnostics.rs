use gridcascade::dataset::GraphSample;
use gridcascade_autodiff::Tape;

use crate::error::Result;
use crate::eval::Mode;
use crate::loss::{severity_weights, LossConfig};
use crate::model::Model;
use crate::train::batch_loss;

/// Outcome of comparing analytic parameter gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central-difference check of the training loss over every parameter entry.
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
/// Multi-round batches use ground truth in every round.
pub fn gradient_check(
    model: &Model,
    samples: &[&GraphSample],
    loss_cfg: &LossConfig,
    mode: Mode,
    epoch: usize,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let owned: Vec<GraphSample> = samples.iter().map(|&s| s.clone()).collect();
    let sev_w = severity_weights(&owned);
    let loss_of = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let (loss, _) = batch_loss(m, &mut t, samples, loss_cfg, mode, epoch, sev_w, None, &|_, _| true)?;
        Ok(t.scalar(loss))
    };
    let mut t = Tape::new();
    let (loss, _) = batch_loss(model, &mut t, samples, loss_cfg, mode, epoch, sev_w, None, &|_, _| true)?;
    let grads = t.backward(loss)?.param_grads(&model.store);
    let mut probe = model.clone();
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: String::new() };
    for (k, id) in model.store.ids().enumerate() {
        let shape = model.store.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let base = model.store.value(id)[[r, c]];
                probe.store.value_mut(id)[[r, c]] = base + h;
                let plus = loss_of(&probe)?;
                probe.store.value_mut(id)[[r, c]] = base - h;
                let minus = loss_of(&probe)?;
                probe.store.value_mut(id)[[r, c]] = base;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads[k][[r, c]];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                out.checked += 1;
                if err > out.max_rel_err {
                    out.max_rel_err = err;
                    out.worst = format!("{}[{r},{c}]: analytic {analytic:e}, numeric {numeric:e}", model.store.name(id));
                }
            }
        }
    }
    Ok(out)
}
