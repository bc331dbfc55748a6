//! Central finite differences of the model loss, per parameter tensor.

use serde::{Deserialize, Serialize};

use crate::data::MqarBatch;
use crate::error::Result;
use crate::model::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / ‖numeric‖` over the checked entries.
    pub rel_err: f64,
    pub checked: usize,
    pub numeric_norm: f64,
}

/// Checks up to `max_entries` evenly spaced entries of every tensor.
pub fn model_gradcheck(model: &ToyModel, data: &MqarBatch, step: f64, max_entries: usize) -> Result<Vec<TensorCheck>> {
    let (_, grads) = model.loss_and_grad(data)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params.tensors.len());
    for (ti, t) in model.params.tensors.iter().enumerate() {
        let stride = t.len().div_ceil(max_entries.max(1)).max(1);
        let (mut diff, mut norm, mut checked) = (0.0, 0.0, 0);
        for i in (0..t.len()).step_by(stride) {
            let orig = t.data[i];
            probe.params.tensors[ti].data[i] = orig + step;
            let up = probe.evaluate(data)?.loss;
            probe.params.tensors[ti].data[i] = orig - step;
            let down = probe.evaluate(data)?.loss;
            probe.params.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors[ti].data[i];
            diff += (analytic - numeric).powi(2);
            norm += numeric * numeric;
            checked += 1;
        }
        let norm = norm.sqrt();
        out.push(TensorCheck {
            name: t.name.clone(),
            rel_err: diff.sqrt() / (norm + 1e-8),
            checked,
            numeric_norm: norm,
        });
    }
    Ok(out)
}
