//! Training objective: token cross-entropy plus the α-weighted load-balance
//! term `E · Σ F_i · G_i`, averaged over MoE layers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{EvoError, Result};
use crate::model::Forward;
use crate::router::{RouteVars, RoutingOutcome};

pub const DEFAULT_ALPHA: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub regressive: f64,
    pub aux: f64,
    pub per_layer_aux: Vec<f64>,
    pub alpha: f64,
}

/// Mean next-token cross-entropy; `-1` targets are skipped.
pub fn autoregressive_loss(tape: &mut Tape, logits: Var, targets: &[i64]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// `E · Σ F_i · G_i` evaluated directly.
pub fn balance_value(load: &[f64], importance: &[f64]) -> f64 {
    let e = load.len() as f64;
    e * load.iter().zip(importance).map(|(f, g)| f * g).sum::<f64>()
}

/// Differentiable balance loss of one layer. `F` is a constant (hard counts);
/// the gradient flows through `G`.
pub fn balance_loss(tape: &mut Tape, outcome: &RoutingOutcome, route: &RouteVars) -> Result<Var> {
    let e = outcome.n_experts();
    if tape.shape(route.importance) != [e] {
        return Err(EvoError::dim("balance_loss", tape.shape(route.importance), &[e]));
    }
    let load = tape.constant([e], outcome.load.clone())?;
    let prod = tape.mul(load, route.importance)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, e as f64))
}

/// Assembles the total loss on the forward tape. A model without MoE layers
/// has `aux = 0`.
pub fn total_loss(fwd: &mut Forward, targets: &[i64], alpha: f64) -> Result<(Var, LossReport)> {
    if !(alpha >= 0.0) {
        return Err(EvoError::config(format!("alpha must be non-negative, got {alpha}")));
    }
    let ce = autoregressive_loss(&mut fwd.tape, fwd.logits, targets)?;
    let regressive = fwd.tape.value(ce)[0];
    let mut layer_losses = Vec::with_capacity(fwd.outcomes.len());
    for (outcome, route) in fwd.outcomes.iter().zip(&fwd.routes) {
        layer_losses.push(balance_loss(&mut fwd.tape, outcome, route)?);
    }
    let per_layer_aux: Vec<f64> = layer_losses.iter().map(|v| fwd.tape.value(*v)[0]).collect();
    let (total, aux) = if layer_losses.is_empty() {
        (ce, 0.0)
    } else {
        let mut acc = layer_losses[0];
        for v in &layer_losses[1..] {
            acc = fwd.tape.add(acc, *v)?;
        }
        let mean = fwd.tape.scale(acc, 1.0 / layer_losses.len() as f64);
        let aux = fwd.tape.value(mean)[0];
        let weighted = fwd.tape.scale(mean, alpha);
        (fwd.tape.add(ce, weighted)?, aux)
    };
    let report = LossReport {
        total: fwd.tape.value(total)[0],
        regressive,
        aux,
        per_layer_aux,
        alpha,
    };
    Ok((total, report))
}
