//! Expert evolution: the frozen experts `1..E` of every bank follow the
//! trainable expert 0 as exponential moving averages,
//!
//! ```text
//! θ_n ← β_n · θ_n + (1 − β_n) · θ_0        β_n ~ Uniform[lo_n, hi_n], redrawn every step
//! ```
//!
//! applied after expert 0's optimizer update. One β is drawn per evolved
//! expert per step and shared by every MoE layer.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{EvoError, Result};
use crate::model::params::ParamKind;
use crate::model::{ffn_expert_forward, ExpertBank, Model};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    /// `[lo, hi]` for evolved experts `1..E`, in order.
    pub ranges: Vec<[f64; 2]>,
    pub seed: u64,
    pub stream: u64,
    pub active: bool,
}

impl EvolutionSchedule {
    pub fn new(ranges: Vec<[f64; 2]>, seed: u64) -> Result<Self> {
        for [lo, hi] in &ranges {
            if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi {
                return Err(EvoError::config(format!("invalid beta range [{lo}, {hi}]")));
            }
        }
        Ok(EvolutionSchedule {
            ranges,
            seed,
            stream: streams::EVOLUTION,
            active: true,
        })
    }

    /// Every evolved expert uses the same constant β.
    pub fn fixed(beta: f64, n_evolved: usize, seed: u64) -> Result<Self> {
        EvolutionSchedule::new(vec![[beta, beta]; n_evolved], seed)
    }

    /// The β values used at optimizer step `step`.
    pub fn betas(&self, step: u64) -> Vec<f64> {
        let mut rng = Rng::substream(self.seed, self.stream, step);
        self.ranges.iter().map(|&[lo, hi]| rng.uniform_in(lo, hi)).collect()
    }
}

/// `target ← β·target + (1−β)·source`, each coordinate kept inside the
/// closed interval spanned by its two inputs.
pub fn ema_update(target: &mut [f64], source: &[f64], beta: f64) {
    debug_assert_eq!(target.len(), source.len());
    if beta == 1.0 {
        return;
    }
    if beta == 0.0 {
        target.copy_from_slice(source);
        return;
    }
    for (t, s) in target.iter_mut().zip(source) {
        let (lo, hi) = if *t <= *s { (*t, *s) } else { (*s, *t) };
        *t = (beta * *t + (1.0 - beta) * s).clamp(lo, hi);
    }
}

/// Replicates expert 0 into every other expert of every bank and freezes the
/// replicas. Expert 0 stays trainable.
pub fn init_evolved(model: &mut Model) {
    let banks: Vec<ExpertBank> = model.banks().into_iter().cloned().collect();
    let params = model.params_mut();
    for bank in &banks {
        let src = bank.experts[0];
        for expert in &bank.experts[1..] {
            for (s, d) in src.ids().iter().zip(expert.ids()) {
                params.copy_values(*s, d);
            }
        }
    }
    params.set_trainable(|p| match p.kind {
        ParamKind::Expert { expert, .. } => expert == 0,
        _ => p.tensor.requires_grad(),
    });
}

/// One evolution step over every bank; returns the sampled β per evolved
/// expert (empty when the schedule is inactive).
pub fn evolution_step(model: &mut Model, schedule: &EvolutionSchedule, step: u64) -> Result<Vec<f64>> {
    if !schedule.active {
        return Ok(Vec::new());
    }
    let banks: Vec<ExpertBank> = model.banks().into_iter().cloned().collect();
    if let Some(bank) = banks.first() {
        if schedule.ranges.len() != bank.n_experts() - 1 {
            return Err(EvoError::config(format!(
                "{} beta ranges for {} evolved experts",
                schedule.ranges.len(),
                bank.n_experts() - 1
            )));
        }
    }
    let betas = schedule.betas(step);
    let params = model.params_mut();
    for bank in &banks {
        let src = bank.experts[0].ids();
        for (n, beta) in betas.iter().enumerate() {
            for (s, d) in src.iter().zip(bank.experts[n + 1].ids()) {
                let source = params.tensor(*s).data().to_vec();
                ema_update(params.tensor_mut(d).data_mut(), &source, *beta);
            }
        }
    }
    Ok(betas)
}

pub fn param_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise `(parameter L2, mean functional L2 on probe rows)` over the
/// experts of `bank`.
pub fn expert_divergence(model: &Model, bank: &ExpertBank, probe: &Tensor) -> Result<Vec<Vec<(f64, f64)>>> {
    if probe.data().iter().all(|&x| x == 0.0) {
        return Err(EvoError::contract("probe must be nonzero"));
    }
    let e = bank.n_experts();
    let store = model.params();
    let flat: Vec<Vec<f64>> = (0..e).map(|i| bank.flat_params(store, i)).collect();
    let n = probe.rows();
    let c = probe.cols();
    let mut outputs = Vec::with_capacity(e);
    for expert in &bank.experts {
        let mut tape = Tape::new();
        let x = tape.leaf(probe);
        let vars = crate::model::FfnVars {
            w_in: tape.leaf(store.tensor(expert.w_in)),
            b_in: tape.leaf(store.tensor(expert.b_in)),
            w_out: tape.leaf(store.tensor(expert.w_out)),
            b_out: tape.leaf(store.tensor(expert.b_out)),
        };
        let y = ffn_expert_forward(&mut tape, x, &vars)?;
        outputs.push(tape.value(y).to_vec());
    }
    let mut out = vec![vec![(0.0, 0.0); e]; e];
    for i in 0..e {
        for j in 0..e {
            if i == j {
                continue;
            }
            let func = (0..n)
                .map(|r| param_l2(&outputs[i][r * c..(r + 1) * c], &outputs[j][r * c..(r + 1) * c]))
                .sum::<f64>()
                / n as f64;
            out[i][j] = (param_l2(&flat[i], &flat[j]), func);
        }
    }
    Ok(out)
}
