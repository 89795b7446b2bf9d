//! Read-only probes of a trained sparse model: router shuffling, router-logit
//! densities per modality, and the modality mix each expert receives.

pub mod kde;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};
use crate::model::batch::{Modality, TokenBatch};
use crate::model::{Architecture, ForwardOptions, Model};
use crate::objectives::total_loss;
use crate::pipeline::data::SyntheticTaskSpec;
use crate::rng::{streams, Rng};

pub use kde::{kde_pair, KdeCurve};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Shuffle,
    Kde,
    Dist,
}

impl ProbeKind {
    pub fn csv_name(self) -> &'static str {
        match self {
            ProbeKind::Shuffle => "shuffle.csv",
            ProbeKind::Kde => "kde.csv",
            ProbeKind::Dist => "modal_dist.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub seed: u64,
    pub samples: usize,
    pub aggregate: BTreeMap<String, f64>,
    pub per_layer: Vec<BTreeMap<String, f64>>,
    pub path: Option<String>,
}

/// The held-out batches probes run on.
pub fn eval_stream(task: &SyntheticTaskSpec, batches: u64, batch_size: usize) -> Result<Vec<TokenBatch>> {
    (0..batches)
        .map(|i| task.generate_batch(streams::EVAL_DATA, i, batch_size))
        .collect()
}

fn require_moe(model: &Model) -> Result<()> {
    if model.architecture() != Architecture::Moe || model.n_moe_layers() == 0 {
        return Err(EvoError::contract("probe needs a sparse model; this checkpoint has no MoE layers"));
    }
    Ok(())
}

fn mean_ce(model: &Model, data: &[TokenBatch], opts: &ForwardOptions) -> Result<f64> {
    let mut sum = 0.0;
    for batch in data {
        let mut fwd = model.forward_with(batch, opts)?;
        let (_, report) = total_loss(&mut fwd, &batch.targets, 0.0)?;
        sum += report.regressive;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleTrial {
    pub trial: usize,
    pub ce: f64,
    pub delta: f64,
    /// One expert permutation per MoE layer.
    pub permutations: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleResult {
    pub baseline: f64,
    pub trials: Vec<ShuffleTrial>,
}

impl ShuffleResult {
    pub fn mean_abs_delta(&self) -> f64 {
        self.trials.iter().map(|t| t.delta.abs()).sum::<f64>() / self.trials.len() as f64
    }
}

/// Held-out CE with each trial's per-layer permutations applied to the
/// routing assignments.
pub fn shuffle_probe_with(model: &Model, data: &[TokenBatch], trials: Vec<Vec<Vec<usize>>>) -> Result<ShuffleResult> {
    require_moe(model)?;
    if trials.is_empty() {
        return Err(EvoError::contract("shuffle probe needs at least one trial"));
    }
    if data.is_empty() {
        return Err(EvoError::contract("shuffle probe needs evaluation data"));
    }
    let baseline = mean_ce(model, data, &ForwardOptions::default())?;
    let mut out = Vec::with_capacity(trials.len());
    for (trial, perms) in trials.into_iter().enumerate() {
        let opts = ForwardOptions {
            permutations: Some(perms.clone()),
            ..ForwardOptions::default()
        };
        let ce = mean_ce(model, data, &opts)?;
        out.push(ShuffleTrial {
            trial,
            ce,
            delta: ce - baseline,
            permutations: perms,
        });
    }
    Ok(ShuffleResult { baseline, trials: out })
}

/// `n_trials` independent random relabelings of every MoE layer's experts.
pub fn shuffle_probe(model: &Model, data: &[TokenBatch], n_trials: usize, seed: u64) -> Result<ShuffleResult> {
    require_moe(model)?;
    let mut rng = Rng::new(seed, streams::PROBE);
    let e = model.config().n_experts;
    let trials = (0..n_trials)
        .map(|_| (0..model.n_moe_layers()).map(|_| rng.permutation(e)).collect())
        .collect();
    shuffle_probe_with(model, data, trials)
}

/// Position of transformer block `layer` among the MoE layers.
fn moe_ordinal(model: &Model, layer: usize) -> Result<usize> {
    model
        .banks()
        .iter()
        .position(|b| b.layer == layer)
        .ok_or_else(|| EvoError::contract(format!("layer {layer} is not an MoE layer")))
}

pub fn last_moe_layer(model: &Model) -> Result<usize> {
    require_moe(model)?;
    Ok(model.banks().last().expect("checked non-empty").layer)
}

/// Per-token maximum router logit at `layer`, split into (V, T).
pub fn max_logits(model: &Model, data: &[TokenBatch], layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    require_moe(model)?;
    let ord = moe_ordinal(model, layer)?;
    let (mut v, mut t) = (Vec::new(), Vec::new());
    for batch in data {
        let fwd = model.forward(batch)?;
        let outcome = &fwd.outcomes[ord];
        for (i, m) in batch.modality.iter().enumerate() {
            match m {
                Modality::V => v.push(outcome.max_logit(i)),
                Modality::T => t.push(outcome.max_logit(i)),
            }
        }
    }
    Ok((v, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeResult {
    pub layer: usize,
    pub visual: KdeCurve,
    pub text: KdeCurve,
    pub overlap: f64,
    pub samples: [usize; 2],
}

pub fn logit_kde(model: &Model, data: &[TokenBatch], layer: usize) -> Result<KdeResult> {
    let (v, t) = max_logits(model, data, layer)?;
    let (visual, text, overlap) = kde_pair(&v, &t)?;
    Ok(KdeResult {
        layer,
        visual,
        text,
        overlap,
        samples: [v.len(), t.len()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub layer: usize,
    /// `fractions[e] = [share of V assignments, share of T assignments]`.
    pub fractions: Vec<[f64; 2]>,
    pub counts: Vec<[u64; 2]>,
}

impl LayerDistribution {
    /// Total-variation distance between the V and T columns.
    pub fn total_variation(&self) -> f64 {
        0.5 * self.fractions.iter().map(|f| (f[0] - f[1]).abs()).sum::<f64>()
    }
}

/// For every MoE layer, which share of each modality's routing assignments
/// lands on each expert.
pub fn modality_distribution(model: &Model, data: &[TokenBatch]) -> Result<Vec<LayerDistribution>> {
    require_moe(model)?;
    let layers: Vec<usize> = model.banks().iter().map(|b| b.layer).collect();
    let e = model.config().n_experts;
    let mut counts = vec![vec![[0u64; 2]; e]; layers.len()];
    for batch in data {
        let fwd = model.forward(batch)?;
        for (l, outcome) in fwd.outcomes.iter().enumerate() {
            for (i, m) in batch.modality.iter().enumerate() {
                for &x in outcome.selected_for(i) {
                    counts[l][x][m.index()] += 1;
                }
            }
        }
    }
    Ok(layers
        .into_iter()
        .zip(counts)
        .map(|(layer, counts)| {
            let totals = [0, 1].map(|c| counts.iter().map(|row| row[c]).sum::<u64>());
            let fractions = counts
                .iter()
                .map(|row| [0, 1].map(|c| if totals[c] == 0 { 0.0 } else { row[c] as f64 / totals[c] as f64 }))
                .collect();
            LayerDistribution {
                layer,
                fractions,
                counts,
            }
        })
        .collect())
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_shuffle_csv(w: &mut impl Write, result: &ShuffleResult) -> Result<()> {
    writeln!(w, "trial,ce,delta")?;
    for t in &result.trials {
        writeln!(w, "{},{},{}", t.trial, f(t.ce), f(t.delta))?;
    }
    Ok(())
}

pub fn write_kde_csv(w: &mut impl Write, result: &KdeResult) -> Result<()> {
    writeln!(w, "grid,density_V,density_T")?;
    for ((x, a), b) in result.visual.grid.iter().zip(&result.visual.density).zip(&result.text.density) {
        writeln!(w, "{},{},{}", f(*x), f(*a), f(*b))?;
    }
    Ok(())
}

pub fn write_dist_csv(w: &mut impl Write, layers: &[LayerDistribution]) -> Result<()> {
    writeln!(w, "layer,expert,frac_V,frac_T")?;
    for l in layers {
        for (e, fr) in l.fractions.iter().enumerate() {
            writeln!(w, "{},{},{},{}", l.layer, e, f(fr[0]), f(fr[1]))?;
        }
    }
    Ok(())
}

fn stats<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl ProbeReport {
    pub fn from_shuffle(r: &ShuffleResult, seed: u64, samples: usize) -> Self {
        let max = r.trials.iter().map(|t| t.delta.abs()).fold(0.0, f64::max);
        ProbeReport {
            kind: ProbeKind::Shuffle,
            seed,
            samples,
            aggregate: stats([
                ("baseline_ce", r.baseline),
                ("mean_abs_delta", r.mean_abs_delta()),
                ("max_abs_delta", max),
                ("trials", r.trials.len() as f64),
            ]),
            per_layer: Vec::new(),
            path: None,
        }
    }

    pub fn from_kde(r: &KdeResult, seed: u64) -> Self {
        ProbeReport {
            kind: ProbeKind::Kde,
            seed,
            samples: r.samples[0] + r.samples[1],
            aggregate: stats([("overlap", r.overlap)]),
            per_layer: vec![stats([
                ("layer", r.layer as f64),
                ("bandwidth_V", r.visual.bandwidth),
                ("bandwidth_T", r.text.bandwidth),
                ("integral_V", r.visual.integral()),
                ("integral_T", r.text.integral()),
                ("samples_V", r.samples[0] as f64),
                ("samples_T", r.samples[1] as f64),
            ])],
            path: None,
        }
    }

    pub fn from_dist(layers: &[LayerDistribution], seed: u64) -> Self {
        let samples = layers
            .first()
            .map(|l| l.counts.iter().map(|c| c[0] + c[1]).sum::<u64>() as usize)
            .unwrap_or(0);
        let tv: Vec<f64> = layers.iter().map(LayerDistribution::total_variation).collect();
        ProbeReport {
            kind: ProbeKind::Dist,
            seed,
            samples,
            aggregate: stats([
                ("mean_tv", tv.iter().sum::<f64>() / tv.len().max(1) as f64),
                ("last_layer_tv", tv.last().copied().unwrap_or(0.0)),
            ]),
            per_layer: layers
                .iter()
                .zip(&tv)
                .map(|(l, tv)| stats([("layer", l.layer as f64), ("total_variation", *tv)]))
                .collect(),
            path: None,
        }
    }
}
