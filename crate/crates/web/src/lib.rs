//! Three small interactive views over the evomoe core, exported to JS.
//! Each call returns a JSON string the page parses and draws.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use evomoe::diagnostics::{eval_stream, kde_pair, modality_distribution};
use evomoe::evolution::{ema_update, EvolutionSchedule};
use evomoe::pipeline::{run_pipeline, RunConfig};
use evomoe::rng::Rng;
use evomoe::RouterKind;

#[derive(Serialize)]
pub struct KdeView {
    pub grid: Vec<f64>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    pub overlap: f64,
    pub bandwidths: [f64; 2],
}

/// Overlap of two sampled Gaussians: V ~ N(0, 1), T ~ N(shift, spread).
pub fn kde_view(shift: f64, spread: f64, n: usize, seed: u64) -> evomoe::Result<KdeView> {
    let mut rng = Rng::new(seed, 0);
    let v = rng.normal_vec(n, 0.0, 1.0);
    let t = rng.normal_vec(n, shift, spread.max(1e-3));
    let (a, b, overlap) = kde_pair(&v, &t)?;
    // the page only needs a few hundred points
    let stride = (a.grid.len() / 400).max(1);
    let pick = |xs: &[f64]| xs.iter().step_by(stride).copied().collect::<Vec<_>>();
    Ok(KdeView {
        grid: pick(&a.grid),
        visual: pick(&a.density),
        text: pick(&b.density),
        overlap,
        bandwidths: [a.bandwidth, b.bandwidth],
    })
}

#[derive(Serialize)]
pub struct EmaView {
    /// Trainable expert, one value per step.
    pub trained: Vec<f64>,
    /// One trajectory per β range.
    pub evolved: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

/// A scalar "expert 0" doing a noisy walk toward a drifting target, with
/// EMA followers whose β is redrawn from its range every step.
pub fn ema_view(ranges: Vec<[f64; 2]>, steps: usize, seed: u64) -> evomoe::Result<EmaView> {
    let schedule = EvolutionSchedule::new(ranges.clone(), seed)?;
    let mut rng = Rng::new(seed, 1);
    let mut theta = 0.0;
    let mut followers = vec![0.0; ranges.len()];
    let mut view = EmaView {
        trained: Vec::with_capacity(steps),
        evolved: vec![Vec::with_capacity(steps); ranges.len()],
        betas: vec![Vec::with_capacity(steps); ranges.len()],
    };
    for step in 0..steps {
        let target = (step as f64 / 25.0).sin();
        theta += 0.1 * (target - theta) + rng.normal(0.0, 0.05);
        let betas = schedule.betas(step as u64);
        for (i, beta) in betas.into_iter().enumerate() {
            ema_update(std::slice::from_mut(&mut followers[i]), &[theta], beta);
            view.evolved[i].push(followers[i]);
            view.betas[i].push(beta);
        }
        view.trained.push(theta);
    }
    Ok(view)
}

#[derive(Serialize)]
pub struct RoutingView {
    pub router: &'static str,
    pub layer: usize,
    /// `[V share, T share]` per expert.
    pub fractions: Vec<[f64; 2]>,
    pub total_variation: f64,
}

/// Small shape so the whole pipeline runs in the browser in seconds.
fn demo_config(kind: RouterKind, steps: u64, seed: u64) -> RunConfig {
    let mut run = RunConfig::default().with_seed(seed);
    run.model.d_model = 16;
    run.model.ffn_hidden = 32;
    run.model.n_layers = 2;
    run.model.hypernet_hidden = 8;
    run.model.router_kind = kind;
    for s in [&mut run.stages.warmup, &mut run.stages.evolution, &mut run.stages.router] {
        s.steps = steps.max(1);
        s.batch_size = 4;
        s.eval_every = u64::MAX;
    }
    run.eval_batches = 2;
    run.eval_batch_size = 8;
    run
}

/// Trains the small model through all three stages with each router and
/// reports how V and T tokens spread over the experts of the last MoE layer.
pub fn routing_view(steps: u64, seed: u64) -> evomoe::Result<Vec<RoutingView>> {
    let mut out = Vec::new();
    for (kind, name) in [(RouterKind::Linear, "linear"), (RouterKind::Dtr, "dtr")] {
        let run = demo_config(kind, steps, seed);
        let p = run_pipeline(&run)?;
        let data = eval_stream(&run.task, run.eval_batches, run.eval_batch_size)?;
        let layers = modality_distribution(&p.routed.model, &data)?;
        let last = layers.last().expect("sparse model has an MoE layer");
        out.push(RoutingView {
            router: name,
            layer: last.layer,
            fractions: last.fractions.clone(),
            total_variation: last.total_variation(),
        });
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: evomoe::Result<T>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn kde_overlap(shift: f64, spread: f64, n: usize, seed: u32) -> Result<String, JsValue> {
    to_js(kde_view(shift, spread, n, seed as u64))
}

#[wasm_bindgen]
pub fn ema_trajectories(lo_a: f64, hi_a: f64, lo_b: f64, hi_b: f64, steps: usize, seed: u32) -> Result<String, JsValue> {
    to_js(ema_view(vec![[lo_a, hi_a], [lo_b, hi_b]], steps, seed as u64))
}

#[wasm_bindgen]
pub fn routing_distribution(steps: u32, seed: u32) -> Result<String, JsValue> {
    to_js(routing_view(steps as u64, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_view_is_normalized() {
        let v = kde_view(1.0, 1.0, 300, 3).unwrap();
        assert_eq!(v.grid.len(), v.visual.len());
        assert!((0.0..=1.0).contains(&v.overlap));
        assert!(kde_view(0.0, 1.0, 5, 3).is_err());
    }

    #[test]
    fn ema_followers_lag_by_beta() {
        let v = ema_view(vec![[0.7, 0.79], [0.9, 0.99]], 200, 1).unwrap();
        assert_eq!(v.trained.len(), 200);
        let dist = |f: &[f64]| f.iter().zip(&v.trained).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(dist(&v.evolved[0]) < dist(&v.evolved[1]));
        assert!(v.betas[1].iter().all(|b| (0.9..=0.99).contains(b)));
        assert!(ema_view(vec![[0.9, 0.1]], 10, 1).is_err());
    }

    #[test]
    fn routing_view_columns_partition() {
        let views = routing_view(4, 2).unwrap();
        assert_eq!(views.len(), 2);
        for v in views {
            for col in 0..2 {
                let s: f64 = v.fractions.iter().map(|f| f[col]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
