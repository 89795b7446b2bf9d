//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits nonzero if any criterion fails.

use std::sync::OnceLock;
use std::time::Instant;

use evomoe::autograd::Tape;
use evomoe::diagnostics::{eval_stream, last_moe_layer, logit_kde, modality_distribution, shuffle_probe};
use evomoe::evolution::{ema_update, param_l2};
use evomoe::gradcheck::{finite_diff_check, finite_diff_check_many, finite_diff_check_model, DEFAULT_STEP};
use evomoe::model::params::ParamKind;
use evomoe::objectives::balance_value;
use evomoe::pipeline::{
    begin_stage, eval_ce, run_pipeline, run_stage, train_step, Checkpoint, LogRecord, PipelineRun, RunConfig, Stage,
    TrainState,
};
use evomoe::rng::Rng;
use evomoe::{Model, ModelConfig, Modality, MoePlacement, RouterKind, Tensor, TokenBatch};

type Check = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// shared runs

fn default_run(kind: RouterKind, evolve: bool) -> RunConfig {
    let mut run = RunConfig::default().with_seed(42);
    run.model.router_kind = kind;
    run.evolve_experts = evolve;
    run
}

fn cached(cell: &'static OnceLock<Result<PipelineRun, String>>, run: RunConfig) -> Result<&'static PipelineRun, String> {
    cell.get_or_init(|| run_pipeline(&run).map_err(err))
        .as_ref()
        .map_err(Clone::clone)
}

static EVOMOE: OnceLock<Result<PipelineRun, String>> = OnceLock::new();
static LINEAR: OnceLock<Result<PipelineRun, String>> = OnceLock::new();
static REPLICATED: OnceLock<Result<PipelineRun, String>> = OnceLock::new();

fn evomoe_run() -> Result<&'static PipelineRun, String> {
    cached(&EVOMOE, default_run(RouterKind::Dtr, true))
}

fn linear_run() -> Result<&'static PipelineRun, String> {
    cached(&LINEAR, default_run(RouterKind::Linear, true))
}

fn replicated_run() -> Result<&'static PipelineRun, String> {
    cached(&REPLICATED, default_run(RouterKind::Linear, false))
}

/// The model at the start of stage II: replicated experts, fresh router.
fn post_transition(run: &RunConfig, p: &PipelineRun) -> Result<TrainState, String> {
    begin_stage(run, Stage::II, Some(&p.dense)).map_err(err)
}

static REPLICATED_SHUFFLE: OnceLock<Result<Vec<f64>, String>> = OnceLock::new();

fn replicated_shuffle_deltas() -> Result<Vec<f64>, String> {
    REPLICATED_SHUFFLE
        .get_or_init(|| {
            let run = default_run(RouterKind::Dtr, true);
            let p = evomoe_run()?;
            let st = post_transition(&run, p)?;
            let data = eval_stream(&run.task, run.eval_batches, run.eval_batch_size).map_err(err)?;
            let r = shuffle_probe(&st.model, &data, 8, 42).map_err(err)?;
            Ok(r.trials.iter().map(|t| t.delta).collect())
        })
        .clone()
}

// ---------------------------------------------------------------------------
// 1. gradient soundness

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 0.0, std)).unwrap()
}

fn toy_model(kind: RouterKind, shared: bool, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 8,
        n_experts: 2,
        top_k: 1,
        router_kind: kind,
        moe_placement: MoePlacement::All,
        skip_first_moe_layer: false,
        shared_expert: shared,
        dtr_rank: 2,
        hypernet_hidden: 4,
        beta_ranges: vec![[0.9, 0.99]],
        max_seq_len: 8,
        seed,
    };
    let mut m = Model::new_dense(&cfg).unwrap().transition_to_moe().unwrap();
    let mut rng = Rng::new(seed, 7);
    let ids: Vec<_> = m.params().iter().map(|(id, p)| (id, p.name.clone(), p.tensor.numel())).collect();
    for (id, name, n) in ids {
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        let vals: Vec<f64> = rng.normal_vec(n, base, 0.3);
        m.params_mut().assign(id, &vals).unwrap();
    }
    m.params_mut().set_trainable(|_| true);
    m
}

fn toy_batch() -> TokenBatch {
    let tokens = vec![1, 5, 9, 12, 3, 3, 14, 8];
    let modality = [Modality::V, Modality::V, Modality::T, Modality::T].repeat(2);
    let targets = vec![5, -1, 12, 2, 3, 7, 8, -1];
    TokenBatch::new(2, 4, tokens, modality, targets).unwrap()
}

// A whole-model loss carries more roundoff than a single op, so its probes
// use a wider step.
const MODEL_STEP: f64 = 1e-4;
fn criterion_1() -> Check {
    let h = DEFAULT_STEP;
    let mut rng = Rng::new(1, 1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let proj = randn(&mut rng, &[64], 1.0);
    // Weighted sum so no output coordinate has a structurally zero gradient.
    let weighted = move |t: &mut Tape, y: evomoe::autograd::Var| -> evomoe::Result<evomoe::autograd::Var> {
        let n: usize = t.shape(y).iter().product();
        let w = t.constant(t.shape(y).to_vec(), proj.data()[..n].to_vec())?;
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    };
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 5], 1.0);
    let bt = randn(&mut rng, &[5, 4], 1.0);
    let a2 = randn(&mut rng, &[3, 4], 1.0);
    let row = randn(&mut rng, &[4], 1.0);
    let col = randn(&mut rng, &[3], 1.0);
    let gain = randn(&mut rng, &[4], 1.0);
    let even = randn(&mut rng, &[3, 6], 1.0);
    let big = randn(&mut rng, &[2 * 3, 4], 1.0);
    let per_row = randn(&mut rng, &[3, 4 * 2], 1.0);
    let logits = randn(&mut rng, &[4, 5], 1.0);
    let qkv = randn(&mut rng, &[2 * 3, 4], 1.0);
    let w = &weighted;
    let checks: Vec<(&str, evomoe::Result<f64>)> = vec![
        ("matmul", finite_diff_check_many(|t, v| { let y = t.matmul(v[0], v[1])?; w(t, y) }, &[a.clone(), b.clone()], h)),
        ("matmul_nt", finite_diff_check_many(|t, v| { let y = t.matmul_nt(v[0], v[1])?; w(t, y) }, &[a.clone(), bt.clone()], h)),
        ("add", finite_diff_check_many(|t, v| { let y = t.add(v[0], v[1])?; w(t, y) }, &[a.clone(), a2.clone()], h)),
        ("mul", finite_diff_check_many(|t, v| { let y = t.mul(v[0], v[1])?; w(t, y) }, &[a.clone(), a2.clone()], h)),
        ("add_row", finite_diff_check_many(|t, v| { let y = t.add_row(v[0], v[1])?; w(t, y) }, &[a.clone(), row.clone()], h)),
        ("scale", finite_diff_check(|t, v| { let y = t.scale(v, -1.7); w(t, y) }, &a, h)),
        ("scale_rows", finite_diff_check_many(|t, v| { let y = t.scale_rows(v[0], v[1])?; w(t, y) }, &[a.clone(), col.clone()], h)),
        ("layer_norm", finite_diff_check_many(|t, v| { let y = t.layer_norm(v[0], v[1], v[2])?; w(t, y) }, &[a.clone(), gain.clone(), row.clone()], h)),
        ("softmax", finite_diff_check(|t, v| { let y = t.softmax(v); w(t, y) }, &a, h)),
        ("swiglu", finite_diff_check(|t, v| { let y = t.swiglu(v)?; w(t, y) }, &even, h)),
        ("sum", finite_diff_check(|t, v| Ok(t.sum(v)), &a, h)),
        ("mean", finite_diff_check(|t, v| Ok(t.mean(v)), &a, h)),
        ("mean_rows", finite_diff_check(|t, v| { let y = t.mean_rows(v)?; w(t, y) }, &a, h)),
        ("gather_rows", finite_diff_check(|t, v| { let y = t.gather_rows(v, &[2, 0, 2, 1])?; w(t, y) }, &a, h)),
        ("scatter_rows", finite_diff_check(|t, v| { let y = t.scatter_rows(v, &[4, 0, 2], 5)?; w(t, y) }, &a, h)),
        ("gather_flat", finite_diff_check(|t, v| { let y = t.gather_flat(v, &[0, 5, 5, 11], [4])?; w(t, y) }, &a, h)),
        ("slice_cols", finite_diff_check(|t, v| { let y = t.slice_cols(v, 1, 2)?; w(t, y) }, &a, h)),
        ("concat_cols", finite_diff_check_many(|t, v| { let y = t.concat_cols(v[0], v[1])?; w(t, y) }, &[a.clone(), a2.clone()], h)),
        ("reshape", finite_diff_check(|t, v| { let y = t.reshape(v, [4, 3])?; w(t, y) }, &a, h)),
        ("row_vecmat", finite_diff_check_many(|t, v| { let y = t.row_vecmat(v[0], v[1], 2)?; w(t, y) }, &[a.clone(), per_row.clone()], h)),
        (
            "causal_attention",
            finite_diff_check_many(
                |t, v| { let y = t.causal_attention(v[0], v[1], v[2], 2, 3, 2)?; w(t, y) },
                &[qkv.clone(), big.clone(), a2.repeat_rows()],
                h,
            ),
        ),
        ("cross_entropy", finite_diff_check(|t, v| t.cross_entropy(v, &[1, -1, 4, 0]), &logits, h)),
    ];
    for (name, r) in checks {
        worst.push((name, r.map_err(err)?));
    }
    let batch = toy_batch();
    let mut e2e = Vec::new();
    for (kind, shared, alpha) in [
        (RouterKind::Dtr, false, 0.001),
        (RouterKind::Dtr, true, 1.0),
        (RouterKind::Linear, false, 1.0),
    ] {
        // A layer with exactly balanced load has a constant balance loss, and
        // at K=1 that leaves its router with an identically zero gradient the
        // relative error cannot score. Take the first seed without one.
        let m = (3..)
            .map(|seed| toy_model(kind, shared, seed))
            .find(|m| {
                let fwd = m.forward(&batch).unwrap();
                fwd.outcomes.iter().all(|o| o.load.iter().any(|&f| f != 1.0 / o.n_experts() as f64))
            })
            .unwrap();
        let r = finite_diff_check_model(&m, &batch, alpha, MODEL_STEP, 4, &mut rng).map_err(err)?;
        e2e.push((format!("{kind:?}{}", if shared { "+shared" } else { "" }), r));
    }
    let op_worst = worst.iter().cloned().fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let e2e_worst = e2e.iter().max_by(|a, b| a.1.worst.total_cmp(&b.1.worst)).unwrap();
    let pass = op_worst.1 < 1e-4 && e2e_worst.1.worst < 1e-4;
    Ok((
        pass,
        format!(
            "{} ops, worst {:.2e} ({}); total_loss worst {:.2e} over {} probes ({} {} analytic {:.3e} numeric {:.3e})",
            worst.len(),
            op_worst.1,
            op_worst.0,
            e2e_worst.1.worst,
            e2e.iter().map(|x| x.1.probes).sum::<usize>(),
            e2e_worst.0,
            e2e_worst.1.param,
            e2e_worst.1.analytic,
            e2e_worst.1.numeric
        ),
    ))
}

trait RepeatRows {
    fn repeat_rows(&self) -> Tensor;
}

impl RepeatRows for Tensor {
    /// `[3×4]` → `[6×4]` by stacking twice.
    fn repeat_rows(&self) -> Tensor {
        let mut d = self.data().to_vec();
        d.extend_from_slice(self.data());
        Tensor::new(vec![self.rows() * 2, self.cols()], d).unwrap()
    }
}

// ---------------------------------------------------------------------------
// 2. balance-loss anchors

fn criterion_2() -> Check {
    let uniform = balance_value(&[0.25; 4], &[0.25; 4]);
    let collapsed = balance_value(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
    let mut rng = Rng::new(2, 2);
    let mut min_random = f64::INFINITY;
    for _ in 0..1000 {
        // uniform draw on the simplex via normalized exponentials
        let e: Vec<f64> = (0..4).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / s).collect();
        min_random = min_random.min(balance_value(&p, &p));
    }
    let pass = uniform == 1.0 && collapsed == 4.0 && min_random >= 1.0 - 1e-12;
    Ok((
        pass,
        format!("uniform {uniform}, collapsed {collapsed}, min over 1000 self-coupled draws {min_random:.6}"),
    ))
}

// ---------------------------------------------------------------------------
// 3. replicated experts are interchangeable

fn criterion_3() -> Check {
    evomoe_run()?;
    let t = Instant::now();
    let deltas = replicated_shuffle_deltas()?;
    let max = deltas.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((
        deltas.len() == 8 && max < 1e-10 && secs < 60.0,
        format!("8 trials, max |dCE| = {max:.3e}, transition + probe {secs:.1}s"),
    ))
}

// ---------------------------------------------------------------------------
// 4. specialization breaks shuffle invariance

fn criterion_4() -> Check {
    let run = default_run(RouterKind::Dtr, true);
    let p = evomoe_run()?;
    let data = eval_stream(&run.task, run.eval_batches, run.eval_batch_size).map_err(err)?;
    let r = shuffle_probe(&p.routed.model, &data, 8, 42).map_err(err)?;
    let trained = r.mean_abs_delta();
    let rep = replicated_shuffle_deltas()?;
    let replicated = rep.iter().map(|d| d.abs()).sum::<f64>() / rep.len() as f64;
    Ok((
        trained > 0.0 && trained >= 10.0 * replicated,
        format!("mean |dCE| trained {trained:.3e} vs replicated {replicated:.3e}"),
    ))
}

// ---------------------------------------------------------------------------
// 5. evolution degenerate cases

fn small_run(ranges: Vec<[f64; 2]>) -> RunConfig {
    let mut run = RunConfig::default().with_seed(5);
    run.model.d_model = 16;
    run.model.ffn_hidden = 32;
    run.model.n_layers = 2;
    run.model.hypernet_hidden = 8;
    run.model.beta_ranges = ranges;
    for s in [&mut run.stages.warmup, &mut run.stages.evolution, &mut run.stages.router] {
        s.batch_size = 4;
        s.eval_every = 1000;
    }
    run.stages.warmup.steps = 20;
    run.stages.evolution.steps = 100;
    run.stages.router.steps = 20;
    run.eval_batches = 2;
    run.eval_batch_size = 4;
    run
}

fn expert_flat(model: &Model, e: usize) -> Vec<Vec<f64>> {
    model.banks().iter().map(|b| b.flat_params(model.params(), e)).collect()
}

fn stage_two_start(run: &RunConfig) -> Result<TrainState, String> {
    let mut dense = begin_stage(run, Stage::I, None).map_err(err)?;
    run_stage(&mut dense, run, |_| {}).map_err(err)?;
    begin_stage(run, Stage::II, Some(&dense)).map_err(err)
}

fn criterion_5() -> Check {
    // beta = 1: evolved experts never move
    let run = small_run(vec![[1.0, 1.0]; 3]);
    let mut st = stage_two_start(&run)?;
    let init: Vec<_> = (1..4).map(|e| expert_flat(&st.model, e)).collect();
    let e0_init = expert_flat(&st.model, 0);
    run_stage(&mut st, &run, |_| {}).map_err(err)?;
    let frozen = (1..4).all(|e| expert_flat(&st.model, e) == init[e - 1]);
    let e0_moved = expert_flat(&st.model, 0) != e0_init;

    // beta = 0: evolved experts equal expert 0 after every step
    let run0 = small_run(vec![[0.0, 0.0]; 3]);
    let mut st0 = stage_two_start(&run0)?;
    let sched0 = run0.evolution_schedule().map_err(err)?;
    let mut copies = true;
    for _ in 0..100 {
        train_step(&mut st0, &run0, Some(&sched0)).map_err(err)?;
        let e0 = expert_flat(&st0.model, 0);
        copies &= (1..4).all(|e| expert_flat(&st0.model, e) == e0);
    }

    // convexity with the paper's ranges over 100 steps
    let runc = small_run(evomoe::model::config::DEFAULT_BETA_RANGES.to_vec());
    let mut stc = stage_two_start(&runc)?;
    let schedc = runc.evolution_schedule().map_err(err)?;
    let mut convex = true;
    let mut violations = 0usize;
    for _ in 0..100 {
        let before: Vec<_> = (1..4).map(|e| expert_flat(&stc.model, e)).collect();
        let betas = train_step(&mut stc, &runc, Some(&schedc)).map_err(err)?.1;
        let e0 = expert_flat(&stc.model, 0);
        for e in 1..4 {
            let after = expert_flat(&stc.model, e);
            for ((b_l, a_l), s_l) in before[e - 1].iter().zip(&after).zip(&e0) {
                for ((b, a), s) in b_l.iter().zip(a_l).zip(s_l) {
                    if !(b.min(*s) <= *a && *a <= b.max(*s)) {
                        convex = false;
                        violations += 1;
                    }
                }
            }
        }
        convex &= betas.iter().zip(&runc.model.beta_ranges).all(|(b, r)| r[0] <= *b && *b <= r[1]);
    }
    // and the raw update on random vectors
    let mut rng = Rng::new(55, 0);
    for _ in 0..100 {
        let mut t = rng.normal_vec(32, 0.0, 1.0);
        let s = rng.normal_vec(32, 0.0, 1.0);
        let beta = rng.uniform();
        let before = t.clone();
        ema_update(&mut t, &s, beta);
        convex &= t.iter().zip(&before).zip(&s).all(|((a, b), s)| b.min(*s) <= *a && *a <= b.max(*s));
    }
    Ok((
        frozen && e0_moved && copies && convex,
        format!(
            "beta=1 frozen: {frozen} (expert 0 trained: {e0_moved}); beta=0 copies every step: {copies}; convexity violations: {violations}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. evolution diversity ordering

fn criterion_6() -> Check {
    let run = default_run(RouterKind::Dtr, true);
    let p = evomoe_run()?;
    let start = post_transition(&run, p)?;
    let steps = p.evolved.step;
    let ranges = &run.model.beta_ranges;
    let idx_low = 1 + ranges.iter().position(|r| *r == [0.7, 0.79]).ok_or("range [0.7,0.79] missing")?;
    let idx_high = 1 + ranges.iter().position(|r| *r == [0.9, 0.99]).ok_or("range [0.9,0.99] missing")?;
    let mut ordered = true;
    let mut detail = Vec::new();
    for (b0, b1) in start.model.banks().iter().zip(p.evolved.model.banks()) {
        let dist = |e: usize| param_l2(&b0.flat_params(start.model.params(), e), &b1.flat_params(p.evolved.model.params(), e));
        let (low, high) = (dist(idx_low), dist(idx_high));
        ordered &= low > high;
        detail.push(format!("layer {}: {low:.4} vs {high:.4}", b0.layer));
    }
    let mut min_pair = f64::INFINITY;
    for b in p.evolved.model.banks() {
        let e = b.n_experts();
        for i in 0..e {
            for j in i + 1..e {
                let d = param_l2(&b.flat_params(p.evolved.model.params(), i), &b.flat_params(p.evolved.model.params(), j));
                min_pair = min_pair.min(d);
            }
        }
    }
    Ok((
        steps == 200 && ordered && min_pair > 0.0,
        format!(
            "{steps} steps; drift from init [0.7,0.79] vs [0.9,0.99]: {}; min pairwise l2 {min_pair:.4}",
            detail.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. router rigidity: DTR vs linear

fn criterion_7() -> Check {
    let t = Instant::now();
    let (dtr, lin) = std::thread::scope(|s| {
        let a = s.spawn(evomoe_run);
        let b = s.spawn(linear_run);
        (a.join().unwrap(), b.join().unwrap())
    });
    let (dtr, lin) = (dtr?, lin?);
    let secs = t.elapsed().as_secs_f64();
    let run = default_run(RouterKind::Dtr, true);
    let data = eval_stream(&run.task, run.eval_batches, run.eval_batch_size).map_err(err)?;
    let summary = |m: &Model| -> Result<(f64, f64), String> {
        let layer = last_moe_layer(m).map_err(err)?;
        let k = logit_kde(m, &data, layer).map_err(err)?;
        let d = modality_distribution(m, &data).map_err(err)?;
        let tv = d.iter().find(|l| l.layer == layer).unwrap().total_variation();
        Ok((k.overlap, tv))
    };
    let (ov_d, tv_d) = summary(&dtr.routed.model)?;
    let (ov_l, tv_l) = summary(&lin.routed.model)?;
    Ok((
        ov_d < ov_l && tv_d > tv_l && secs < 1200.0,
        format!("overlap DTR {ov_d:.4} vs linear {ov_l:.4}; TV DTR {tv_d:.4} vs linear {tv_l:.4}; runs {secs:.0}s"),
    ))
}

// ---------------------------------------------------------------------------
// 8. end-to-end ordering

fn criterion_8() -> Check {
    let (evo, rep) = std::thread::scope(|s| {
        let a = s.spawn(evomoe_run);
        let b = s.spawn(replicated_run);
        (a.join().unwrap(), b.join().unwrap())
    });
    let (evo, rep) = (evo?, rep?);
    let run = default_run(RouterKind::Dtr, true);
    let ce_evo = eval_ce(&evo.routed.model, &run).map_err(err)?;
    let ce_rep = eval_ce(&rep.routed.model, &run).map_err(err)?;
    let ce_dense = eval_ce(&evo.dense.model, &run).map_err(err)?;
    let tol = 0.02;
    Ok((
        ce_evo <= ce_rep + tol && ce_rep <= ce_dense + tol,
        format!("held-out CE: evolution+DTR {ce_evo:.5}, replicated+linear {ce_rep:.5}, dense {ce_dense:.5} (band {tol})"),
    ))
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence

fn full_small(run: &RunConfig) -> Result<(Vec<u8>, Vec<LogRecord>), String> {
    let p = run_pipeline(run).map_err(err)?;
    Ok((Checkpoint::new(run.clone(), p.routed.clone()).to_bytes(), p.log))
}

fn criterion_9() -> Check {
    let mut run = small_run(evomoe::model::config::DEFAULT_BETA_RANGES.to_vec());
    run.stages.evolution.steps = 30;
    let (a, log_a) = full_small(&run)?;
    let (b, log_b) = full_small(&run)?;
    let same_runs = a == b && log_a == log_b;

    // interrupt stage II at step 12, persist, resume
    let mut st = stage_two_start(&run)?;
    let mut uninterrupted = st.clone();
    let mut log_u = Vec::new();
    run_stage(&mut uninterrupted, &run, |r| log_u.push(r.clone())).map_err(err)?;
    let sched = run.evolution_schedule().map_err(err)?;
    let mut log_r = Vec::new();
    for _ in 0..12 {
        let (rep, betas) = train_step(&mut st, &run, Some(&sched)).map_err(err)?;
        log_r.push((rep.total, betas));
    }
    let bytes = Checkpoint::new(run.clone(), st).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes).map_err(err)?.state;
    let mut tail = Vec::new();
    run_stage(&mut resumed, &run, |r| tail.push(r.clone())).map_err(err)?;
    let head_matches = log_r
        .iter()
        .zip(&log_u)
        .all(|((total, betas), u)| total.to_bits() == u.total.to_bits() && *betas == u.betas);
    let resume_ok = head_matches
        && tail == log_u[12..]
        && Checkpoint::new(run.clone(), resumed.clone()).to_bytes()
            == Checkpoint::new(run.clone(), uninterrupted.clone()).to_bytes();

    let reloaded = Checkpoint::from_bytes(&a).map_err(err)?.to_bytes();
    let round_trip = reloaded == a;
    Ok((
        same_runs && resume_ok && round_trip,
        format!(
            "identical runs: {same_runs}; resume at step 12 matches: {resume_ok}; round trip byte-exact: {round_trip} ({} bytes)",
            a.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10. frozen-parameter contracts

fn changed(before: &TrainState, after: &TrainState, run: &RunConfig) -> Result<Vec<(String, ParamKind)>, String> {
    // compare through the on-disk format
    let a = Checkpoint::from_bytes(&Checkpoint::new(run.clone(), before.clone()).to_bytes()).map_err(err)?;
    let b = Checkpoint::from_bytes(&Checkpoint::new(run.clone(), after.clone()).to_bytes()).map_err(err)?;
    let mut out = Vec::new();
    for (_, p) in a.state.model.params().iter() {
        let q = b.state.model.params().by_name(&p.name).ok_or(format!("{} missing", p.name))?;
        let same = p.tensor.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            out.push((p.name.clone(), p.kind));
        }
    }
    Ok(out)
}

fn criterion_10() -> Check {
    let mut notes = Vec::new();
    let mut pass = true;
    for (label, kind, p) in [("dtr", RouterKind::Dtr, evomoe_run()?), ("linear", RouterKind::Linear, linear_run()?)] {
        let run = default_run(kind, true);
        let entry2 = post_transition(&run, p)?;
        let d2 = changed(&entry2, &p.evolved, &run)?;
        let only_experts = d2.iter().all(|(_, k)| matches!(k, ParamKind::Expert { .. }));
        let n_experts_changed: std::collections::BTreeSet<usize> = d2
            .iter()
            .filter_map(|(_, k)| match k {
                ParamKind::Expert { expert, .. } => Some(*expert),
                _ => None,
            })
            .collect();
        let entry3 = begin_stage(&run, Stage::III, Some(&p.evolved)).map_err(err)?;
        let d3 = changed(&entry3, &p.routed, &run)?;
        let only_router = d3.iter().all(|(_, k)| match kind {
            RouterKind::Dtr => matches!(k, ParamKind::Hypernet { .. } | ParamKind::RouterHead { .. }),
            RouterKind::Linear => matches!(k, ParamKind::LinearRouter { .. }),
        });
        let ok = only_experts && n_experts_changed.len() == run.model.n_experts && only_router && !d3.is_empty();
        pass &= ok;
        notes.push(format!(
            "{label}: stage II changed {} arrays (experts {:?}), stage III changed {} router arrays",
            d2.len(),
            n_experts_changed,
            d3.len()
        ));
    }
    Ok((pass, notes.join("; ")))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: Vec<(u8, &str, fn() -> Check)> = vec![
        (1, "gradient soundness", criterion_1),
        (2, "balance-loss anchors", criterion_2),
        (3, "replicated experts shuffle-invariant", criterion_3),
        (4, "specialization breaks shuffle invariance", criterion_4),
        (5, "evolution degenerate cases", criterion_5),
        (6, "evolution diversity ordering", criterion_6),
        (7, "router rigidity, DTR vs linear", criterion_7),
        (8, "end-to-end CE ordering", criterion_8),
        (9, "determinism and persistence", criterion_9),
        (10, "frozen-parameter contracts", criterion_10),
    ];
    let only: Option<Vec<u8>> = std::env::var("EVOMOE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected: Vec<_> = criteria
        .into_iter()
        .filter(|(id, _, _)| only.as_ref().is_none_or(|o| o.contains(id)))
        .collect();

    let results: Vec<(u8, &str, f64, Check)> = std::thread::scope(|s| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&(id, name, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
                    (id, name, t.elapsed().as_secs_f64(), r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut failed = 0;
    println!();
    for (id, name, secs, r) in &results {
        let (ok, detail) = match r {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<4} {name}: {detail} [{secs:.1}s]",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
