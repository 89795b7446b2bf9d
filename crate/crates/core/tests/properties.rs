//! Randomized invariants over ops, routing, losses, evolution and probes.

use proptest::prelude::*;

use evomoe::autograd::{Tape, Var};
use evomoe::diagnostics::kde_pair;
use evomoe::evolution::ema_update;
use evomoe::gradcheck::{finite_diff_check, finite_diff_check_many, DEFAULT_STEP};
use evomoe::model::ForwardOptions;
use evomoe::objectives::balance_value;
use evomoe::router::{load_fractions, top_k_indices};
use evomoe::rng::Rng;
use evomoe::{Model, ModelConfig, Modality, MoePlacement, RouterKind, Tensor, TokenBatch};

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 0.0, std)).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights, so every output coordinate matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> evomoe::Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = shape.iter().product();
    let w = t.constant(shape, Rng::new(seed, 77).normal_vec(n, 0.0, 1.0))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn small_model(kind: RouterKind, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 8,
        n_experts: 3,
        top_k: 1,
        router_kind: kind,
        moe_placement: MoePlacement::All,
        skip_first_moe_layer: false,
        shared_expert: false,
        dtr_rank: 2,
        hypernet_hidden: 4,
        beta_ranges: vec![[0.7, 0.79], [0.9, 0.99]],
        max_seq_len: 8,
        seed,
    };
    Model::new_dense(&cfg).unwrap().transition_to_moe().unwrap()
}

fn random_batch(rng: &mut Rng, batch: usize, seq: usize) -> TokenBatch {
    let n = batch * seq;
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(16)).collect();
    let modality = (0..n).map(|_| if rng.uniform() < 0.5 { Modality::V } else { Modality::T }).collect();
    let targets = (0..n).map(|_| rng.below(16) as i64).collect();
    TokenBatch::new(batch, seq, tokens, modality, targets).unwrap()
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn linear_op_gradients(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut rng = Rng::new(seed, 1);
        let a = randn(&mut rng, &[n, k], 1.0);
        let b = randn(&mut rng, &[k, m], 1.0);
        let bt = randn(&mut rng, &[m, k], 1.0);
        let a2 = randn(&mut rng, &[n, k], 1.0);
        let row = randn(&mut rng, &[k], 1.0);
        let col = randn(&mut rng, &[n], 1.0);
        let h = DEFAULT_STEP;
        let errs = [
            finite_diff_check_many(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), b.clone()], h),
            finite_diff_check_many(|t, v| { let y = t.matmul_nt(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), bt], h),
            finite_diff_check_many(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), a2.clone()], h),
            finite_diff_check_many(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), a2.clone()], h),
            finite_diff_check_many(|t, v| { let y = t.add_row(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), row], h),
            finite_diff_check_many(|t, v| { let y = t.scale_rows(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), col], h),
            finite_diff_check_many(|t, v| { let y = t.concat_cols(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), a2], h),
            finite_diff_check(|t, v| { let y = t.mean_rows(v)?; project(t, y, seed) }, &a, h),
            finite_diff_check(|t, v| Ok(t.mean(v)), &a, h),
        ];
        for (i, e) in errs.into_iter().enumerate() {
            let e = e.unwrap();
            prop_assert!(e < TOL, "op {i}: {e}");
        }
    }

    #[test]
    fn nonlinear_op_gradients(seed in any::<u64>(), n in 1usize..4, half in 1usize..4) {
        let mut rng = Rng::new(seed, 2);
        let c = 2 * half;
        let x = randn(&mut rng, &[n, c], 1.0);
        let gain = randn(&mut rng, &[c], 1.0);
        let bias = randn(&mut rng, &[c], 1.0);
        let targets: Vec<i64> = (0..n).map(|i| if i == 0 && n > 1 { -1 } else { rng.below(c) as i64 }).collect();
        let h = DEFAULT_STEP;
        let errs = [
            finite_diff_check_many(|t, v| { let y = t.layer_norm(v[0], v[1], v[2])?; project(t, y, seed) }, &[x.clone(), gain, bias], h),
            finite_diff_check(|t, v| { let y = t.softmax(v); project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| { let y = t.swiglu(v)?; project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| t.cross_entropy(v, &targets), &x, h),
        ];
        for (i, e) in errs.into_iter().enumerate() {
            let e = e.unwrap();
            prop_assert!(e < TOL, "op {i}: {e}");
        }
    }

    #[test]
    fn attention_gradients(seed in any::<u64>(), batch in 1usize..3, seq in 1usize..4, heads in 1usize..3) {
        let mut rng = Rng::new(seed, 3);
        let c = 2 * heads;
        let qkv: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[batch * seq, c], 1.0)).collect();
        let e = finite_diff_check_many(
            |t, v| { let y = t.causal_attention(v[0], v[1], v[2], batch, seq, heads)?; project(t, y, seed) },
            &qkv,
            DEFAULT_STEP,
        ).unwrap();
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn index_op_gradients(seed in any::<u64>(), n in 2usize..5, c in 2usize..5) {
        let mut rng = Rng::new(seed, 4);
        let x = randn(&mut rng, &[n, c], 1.0);
        let rows: Vec<usize> = (0..n + 1).map(|_| rng.below(n)).collect();
        let flat: Vec<usize> = (0..3).map(|_| rng.below(n * c)).collect();
        let mut slots: Vec<usize> = rng.permutation(n + 2);
        slots.truncate(n);
        let h = DEFAULT_STEP;
        let errs = [
            finite_diff_check(|t, v| { let y = t.gather_rows(v, &rows)?; project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| { let y = t.scatter_rows(v, &slots, n + 2)?; project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| { let y = t.gather_flat(v, &flat, [3])?; project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| { let y = t.slice_cols(v, 1, c - 1)?; project(t, y, seed) }, &x, h),
            finite_diff_check(|t, v| { let y = t.reshape(v, [c, n])?; project(t, y, seed) }, &x, h),
        ];
        for (i, e) in errs.into_iter().enumerate() {
            let e = e.unwrap();
            prop_assert!(e < TOL, "op {i}: {e}");
        }
    }

    #[test]
    fn softmax_rows_and_shift(seed in any::<u64>(), n in 1usize..6, c in 1usize..9, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed, 5);
        let x = randn(&mut rng, &[n, c], 3.0);
        let shifted: Vec<f64> = x.data().iter().map(|v| v + shift).collect();
        let mut t = Tape::new();
        let a = t.leaf(&x);
        let b = t.constant([n, c], shifted).unwrap();
        let sa = t.softmax(a);
        let sb = t.softmax(b);
        for (ra, rb) in t.value(sa).chunks(c).zip(t.value(sb).chunks(c)) {
            prop_assert!((ra.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, q) in ra.iter().zip(rb) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(seed in any::<u64>(), n in 1usize..5, c in 2usize..9, scale in 5.0f64..50.0) {
        let mut rng = Rng::new(seed, 6);
        // the fixed eps shrinks the variance by var/(var+eps); rows with
        // variance of at least 10 keep that below 1e-6
        let x = randn(&mut rng, &[n, c], scale);
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let g = t.constant([c], vec![1.0; c]).unwrap();
        let b = t.constant([c], vec![0.0; c]).unwrap();
        let y = t.layer_norm(xv, g, b).unwrap();
        for (xr, yr) in x.data().chunks(c).zip(t.value(y).chunks(c)) {
            let mx = xr.iter().sum::<f64>() / c as f64;
            let vx = xr.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / c as f64;
            if vx < 10.0 {
                continue;
            }
            let m = yr.iter().sum::<f64>() / c as f64;
            let var = yr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() < 1e-10, "mean {m}");
            prop_assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn balance_at_least_one_when_self_coupled(seed in any::<u64>(), e in 1usize..9) {
        let mut rng = Rng::new(seed, 8);
        let raw: Vec<f64> = (0..e).map(|_| rng.uniform()).collect();
        let s: f64 = raw.iter().sum();
        let f: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let v = balance_value(&f, &f);
        prop_assert!(v >= 1.0 - 1e-12, "{v}");
        let uniform = vec![1.0 / e as f64; e];
        prop_assert!((balance_value(&uniform, &uniform) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_permutation_invariant(seed in any::<u64>(), e in 1usize..9) {
        let mut rng = Rng::new(seed, 9);
        let f: Vec<f64> = (0..e).map(|_| rng.uniform()).collect();
        let g: Vec<f64> = (0..e).map(|_| rng.uniform()).collect();
        let perm = rng.permutation(e);
        let fp: Vec<f64> = perm.iter().map(|&i| f[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        prop_assert!((balance_value(&f, &g) - balance_value(&fp, &gp)).abs() < 1e-12);
    }

    #[test]
    fn top1_shift_invariant_and_load_matches_argmax(seed in any::<u64>(), n in 1usize..20, e in 1usize..6, shift in -100.0f64..100.0) {
        let mut rng = Rng::new(seed, 10);
        let logits = rng.normal_vec(n * e, 0.0, 1.0);
        let mut selected = Vec::new();
        let mut hist = vec![0.0; e];
        for row in logits.chunks(e) {
            let moved: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let a = top_k_indices(row, 1);
            prop_assert_eq!(&a, &top_k_indices(&moved, 1));
            let argmax = (0..e).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            hist[argmax] += 1.0;
            selected.extend(a);
        }
        hist.iter_mut().for_each(|h| *h /= n as f64);
        prop_assert_eq!(load_fractions(&selected, 1, e), hist);
    }

    #[test]
    fn ema_stays_between_endpoints(seed in any::<u64>(), len in 1usize..32, beta in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed, 11);
        let before = rng.normal_vec(len, 0.0, 1.0);
        let source = rng.normal_vec(len, 0.0, 1.0);
        let mut target = before.clone();
        ema_update(&mut target, &source, beta);
        for ((t, b), s) in target.iter().zip(&before).zip(&source) {
            prop_assert!(*t >= b.min(*s) && *t <= b.max(*s));
        }
    }

    #[test]
    fn kde_overlap_symmetric_and_affine_invariant(seed in any::<u64>(), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let mut rng = Rng::new(seed, 12);
        let a = rng.normal_vec(40, 0.0, 1.0);
        let (mb, sb) = (rng.uniform_in(-2.0, 2.0), rng.uniform_in(0.5, 2.0));
        let b = rng.normal_vec(30, mb, sb);
        let (da, db, ab) = kde_pair(&a, &b).unwrap();
        let (_, _, ba) = kde_pair(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        let at: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        let bt: Vec<f64> = b.iter().map(|x| scale * x + shift).collect();
        let (_, _, moved) = kde_pair(&at, &bt).unwrap();
        prop_assert!((ab - moved).abs() < 1e-4, "{ab} vs {moved}");
        prop_assert!(da.density.iter().chain(&db.density).all(|d| *d >= 0.0));
        prop_assert!((da.integral() - 1.0).abs() < 1e-3);
        prop_assert!((db.integral() - 1.0).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn causal_prefix_is_unaffected(seed in any::<u64>(), cut in 1usize..6, dtr in any::<bool>()) {
        let kind = if dtr { RouterKind::Dtr } else { RouterKind::Linear };
        let m = small_model(kind, seed % 1000);
        let mut rng = Rng::new(seed, 13);
        let batch = random_batch(&mut rng, 2, 6);
        let mut edited = batch.clone();
        for b in 0..2 {
            for s in cut..6 {
                edited.tokens[b * 6 + s] = rng.below(16);
            }
        }
        let x = m.forward(&batch).unwrap().logits();
        let y = m.forward(&edited).unwrap().logits();
        let v = 16;
        for b in 0..2 {
            for s in 0..cut {
                let at = (b * 6 + s) * v;
                prop_assert_eq!(&x.data()[at..at + v], &y.data()[at..at + v]);
            }
        }
    }

    #[test]
    fn replicated_experts_ignore_permutation(seed in any::<u64>(), dtr in any::<bool>()) {
        let kind = if dtr { RouterKind::Dtr } else { RouterKind::Linear };
        let m = small_model(kind, seed % 1000);
        let mut rng = Rng::new(seed, 14);
        let batch = random_batch(&mut rng, 2, 5);
        let perms = (0..m.n_moe_layers()).map(|_| rng.permutation(3)).collect();
        let base = m.forward(&batch).unwrap().logits();
        let opts = ForwardOptions { permutations: Some(perms), ..ForwardOptions::default() };
        let shuffled = m.forward_with(&batch, &opts).unwrap().logits();
        prop_assert_eq!(base.data(), shuffled.data());
    }

    #[test]
    fn modality_columns_sum_to_one(seed in any::<u64>()) {
        let m = small_model(RouterKind::Dtr, seed % 1000);
        let mut rng = Rng::new(seed, 15);
        let data: Vec<TokenBatch> = (0..2).map(|_| random_batch(&mut rng, 2, 6)).collect();
        let layers = evomoe::diagnostics::modality_distribution(&m, &data).unwrap();
        prop_assert_eq!(layers.len(), m.n_moe_layers());
        for l in layers {
            for col in 0..2 {
                let total: u64 = l.counts.iter().map(|c| c[col]).sum();
                let s: f64 = l.fractions.iter().map(|f| f[col]).sum();
                if total > 0 {
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
