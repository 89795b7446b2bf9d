//! Expert selection: the shared linear router and the dynamic token-aware
//! router (DTR).
//!
//! The DTR generates a per-token bottleneck from a modality-specific
//! hypernetwork:
//!
//! ```text
//! Θ          = (x·w1 + b1)·w2 + b2          split into Θ_down [C×r], Θ_up [r×C]
//! u          = xᵀ·Θ_down                     ∈ ℝ^r
//! s          = silu(u[..r/2]) ⊙ u[r/2..]     ∈ ℝ^(r/2)
//! e          = [s; s]ᵀ·Θ_up                  ∈ ℝ^C
//! ρ          = e·W_φ + b_φ                   ∈ ℝ^E
//! ```
//!
//! Both routers finish identically: top-K by logit (ties go to the lower
//! expert index), gates are the softmax of the selected logits, `F` counts
//! top-1 choices and `G` is the mean softmax mass per expert.

use crate::autograd::{Tape, Var};
use crate::error::{EvoError, Result};
use crate::model::batch::Modality;
use crate::tensor::Tensor;

/// Tape handles of a hypernetwork's four arrays.
#[derive(Clone, Copy, Debug)]
pub struct HypernetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// A standalone hypernetwork `H^τ` (used directly by tests and the demo; the
/// model keeps the same arrays in its parameter store).
#[derive(Clone, Debug)]
pub struct Hypernetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub modality: Modality,
}

impl Hypernetwork {
    pub fn zeros(d_model: usize, hidden: usize, rank: usize, modality: Modality) -> Self {
        let out = 2 * d_model * rank;
        Hypernetwork {
            w1: Tensor::zeros([d_model, hidden]),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::zeros([hidden, out]),
            b2: Tensor::zeros([out]),
            modality,
        }
    }

    pub fn leaves(&self, tape: &mut Tape) -> HypernetVars {
        HypernetVars {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }
}

/// Tape handles of the DTR parameters of one layer.
#[derive(Clone, Copy, Debug)]
pub struct DtrVars {
    pub visual: HypernetVars,
    pub text: HypernetVars,
    pub head_w: Var,
    pub head_b: Var,
    pub rank: usize,
}

/// Result of routing `N` tokens to `E` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome {
    /// Router logits ρ, `[N×E]`.
    pub logits: Tensor,
    /// Selected experts, row-major `[N×K]`, best first.
    pub selected: Vec<usize>,
    pub top_k: usize,
    /// Gate per selected expert, `[N×K]`.
    pub gates: Tensor,
    /// Fraction of tokens whose top-1 choice is each expert.
    pub load: Vec<f64>,
    /// Mean softmax probability per expert.
    pub importance: Vec<f64>,
    pub modality: Vec<Modality>,
    /// Rows handed to the visual / text hypernetwork during this call.
    pub hypernet_rows: [usize; 2],
}

impl RoutingOutcome {
    pub fn n_tokens(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.logits.cols()
    }

    pub fn selected_for(&self, token: usize) -> &[usize] {
        &self.selected[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn max_logit(&self, token: usize) -> f64 {
        self.logits.row(token).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Differentiable handles that accompany a [`RoutingOutcome`].
#[derive(Clone, Copy, Debug)]
pub struct RouteVars {
    pub logits: Var,
    /// Gates `[N×K]` aligned with `RoutingOutcome::selected`.
    pub gates: Var,
    /// `G`, the per-expert mean softmax probability `[E]`.
    pub importance: Var,
}

/// Indices of the `k` largest entries, best first; ties prefer the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of tokens whose first selected expert is each expert.
pub fn load_fractions(selected: &[usize], top_k: usize, n_experts: usize) -> Vec<f64> {
    let n = selected.len() / top_k.max(1);
    let mut f = vec![0.0; n_experts];
    if n == 0 {
        return f;
    }
    for t in 0..n {
        f[selected[t * top_k]] += 1.0;
    }
    f.iter_mut().for_each(|x| *x /= n as f64);
    f
}

fn finish(tape: &mut Tape, logits: Var, top_k: usize, modality: &[Modality], rows: [usize; 2]) -> Result<(RoutingOutcome, RouteVars)> {
    let n = tape.shape(logits)[0];
    let e = tape.shape(logits)[1];
    if top_k == 0 || top_k > e {
        return Err(EvoError::contract(format!("top_k {top_k} outside [1, {e}]")));
    }
    if n == 0 {
        return Err(EvoError::contract("routing needs at least one token"));
    }
    let ld = tape.value(logits).to_vec();
    let mut selected = Vec::with_capacity(n * top_k);
    let mut flat = Vec::with_capacity(n * top_k);
    for t in 0..n {
        for i in top_k_indices(&ld[t * e..(t + 1) * e], top_k) {
            selected.push(i);
            flat.push(t * e + i);
        }
    }
    let picked = tape.gather_flat(logits, &flat, [n, top_k])?;
    let gates = tape.softmax(picked);
    let probs = tape.softmax(logits);
    let importance = tape.mean_rows(probs)?;
    let outcome = RoutingOutcome {
        logits: Tensor::new([n, e], ld)?,
        load: load_fractions(&selected, top_k, e),
        importance: tape.value(importance).to_vec(),
        gates: tape.tensor(gates),
        selected,
        top_k,
        modality: modality.to_vec(),
        hypernet_rows: rows,
    };
    Ok((
        outcome,
        RouteVars {
            logits,
            gates,
            importance,
        },
    ))
}

/// Shared linear router: `ρ = x·W`.
pub fn linear_route(
    tape: &mut Tape,
    x: Var,
    w: Var,
    top_k: usize,
    modality: &[Modality],
) -> Result<(RoutingOutcome, RouteVars)> {
    let logits = tape.matmul(x, w)?;
    finish(tape, logits, top_k, modality, [0, 0])
}

/// Generates `(Θ_down [N×C·r], Θ_up [N×r·C])` for every row of `x`; each row
/// of the outputs is a row-major matrix.
pub fn hypernet_forward(tape: &mut Tape, x: Var, h: &HypernetVars, rank: usize) -> Result<(Var, Var)> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    let hidden = tape.matmul(x, h.w1)?;
    let hidden = tape.add_row(hidden, h.b1)?;
    let theta = tape.matmul(hidden, h.w2)?;
    let theta = tape.add_row(theta, h.b2)?;
    if *tape.shape(theta).last().unwrap() != 2 * c * rank {
        return Err(EvoError::dim("hypernet_forward", tape.shape(theta), &[2 * c * rank]));
    }
    let down = tape.slice_cols(theta, 0, c * rank)?;
    let up = tape.slice_cols(theta, c * rank, rank * c)?;
    Ok((down, up))
}

/// Bottleneck feature `e` for rows of `x` generated by one hypernetwork.
fn dtr_feature(tape: &mut Tape, x: Var, h: &HypernetVars, rank: usize) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    let (down, up) = hypernet_forward(tape, x, h, rank)?;
    let u = tape.row_vecmat(x, down, rank)?;
    let s = tape.swiglu(u)?;
    let s = tape.concat_cols(s, s)?;
    tape.row_vecmat(s, up, c)
}

/// Dynamic token-aware routing: rows tagged `V` use the visual hypernetwork,
/// rows tagged `T` the text one.
pub fn dtr_route(
    tape: &mut Tape,
    x: Var,
    modality: &[Modality],
    dtr: &DtrVars,
    top_k: usize,
) -> Result<(RoutingOutcome, RouteVars)> {
    let n = tape.shape(x)[0];
    if modality.len() != n {
        return Err(EvoError::dim("dtr_route", tape.shape(x), &[modality.len()]));
    }
    if dtr.rank == 0 || dtr.rank % 2 != 0 {
        return Err(EvoError::config(format!("dtr rank {} must be even and positive", dtr.rank)));
    }
    let mut feature: Option<Var> = None;
    let mut rows = [0usize; 2];
    for (m, h) in [(Modality::V, &dtr.visual), (Modality::T, &dtr.text)] {
        let idx: Vec<usize> = (0..n).filter(|&t| modality[t] == m).collect();
        if idx.is_empty() {
            continue;
        }
        rows[m.index()] = idx.len();
        let xs = tape.gather_rows(x, &idx)?;
        let e = dtr_feature(tape, xs, h, dtr.rank)?;
        let e = tape.scatter_rows(e, &idx, n)?;
        feature = Some(match feature {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }
    let feature = feature.ok_or_else(|| EvoError::contract("routing needs at least one token"))?;
    let logits = tape.matmul(feature, dtr.head_w)?;
    let logits = tape.add_row(logits, dtr.head_b)?;
    finish(tape, logits, top_k, modality, rows)
}

/// Relabels which expert serves each token through `perm` (a bijection on
/// `0..E`). Gates stay attached to their slot; `F` is recomputed.
pub fn shuffle_assignments(outcome: &RoutingOutcome, perm: &[usize]) -> Result<RoutingOutcome> {
    let e = outcome.n_experts();
    check_permutation(perm, e)?;
    let mut out = outcome.clone();
    out.selected.iter_mut().for_each(|s| *s = perm[*s]);
    out.load = load_fractions(&out.selected, out.top_k, e);
    Ok(out)
}

/// Every assignment slot of every token goes to `expert`; `F` is recomputed.
pub fn force_assignments(outcome: &RoutingOutcome, expert: usize) -> Result<RoutingOutcome> {
    if expert >= outcome.n_experts() {
        return Err(EvoError::contract(format!(
            "expert {expert} out of range for {} experts",
            outcome.n_experts()
        )));
    }
    let mut out = outcome.clone();
    out.selected.iter_mut().for_each(|s| *s = expert);
    out.load = load_fractions(&out.selected, out.top_k, outcome.n_experts());
    Ok(out)
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(EvoError::contract(format!("permutation has {} entries, need {n}", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(EvoError::contract(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}
