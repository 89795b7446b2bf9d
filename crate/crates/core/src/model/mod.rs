//! Causal transformer whose FFN sub-layers are either dense or expert banks.

pub mod batch;
pub mod config;
pub mod params;

use crate::autograd::{Tape, Var};
use crate::error::{EvoError, Result};
use crate::rng::{streams, Rng};
use crate::router::{self, DtrVars, HypernetVars, RouteVars, RoutingOutcome};
use crate::tensor::Tensor;

use batch::{Modality, TokenBatch};
use config::{ModelConfig, RouterKind};
use params::{Init, ParamId, ParamKind, ParamStore, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Dense,
    Moe,
}

/// Parameter ids of one SwiGLU feed-forward network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FfnIds {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_in, self.b_in, self.w_out, self.b_out]
    }

    fn vars(&self, v: &[Var]) -> FfnVars {
        FfnVars {
            w_in: v[self.w_in.0],
            b_in: v[self.b_in.0],
            w_out: v[self.w_out.0],
            b_out: v[self.b_out.0],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RouterIds {
    Linear { w: ParamId },
    Dtr {
        visual: [ParamId; 4],
        text: [ParamId; 4],
        head_w: ParamId,
        head_b: ParamId,
    },
}

impl RouterIds {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            RouterIds::Linear { w } => vec![*w],
            RouterIds::Dtr {
                visual,
                text,
                head_w,
                head_b,
            } => visual.iter().chain(text).copied().chain([*head_w, *head_b]).collect(),
        }
    }
}

/// The experts of one MoE layer. Expert 0 is the trainable one; the others
/// are derived from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertBank {
    pub layer: usize,
    pub experts: Vec<FfnIds>,
    pub shared: Option<FfnIds>,
    pub router: RouterIds,
}

impl ExpertBank {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Whether expert `e` receives gradient updates.
    pub fn trainable(&self, store: &ParamStore, e: usize) -> bool {
        self.experts[e].ids().iter().all(|&id| store.is_trainable(id))
    }

    /// All parameters of expert `e`, concatenated in a fixed order.
    pub fn flat_params(&self, store: &ParamStore, e: usize) -> Vec<f64> {
        self.experts[e]
            .ids()
            .iter()
            .flat_map(|&id| store.tensor(id).data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug)]
enum FfnSlot {
    Dense(FfnIds),
    Moe(ExpertBank),
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ffn: FfnSlot,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
}

/// Per-forward overrides used by the diagnostics.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// One expert permutation per MoE layer, applied to the routing
    /// assignments before dispatch.
    pub permutations: Option<Vec<Vec<usize>>>,
    /// Sends every token of every MoE layer to this expert (gate 1.0). The
    /// router still runs, so its statistics and the balance loss are
    /// reported against the forced assignment.
    pub force_expert: Option<usize>,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    /// `[B·S × vocab]` logits.
    pub logits: Var,
    /// Tape leaf of every parameter, indexed by `ParamId`.
    pub param_vars: Vec<Var>,
    /// One entry per MoE layer, in depth order.
    pub outcomes: Vec<RoutingOutcome>,
    pub routes: Vec<RouteVars>,
    pub batch: usize,
    pub seq: usize,
}

impl Forward {
    /// Logits reshaped to `[B×S×vocab]`.
    pub fn logits(&self) -> Tensor {
        let t = self.tape.tensor(self.logits);
        let v = t.cols();
        t.reshape([self.batch, self.seq, v]).expect("logit shape")
    }
}

fn ffn_names(store: &mut ParamStore, prefix: &str, kind: ParamKind, c: usize, hidden: usize, zero_out: bool) -> FfnIds {
    let out_init = if zero_out { Init::Zeros } else { Init::Normal };
    FfnIds {
        w_in: store.add(format!("{prefix}.w_in"), kind, Init::Normal, &[c, 2 * hidden]),
        b_in: store.add(format!("{prefix}.b_in"), kind, Init::Zeros, &[2 * hidden]),
        w_out: store.add(format!("{prefix}.w_out"), kind, out_init, &[hidden, c]),
        b_out: store.add(format!("{prefix}.b_out"), kind, Init::Zeros, &[c]),
    }
}

/// Std of the hypernetwork output layer, chosen so the generated `Θ` has
/// roughly fan-in variance `½(1/C + 1/r)` given the `INIT_STD` first layer
/// and unit-scale (layer-normed) inputs.
pub fn hypernet_output_std(c: usize, hidden: usize, rank: usize) -> f64 {
    let target = (0.5 * (1.0 / c as f64 + 1.0 / rank as f64)).sqrt();
    let hidden_std = INIT_STD * (c as f64).sqrt();
    target / (hidden_std * (hidden as f64).sqrt())
}

impl Model {
    /// Registers every parameter for `arch` with its init rule but leaves
    /// values at their deterministic defaults (zeros / ones).
    pub fn skeleton(config: &ModelConfig, arch: Architecture) -> Result<Model> {
        config.validate()?;
        let c = config.d_model;
        let mut p = ParamStore::new();
        let tok_emb = p.add("embed.tok", ParamKind::Embedding, Init::Normal, &[config.vocab_size, c]);
        let pos_emb = p.add("embed.pos", ParamKind::Embedding, Init::Normal, &[config.max_seq_len, c]);
        let moe_layers = config.moe_layers();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("blocks.{l}");
            let ln1 = (
                p.add(format!("{pre}.ln1.gain"), ParamKind::Norm, Init::Ones, &[c]),
                p.add(format!("{pre}.ln1.bias"), ParamKind::Norm, Init::Zeros, &[c]),
            );
            let mut attn = |n: &str| p.add(format!("{pre}.attn.{n}"), ParamKind::Attention, Init::Normal, &[c, c]);
            let (wq, wk, wv, wo) = (attn("wq"), attn("wk"), attn("wv"), attn("wo"));
            let ln2 = (
                p.add(format!("{pre}.ln2.gain"), ParamKind::Norm, Init::Ones, &[c]),
                p.add(format!("{pre}.ln2.bias"), ParamKind::Norm, Init::Zeros, &[c]),
            );
            let ffn = if arch == Architecture::Moe && moe_layers.contains(&l) {
                let experts = (0..config.n_experts)
                    .map(|e| {
                        ffn_names(
                            &mut p,
                            &format!("{pre}.experts.{e}"),
                            ParamKind::Expert { layer: l, expert: e },
                            c,
                            config.ffn_hidden,
                            false,
                        )
                    })
                    .collect();
                let shared = config.shared_expert.then(|| {
                    ffn_names(
                        &mut p,
                        &format!("{pre}.shared"),
                        ParamKind::SharedExpert { layer: l },
                        c,
                        config.ffn_hidden,
                        true,
                    )
                });
                let router = match config.router_kind {
                    RouterKind::Linear => RouterIds::Linear {
                        w: p.add(
                            format!("{pre}.router.w"),
                            ParamKind::LinearRouter { layer: l },
                            Init::Normal,
                            &[c, config.n_experts],
                        ),
                    },
                    RouterKind::Dtr => {
                        let out = 2 * c * config.dtr_rank;
                        let hid = config.hypernet_hidden;
                        let hyper_out_std = hypernet_output_std(c, hid, config.dtr_rank);
                        let mut hyper = |m: Modality| {
                            let kind = ParamKind::Hypernet { layer: l, modality: m };
                            let name = format!("{pre}.dtr.hyper_{}", m.tag().to_ascii_lowercase());
                            [
                                p.add(format!("{name}.w1"), kind, Init::Normal, &[c, hid]),
                                p.add(format!("{name}.b1"), kind, Init::Zeros, &[hid]),
                                p.add(format!("{name}.w2"), kind, Init::NormalStd(hyper_out_std), &[hid, out]),
                                p.add(format!("{name}.b2"), kind, Init::Zeros, &[out]),
                            ]
                        };
                        let visual = hyper(Modality::V);
                        let text = hyper(Modality::T);
                        let kind = ParamKind::RouterHead { layer: l };
                        RouterIds::Dtr {
                            visual,
                            text,
                            head_w: p.add(format!("{pre}.dtr.head.w"), kind, Init::Normal, &[c, config.n_experts]),
                            head_b: p.add(format!("{pre}.dtr.head.b"), kind, Init::Zeros, &[config.n_experts]),
                        }
                    }
                };
                FfnSlot::Moe(ExpertBank {
                    layer: l,
                    experts,
                    shared,
                    router,
                })
            } else {
                FfnSlot::Dense(ffn_names(
                    &mut p,
                    &format!("{pre}.ffn"),
                    ParamKind::DenseFfn,
                    c,
                    config.ffn_hidden,
                    false,
                ))
            };
            blocks.push(Block {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ffn,
            });
        }
        let final_ln = (
            p.add("final_ln.gain", ParamKind::Norm, Init::Ones, &[c]),
            p.add("final_ln.bias", ParamKind::Norm, Init::Zeros, &[c]),
        );
        Ok(Model {
            config: config.clone(),
            arch,
            params: p,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
        })
    }

    /// Randomly initialized dense model (the warm-up starting point).
    pub fn new_dense(config: &ModelConfig) -> Result<Model> {
        let mut m = Model::skeleton(config, Architecture::Dense)?;
        let mut rng = Rng::new(config.seed, streams::INIT);
        m.params.initialize(&mut rng, |_| true);
        m.params.set_trainable(|_| true);
        Ok(m)
    }

    /// Builds the sparse model from a dense one: each dense FFN on an MoE
    /// layer becomes expert 0 and is replicated into the remaining experts;
    /// routers are freshly initialized.
    pub fn transition_to_moe(&self) -> Result<Model> {
        if self.arch != Architecture::Dense {
            return Err(EvoError::contract("transition_to_moe expects a dense model"));
        }
        let mut moe = Model::skeleton(&self.config, Architecture::Moe)?;
        if moe.config.moe_layers().is_empty() && moe.config.n_experts > 1 {
            log::warn!(
                "placement {:?} yields no MoE layers; {} experts will be unused",
                moe.config.moe_placement,
                moe.config.n_experts
            );
        }
        let mut router_rng = Rng::new(self.config.seed, streams::ROUTER_INIT);
        moe.params.initialize(&mut router_rng, |p| p.kind.is_router());
        let mut shared_rng = Rng::new(self.config.seed, streams::SHARED_EXPERT_INIT);
        moe.params
            .initialize(&mut shared_rng, |p| matches!(p.kind, ParamKind::SharedExpert { .. }));

        let dense_ffns: Vec<Option<FfnIds>> = self
            .blocks
            .iter()
            .map(|b| match &b.ffn {
                FfnSlot::Dense(f) => Some(*f),
                FfnSlot::Moe(_) => None,
            })
            .collect();
        let ids: Vec<(ParamId, String)> = moe.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if let Some(src) = self.params.by_name(&name) {
                moe.params.assign(id, src.data())?;
            }
        }
        for block in &moe.blocks {
            if let FfnSlot::Moe(bank) = &block.ffn {
                let src = dense_ffns[bank.layer].expect("dense model has a dense FFN at every layer");
                for expert in &bank.experts {
                    for (s, d) in src.ids().iter().zip(expert.ids()) {
                        moe.params.assign(d, self.params.tensor(*s).data())?;
                    }
                }
            }
        }
        moe.params.set_trainable(|_| true);
        Ok(moe)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn banks(&self) -> Vec<&ExpertBank> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                FfnSlot::Moe(bank) => Some(bank),
                FfnSlot::Dense(_) => None,
            })
            .collect()
    }

    pub fn n_moe_layers(&self) -> usize {
        self.banks().len()
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<Forward> {
        self.forward_with(batch, &ForwardOptions::default())
    }

    pub fn forward_with(&self, batch: &TokenBatch, opts: &ForwardOptions) -> Result<Forward> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(EvoError::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, cfg.max_seq_len
            )));
        }
        if batch.is_empty() {
            return Err(EvoError::contract("empty batch"));
        }
        batch.check_vocab(cfg.vocab_size)?;
        if let Some(perms) = &opts.permutations {
            if perms.len() != self.n_moe_layers() {
                return Err(EvoError::contract(format!(
                    "{} permutations for {} MoE layers",
                    perms.len(),
                    self.n_moe_layers()
                )));
            }
        }

        let mut tape = Tape::new();
        let pv = self.params.leaves(&mut tape);
        let n = batch.len();
        let positions: Vec<usize> = (0..n).map(|i| i % batch.seq).collect();
        let tok = tape.gather_rows(pv[self.tok_emb.0], &batch.tokens)?;
        let pos = tape.gather_rows(pv[self.pos_emb.0], &positions)?;
        let mut z = tape.add(tok, pos)?;

        let mut outcomes = Vec::new();
        let mut routes = Vec::new();
        for block in &self.blocks {
            let attn = AttentionVars {
                ln_gain: pv[block.ln1.0 .0],
                ln_bias: pv[block.ln1.1 .0],
                wq: pv[block.wq.0],
                wk: pv[block.wk.0],
                wv: pv[block.wv.0],
                wo: pv[block.wo.0],
            };
            let zp = attention_block(&mut tape, z, &attn, batch.batch, batch.seq, cfg.n_heads)?;
            let h = tape.layer_norm(zp, pv[block.ln2.0 .0], pv[block.ln2.1 .0])?;
            z = match &block.ffn {
                FfnSlot::Dense(f) => {
                    let y = ffn_expert_forward(&mut tape, h, &f.vars(&pv))?;
                    tape.add(y, zp)?
                }
                FfnSlot::Moe(bank) => {
                    let (outcome, route) = match &bank.router {
                        RouterIds::Linear { w } => {
                            router::linear_route(&mut tape, h, pv[w.0], cfg.top_k, &batch.modality)?
                        }
                        RouterIds::Dtr {
                            visual,
                            text,
                            head_w,
                            head_b,
                        } => {
                            let hv = |ids: &[ParamId; 4]| HypernetVars {
                                w1: pv[ids[0].0],
                                b1: pv[ids[1].0],
                                w2: pv[ids[2].0],
                                b2: pv[ids[3].0],
                            };
                            let dtr = DtrVars {
                                visual: hv(visual),
                                text: hv(text),
                                head_w: pv[head_w.0],
                                head_b: pv[head_b.0],
                                rank: cfg.dtr_rank,
                            };
                            router::dtr_route(&mut tape, h, &batch.modality, &dtr, cfg.top_k)?
                        }
                    };
                    let mut dispatch = match &opts.permutations {
                        Some(perms) => router::shuffle_assignments(&outcome, &perms[outcomes.len()])?,
                        None => outcome,
                    };
                    if let Some(e) = opts.force_expert {
                        dispatch = router::force_assignments(&dispatch, e)?;
                    }
                    let experts: Vec<FfnVars> = bank.experts.iter().map(|f| f.vars(&pv)).collect();
                    let shared = bank.shared.map(|f| f.vars(&pv));
                    let out = moe_layer_forward(&mut tape, zp, h, &experts, shared.as_ref(), &dispatch, route.gates)?;
                    outcomes.push(dispatch);
                    routes.push(route);
                    out
                }
            };
        }
        let zf = tape.layer_norm(z, pv[self.final_ln.0 .0], pv[self.final_ln.1 .0])?;
        let logits = tape.matmul_nt(zf, pv[self.tok_emb.0])?;
        Ok(Forward {
            tape,
            logits,
            param_vars: pv,
            outcomes,
            routes,
            batch: batch.batch,
            seq: batch.seq,
        })
    }
}

/// `z' = MSA(LN(z)) + z` over `batch·seq` rows of `z`.
pub fn attention_block(
    tape: &mut Tape,
    z: Var,
    p: &AttentionVars,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let h = tape.layer_norm(z, p.ln_gain, p.ln_bias)?;
    let q = tape.matmul(h, p.wq)?;
    let k = tape.matmul(h, p.wk)?;
    let v = tape.matmul(h, p.wv)?;
    let a = tape.causal_attention(q, k, v, batch, seq, heads)?;
    let o = tape.matmul(a, p.wo)?;
    tape.add(o, z)
}

/// `swiglu(x·W_in + b_in)·W_out + b_out`.
pub fn ffn_expert_forward(tape: &mut Tape, x: Var, f: &FfnVars) -> Result<Var> {
    let a = tape.matmul(x, f.w_in)?;
    let a = tape.add_row(a, f.b_in)?;
    let a = tape.swiglu(a)?;
    let y = tape.matmul(a, f.w_out)?;
    tape.add_row(y, f.b_out)
}

/// Sparse expert mixture over the rows of `normed = LN(z')`, plus the
/// optional shared expert, plus the residual `z'`.
pub fn moe_layer_forward(
    tape: &mut Tape,
    residual: Var,
    normed: Var,
    experts: &[FfnVars],
    shared: Option<&FfnVars>,
    routing: &RoutingOutcome,
    gates: Var,
) -> Result<Var> {
    let n = tape.shape(normed)[0];
    let k = routing.top_k;
    if routing.selected.len() != n * k {
        return Err(EvoError::dim("moe_layer_forward", &[n, k], &[routing.selected.len()]));
    }
    if let Some(&bad) = routing.selected.iter().find(|&&e| e >= experts.len()) {
        return Err(EvoError::contract(format!(
            "expert index {bad} >= number of experts {}",
            experts.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (flat, &sel) in routing.selected.iter().enumerate() {
            if sel == e {
                rows.push(flat / k);
                slots.push(flat);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let x = tape.gather_rows(normed, &rows)?;
        let y = ffn_expert_forward(tape, x, expert)?;
        let g = tape.gather_flat(gates, &slots, [slots.len()])?;
        let y = tape.scale_rows(y, g)?;
        let y = tape.scatter_rows(y, &rows, n)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let mut out = acc.ok_or_else(|| EvoError::contract("no tokens routed"))?;
    if let Some(s) = shared {
        let y = ffn_expert_forward(tape, normed, s)?;
        out = tape.add(out, y)?;
    }
    tape.add(out, residual)
}
