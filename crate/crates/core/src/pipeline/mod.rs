//! Three-stage training: dense warm-up, expert evolution, router training.

pub mod adam;
pub mod checkpoint;
pub mod data;

use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};
use crate::evolution::{evolution_step, init_evolved, EvolutionSchedule};
use crate::model::config::ModelConfig;
use crate::model::params::ParamKind;
use crate::model::{Architecture, ForwardOptions, Model};
use crate::objectives::{total_loss, LossReport, DEFAULT_ALPHA};
use crate::rng::streams;

use adam::Adam;
pub use checkpoint::Checkpoint;
use data::SyntheticTaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Dense warm-up; every parameter trains.
    I,
    /// Expert evolution; only expert 0 (and the shared expert) trains.
    II,
    /// Router training; only router parameters train.
    III,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::I),
            2 => Ok(Stage::II),
            3 => Ok(Stage::III),
            other => Err(EvoError::config(format!("stage must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::I => None,
            Stage::II => Some(Stage::I),
            Stage::III => Some(Stage::II),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub warmup: StageSettings,
    pub evolution: StageSettings,
    pub router: StageSettings,
}

impl Default for StagePlan {
    fn default() -> Self {
        let s = |steps| StageSettings {
            steps,
            batch_size: 8,
            learning_rate: 1e-3,
            eval_every: 50,
        };
        StagePlan {
            warmup: s(300),
            evolution: s(200),
            router: s(200),
        }
    }
}

impl StagePlan {
    pub fn get(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::I => &self.warmup,
            Stage::II => &self.evolution,
            Stage::III => &self.router,
        }
    }
}

/// Complete description of a run, as read from the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub stages: StagePlan,
    pub alpha: f64,
    /// `false` trains every replicated expert by gradient in stage II
    /// instead of evolving them (the replication baseline).
    pub evolve_experts: bool,
    pub eval_batches: u64,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            task: SyntheticTaskSpec::default(),
            stages: StagePlan::default(),
            alpha: DEFAULT_ALPHA,
            evolve_experts: true,
            eval_batches: 8,
            eval_batch_size: 16,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.vocab_size, self.model.max_seq_len)?;
        if !(self.alpha >= 0.0) {
            return Err(EvoError::config("alpha must be non-negative"));
        }
        for st in [Stage::I, Stage::II, Stage::III] {
            let s = self.stages.get(st);
            if s.batch_size == 0 || s.eval_every == 0 || !(s.learning_rate > 0.0) {
                return Err(EvoError::config(format!(
                    "stage {} needs positive batch_size, eval_every and learning_rate",
                    st.number()
                )));
            }
        }
        if self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(EvoError::config("evaluation needs at least one batch"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets both the model and data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.task.seed = seed;
        self
    }

    pub fn evolution_schedule(&self) -> Result<EvolutionSchedule> {
        EvolutionSchedule::new(self.model.beta_ranges.clone(), self.model.seed)
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub regressive: f64,
    pub aux: f64,
    pub total: f64,
    pub betas: Vec<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_ce: Option<f64>,
}

/// Model plus optimizer state at a point inside a stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub stage: Stage,
    /// Optimizer steps completed within `stage`.
    pub step: u64,
}

/// Applies the stage's freeze pattern.
pub fn apply_stage_mask(model: &mut Model, stage: Stage, evolve_experts: bool) {
    model.params_mut().set_trainable(|p| match stage {
        Stage::I => true,
        Stage::II => match p.kind {
            ParamKind::Expert { expert, .. } => !evolve_experts || expert == 0,
            ParamKind::SharedExpert { .. } => true,
            _ => !evolve_experts && p.kind.is_router(),
        },
        Stage::III => p.kind.is_router(),
    });
}

/// Fresh state for `stage`. Stage I starts from random init; later stages
/// require the completed previous stage.
pub fn begin_stage(run: &RunConfig, stage: Stage, previous: Option<&TrainState>) -> Result<TrainState> {
    run.validate()?;
    let model = match (stage, previous) {
        (Stage::I, _) => Model::new_dense(&run.model)?,
        (_, None) => {
            return Err(EvoError::contract(format!(
                "stage {} requires a checkpoint from stage {}",
                stage.number(),
                stage.number() - 1
            )))
        }
        (_, Some(prev)) => {
            if Some(prev.stage) != stage.previous() {
                return Err(EvoError::contract(format!(
                    "stage {} requires a stage-{} checkpoint, got stage {}",
                    stage.number(),
                    stage.number() - 1,
                    prev.stage.number()
                )));
            }
            let prev_steps = run.stages.get(prev.stage).steps;
            if prev.step < prev_steps {
                return Err(EvoError::contract(format!(
                    "stage {} checkpoint is incomplete ({} of {} steps)",
                    prev.stage.number(),
                    prev.step,
                    prev_steps
                )));
            }
            if stage == Stage::II {
                let mut m = prev.model.transition_to_moe()?;
                if run.evolve_experts {
                    init_evolved(&mut m);
                }
                m
            } else {
                prev.model.clone()
            }
        }
    };
    let mut model = model;
    apply_stage_mask(&mut model, stage, run.evolve_experts);
    if stage != Stage::I && model.architecture() != Architecture::Moe {
        return Err(EvoError::contract("stages II and III need a sparse model"));
    }
    let optimizer = Adam::new(model.params());
    Ok(TrainState {
        model,
        optimizer,
        stage,
        step: 0,
    })
}

/// How the model runs during `stage`: while experts evolve there is no
/// routing yet and every token goes through the trainable expert 0.
pub fn stage_forward_options(run: &RunConfig, stage: Stage) -> ForwardOptions {
    ForwardOptions {
        force_expert: (stage == Stage::II && run.evolve_experts).then_some(0),
        ..ForwardOptions::default()
    }
}

/// Mean held-out cross-entropy over `run.eval_batches` fixed batches, with
/// ordinary routing.
pub fn eval_ce(model: &Model, run: &RunConfig) -> Result<f64> {
    eval_ce_with(model, &run.task, run.eval_batches, run.eval_batch_size, &ForwardOptions::default())
}

pub fn eval_ce_with(
    model: &Model,
    task: &SyntheticTaskSpec,
    batches: u64,
    batch_size: usize,
    opts: &ForwardOptions,
) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..batches {
        let batch = task.generate_batch(streams::EVAL_DATA, i, batch_size)?;
        let mut fwd = model.forward_with(&batch, opts)?;
        let (_, report) = total_loss(&mut fwd, &batch.targets, 0.0)?;
        sum += report.regressive;
    }
    Ok(sum / batches as f64)
}

/// One optimizer step on training batch `state.step` of the stage stream.
pub fn train_step(state: &mut TrainState, run: &RunConfig, schedule: Option<&EvolutionSchedule>) -> Result<(LossReport, Vec<f64>)> {
    let settings = run.stages.get(state.stage);
    let stream = streams::TRAIN_DATA + state.stage.number() as u64;
    let batch = run.task.generate_batch(stream, state.step, settings.batch_size)?;
    let mut fwd = state.model.forward_with(&batch, &stage_forward_options(run, state.stage))?;
    let (loss, report) = total_loss(&mut fwd, &batch.targets, run.alpha)?;
    if !report.total.is_finite() {
        return Err(EvoError::Numeric {
            step: state.step,
            detail: serde_json::to_string(&report)?,
        });
    }
    let vars = std::mem::take(&mut fwd.param_vars);
    let grads = fwd.tape.backward(loss)?;
    let params = state.model.params_mut();
    params.zero_grad();
    params.accumulate(&vars, &grads);
    state.optimizer.step(params, settings.learning_rate);
    params.zero_grad();
    let betas = match schedule {
        Some(s) if state.stage == Stage::II && run.evolve_experts => evolution_step(&mut state.model, s, state.step)?,
        _ => Vec::new(),
    };
    state.step += 1;
    Ok((report, betas))
}

/// Runs the remaining steps of the current stage, calling `sink` with every
/// log record.
pub fn run_stage(state: &mut TrainState, run: &RunConfig, mut sink: impl FnMut(&LogRecord)) -> Result<()> {
    let settings = run.stages.get(state.stage).clone();
    let schedule = run.evolution_schedule()?;
    let opts = stage_forward_options(run, state.stage);
    while state.step < settings.steps {
        let (report, betas) = train_step(state, run, Some(&schedule))?;
        let eval = if state.step % settings.eval_every == 0 || state.step == settings.steps {
            Some(eval_ce_with(&state.model, &run.task, run.eval_batches, run.eval_batch_size, &opts)?)
        } else {
            None
        };
        let record = LogRecord {
            step: state.step,
            stage: state.stage.number(),
            regressive: report.regressive,
            aux: report.aux,
            total: report.total,
            betas,
            lr: settings.learning_rate,
            eval_ce: eval,
        };
        if let Some(ce) = eval {
            log::info!(
                "stage {} step {}/{} loss {:.4} eval_ce {:.4}",
                state.stage.number(),
                state.step,
                settings.steps,
                report.total,
                ce
            );
        }
        sink(&record);
    }
    Ok(())
}

/// Boundary snapshots of a complete in-memory run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub dense: TrainState,
    pub evolved: TrainState,
    pub routed: TrainState,
    pub log: Vec<LogRecord>,
}

/// Runs stages I–III back to back.
pub fn run_pipeline(run: &RunConfig) -> Result<PipelineRun> {
    let mut log = Vec::new();
    let mut dense = begin_stage(run, Stage::I, None)?;
    run_stage(&mut dense, run, |r| log.push(r.clone()))?;
    let mut evolved = begin_stage(run, Stage::II, Some(&dense))?;
    run_stage(&mut evolved, run, |r| log.push(r.clone()))?;
    let mut routed = begin_stage(run, Stage::III, Some(&evolved))?;
    run_stage(&mut routed, run, |r| log.push(r.clone()))?;
    Ok(PipelineRun {
        dense,
        evolved,
        routed,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_config_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"alpha": 0.001, "extra": true}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d_model": 64, "colour": 1}}"#).is_err());
    }

    #[test]
    fn later_stages_need_predecessor() {
        let run = RunConfig::default();
        assert!(matches!(begin_stage(&run, Stage::II, None), Err(EvoError::Contract(_))));
        assert!(matches!(begin_stage(&run, Stage::III, None), Err(EvoError::Contract(_))));
    }
}
