mod artifacts;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde_json::json;

use evomoe::diagnostics::{
    eval_stream, last_moe_layer, logit_kde, modality_distribution, shuffle_probe, write_dist_csv, write_kde_csv,
    write_shuffle_csv, ProbeKind, ProbeReport,
};
use evomoe::pipeline::{begin_stage, eval_ce_with, run_stage, Checkpoint, RunConfig, Stage};
use evomoe::{Architecture, EvoError};

use artifacts::{config_hash, log_path, write_artifact};

const DEFAULT_SEED: u64 = 42;

/// `println!` that tolerates a closed stdout (`evomoe ... | head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "evomoe", version, about = "Three-stage expert evolution and routing probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write its checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Checkpoint of the previous stage (stages 2 and 3)
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Held-out cross-entropy of a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        batches: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Routing diagnostics on a sparse checkpoint
    Probe {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the resolved run configuration as JSON
    ExportConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a checkpoint
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Shuffle,
    Kde,
    Dist,
}

fn init_logging() {
    let level = match std::env::var("EVOMOE_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn exit_code(e: &EvoError) -> u8 {
    match e {
        EvoError::Numeric { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> evomoe::Result<()> {
    match cmd {
        Command::Train {
            config,
            stage,
            from,
            out,
            seed,
        } => train(config.as_deref(), stage, from.as_deref(), &out, seed),
        Command::Eval { ckpt, batches, seed } => eval(&ckpt, batches, seed),
        Command::Probe {
            kind,
            ckpt,
            out,
            trials,
            layer,
            seed,
        } => probe(kind, &ckpt, &out, trials, layer, seed),
        Command::ExportConfig { config, out, seed } => export_config(config.as_deref(), out.as_deref(), seed),
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

fn read_config(path: &Path) -> evomoe::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvoError::Config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

/// flag > config > 42. A config file that omits the seed resolves to the
/// fixed default.
fn resolve(run: RunConfig, flag: Option<u64>) -> RunConfig {
    let seed = flag.unwrap_or(run.model.seed);
    run.with_seed(seed)
}

fn announce(run: &RunConfig) {
    say!("seed={}", run.model.seed);
    say!("config_sha256={}", config_hash(run));
    say!("config={}", serde_json::to_string(run).expect("config serializes"));
}

fn load(path: &Path) -> evomoe::Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        EvoError::Io(io) => EvoError::Format(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn train(config: Option<&Path>, stage: u8, from: Option<&Path>, out: &Path, seed: Option<u64>) -> evomoe::Result<()> {
    let stage = Stage::from_number(stage)?;
    let previous = match (stage, from) {
        (Stage::I, Some(_)) => return Err(EvoError::Contract("stage 1 starts from scratch; drop --from".into())),
        (Stage::I, None) => None,
        (_, None) => {
            return Err(EvoError::Contract(format!(
                "stage {} requires --from with a stage-{} checkpoint",
                stage.number(),
                stage.number() - 1
            )))
        }
        (_, Some(p)) => Some(load(p)?),
    };
    let base = match (config, &previous) {
        (Some(p), _) => read_config(p)?,
        (None, Some(ck)) => ck.run.clone(),
        (None, None) => RunConfig::default().with_seed(DEFAULT_SEED),
    };
    let run = resolve(base, seed);
    if let Some(ck) = &previous {
        let strip = |r: &RunConfig| {
            let mut m = r.model.clone();
            m.seed = 0;
            m
        };
        if strip(&ck.run) != strip(&run) {
            return Err(EvoError::Config("model section differs from the checkpoint it resumes".into()));
        }
    }
    announce(&run);

    let mut state = begin_stage(&run, stage, previous.as_ref().map(|c| &c.state))?;
    let settings = run.stages.get(stage);
    info!(
        "stage {}: {} steps, batch {}, lr {}",
        stage.number(),
        settings.steps,
        settings.batch_size,
        settings.learning_rate
    );
    let mut log = Vec::new();
    let header = json!({
        "header": {
            "stage": stage.number(),
            "seed": run.model.seed,
            "config_sha256": config_hash(&run),
            "optimizer": "adam",
            "lr_schedule": "constant",
            "learning_rate": settings.learning_rate,
            "note": "constant learning rate Adam, no warmup or cosine decay",
        }
    });
    writeln!(log, "{header}")?;
    run_stage(&mut state, &run, |r| {
        debug!("step {} total {:.6}", r.step, r.total);
        let line = serde_json::to_string(r).expect("record serializes");
        log.extend_from_slice(line.as_bytes());
        log.push(b'\n');
    })?;

    let ck = Checkpoint::new(run.clone(), state);
    write_artifact(out, "checkpoint", &run, &ck.to_bytes())?;
    let log_file = log_path(out);
    write_artifact(&log_file, "training_log", &run, &log)?;
    say!("checkpoint={}", out.display());
    say!("log={}", log_file.display());
    Ok(())
}

fn eval(ckpt: &Path, batches: Option<u64>, seed: Option<u64>) -> evomoe::Result<()> {
    let ck = load(ckpt)?;
    let mut run = ck.run.clone();
    if let Some(s) = seed {
        run.task.seed = s;
        run.model.seed = s;
    }
    announce(&run);
    let batches = batches.unwrap_or(run.eval_batches);
    if batches == 0 {
        return Err(EvoError::Contract("--batches must be positive".into()));
    }
    let ce = eval_ce_with(
        &ck.state.model,
        &run.task,
        batches,
        run.eval_batch_size,
        &Default::default(),
    )?;
    if !ce.is_finite() {
        return Err(EvoError::Numeric {
            step: ck.state.step,
            detail: format!("held-out CE is {ce}"),
        });
    }
    say!("eval_ce={ce:.17e}");
    Ok(())
}

fn probe(kind: Kind, ckpt: &Path, out: &Path, trials: usize, layer: Option<usize>, seed: Option<u64>) -> evomoe::Result<()> {
    let ck = load(ckpt)?;
    if ck.state.model.architecture() != Architecture::Moe {
        return Err(EvoError::Contract(format!(
            "{} is a dense checkpoint; probes need stage 2 or later",
            ckpt.display()
        )));
    }
    let seed = seed.unwrap_or(ck.run.model.seed);
    let run = ck.run.clone();
    say!("seed={seed}");
    say!("config_sha256={}", config_hash(&run));
    say!("config={}", serde_json::to_string(&run).expect("config serializes"));

    std::fs::create_dir_all(out)?;
    let data = eval_stream(&run.task, run.eval_batches, run.eval_batch_size)?;
    let model = &ck.state.model;
    let tokens: usize = data.iter().map(|b| b.len()).sum();
    let mut csv = Vec::new();
    let (kind, mut report) = match kind {
        Kind::Shuffle => {
            if trials == 0 {
                return Err(EvoError::Contract("--trials must be positive".into()));
            }
            let r = shuffle_probe(model, &data, trials, seed)?;
            write_shuffle_csv(&mut csv, &r)?;
            (ProbeKind::Shuffle, ProbeReport::from_shuffle(&r, seed, tokens))
        }
        Kind::Kde => {
            let layer = match layer {
                Some(l) => l,
                None => last_moe_layer(model)?,
            };
            let r = logit_kde(model, &data, layer)?;
            write_kde_csv(&mut csv, &r)?;
            (ProbeKind::Kde, ProbeReport::from_kde(&r, seed))
        }
        Kind::Dist => {
            let mut layers = modality_distribution(model, &data)?;
            if let Some(l) = layer {
                layers.retain(|d| d.layer == l);
                if layers.is_empty() {
                    return Err(EvoError::Contract(format!("layer {l} is not an MoE layer")));
                }
            }
            write_dist_csv(&mut csv, &layers)?;
            (ProbeKind::Dist, ProbeReport::from_dist(&layers, seed))
        }
    };
    let csv_path = out.join(kind.csv_name());
    write_artifact(&csv_path, "probe_csv", &run, &csv)?;
    report.path = Some(csv_path.display().to_string());
    let json_path = csv_path.with_extension("json");
    let body = serde_json::to_string_pretty(&report)? + "\n";
    write_artifact(&json_path, "probe_report", &run, body.as_bytes())?;
    for (k, v) in &report.aggregate {
        say!("{k}={v}");
    }
    say!("csv={}", csv_path.display());
    say!("report={}", json_path.display());
    Ok(())
}

fn export_config(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> evomoe::Result<()> {
    let base = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default().with_seed(DEFAULT_SEED),
    };
    let run = resolve(base, seed);
    run.validate()?;
    let text = run.to_json_pretty() + "\n";
    match out {
        Some(p) => {
            write_artifact(p, "config", &run, text.as_bytes())?;
            announce(&run);
            say!("config_file={}", p.display());
        }
        None => say!("{}", text.trim_end()),
    }
    Ok(())
}

fn inspect(ckpt: &Path) -> evomoe::Result<()> {
    let ck = load(ckpt)?;
    let st = &ck.state;
    let params = st.model.params();
    let total = params.total_len();
    let trainable: usize = params
        .iter()
        .filter(|(id, _)| params.is_trainable(*id))
        .map(|(_, p)| p.tensor.numel())
        .sum();
    announce(&ck.run);
    say!("stage={}", st.stage.number());
    say!("step={}", st.step);
    say!(
        "architecture={}",
        match st.model.architecture() {
            Architecture::Dense => "dense",
            Architecture::Moe => "moe",
        }
    );
    say!("moe_layers={:?}", st.model.banks().iter().map(|b| b.layer).collect::<Vec<_>>());
    say!("parameters={total}");
    say!("trainable={trainable}");
    say!("arrays={}", params.len());
    for (name, s) in ck.rng_states() {
        say!("rng.{name}=seed {} stream {} word {}", s.seed, s.stream, s.word_pos);
    }
    Ok(())
}
