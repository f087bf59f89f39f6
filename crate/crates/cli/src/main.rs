//! `cimsim`: run experiment pipelines and turn their artifacts into plot data.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 when a
//! stage fails.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cimsim_core::config::{ExperimentConfig, PipelineStage, TaskKind};
use cimsim_core::pipeline::{emit_plotdata, run_pipeline, PlotKind, RunManifest, MANIFEST_FILE};
use cimsim_core::{Error, TuningScope};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cimsim", version, about = "RRAM compute-in-memory noise simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the file and CIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Tuning and extraction scope: global, module or adc.
    #[arg(long)]
    scope: Option<TuningScope>,
    /// Wordline vectors per group for the subcommand's own stage.
    #[arg(long)]
    vectors: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the chip and record response counts under the baseline ladder.
    Characterize(Common),
    /// Tune ADC references and write tuned configs and heatmaps.
    Calibrate(Common),
    /// Fit effective bits and write noise profiles and an eb map.
    ExtractEb(Common),
    /// Train, quantize and map the task network with injected static noise.
    Inject(Common),
    /// Push task inputs through the noisy mapped network.
    Forward(Common),
    /// Stress the chip and track effective bits and accuracy.
    DriftRun(Common),
    /// Train the GridWorld policy.
    TrainGridworld(Common),
    /// Clean and noisy GridWorld win rates.
    EvalGridworld(Common),
    /// Clean and noisy classifier accuracy.
    EvalSupervised(Common),
    /// Run the stage list of the config file.
    Pipeline(Common),
    /// Convert a plot artifact (JSON) to CSV.
    EmitPlot {
        #[arg(long)]
        artifact: PathBuf,
        /// heatmap, histogram, trajectory or ebmap.
        #[arg(long)]
        kind: PlotKind,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl Failure {
    fn of(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.into()),
            other => Failure::Stage(other.into()),
        }
    }
}

fn resolve(common: &Common, plan: Option<Vec<PipelineStage>>, task: Option<TaskKind>, vector_stage: Option<PipelineStage>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(Failure::of)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.scope {
        cfg.scope = s;
    }
    if let Some(p) = plan {
        cfg.pipeline = p;
    }
    if let Some(k) = task {
        cfg.task.kind = k;
    }
    if let (Some(n), Some(stage)) = (common.vectors, vector_stage) {
        match stage {
            PipelineStage::Characterize => cfg.characterize.vectors = n,
            PipelineStage::Calibrate => cfg.calib.vectors = n,
            _ => cfg.extract.vectors = n,
        }
    }
    cfg.validate().map_err(Failure::of)?;
    Ok(cfg)
}

fn run(common: &Common, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.unwrap_or(0))
        .build()
        .context("building thread pool")
        .map_err(Failure::Config)?;
    let manifest = pool.install(|| run_pipeline(cfg)).map_err(Failure::of)?;
    report(&manifest, cfg);
    Ok(())
}

fn report(m: &RunManifest, cfg: &ExperimentConfig) {
    for s in &m.stages {
        let metrics: Vec<String> = s.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        println!("{:<13}{:>8.2}s  {}", s.stage, s.seconds, metrics.join(" "));
    }
    println!("manifest: {}", cfg.output_dir.join(MANIFEST_FILE).display());
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    use PipelineStage as S;
    let drift_plan = vec![S::Characterize, S::Calibrate, S::Extract, S::Train, S::Inject, S::Drift];
    let (common, plan, task, vector_stage) = match cli.command {
        Command::EmitPlot { artifact, kind, out } => {
            let csv = emit_plotdata(&artifact, kind).map_err(Failure::of)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display())).map_err(Failure::Stage)?,
                None => print!("{csv}"),
            }
            return Ok(());
        }
        Command::Characterize(c) => (c, Some(vec![S::Characterize]), None, Some(S::Characterize)),
        Command::Calibrate(c) => (c, Some(S::Calibrate.closure()), None, Some(S::Calibrate)),
        Command::ExtractEb(c) => (c, Some(S::Extract.closure()), None, Some(S::Extract)),
        Command::Inject(c) => (c, Some(S::Inject.closure()), None, Some(S::Extract)),
        Command::Forward(c) => (c, Some(S::Forward.closure()), None, Some(S::Extract)),
        Command::DriftRun(c) => (c, Some(drift_plan), None, Some(S::Extract)),
        Command::TrainGridworld(c) => (c, Some(vec![S::Train]), Some(TaskKind::Gridworld), None),
        Command::EvalGridworld(c) => (c, Some(S::Evaluate.closure()), Some(TaskKind::Gridworld), Some(S::Extract)),
        Command::EvalSupervised(c) => (c, Some(S::Evaluate.closure()), Some(TaskKind::Supervised), Some(S::Extract)),
        Command::Pipeline(c) => (c, None, None, None),
    };
    let cfg = resolve(&common, plan, task, vector_stage)?;
    run(&common, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("cimsim: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("cimsim: {e:#}");
            ExitCode::from(3)
        }
    }
}
