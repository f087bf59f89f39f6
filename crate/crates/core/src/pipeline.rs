//! Staged experiment runs with persisted, digested artifacts, and CSV
//! plot data derived from those artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{
    absolute_binning, apply_tuning, characterize, golden_histogram, ideal_reference, score_config, tune_references, ChipCalibration, ResponseCounts,
    SearchGrid, TuneOptions, N_GOLDEN,
};
use crate::config::{vector_set, ExperimentConfig, PipelineStage, TaskKind};
use crate::crossbar::{build_chip, CrossbarModule, ModuleSnapshot};
use crate::drift::{extract_chip, run_drift, summarize, uniform_schedule, DriftTrajectory, ExtractConfig};
use crate::effbits::{eb_map, eb_statistics, EbMap, FitOptions, NoiseProfile};
use crate::error::{Error, Result};
use crate::nn::{argmax, cimw_to_bytes, Network};
use crate::nnsim::{inject_static, map_network, noisy_forward_batch, oracle_forward, quantize_network, MappedNetwork, QuantSpec};
use crate::rng::Streams;
use crate::tasks::{
    accuracy_float, accuracy_quantized, calibration_observations, eval_supervised, evaluate_float, evaluate_policy, evaluate_quantized, generate_dataset,
    train_classifier, train_policy, Dataset, MissionSet,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: PipelineStage,
    /// Outputs of the stages this one consumed.
    pub inputs: Vec<ArtifactDigest>,
    pub outputs: Vec<ArtifactDigest>,
    pub metrics: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Completed stages, in execution order.
    pub stages: Vec<StageRecord>,
    pub failed: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: PipelineStage,
    pub reason: String,
}

impl RunManifest {
    pub fn stage(&self, s: PipelineStage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &ArtifactDigest> {
        self.stages.iter().flat_map(|s| &s.outputs)
    }

    /// Recompute every output digest under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in self.artifacts() {
            let bytes = std::fs::read(dir.join(&a.path))?;
            if sha256_hex(&bytes) != a.sha256 || bytes.len() as u64 != a.bytes {
                return Err(Error::Format { path: Some(dir.join(&a.path)), reason: "digest does not match manifest".into() });
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Plot-ready artifact payloads, tagged with their kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlotArtifact {
    Heatmap { counts: ResponseCounts },
    Histogram { counts: [u64; N_GOLDEN] },
    Trajectory { trajectory: DriftTrajectory },
    Ebmap { map: EbMap },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Heatmap,
    Histogram,
    Trajectory,
    Ebmap,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Heatmap => "heatmap",
            PlotKind::Histogram => "histogram",
            PlotKind::Trajectory => "trajectory",
            PlotKind::Ebmap => "ebmap",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [PlotKind::Heatmap, PlotKind::Histogram, PlotKind::Trajectory, PlotKind::Ebmap]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind {s:?}")))
    }
}

impl PlotArtifact {
    pub fn kind(&self) -> PlotKind {
        match self {
            PlotArtifact::Heatmap { .. } => PlotKind::Heatmap,
            PlotArtifact::Histogram { .. } => PlotKind::Histogram,
            PlotArtifact::Trajectory { .. } => PlotKind::Trajectory,
            PlotArtifact::Ebmap { .. } => PlotKind::Ebmap,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            PlotArtifact::Heatmap { counts } => {
                out.push_str("golden,state,count\n");
                for (g, row) in counts.counts.iter().enumerate() {
                    for (s, c) in row.iter().enumerate() {
                        writeln!(out, "{g},{s},{c}").unwrap();
                    }
                }
            }
            PlotArtifact::Histogram { counts } => {
                out.push_str("value,count\n");
                for (v, c) in counts.iter().enumerate() {
                    writeln!(out, "{v},{c}").unwrap();
                }
            }
            PlotArtifact::Trajectory { trajectory } => {
                out.push_str("cycle,mu0,mu1,accuracy\n");
                for p in &trajectory.points {
                    let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
                    writeln!(out, "{},{},{},{}", p.cycle, p.eb.mu0, p.eb.mu1, acc).unwrap();
                }
            }
            PlotArtifact::Ebmap { map } => {
                out.push_str("group,column,eb,bit\n");
                for c in &map.cells {
                    writeln!(out, "{},{},{},{}", c.group, c.column, c.eb, c.bit).unwrap();
                }
            }
        }
        out
    }
}

/// CSV plot data from a plot artifact file of the expected kind.
pub fn emit_plotdata(artifact: &Path, kind: PlotKind) -> Result<String> {
    let bytes = std::fs::read(artifact)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = value.get("kind").and_then(|k| k.as_str()).unwrap_or("none").to_string();
    if found != kind.name() {
        return Err(Error::KindMismatch { expected: kind.name().into(), found });
    }
    let a: PlotArtifact = serde_json::from_value(value)?;
    Ok(a.to_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    metric: String,
    value: f64,
}

fn report_csv(metrics: &BTreeMap<String, f64>) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in metrics {
        writeln!(out, "{k},{v}").unwrap();
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("artifact serializes");
    b.push(b'\n');
    b
}

/// Pipeline state threaded between stages.
#[derive(Default)]
struct Run {
    modules: Option<Vec<CrossbarModule>>,
    cal: Option<ChipCalibration>,
    profiles: Option<Vec<NoiseProfile>>,
    net: Option<Network>,
    train: Option<Dataset>,
    test: Option<Dataset>,
    mapped: Option<MappedNetwork>,
}

struct StageCtx<'a> {
    dir: &'a Path,
    outputs: Vec<ArtifactDigest>,
    metrics: BTreeMap<String, f64>,
}

impl StageCtx<'_> {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(ArtifactDigest { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn emit_plot(&mut self, stem: &str, a: &PlotArtifact) -> Result<()> {
        self.emit(&format!("{stem}.json"), &to_json(a))?;
        self.emit(&format!("{stem}.csv"), a.to_csv().as_bytes())
    }

    fn metric(&mut self, k: &str, v: f64) {
        self.metrics.insert(k.to_string(), v);
    }
}

fn missing(what: &str) -> Error {
    Error::param(format!("{what} not available; an earlier stage is missing"))
}

/// Run the configured stages in order, writing artifacts and
/// `manifest.json` into `cfg.output_dir`. A failing stage stops the run;
/// the manifest then lists the completed stages and the failure, and the
/// error is returned as [`Error::StageFailed`].
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest {
        tool: "cimsim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stages: Vec::new(),
        failed: None,
    };
    let mut run = Run::default();
    let streams = Streams::new(cfg.seed);
    for &stage in &cfg.pipeline {
        let t = Instant::now();
        let mut ctx = StageCtx { dir: &dir, outputs: Vec::new(), metrics: BTreeMap::new() };
        let res = run_stage(stage, cfg, &streams, &mut run, &mut ctx);
        if let Err(e) = res {
            let reason = e.to_string();
            manifest.failed = Some(StageFailure { stage, reason: reason.clone() });
            std::fs::write(dir.join(MANIFEST_FILE), to_json(&manifest))?;
            return Err(Error::StageFailed { stage: stage.to_string(), reason });
        }
        let inputs = manifest.stages.iter().filter(|r| stage.requires().contains(&r.stage)).flat_map(|r| r.outputs.clone()).collect();
        manifest.stages.push(StageRecord { stage, inputs, outputs: ctx.outputs, metrics: ctx.metrics, seconds: t.elapsed().as_secs_f64() });
    }
    std::fs::write(dir.join(MANIFEST_FILE), to_json(&manifest))?;
    Ok(manifest)
}

fn extract_config(cfg: &ExperimentConfig) -> ExtractConfig {
    ExtractConfig {
        scope: cfg.scope,
        vectors: vector_set(cfg.extract.vectors),
        fit: FitOptions { intercept: cfg.extract.intercept, ..Default::default() },
        bins: cfg.extract.bins,
        max_residuals: cfg.extract.max_residuals,
    }
}

fn chip_counts(modules: &[CrossbarModule], vectors: usize, streams: &Streams) -> (ResponseCounts, [u64; N_GOLDEN]) {
    let mut counts = ResponseCounts::default();
    let mut hist = [0u64; N_GOLDEN];
    for m in modules {
        let ch = characterize(m, vector_set(vectors), streams);
        counts.merge(&ch.counts());
        for (h, x) in hist.iter_mut().zip(golden_histogram(&ch.trials)) {
            *h += x;
        }
    }
    (counts, hist)
}

fn mean_abs_error(counts: &ResponseCounts) -> f64 {
    score_config(counts, &absolute_binning(counts)) / counts.total().max(1) as f64
}

/// Task inputs used by the `forward` stage.
fn forward_inputs(cfg: &ExperimentConfig, run: &Run, streams: &Streams) -> Result<Vec<Vec<f32>>> {
    let n = cfg.task.forward_items;
    Ok(match cfg.task.kind {
        TaskKind::Supervised => {
            let test = run.test.as_ref().ok_or_else(|| missing("test set"))?;
            (0..n.min(test.len())).map(|i| test.input(i)).collect()
        }
        TaskKind::Gridworld => (0..n as u64).map(|i| cfg.task.gridworld.mission(streams, MissionSet::Test, i).observe().to_vec()).collect(),
    })
}

/// Accuracy (classifier) or win rate (policy) of a mapped network.
fn noisy_score(cfg: &ExperimentConfig, run: &Run, net: &MappedNetwork, streams: &Streams) -> Result<f64> {
    match cfg.task.kind {
        TaskKind::Supervised => eval_supervised(net, run.test.as_ref().ok_or_else(|| missing("test set"))?, cfg.task.eval_items, streams),
        TaskKind::Gridworld => Ok(evaluate_policy(net, &cfg.task.gridworld, cfg.task.eval_items, streams, cfg.task.reinject).win_rate),
    }
}

fn run_stage(stage: PipelineStage, cfg: &ExperimentConfig, streams: &Streams, run: &mut Run, ctx: &mut StageCtx) -> Result<()> {
    let chip = cfg.chip_params()?;
    match stage {
        PipelineStage::Characterize => {
            let modules = build_chip(&chip, streams)?;
            let snaps: Vec<ModuleSnapshot> = modules.iter().map(|m| m.snapshot()).collect();
            ctx.emit("modules.json", &to_json(&snaps))?;
            let (counts, hist) = chip_counts(&modules, cfg.characterize.vectors, streams);
            ctx.metric("default_mae", mean_abs_error(&counts));
            ctx.emit_plot("heatmap", &PlotArtifact::Heatmap { counts })?;
            ctx.emit_plot("histogram", &PlotArtifact::Histogram { counts: hist })?;
            run.modules = Some(modules);
        }
        PipelineStage::Calibrate => {
            let modules = run.modules.as_mut().ok_or_else(|| missing("chip"))?;
            let base = chip.adc.reference;
            let c = &cfg.calib;
            let mut grid = SearchGrid::around(&base, c.n_offsets, c.n_steps, &c.v_scales);
            if c.include_ideal {
                if let Ok(ideal) = ideal_reference(&chip.device, &chip.xfer, base.v_blt) {
                    grid = grid.with(&ideal);
                }
            }
            let opts = TuneOptions { weights: c.weights };
            let rep = tune_references(modules, cfg.scope, &grid, &base, c.vectors, &opts, streams)?;
            let cal = apply_tuning(modules, &rep);
            let units = rep.units();
            let trials: u64 = units.iter().map(|u| u.n_trials).sum();
            ctx.metric("tuned_score", rep.total_score());
            ctx.metric("default_score", units.iter().map(|u| u.baseline_score).sum());
            ctx.metric("tuned_mae", rep.total_score() / trials.max(1) as f64);
            ctx.metric("default_mae", units.iter().map(|u| u.baseline_score).sum::<f64>() / trials.max(1) as f64);
            ctx.emit("tuning.json", &to_json(&rep))?;
            ctx.emit("tuned_configs.json", &to_json(&rep.records()))?;
            ctx.emit("calibration.json", &to_json(&cal))?;
            let (counts, _) = chip_counts(modules, cfg.characterize.vectors, streams);
            ctx.emit_plot("heatmap_tuned", &PlotArtifact::Heatmap { counts })?;
            run.cal = Some(cal);
        }
        PipelineStage::Extract => {
            let modules = run.modules.as_ref().ok_or_else(|| missing("chip"))?;
            let cal = run.cal.as_ref().ok_or_else(|| missing("calibration"))?;
            let ec = extract_config(cfg);
            let fits = extract_chip(modules, cal, &ec, streams)?;
            let profiles = eb_statistics(&fits, ec.scope, ec.bins, ec.max_residuals)?;
            let summary = summarize(&fits);
            ctx.metric("mu0", summary.mu0);
            ctx.metric("sigma0", summary.sigma0);
            ctx.metric("mu1", summary.mu1);
            ctx.metric("sigma1", summary.sigma1);
            ctx.emit("profiles.json", &to_json(&profiles))?;
            ctx.emit_plot("ebmap", &PlotArtifact::Ebmap { map: eb_map(&fits[0]) })?;
            run.profiles = Some(profiles);
        }
        PipelineStage::Train => match cfg.task.kind {
            TaskKind::Supervised => {
                let p = &cfg.task.supervised;
                let train = generate_dataset(p.n_train, 0, p, streams)?;
                let test = generate_dataset(p.n_test, 1, p, streams)?;
                let net = train_classifier(&train, p, streams)?;
                ctx.metric("float_accuracy", accuracy_float(&net, &test, cfg.task.eval_items)?);
                ctx.emit("train.cimd", &train.to_bytes())?;
                ctx.emit("test.cimd", &test.to_bytes())?;
                ctx.emit("network.cimw", &cimw_to_bytes(&net))?;
                run.train = Some(train);
                run.test = Some(test);
                run.net = Some(net);
            }
            TaskKind::Gridworld => {
                let (net, report) = train_policy(&cfg.task.gridworld, &cfg.task.dqn, streams)?;
                ctx.metric("validation_win_rate", report.best_win_rate);
                ctx.emit("network.cimw", &cimw_to_bytes(&net))?;
                ctx.emit("train_report.json", &to_json(&report))?;
                run.net = Some(net);
            }
        },
        PipelineStage::Inject => {
            let net = run.net.as_ref().ok_or_else(|| missing("network"))?;
            let profiles = run.profiles.clone().ok_or_else(|| missing("noise profiles"))?;
            let calib = match cfg.task.kind {
                TaskKind::Supervised => {
                    let train = run.train.as_ref().ok_or_else(|| missing("training set"))?;
                    (0..cfg.task.calib_inputs).map(|i| train.input(i)).collect()
                }
                TaskKind::Gridworld => calibration_observations(&cfg.task.gridworld, streams, cfg.task.calib_inputs),
            };
            let q = quantize_network(net, &QuantSpec::calibrate(net, cfg.task.w_bits(), cfg.task.a_bits, &calib)?)?;
            let mapped = inject_static(&map_network(&q, profiles, streams)?, streams);
            ctx.metric("units", mapped.layers.iter().map(|l| l.assign.len()).sum::<usize>() as f64);
            ctx.emit("quant.json", &to_json(&q))?;
            ctx.emit("mapped.json", &to_json(&mapped))?;
            run.mapped = Some(mapped);
        }
        PipelineStage::Forward => {
            let mapped = run.mapped.as_ref().ok_or_else(|| missing("mapped network"))?;
            let inputs = forward_inputs(cfg, run, streams)?;
            let noisy = noisy_forward_batch(mapped, &inputs, streams);
            let mut csv = String::from("item,output,noisy,clean\n");
            let mut agree = 0usize;
            for (i, (x, y)) in inputs.iter().zip(&noisy).enumerate() {
                let clean = oracle_forward(&mapped.quant, x);
                agree += (argmax(&clean) == argmax(y)) as usize;
                for (o, (a, b)) in y.iter().zip(&clean).enumerate() {
                    writeln!(csv, "{i},{o},{a},{b}").unwrap();
                }
            }
            ctx.metric("argmax_agreement", agree as f64 / inputs.len().max(1) as f64);
            ctx.emit("forward.csv", csv.as_bytes())?;
        }
        PipelineStage::Evaluate => {
            let mapped = run.mapped.as_ref().ok_or_else(|| missing("mapped network"))?;
            let net = run.net.as_ref().ok_or_else(|| missing("network"))?;
            let n = cfg.task.eval_items;
            match cfg.task.kind {
                TaskKind::Supervised => {
                    let test = run.test.as_ref().ok_or_else(|| missing("test set"))?;
                    ctx.metric("float", accuracy_float(net, test, n)?);
                    ctx.metric("clean_quantized", accuracy_quantized(&mapped.quant, test, n)?);
                    ctx.metric("noisy", eval_supervised(mapped, test, n, streams)?);
                }
                TaskKind::Gridworld => {
                    let fam = &cfg.task.gridworld;
                    let float = evaluate_float(net, fam, n, streams, MissionSet::Test);
                    let clean = evaluate_quantized(&mapped.quant, fam, n, streams);
                    let noisy = evaluate_policy(mapped, fam, n, streams, cfg.task.reinject);
                    ctx.metric("float", float.win_rate);
                    ctx.metric("clean_quantized", clean.win_rate);
                    ctx.metric("noisy", noisy.win_rate);
                    ctx.metric("noisy_mean_steps", noisy.mean_steps);
                    ctx.metric("noisy_std_err", noisy.std_err());
                }
            }
            ctx.emit("report.json", &to_json(&ctx.metrics.iter().map(|(k, v)| ReportRow { metric: k.clone(), value: *v }).collect::<Vec<_>>()))?;
            let csv = report_csv(&ctx.metrics);
            ctx.emit("report.csv", csv.as_bytes())?;
        }
        PipelineStage::Drift => {
            let mut modules = run.modules.clone().ok_or_else(|| missing("chip"))?;
            let cal = run.cal.as_ref().ok_or_else(|| missing("calibration"))?;
            let s = &cfg.stress;
            let schedule = uniform_schedule(s.events, s.v_bl, s.v_wl, s.cycles);
            let drift = cfg.drift_params()?;
            let ec = extract_config(cfg);
            let run_ref: &Run = run;
            let traj = run_drift(&mut modules, cal, &schedule, &drift, chip.device.g_lrs_nom(), &ec, streams, |profiles| match &run_ref.mapped {
                Some(m) => {
                    let net = inject_static(&m.with_profiles(profiles.to_vec())?, streams);
                    noisy_score(cfg, run_ref, &net, streams).map(Some)
                }
                None => Ok(None),
            })?;
            let last = traj.points.last().expect("baseline point");
            ctx.metric("final_mu0", last.eb.mu0);
            ctx.metric("final_mu1", last.eb.mu1);
            if let Some(a) = last.accuracy {
                ctx.metric("final_accuracy", a);
            }
            ctx.emit_plot("trajectory", &PlotArtifact::Trajectory { trajectory: traj })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{DriftPoint, EbSummary};

    #[test]
    fn empty_pipeline_has_no_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..Default::default() };
        let m = run_pipeline(&cfg).unwrap();
        assert!(m.stages.is_empty());
        assert!(m.failed.is_none());
        assert_eq!(RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn csv_shapes() {
        let h = PlotArtifact::Heatmap { counts: ResponseCounts::default() }.to_csv();
        assert_eq!(h.lines().count(), 161);
        assert_eq!(h.lines().next().unwrap(), "golden,state,count");
        let g = PlotArtifact::Histogram { counts: [1; N_GOLDEN] }.to_csv();
        assert_eq!(g.lines().count(), 11);
        let eb = EbSummary { mu0: 0.0, sigma0: 0.0, mu1: 1.0, sigma1: 0.0 };
        let points = (0..11).map(|i| DriftPoint { cycle: i * 50_000, eb, accuracy: (i > 0).then_some(0.5) }).collect();
        let t = PlotArtifact::Trajectory { trajectory: DriftTrajectory { points } }.to_csv();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "cycle,mu0,mu1,accuracy");
        assert_eq!(lines[1], "0,0,1,");
        assert_eq!(lines[2], "50000,0,1,0.5");
    }

    #[test]
    fn plot_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        std::fs::write(&p, to_json(&PlotArtifact::Histogram { counts: [2; N_GOLDEN] })).unwrap();
        assert!(emit_plotdata(&p, PlotKind::Histogram).unwrap().starts_with("value,count\n0,2\n"));
        assert!(matches!(emit_plotdata(&p, PlotKind::Heatmap), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn missing_prerequisite_state_fails_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..Default::default() };
        let mut run = Run::default();
        let mut ctx = StageCtx { dir: dir.path(), outputs: Vec::new(), metrics: BTreeMap::new() };
        assert!(run_stage(PipelineStage::Calibrate, &cfg, &Streams::new(1), &mut run, &mut ctx).is_err());
    }
}
