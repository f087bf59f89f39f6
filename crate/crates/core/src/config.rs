//! Experiment configuration: a sectioned TOML file resolved into the
//! parameter types of the simulator.
//!
//! Every key has a default, so an empty file is a valid configuration of
//! the default chip with an empty pipeline. The only environment override
//! is `CIM_SEED`, which replaces the top-level `seed`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adc::{AdcParams, AdcRefConfig};
use crate::calib::{TuningScope, VectorSet, N_GOLDEN};
use crate::crossbar::{ChipParams, TransferParams};
use crate::device::{CellDistParams, DriftParams};
use crate::error::{Error, Result};
use crate::tasks::{DqnParams, MissionFamily, SupervisedParams};

pub const SEED_ENV: &str = "CIM_SEED";

/// Stages of an experiment pipeline, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Characterize,
    Calibrate,
    Extract,
    Train,
    Inject,
    Forward,
    Evaluate,
    Drift,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 8] = [
        PipelineStage::Characterize,
        PipelineStage::Calibrate,
        PipelineStage::Extract,
        PipelineStage::Train,
        PipelineStage::Inject,
        PipelineStage::Forward,
        PipelineStage::Evaluate,
        PipelineStage::Drift,
    ];

    /// Stages that must run earlier in the same pipeline.
    pub fn requires(self) -> &'static [PipelineStage] {
        use PipelineStage::*;
        match self {
            Characterize | Train => &[],
            Calibrate => &[Characterize],
            Extract | Drift => &[Calibrate],
            Inject => &[Extract, Train],
            Forward | Evaluate => &[Inject],
        }
    }

    pub fn name(self) -> &'static str {
        use PipelineStage::*;
        match self {
            Characterize => "characterize",
            Calibrate => "calibrate",
            Extract => "extract",
            Train => "train",
            Inject => "inject",
            Forward => "forward",
            Evaluate => "evaluate",
            Drift => "drift",
        }
    }

    /// The shortest canonical pipeline ending in `self`.
    pub fn closure(self) -> Vec<PipelineStage> {
        let mut need = vec![self];
        let mut i = 0;
        while i < need.len() {
            for r in need[i].requires() {
                if !need.contains(r) {
                    need.push(*r);
                }
            }
            i += 1;
        }
        need.sort();
        need
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PipelineStage::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown pipeline stage {s:?}")))
    }
}

/// Named starting points for the chip sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChipPreset {
    /// Library defaults.
    #[default]
    Default,
    /// Zero cell variance and zero comparator mismatch.
    Ideal,
    /// Doubled cell variance and a noisy comparator bank.
    HighVariation,
}

impl ChipPreset {
    pub fn params(self) -> ChipParams {
        let base = ChipParams::default();
        match self {
            ChipPreset::Default => base,
            ChipPreset::Ideal => ChipParams { device: base.device.noiseless(), adc: AdcParams::ideal(base.adc.reference), ..base },
            ChipPreset::HighVariation => {
                let step = base.adc.reference.step;
                ChipParams {
                    device: CellDistParams::new(0.0, 0.1, 0.1f64.ln(), 0.3).expect("valid preset"),
                    adc: AdcParams { sigma_static: 1.5 * step, sigma_dynamic: 0.2 * step, ..base.adc },
                    ..base
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipSection {
    #[serde(default)]
    pub preset: ChipPreset,
    pub n_modules: Option<usize>,
}

/// Overrides of the preset's cell distribution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub g_lrs_mu: Option<f64>,
    pub g_lrs_sigma: Option<f64>,
    pub g_hrs_mu: Option<f64>,
    pub g_hrs_sigma: Option<f64>,
}

/// Baseline reference ladder and mismatch magnitudes, in volts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSection {
    pub offset: Option<f64>,
    pub step: Option<f64>,
    pub v_blt: Option<f64>,
    pub sigma_static: Option<f64>,
    pub sigma_dynamic: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XferSection {
    pub v_read: Option<f64>,
    pub g_half: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub alpha_hrs: Option<f64>,
    pub beta_lrs: Option<f64>,
    pub v_ref_bl: Option<f64>,
    pub gamma_v: Option<f64>,
    pub seconds_per_cycle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeSection {
    /// Random wordline vectors per group; 512 selects every input once.
    pub vectors: usize,
}

impl Default for CharacterizeSection {
    fn default() -> Self {
        Self { vectors: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// Random wordline vectors per group in the tuning trace.
    pub vectors: usize,
    pub n_offsets: usize,
    pub n_steps: usize,
    /// Multipliers of the baseline v_blt.
    pub v_scales: Vec<f64>,
    /// Add the ideal ladder of the nominal device to the grid.
    pub include_ideal: bool,
    pub weights: Option<[f64; N_GOLDEN]>,
}

impl Default for CalibSection {
    fn default() -> Self {
        Self { vectors: 256, n_offsets: 16, n_steps: 16, v_scales: vec![0.9, 1.0, 1.1, 1.2], include_ideal: true, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    /// Wordline vectors per group; 512 selects every input once.
    pub vectors: usize,
    pub bins: usize,
    pub max_residuals: usize,
    pub intercept: bool,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { vectors: 512, bins: 32, max_residuals: 4096, intercept: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Supervised,
    Gridworld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Weight bits; 5 for the classifier and 4 for the policy when absent.
    pub w_bits: Option<u8>,
    pub a_bits: u8,
    /// Inputs used to fix activation scales.
    pub calib_inputs: usize,
    /// Test images or test missions per evaluation.
    pub eval_items: usize,
    /// Inputs pushed through the `forward` stage.
    pub forward_items: usize,
    /// Draw fresh static noise for every test mission.
    pub reinject: bool,
    pub supervised: SupervisedParams,
    pub dqn: DqnParams,
    pub gridworld: MissionFamily,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Supervised,
            w_bits: None,
            a_bits: 6,
            calib_inputs: 200,
            eval_items: 1000,
            forward_items: 16,
            reinject: true,
            supervised: SupervisedParams::default(),
            dqn: DqnParams::default(),
            gridworld: MissionFamily::default(),
        }
    }
}

impl TaskSection {
    pub fn w_bits(&self) -> u8 {
        self.w_bits.unwrap_or(match self.kind {
            TaskKind::Supervised => 5,
            TaskKind::Gridworld => 4,
        })
    }
}

/// Uniform stress schedule of the `drift` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressSection {
    pub events: usize,
    pub cycles: u64,
    pub v_bl: f64,
    pub v_wl: f64,
}

impl Default for StressSection {
    fn default() -> Self {
        Self { events: 10, cycles: 50_000, v_bl: 1.3, v_wl: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_scope")]
    pub scope: TuningScope,
    #[serde(default)]
    pub pipeline: Vec<PipelineStage>,
    #[serde(default)]
    pub chip: ChipSection,
    #[serde(default)]
    pub device: DeviceSection,
    #[serde(default)]
    pub adc: AdcSection,
    #[serde(default)]
    pub xfer: XferSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub characterize: CharacterizeSection,
    #[serde(default)]
    pub calib: CalibSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub stress: StressSection,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("cimsim-out")
}

fn default_scope() -> TuningScope {
    TuningScope::Module
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

fn config_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// `512` selects the exhaustive set.
pub fn vector_set(n: usize) -> VectorSet {
    if n == crate::crossbar::WL_PATTERNS as usize {
        VectorSet::Exhaustive
    } else {
        VectorSet::Random(n)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(config_err)
    }

    /// Parse `path`, apply `CIM_SEED` if set and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned 64-bit integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn chip_params(&self) -> Result<ChipParams> {
        let base = self.chip.preset.params();
        let d = &self.device;
        let device = CellDistParams::new(
            d.g_lrs_mu.unwrap_or(base.device.g_lrs_mu()),
            d.g_lrs_sigma.unwrap_or(base.device.g_lrs_sigma()),
            d.g_hrs_mu.unwrap_or(base.device.g_hrs_mu()),
            d.g_hrs_sigma.unwrap_or(base.device.g_hrs_sigma()),
        )?;
        let a = &self.adc;
        let r = base.adc.reference;
        let reference = AdcRefConfig::new(a.offset.unwrap_or(r.offset), a.step.unwrap_or(r.step), a.v_blt.unwrap_or(r.v_blt))?;
        let adc = AdcParams {
            reference,
            sigma_static: a.sigma_static.unwrap_or(base.adc.sigma_static),
            sigma_dynamic: a.sigma_dynamic.unwrap_or(base.adc.sigma_dynamic),
        };
        if !(adc.sigma_static >= 0.0 && adc.sigma_dynamic >= 0.0) {
            return Err(Error::param("ADC sigmas must be non-negative"));
        }
        let xfer = TransferParams { v_read: self.xfer.v_read.unwrap_or(base.xfer.v_read), g_half: self.xfer.g_half.unwrap_or(base.xfer.g_half) };
        xfer.validate()?;
        let n_modules = self.chip.n_modules.unwrap_or(base.n_modules);
        if n_modules == 0 {
            return Err(Error::param("chip.n_modules must be positive"));
        }
        Ok(ChipParams { n_modules, device, adc, xfer })
    }

    pub fn drift_params(&self) -> Result<DriftParams> {
        let b = DriftParams::default();
        let d = &self.drift;
        let p = DriftParams {
            alpha_hrs: d.alpha_hrs.unwrap_or(b.alpha_hrs),
            beta_lrs: d.beta_lrs.unwrap_or(b.beta_lrs),
            v_ref_bl: d.v_ref_bl.unwrap_or(b.v_ref_bl),
            gamma_v: d.gamma_v.unwrap_or(b.gamma_v),
            seconds_per_cycle: d.seconds_per_cycle.unwrap_or(b.seconds_per_cycle),
        };
        p.validate()?;
        Ok(p)
    }

    /// Check every section and the stage ordering. All failures are
    /// reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.validate_inner().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn validate_inner(&self) -> Result<()> {
        for (i, s) in self.pipeline.iter().enumerate() {
            if self.pipeline[..i].contains(s) {
                return Err(Error::Config(format!("stage {s} listed twice")));
            }
            for r in s.requires() {
                if !self.pipeline[..i].contains(r) {
                    return Err(Error::Config(format!("stage {s} requires {r} earlier in the pipeline")));
                }
            }
        }
        self.chip_params()?;
        self.drift_params()?;
        let c = &self.calib;
        if self.characterize.vectors == 0 || c.vectors == 0 {
            return Err(Error::Config("vector counts must be positive".into()));
        }
        if c.n_offsets == 0 || c.n_steps == 0 || c.v_scales.is_empty() || c.v_scales.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("calib grid must be non-empty with positive v_scales".into()));
        }
        if c.weights.is_some_and(|w| w.iter().any(|x| !(*x >= 0.0))) {
            return Err(Error::Config("calib.weights must be non-negative".into()));
        }
        let e = &self.extract;
        if e.vectors < crate::crossbar::GROUP_SIZE + 1 || e.bins == 0 || e.max_residuals == 0 {
            return Err(Error::Config("extract needs at least 10 vectors, one bin and one residual".into()));
        }
        let t = &self.task;
        if !(2..=16).contains(&t.w_bits()) || !(1..=16).contains(&t.a_bits) {
            return Err(Error::Config("task bit-widths out of range".into()));
        }
        if t.calib_inputs == 0 || t.eval_items == 0 {
            return Err(Error::Config("task.calib_inputs and task.eval_items must be positive".into()));
        }
        match t.kind {
            TaskKind::Supervised => t.supervised.validate()?,
            TaskKind::Gridworld => {
                t.dqn.validate()?;
                t.gridworld.validate()?;
            }
        }
        if t.kind == TaskKind::Supervised && t.eval_items > t.supervised.n_test {
            return Err(Error::Config("task.eval_items exceeds the test set".into()));
        }
        if t.kind == TaskKind::Supervised && t.calib_inputs > t.supervised.n_train {
            return Err(Error::Config("task.calib_inputs exceeds the training set".into()));
        }
        let s = &self.stress;
        if !(s.v_bl.is_finite() && s.v_bl >= 0.0 && s.v_wl.is_finite() && s.v_wl >= 0.0) {
            return Err(Error::Config("stress voltages must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output
    /// directory does not affect results and is left out.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.scope, TuningScope::Module);
        assert!(c.pipeline.is_empty());
        assert_eq!(c.chip_params().unwrap(), ChipParams::default());
        assert_eq!(c.drift_params().unwrap(), DriftParams::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_preset() {
        let c = ExperimentConfig::from_toml_str(
            r#"
seed = 9
scope = "adc"
pipeline = ["characterize", "calibrate"]

[chip]
preset = "ideal"
n_modules = 3

[device]
g_hrs_sigma = 0.2

[adc]
step = 0.01
sigma_dynamic = 0.001

[drift]
alpha_hrs = 1e-6
"#,
        )
        .unwrap();
        c.validate().unwrap();
        let p = c.chip_params().unwrap();
        assert_eq!(p.n_modules, 3);
        assert_eq!(p.device.g_lrs_sigma(), 0.0);
        assert_eq!(p.device.g_hrs_sigma(), 0.2);
        assert_eq!(p.adc.reference.step, 0.01);
        assert_eq!(p.adc.reference.offset, AdcRefConfig::default().offset);
        assert_eq!(p.adc.sigma_static, 0.0);
        assert_eq!(p.adc.sigma_dynamic, 0.001);
        assert_eq!(c.drift_params().unwrap().alpha_hrs, 1e-6);
        assert_eq!(c.pipeline, vec![PipelineStage::Characterize, PipelineStage::Calibrate]);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "unknown_key = 1",
            "[adc]\nstep = -1.0",
            "pipeline = [\"calibrate\"]",
            "pipeline = [\"characterize\", \"characterize\"]",
            "pipeline = [\"teleport\"]",
            "[device]\ng_lrs_mu = -5.0",
            "[drift]\nbeta_lrs = 1.0",
            "[task]\nw_bits = 1",
            "seed = \"one\"",
        ] {
            let r = ExperimentConfig::from_toml_str(text).and_then(|c| c.validate());
            assert!(matches!(r, Err(Error::Config(_))), "{text:?} gave {r:?}");
        }
    }

    #[test]
    fn closure_is_valid_pipeline() {
        for s in PipelineStage::ALL {
            let c = ExperimentConfig { pipeline: s.closure(), ..Default::default() };
            c.validate().unwrap();
            assert_eq!(*c.pipeline.last().unwrap(), s);
        }
        assert_eq!(PipelineStage::Inject.closure().len(), 5);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = ExperimentConfig { seed: 77, pipeline: PipelineStage::Evaluate.closure(), ..Default::default() };
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig { seed: 78, ..c.clone() }.hash(), c.hash());
    }

    #[test]
    fn presets_are_valid() {
        for p in [ChipPreset::Default, ChipPreset::Ideal, ChipPreset::HighVariation] {
            let text = format!("[chip]\npreset = {:?}", serde_json::to_value(p).unwrap().as_str().unwrap());
            ExperimentConfig::from_toml_str(&text).unwrap().validate().unwrap();
        }
    }
}
