//! Read-disturb experiments: stress the virtual chip, re-extract effective
//! bits through the frozen calibration and push the new profiles into a
//! mapped network.

use serde::{Deserialize, Serialize};

use crate::calib::{ChipCalibration, TuningScope, VectorSet};
use crate::crossbar::CrossbarModule;
use crate::device::{DriftParams, StressEvent};
use crate::effbits::{eb_statistics, extract_module, mean_pop_std, FitOptions, ModuleFit, NoiseProfile};
use crate::error::{Error, Result};
use crate::nnsim::{inject_static, MappedNetwork};
use crate::rng::{Stage, Streams};

/// How profiles are rebuilt after each stress event.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub scope: TuningScope,
    pub vectors: VectorSet,
    pub fit: FitOptions,
    pub bins: usize,
    pub max_residuals: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { scope: TuningScope::Module, vectors: VectorSet::Exhaustive, fit: FitOptions::default(), bins: 32, max_residuals: 4096 }
    }
}

/// Fit every module through its lane calibration. All modules share the
/// `(Extract)` child streams, so repeated extraction of an unchanged chip is
/// bit-identical.
pub fn extract_chip(modules: &[CrossbarModule], cal: &ChipCalibration, cfg: &ExtractConfig, streams: &Streams) -> Result<Vec<ModuleFit>> {
    if cal.lanes.len() != modules.len() {
        return Err(Error::Shape { expected: format!("{} module calibrations", modules.len()), got: cal.lanes.len().to_string() });
    }
    let ex = streams.child(Stage::Extract, &[]);
    modules.iter().zip(&cal.lanes).map(|(m, lanes)| extract_module(m, lanes, cfg.vectors, &cfg.fit, &ex)).collect()
}

/// Chip-wide population statistics of the fitted effective bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbSummary {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

pub fn summarize(fits: &[ModuleFit]) -> EbSummary {
    let mut by_bit: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for f in fits {
        for (g, bits) in f.groups.iter().zip(&f.bits) {
            for (eb, &b) in g.eb.iter().zip(bits) {
                by_bit[b as usize].push(*eb);
            }
        }
    }
    let (mu0, sigma0) = mean_pop_std(&by_bit[0]);
    let (mu1, sigma1) = mean_pop_std(&by_bit[1]);
    EbSummary { mu0, sigma0, mu1, sigma1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    /// Cumulative stress cycles per cell.
    pub cycle: u64,
    pub eb: EbSummary,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrajectory {
    pub points: Vec<DriftPoint>,
}

impl DriftTrajectory {
    pub fn mu0(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eb.mu0).collect()
    }

    pub fn mu1(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eb.mu1).collect()
    }

    pub fn accuracy(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.accuracy).collect()
    }
}

/// `n` identical uniform stress events.
pub fn uniform_schedule(n: usize, v_bl: f64, v_wl: f64, cycles: u64) -> Vec<StressEvent> {
    vec![StressEvent { v_bl, v_wl, cycles }; n]
}

/// Baseline extraction followed by one stress-and-re-extract step per
/// event. References and binmaps stay as calibrated before stress.
/// `evaluate` sees each step's profiles and may return an accuracy.
#[allow(clippy::too_many_arguments)]
pub fn run_drift<F>(
    modules: &mut [CrossbarModule],
    cal: &ChipCalibration,
    schedule: &[StressEvent],
    drift: &DriftParams,
    g_lrs_nom: f64,
    cfg: &ExtractConfig,
    streams: &Streams,
    mut evaluate: F,
) -> Result<DriftTrajectory>
where
    F: FnMut(&[NoiseProfile]) -> Result<Option<f64>>,
{
    drift.validate()?;
    let mut points = Vec::with_capacity(schedule.len() + 1);
    let mut cycle = 0u64;
    for step in 0..=schedule.len() {
        if step > 0 {
            let ev = &schedule[step - 1];
            for m in modules.iter_mut() {
                m.apply_uniform_stress(ev, drift, g_lrs_nom);
            }
            cycle += ev.cycles;
        }
        let fits = extract_chip(modules, cal, cfg, streams)?;
        let profiles = eb_statistics(&fits, cfg.scope, cfg.bins, cfg.max_residuals)?;
        let accuracy = evaluate(&profiles)?;
        points.push(DriftPoint { cycle, eb: summarize(&fits), accuracy });
    }
    Ok(DriftTrajectory { points })
}

/// Stress the backing modules, re-extract and re-inject `net` with the
/// injection streams it was built with.
#[allow(clippy::too_many_arguments)]
pub fn apply_drift_to_network(
    net: &MappedNetwork,
    modules: &mut [CrossbarModule],
    cal: &ChipCalibration,
    schedule: &[StressEvent],
    drift: &DriftParams,
    g_lrs_nom: f64,
    cfg: &ExtractConfig,
    streams: &Streams,
) -> Result<MappedNetwork> {
    drift.validate()?;
    for ev in schedule {
        for m in modules.iter_mut() {
            m.apply_uniform_stress(ev, drift, g_lrs_nom);
        }
    }
    let fits = extract_chip(modules, cal, cfg, streams)?;
    let profiles = eb_statistics(&fits, cfg.scope, cfg.bins, cfg.max_residuals)?;
    Ok(inject_static(&net.with_profiles(profiles)?, streams))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{apply_tuning, tune_references, SearchGrid, TuneOptions};
    use crate::crossbar::{build_chip, ChipParams};
    use crate::nn::{LayerSpec, Network};
    use crate::nnsim::{map_network, quantize_network, QuantSpec};

    fn small_chip(s: &Streams) -> (Vec<CrossbarModule>, ChipCalibration) {
        let p = ChipParams { n_modules: 2, ..Default::default() };
        let mut mods = build_chip(&p, s).unwrap();
        let base = p.adc.reference;
        let rep = tune_references(&mods, TuningScope::Module, &SearchGrid::singleton(&base), &base, 64, &TuneOptions::default(), s).unwrap();
        let cal = apply_tuning(&mut mods, &rep);
        (mods, cal)
    }

    fn cfg() -> ExtractConfig {
        ExtractConfig { vectors: VectorSet::Random(96), ..Default::default() }
    }

    #[test]
    fn zero_cycle_drift_keeps_network() {
        let s = Streams::new(5);
        let (mut mods, cal) = small_chip(&s);
        let fits = extract_chip(&mods, &cal, &cfg(), &s).unwrap();
        let profiles = eb_statistics(&fits, cfg().scope, cfg().bins, cfg().max_residuals).unwrap();
        let net = Network::init([12, 1, 1], &[LayerSpec::Dense(6), LayerSpec::Relu, LayerSpec::Dense(3)], &mut s.stream(Stage::Train, &[0])).unwrap();
        let calib: Vec<Vec<f32>> = (0..8).map(|i| (0..12).map(|j| ((i * 12 + j) % 7) as f32 / 7.0).collect()).collect();
        let q = quantize_network(&net, &QuantSpec::calibrate(&net, 4, 4, &calib).unwrap()).unwrap();
        let mapped = inject_static(&map_network(&q, profiles, &s).unwrap(), &s);
        let sched = uniform_schedule(3, 1.3, 1.1, 0);
        let after = apply_drift_to_network(&mapped, &mut mods, &cal, &sched, &DriftParams::default(), 1.0, &cfg(), &s).unwrap();
        assert_eq!(after, mapped);
    }

    #[test]
    fn mu0_tracks_cumulative_stress() {
        let s = Streams::new(6);
        let (mut mods, cal) = small_chip(&s);
        let drift = DriftParams { alpha_hrs: 2e-6, ..Default::default() };
        let sched = uniform_schedule(4, 1.3, 1.1, 100_000);
        let traj = run_drift(&mut mods, &cal, &sched, &drift, 1.0, &cfg(), &s, |_| Ok(None)).unwrap();
        assert_eq!(traj.points.len(), 5);
        assert_eq!(traj.points.iter().map(|p| p.cycle).collect::<Vec<_>>(), vec![0, 100_000, 200_000, 300_000, 400_000]);
        let mu0 = traj.mu0();
        assert!(mu0.windows(2).all(|w| w[0] <= w[1]), "{mu0:?}");
        assert!(mu0[4] > mu0[0]);
        assert!(traj.accuracy().iter().all(Option::is_none));
    }

    #[test]
    fn summary_of_exact_fits() {
        let s = Streams::new(7);
        let p = ChipParams { n_modules: 1, device: crate::device::CellDistParams::default().noiseless(), adc: crate::adc::AdcParams::ideal(Default::default()), ..Default::default() };
        let mut mods = build_chip(&p, &s).unwrap();
        let base = crate::calib::ideal_reference(&p.device, &p.xfer, p.adc.reference.v_blt).unwrap();
        let rep = tune_references(&mods, TuningScope::Global, &SearchGrid::singleton(&base), &base, 64, &TuneOptions::default(), &s).unwrap();
        let cal = apply_tuning(&mut mods, &rep);
        let fits = extract_chip(&mods, &cal, &ExtractConfig::default(), &s).unwrap();
        let e = summarize(&fits);
        assert!(e.mu0.abs() < 1e-6 && (e.mu1 - 1.0).abs() < 1e-6 && e.sigma0 < 1e-6 && e.sigma1 < 1e-6, "{e:?}");
    }
}
