//! Effective-bit extraction: per-group L1 fits of mapped ADC values against
//! the binary wordline inputs, pooled residual (dynamic error) distributions
//! and the per-scope 0/1 statistics used for noise injection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{characterize, LaneCalibration, ScopeUnit, TuningScope, VectorSet};
use crate::crossbar::{AccGroupId, CrossbarModule, WordlineInput, COLS, GROUPS_PER_COL, GROUPS_PER_MODULE, GROUP_SIZE, LANES};
use crate::error::{Error, Result};
use crate::lad::{lad_fit, LadOptions};
use crate::rng::Streams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffBitGroup {
    pub eb: [f64; GROUP_SIZE],
    pub residuals: Vec<f64>,
    pub objective: f64,
    /// Fitted constant term; zero unless the fit included one.
    #[serde(default)]
    pub intercept: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitOptions {
    pub intercept: bool,
    pub lad: LadOptions,
}

/// Fit `y ~ sum_i eb_i * wl_i` by least absolute deviations.
pub fn fit_effective_bits(samples: &[(WordlineInput, f64)], opts: &FitOptions) -> Result<EffBitGroup> {
    let p = GROUP_SIZE + opts.intercept as usize;
    if samples.len() < p {
        return Err(Error::param(format!("need at least {p} samples, got {}", samples.len())));
    }
    let x = DMatrix::from_fn(samples.len(), p, |v, i| if i < GROUP_SIZE { samples[v].0.bit(i) as f64 } else { 1.0 });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let fit = lad_fit(&x, &y, &opts.lad)?;
    Ok(EffBitGroup {
        eb: std::array::from_fn(|i| fit.coef[i]),
        residuals: fit.residuals.iter().copied().collect(),
        objective: fit.objective,
        intercept: if opts.intercept { fit.coef[GROUP_SIZE] } else { 0.0 },
    })
}

/// Pooled empirical residual distribution: an equal-width histogram for
/// reporting plus the (sorted) samples used for resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDist {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub samples: Vec<f64>,
}

impl ResidualDist {
    /// Distribution concentrated at zero.
    pub fn zero() -> Self {
        Self { edges: vec![0.0, 0.0], masses: vec![1.0], samples: vec![0.0] }
    }

    pub fn from_samples(mut samples: Vec<f64>, bins: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("residual distribution needs at least one sample"));
        }
        if bins == 0 {
            return Err(Error::param("bins must be at least 1"));
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = (samples[0], samples[samples.len() - 1]);
        if lo == hi {
            return Ok(Self { edges: vec![lo, hi], masses: vec![1.0], samples });
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
        let mut counts = vec![0u64; bins];
        for &s in &samples {
            let k = (((s - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        let n = samples.len() as f64;
        Ok(Self { edges, masses: counts.iter().map(|&c| c as f64 / n).collect(), samples })
    }

    pub fn is_degenerate_at_zero(&self) -> bool {
        self.samples.iter().all(|&s| s == 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Keep `max` evenly spaced order statistics (always including both
    /// extremes); the histogram is left as computed from the full pool.
    pub fn thin(mut self, max: usize) -> Self {
        let n = self.samples.len();
        if max >= 2 && n > max {
            self.samples = (0..max).map(|k| self.samples[k * (n - 1) / (max - 1)]).collect();
        }
        self
    }

    /// Bootstrap draw from the stored samples.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.samples.len() == 1 {
            return self.samples[0];
        }
        self.samples[rng.random_range(0..self.samples.len())]
    }
}

pub fn residual_distribution(groups: &[&EffBitGroup], bins: usize) -> Result<ResidualDist> {
    if groups.is_empty() {
        return Err(Error::param("no fitted groups"));
    }
    ResidualDist::from_samples(groups.iter().flat_map(|g| g.residuals.iter().copied()).collect(), bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub scope: ScopeUnit,
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub n0: usize,
    pub n1: usize,
    pub residual_hist: ResidualDist,
}

impl NoiseProfile {
    /// mu0 = 0, mu1 = 1, no spread, no dynamic error.
    pub fn ideal(scope: ScopeUnit) -> Self {
        Self { scope, mu0: 0.0, sigma0: 0.0, mu1: 1.0, sigma1: 0.0, n0: 0, n1: 0, residual_hist: ResidualDist::zero() }
    }

    pub fn mean_sigma(&self, bit: u8) -> (f64, f64) {
        if bit == 0 {
            (self.mu0, self.sigma0)
        } else {
            (self.mu1, self.sigma1)
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.mu0 == 0.0 && self.mu1 == 1.0 && self.sigma0 == 0.0 && self.sigma1 == 0.0 && self.residual_hist.is_degenerate_at_zero()
    }
}

/// Mean and population standard deviation.
pub fn mean_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Fits of every group of one module, indexed by [`AccGroupId::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleFit {
    pub module: usize,
    pub groups: Vec<EffBitGroup>,
    pub bits: Vec<[u8; GROUP_SIZE]>,
}

impl ModuleFit {
    pub fn group(&self, gid: AccGroupId) -> &EffBitGroup {
        &self.groups[gid.index()]
    }
}

/// Characterize `module` through its lane calibration and fit every group.
pub fn extract_module(
    module: &CrossbarModule,
    lanes: &[LaneCalibration],
    vectors: VectorSet,
    opts: &FitOptions,
    streams: &Streams,
) -> Result<ModuleFit> {
    if lanes.len() != LANES {
        return Err(Error::Shape { expected: format!("{LANES} lane calibrations"), got: lanes.len().to_string() });
    }
    let ch = characterize(module, vectors, streams);
    let groups = (0..GROUPS_PER_MODULE)
        .into_par_iter()
        .map(|i| {
            let gid = AccGroupId::from_index(i);
            let map = &lanes[gid.lane()].binmap;
            let samples: Vec<(WordlineInput, f64)> = ch.group_trials(gid).iter().map(|t| (t.wl, map.map(t.code) as f64)).collect();
            fit_effective_bits(&samples, opts).map_err(|e| match e {
                Error::RankDeficient { cells } => Error::param(format!("module {} group {gid:?}: cells {cells:?} not identifiable", module.id)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bits = (0..GROUPS_PER_MODULE).map(|i| module.group_bits(AccGroupId::from_index(i))).collect();
    Ok(ModuleFit { module: module.id, groups, bits })
}

/// Per-scope-unit 0/1 effective-bit statistics. Units are ordered by module
/// then lane; `max_residuals` caps the stored samples per profile.
pub fn eb_statistics(fits: &[ModuleFit], scope: TuningScope, bins: usize, max_residuals: usize) -> Result<Vec<NoiseProfile>> {
    let mut units: Vec<(ScopeUnit, Vec<(usize, usize)>)> = Vec::new();
    for (fi, f) in fits.iter().enumerate() {
        for i in 0..GROUPS_PER_MODULE {
            let unit = ScopeUnit::of(scope, f.module, AccGroupId::from_index(i).lane());
            match units.iter_mut().find(|(u, _)| *u == unit) {
                Some((_, members)) => members.push((fi, i)),
                None => units.push((unit, vec![(fi, i)])),
            }
        }
    }
    units
        .into_iter()
        .map(|(unit, members)| {
            let (mut e0, mut e1) = (Vec::new(), Vec::new());
            for &(fi, i) in &members {
                let g = &fits[fi].groups[i];
                for (c, &b) in fits[fi].bits[i].iter().enumerate() {
                    if b == 0 { e0.push(g.eb[c]) } else { e1.push(g.eb[c]) }
                }
            }
            for (pop, bit) in [(&e0, 0u8), (&e1, 1u8)] {
                if pop.is_empty() {
                    return Err(Error::EmptyPopulation { unit: unit.to_string(), bit });
                }
            }
            let (mu0, sigma0) = mean_pop_std(&e0);
            let (mu1, sigma1) = mean_pop_std(&e1);
            let groups: Vec<&EffBitGroup> = members.iter().map(|&(fi, i)| &fits[fi].groups[i]).collect();
            let residual_hist = residual_distribution(&groups, bins)?.thin(max_residuals);
            Ok(NoiseProfile { scope: unit, mu0, sigma0, mu1, sigma1, n0: e0.len(), n1: e1.len(), residual_hist })
        })
        .collect()
}

/// One fitted cell of an eb map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbCell {
    pub group: usize,
    pub column: usize,
    pub row: usize,
    pub eb: f64,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbMap {
    pub module: usize,
    /// Group-row-major: group, then column, then cell within the group.
    pub cells: Vec<EbCell>,
    /// Sum of |residual| over all groups of each lane.
    pub lane_error: [f64; LANES],
}

pub fn eb_map(fit: &ModuleFit) -> EbMap {
    let mut cells = Vec::with_capacity(GROUPS_PER_MODULE * GROUP_SIZE);
    let mut lane_error = [0.0; LANES];
    for group in 0..GROUPS_PER_COL {
        for column in 0..COLS {
            let gid = AccGroupId::new(column, group).expect("in range");
            let g = fit.group(gid);
            for c in 0..GROUP_SIZE {
                cells.push(EbCell { group, column, row: gid.row(c), eb: g.eb[c], bit: fit.bits[gid.index()][c] });
            }
            lane_error[gid.lane()] += g.residuals.iter().map(|r| r.abs()).sum::<f64>();
        }
    }
    EbMap { module: fit.module, cells, lane_error }
}
