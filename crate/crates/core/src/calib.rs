//! Reference calibration: characterization with random wordline vectors,
//! absolute binning of ADC states to golden values, and exhaustive grid
//! search of (offset, step, v_blt) at global, per-module or per-ADC scope.
//!
//! Tuning draws one trace per module (wordline vectors plus the comparator
//! offsets of every conversion) and scores every grid point on that same
//! trace. Finer scopes also consider the (config, map) pair chosen by the
//! enclosing coarser scope, so per-ADC <= per-module <= global holds exactly.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adc::{AdcRefConfig, TunedConfigRecord, N_CODES, N_COMPARATORS};
use crate::crossbar::{AccGroupId, CrossbarModule, TransferParams, WordlineInput, GROUP_SIZE, LANES};
use crate::device::CellDistParams;
use crate::error::{Error, Result};
use crate::rng::{Stage, Streams};

/// Distinct golden values of a 9-cell group (0..=9).
pub const N_GOLDEN: usize = GROUP_SIZE + 1;

/// `counts[g][s]`: occurrences of ADC state `s` when the golden value was `g`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseCounts {
    pub counts: [[u64; N_CODES]; N_GOLDEN],
}

impl Default for ResponseCounts {
    fn default() -> Self {
        Self { counts: [[0; N_CODES]; N_GOLDEN] }
    }
}

impl ResponseCounts {
    #[inline]
    pub fn add(&mut self, golden: u8, code: u8) {
        self.counts[golden as usize][code as usize] += 1;
    }

    pub fn merge(&mut self, other: &ResponseCounts) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; N_GOLDEN] {
        std::array::from_fn(|g| self.counts[g].iter().sum())
    }
}

impl<'a> std::iter::Sum<&'a ResponseCounts> for ResponseCounts {
    fn sum<I: Iterator<Item = &'a ResponseCounts>>(iter: I) -> Self {
        iter.fold(ResponseCounts::default(), |mut acc, c| {
            acc.merge(c);
            acc
        })
    }
}

/// ADC state to golden value assignment; a non-decreasing staircase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinMap {
    pub assign: [u8; N_CODES],
}

impl BinMap {
    /// States 0..=9 map to themselves, states above saturate at 9.
    pub fn identity() -> Self {
        Self { assign: std::array::from_fn(|s| s.min(N_GOLDEN - 1) as u8) }
    }

    #[inline]
    pub fn map(&self, code: u8) -> u8 {
        self.assign[code as usize]
    }

    pub fn is_staircase(&self) -> bool {
        self.assign.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Dominant golden value per state (ties toward the smaller value), with
/// empty states inheriting from the state below, then forced monotone.
pub fn absolute_binning(c: &ResponseCounts) -> BinMap {
    let mut assign = [0u8; N_CODES];
    for s in 0..N_CODES {
        let mut best: Option<(u64, usize)> = None;
        for g in 0..N_GOLDEN {
            let n = c.counts[g][s];
            if n > 0 && best.is_none_or(|(bn, _)| n > bn) {
                best = Some((n, g));
            }
        }
        assign[s] = match best {
            Some((_, g)) => g as u8,
            None if s > 0 => assign[s - 1],
            None => 0,
        };
        if s > 0 {
            assign[s] = assign[s].max(assign[s - 1]);
        }
    }
    BinMap { assign }
}

/// `sum_{g,s} counts[g][s] * |assign[s] - g|`.
pub fn score_config(c: &ResponseCounts, map: &BinMap) -> f64 {
    let mut total = 0u64;
    for (g, row) in c.counts.iter().enumerate() {
        for (s, &n) in row.iter().enumerate() {
            total += n * (map.assign[s] as i64 - g as i64).unsigned_abs();
        }
    }
    total as f64
}

/// Like [`score_config`] with a per-golden-value weight.
pub fn score_config_weighted(c: &ResponseCounts, map: &BinMap, weights: &[f64; N_GOLDEN]) -> f64 {
    let mut total = 0.0;
    for (g, row) in c.counts.iter().enumerate() {
        let mut row_err = 0u64;
        for (s, &n) in row.iter().enumerate() {
            row_err += n * (map.assign[s] as i64 - g as i64).unsigned_abs();
        }
        total += weights[g] * row_err as f64;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningScope {
    Global,
    #[serde(alias = "per-module")]
    Module,
    #[serde(alias = "per-adc")]
    Adc,
}

impl FromStr for TuningScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(TuningScope::Global),
            "module" | "per-module" => Ok(TuningScope::Module),
            "adc" | "per-adc" => Ok(TuningScope::Adc),
            other => Err(Error::Config(format!("unknown tuning scope {other:?}"))),
        }
    }
}

impl fmt::Display for TuningScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuningScope::Global => "global",
            TuningScope::Module => "module",
            TuningScope::Adc => "adc",
        })
    }
}

/// One unit of a tuning scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScopeUnit {
    Global,
    Module(usize),
    Adc { module: usize, lane: usize },
}

impl ScopeUnit {
    pub fn of(scope: TuningScope, module: usize, lane: usize) -> Self {
        match scope {
            TuningScope::Global => ScopeUnit::Global,
            TuningScope::Module => ScopeUnit::Module(module),
            TuningScope::Adc => ScopeUnit::Adc { module, lane },
        }
    }
}

impl fmt::Display for ScopeUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeUnit::Global => write!(f, "global"),
            ScopeUnit::Module(m) => write!(f, "module:{m}"),
            ScopeUnit::Adc { module, lane } => write!(f, "adc:{module}:{lane}"),
        }
    }
}

impl FromStr for ScopeUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format(format!("bad scope unit {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["global"] => Ok(ScopeUnit::Global),
            ["module", m] => Ok(ScopeUnit::Module(m.parse().map_err(|_| bad())?)),
            ["adc", m, l] => Ok(ScopeUnit::Adc { module: m.parse().map_err(|_| bad())?, lane: l.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ScopeUnit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScopeUnit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One read during characterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub gid: AccGroupId,
    pub wl: WordlineInput,
    pub golden: u8,
    pub code: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorSet {
    /// `n` i.i.d. uniform 9-bit vectors per group.
    Random(usize),
    /// All 512 inputs once per group.
    Exhaustive,
}

impl VectorSet {
    pub fn per_group(&self) -> usize {
        match self {
            VectorSet::Random(n) => *n,
            VectorSet::Exhaustive => crate::crossbar::WL_PATTERNS as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Characterization {
    pub module: usize,
    pub trials: Vec<Trial>,
    pub lane_counts: Vec<ResponseCounts>,
}

impl Characterization {
    pub fn counts(&self) -> ResponseCounts {
        self.lane_counts.iter().sum()
    }

    /// Trials of one group, in trace order.
    pub fn group_trials(&self, gid: AccGroupId) -> &[Trial] {
        let per = self.trials.len() / crate::crossbar::GROUPS_PER_MODULE;
        let i = gid.index();
        &self.trials[i * per..(i + 1) * per]
    }
}

/// Drive every group of `module` with `vectors` and decode through the
/// module's current lane references. Group `g` draws from the stream
/// `(Characterize, module.id, g)`.
pub fn characterize(module: &CrossbarModule, vectors: VectorSet, streams: &Streams) -> Characterization {
    let per_group: Vec<Vec<Trial>> = AccGroupId::all()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&gid| {
            let mut rng = streams.stream(Stage::Characterize, &[module.id as u64, gid.index() as u64]);
            let mut out = Vec::with_capacity(vectors.per_group());
            for k in 0..vectors.per_group() {
                let wl = match vectors {
                    VectorSet::Random(_) => WordlineInput::random(&mut rng),
                    VectorSet::Exhaustive => WordlineInput::new(k as u16).expect("k < 512"),
                };
                let code = module.read_group(gid, wl, &mut rng);
                out.push(Trial { gid, wl, golden: module.golden_sum(gid, wl), code });
            }
            out
        })
        .collect();
    let mut lane_counts = vec![ResponseCounts::default(); LANES];
    let trials: Vec<Trial> = per_group.into_iter().flatten().collect();
    for t in &trials {
        lane_counts[t.gid.lane()].add(t.golden, t.code);
    }
    Characterization { module: module.id, trials, lane_counts }
}

pub fn golden_histogram(trials: &[Trial]) -> [u64; N_GOLDEN] {
    let mut h = [0u64; N_GOLDEN];
    for t in trials {
        h[t.golden as usize] += 1;
    }
    h
}

/// Candidate reference settings for exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub offsets: Vec<f64>,
    pub steps: Vec<f64>,
    pub v_blts: Vec<f64>,
}

impl SearchGrid {
    /// `n_off` offsets and `n_step` steps at `0.5 + k/10` times the
    /// baseline value, and the baseline v_blt scaled by `v_scales`.
    /// The baseline itself is always included.
    pub fn around(baseline: &AdcRefConfig, n_off: usize, n_step: usize, v_scales: &[f64]) -> Self {
        let factors = |n: usize| (0..n).map(|k| 0.5 + k as f64 / 10.0).collect::<Vec<_>>();
        let g = SearchGrid {
            offsets: factors(n_off).iter().map(|f| baseline.offset * f).collect(),
            steps: factors(n_step).iter().map(|f| baseline.step * f).collect(),
            v_blts: v_scales.iter().map(|f| baseline.v_blt * f).collect(),
        };
        g.with(baseline)
    }

    /// Default 16 x 16 x 4 grid.
    pub fn default_for(baseline: &AdcRefConfig) -> Self {
        Self::around(baseline, 16, 16, &[0.9, 1.0, 1.1, 1.2])
    }

    pub fn singleton(cfg: &AdcRefConfig) -> Self {
        SearchGrid { offsets: vec![cfg.offset], steps: vec![cfg.step], v_blts: vec![cfg.v_blt] }
    }

    /// Grid extended so that `cfg` is one of its points.
    pub fn with(mut self, cfg: &AdcRefConfig) -> Self {
        self.offsets.push(cfg.offset);
        self.steps.push(cfg.step);
        self.v_blts.push(cfg.v_blt);
        self.normalized()
    }

    fn normalized(mut self) -> Self {
        for v in [&mut self.offsets, &mut self.steps, &mut self.v_blts] {
            v.sort_by(|a, b| a.total_cmp(b));
            v.dedup();
        }
        self
    }

    pub fn contains(&self, cfg: &AdcRefConfig) -> bool {
        self.offsets.contains(&cfg.offset) && self.steps.contains(&cfg.step) && self.v_blts.contains(&cfg.v_blt)
    }

    /// Valid configurations in (offset, step, v_blt) lexicographic order.
    pub fn configs(&self) -> Vec<AdcRefConfig> {
        let g = self.clone().normalized();
        let mut out = Vec::new();
        for &o in &g.offsets {
            for &s in &g.steps {
                for &v in &g.v_blts {
                    if let Ok(c) = AdcRefConfig::new(o, s, v) {
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() || self.steps.is_empty() || self.v_blts.is_empty() || self.configs().is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedUnit {
    pub unit: ScopeUnit,
    pub config: AdcRefConfig,
    pub binmap: BinMap,
    pub score: f64,
    /// Score of the baseline configuration (with its own binning).
    pub baseline_score: f64,
    pub n_trials: u64,
}

impl TunedUnit {
    pub fn record(&self) -> TunedConfigRecord {
        TunedConfigRecord { scope: self.unit.to_string(), offset: self.config.offset, step: self.config.step, v_blt: self.config.v_blt }
    }

    pub fn mean_abs_error(&self) -> f64 {
        self.score / self.n_trials.max(1) as f64
    }

    pub fn baseline_mean_abs_error(&self) -> f64 {
        self.baseline_score / self.n_trials.max(1) as f64
    }
}

/// Tuning results at every level down to the requested scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub scope: TuningScope,
    pub baseline: AdcRefConfig,
    pub global: TunedUnit,
    pub modules: Vec<TunedUnit>,
    pub adcs: Vec<TunedUnit>,
}

impl TuningReport {
    pub fn units(&self) -> Vec<&TunedUnit> {
        match self.scope {
            TuningScope::Global => vec![&self.global],
            TuningScope::Module => self.modules.iter().collect(),
            TuningScope::Adc => self.adcs.iter().collect(),
        }
    }

    pub fn total_score(&self) -> f64 {
        self.units().iter().map(|u| u.score).sum()
    }

    /// The unit governing a given lane.
    pub fn governing(&self, module_pos: usize, lane: usize) -> &TunedUnit {
        match self.scope {
            TuningScope::Global => &self.global,
            TuningScope::Module => &self.modules[module_pos],
            TuningScope::Adc => &self.adcs[module_pos * LANES + lane],
        }
    }

    pub fn records(&self) -> Vec<TunedConfigRecord> {
        self.units().iter().map(|u| u.record()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// Optional per-golden-value score weights; uniform when absent.
    pub weights: Option<[f64; N_GOLDEN]>,
}

struct TuneTrial {
    lane: u8,
    golden: u8,
    frac: f64,
    offsets: [f64; N_COMPARATORS],
}

fn tune_trace(module: &CrossbarModule, n_vectors: usize, streams: &Streams) -> Vec<TuneTrial> {
    let xfer: TransferParams = module.xfer;
    let mut out = Vec::with_capacity(n_vectors * crate::crossbar::GROUPS_PER_MODULE);
    for gid in AccGroupId::all() {
        let mut rng = streams.stream(Stage::Tune, &[module.id as u64, gid.index() as u64]);
        let mismatch = &module.lane_of(gid).mismatch;
        for _ in 0..n_vectors {
            let wl = WordlineInput::random(&mut rng);
            out.push(TuneTrial {
                lane: gid.lane() as u8,
                golden: module.golden_sum(gid, wl),
                frac: xfer.fraction(module.activated_conductance(gid, wl)),
                offsets: mismatch.draw_offsets(&mut rng),
            });
        }
    }
    out
}

/// Per-config, per-lane response counts of one module over a shared trace.
struct CountsCube {
    lanes: Vec<ResponseCounts>,
}

impl CountsCube {
    fn lane(&self, cfg: usize, lane: usize) -> &ResponseCounts {
        &self.lanes[cfg * LANES + lane]
    }

    fn module(&self, cfg: usize) -> ResponseCounts {
        self.lanes[cfg * LANES..(cfg + 1) * LANES].iter().sum()
    }
}

struct GridIndex {
    offsets: Vec<f64>,
    steps: Vec<f64>,
    v_blts: Vec<f64>,
    /// Valid configs in lexicographic order; position == config index.
    configs: Vec<AdcRefConfig>,
    /// Dense (v, s, o) -> config index.
    lookup: Vec<Option<usize>>,
}

impl GridIndex {
    fn new(grid: &SearchGrid) -> Self {
        let g = grid.clone().normalized();
        let configs = g.configs();
        let (no, ns, nv) = (g.offsets.len(), g.steps.len(), g.v_blts.len());
        let mut lookup = vec![None; no * ns * nv];
        for (i, c) in configs.iter().enumerate() {
            let oi = g.offsets.iter().position(|&x| x == c.offset).unwrap();
            let si = g.steps.iter().position(|&x| x == c.step).unwrap();
            let vi = g.v_blts.iter().position(|&x| x == c.v_blt).unwrap();
            lookup[(vi * ns + si) * no + oi] = Some(i);
        }
        Self { offsets: g.offsets, steps: g.steps, v_blts: g.v_blts, configs, lookup }
    }

    fn position(&self, cfg: &AdcRefConfig) -> Option<usize> {
        self.configs.iter().position(|c| c == cfg)
    }
}

fn counts_cube(trace: &[TuneTrial], idx: &GridIndex) -> CountsCube {
    let no = idx.offsets.len();
    let ns = idx.steps.len();
    let mut lanes = vec![ResponseCounts::default(); idx.configs.len() * LANES];
    let mut hist = vec![0u8; no + 1];
    for t in trace {
        for (vi, &v_blt) in idx.v_blts.iter().enumerate() {
            let v = v_blt * t.frac;
            for (si, &step) in idx.steps.iter().enumerate() {
                hist.iter_mut().for_each(|h| *h = 0);
                for j in 0..N_COMPARATORS {
                    // comparator j fires for the first `n` offsets (thresholds grow with offset);
                    // same arithmetic as AdcRefConfig::thresholds + count_code
                    let n = idx.offsets.partition_point(|&o| v >= (o + j as f64 * step) + t.offsets[j]);
                    hist[n] += 1;
                }
                // code at offset k = #{j : n_j > k}
                let mut code = 0u8;
                let base = (vi * ns + si) * no;
                for k in (0..no).rev() {
                    code += hist[k + 1];
                    if let Some(ci) = idx.lookup[base + k] {
                        lanes[ci * LANES + t.lane as usize].add(t.golden, code);
                    }
                }
            }
        }
    }
    CountsCube { lanes }
}

#[derive(Clone, Copy)]
struct Candidate {
    cfg_idx: usize,
    binmap: BinMap,
    score: f64,
}

fn better(a: &Candidate, b: &Candidate, configs: &[AdcRefConfig]) -> bool {
    if a.score != b.score {
        return a.score < b.score;
    }
    let (ca, cb) = (&configs[a.cfg_idx], &configs[b.cfg_idx]);
    (ca.offset, ca.step, ca.v_blt) < (cb.offset, cb.step, cb.v_blt)
}

fn scorer(opts: &TuneOptions) -> impl Fn(&ResponseCounts, &BinMap) -> f64 + '_ {
    move |c, m| match &opts.weights {
        Some(w) => score_config_weighted(c, m, w),
        None => score_config(c, m),
    }
}

fn select(
    counts_at: &dyn Fn(usize) -> ResponseCounts,
    parent: Option<&Candidate>,
    idx: &GridIndex,
    score: &dyn Fn(&ResponseCounts, &BinMap) -> f64,
) -> Candidate {
    let mut best: Option<Candidate> = None;
    for ci in 0..idx.configs.len() {
        let c = counts_at(ci);
        let binmap = absolute_binning(&c);
        let cand = Candidate { cfg_idx: ci, binmap, score: score(&c, &binmap) };
        if best.as_ref().is_none_or(|b| better(&cand, b, &idx.configs)) {
            best = Some(cand);
        }
    }
    let mut best = best.expect("validated non-empty grid");
    if let Some(p) = parent {
        let c = counts_at(p.cfg_idx);
        let inherited = Candidate { cfg_idx: p.cfg_idx, binmap: p.binmap, score: score(&c, &p.binmap) };
        if inherited.score < best.score {
            best = inherited;
        }
    }
    best
}

/// Exhaustive reference search. `baseline` is added to the grid if absent.
pub fn tune_references(
    modules: &[CrossbarModule],
    scope: TuningScope,
    grid: &SearchGrid,
    baseline: &AdcRefConfig,
    n_vectors: usize,
    opts: &TuneOptions,
    streams: &Streams,
) -> Result<TuningReport> {
    grid.validate()?;
    baseline.validate()?;
    if modules.is_empty() {
        return Err(Error::param("no modules to tune"));
    }
    if n_vectors == 0 {
        return Err(Error::param("n_vectors must be at least 1"));
    }
    let idx = GridIndex::new(&grid.clone().with(baseline));
    let base_ci = idx.position(baseline).expect("baseline inserted into grid");

    let cubes: Vec<CountsCube> = modules
        .par_iter()
        .map(|m| counts_cube(&tune_trace(m, n_vectors, streams), &idx))
        .collect();
    let score = scorer(opts);
    let unit_result = |unit: ScopeUnit, cand: &Candidate, counts_at: &dyn Fn(usize) -> ResponseCounts| {
        let base_counts = counts_at(base_ci);
        let base_map = absolute_binning(&base_counts);
        TunedUnit {
            unit,
            config: idx.configs[cand.cfg_idx],
            binmap: cand.binmap,
            score: cand.score,
            baseline_score: score(&base_counts, &base_map),
            n_trials: base_counts.total(),
        }
    };

    let global_at = |ci: usize| -> ResponseCounts { cubes.iter().map(|c| c.module(ci)).collect::<Vec<_>>().iter().sum() };
    let global = select(&global_at, None, &idx, &score);
    let global_unit = unit_result(ScopeUnit::Global, &global, &global_at);

    let mut modules_out = Vec::new();
    let mut adcs_out = Vec::new();
    if scope != TuningScope::Global {
        let per_module: Vec<(Candidate, Vec<(Candidate, TunedUnit)>, TunedUnit)> = cubes
            .par_iter()
            .zip(modules.par_iter())
            .map(|(cube, m)| {
                let module_at = |ci: usize| cube.module(ci);
                let mc = select(&module_at, Some(&global), &idx, &score);
                let mu = unit_result(ScopeUnit::Module(m.id), &mc, &module_at);
                let mut lanes = Vec::new();
                if scope == TuningScope::Adc {
                    for lane in 0..LANES {
                        let lane_at = |ci: usize| cube.lane(ci, lane).clone();
                        let lc = select(&lane_at, Some(&mc), &idx, &score);
                        let lu = unit_result(ScopeUnit::Adc { module: m.id, lane }, &lc, &lane_at);
                        lanes.push((lc, lu));
                    }
                }
                (mc, lanes, mu)
            })
            .collect();
        for (_, lanes, mu) in per_module {
            modules_out.push(mu);
            adcs_out.extend(lanes.into_iter().map(|(_, u)| u));
        }
    }
    Ok(TuningReport { scope, baseline: *baseline, global: global_unit, modules: modules_out, adcs: adcs_out })
}

/// Reference and state map applied to each lane after tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneCalibration {
    pub config: AdcRefConfig,
    pub binmap: BinMap,
}

/// `lanes[module_pos][lane]` for a list of modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipCalibration {
    pub scope: TuningScope,
    pub lanes: Vec<Vec<LaneCalibration>>,
}

impl ChipCalibration {
    /// Every lane set to the same reference and map.
    pub fn uniform(n_modules: usize, config: AdcRefConfig, binmap: BinMap) -> Self {
        Self { scope: TuningScope::Global, lanes: vec![vec![LaneCalibration { config, binmap }; LANES]; n_modules] }
    }
}

/// Write the tuned references into the modules' lanes.
pub fn apply_tuning(modules: &mut [CrossbarModule], report: &TuningReport) -> ChipCalibration {
    let lanes = modules
        .iter_mut()
        .enumerate()
        .map(|(pos, m)| {
            (0..LANES)
                .map(|lane| {
                    let u = report.governing(pos, lane);
                    m.set_lane_reference(lane, u.config);
                    LaneCalibration { config: u.config, binmap: u.binmap }
                })
                .collect()
        })
        .collect();
    ChipCalibration { scope: report.scope, lanes }
}

/// Voltage intervals of the ten noiseless levels for full scale `v_blt`:
/// level `k` spans `k` active LRS cells plus 0..=(9-k) active HRS cells.
pub fn level_intervals(dist: &CellDistParams, xfer: &TransferParams, v_blt: f64) -> [(f64, f64); N_GOLDEN] {
    let (gl, gh) = (dist.g_lrs_nom(), dist.g_hrs_nom());
    std::array::from_fn(|k| {
        let lo = xfer.bl_voltage(k as f64 * gl, v_blt);
        let hi = xfer.bl_voltage(k as f64 * gl + (GROUP_SIZE - k) as f64 * gh, v_blt);
        (lo, hi)
    })
}

fn feasible_offsets(levels: &[(f64, f64); N_GOLDEN], step: f64, v_blt: f64) -> Vec<(f64, f64)> {
    let mut feas: Vec<(f64, f64)> = vec![(0.0, v_blt)];
    for k in 0..N_GOLDEN - 1 {
        let (gap_lo, gap_hi) = (levels[k].1, levels[k + 1].0);
        let mut next = Vec::new();
        for j in 0..N_COMPARATORS {
            let (a, b) = (gap_lo - j as f64 * step, gap_hi - j as f64 * step);
            for &(fa, fb) in &feas {
                let (lo, hi) = (fa.max(a), fb.min(b));
                if hi > lo {
                    next.push((lo, hi));
                }
            }
        }
        next.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for iv in next {
            match merged.last_mut() {
                Some(last) if iv.0 <= last.1 => last.1 = last.1.max(iv.1),
                _ => merged.push(iv),
            }
        }
        feas = merged;
        if feas.is_empty() {
            break;
        }
    }
    feas
}

/// Uniform ladder with a threshold inside every gap between consecutive
/// noiseless levels, maximizing the worst-case distance to a gap edge.
pub fn ideal_reference(dist: &CellDistParams, xfer: &TransferParams, v_blt: f64) -> Result<AdcRefConfig> {
    let levels = level_intervals(dist, xfer, v_blt);
    // thresholds in gap 0 and gap 8 are between 8 and 14 steps apart
    let inner = (levels[N_GOLDEN - 2].1 - levels[1].0).max(0.0);
    let outer = levels[N_GOLDEN - 1].0 - levels[0].1;
    let (s_min, s_max) = (inner / (N_COMPARATORS as f64 - 1.0), outer / (N_GOLDEN as f64 - 2.0));
    let best_for = |lo: f64, hi: f64, n: usize, init: Option<(f64, f64, f64)>| {
        let mut best = init;
        for i in 0..=n {
            let step = lo + (hi - lo) * i as f64 / n as f64;
            for (a, b) in feasible_offsets(&levels, step, v_blt) {
                let half = (b - a) / 2.0;
                if best.is_none_or(|(h, _, _)| half > h) {
                    best = Some((half, a + half, step));
                }
            }
        }
        best
    };
    let coarse = best_for(s_min, s_max, 4000, None).ok_or(Error::IdealInfeasible)?;
    let d = (s_max - s_min) / 4000.0;
    let (_, offset, step) = best_for((coarse.2 - d).max(1e-12), coarse.2 + d, 400, Some(coarse)).expect("coarse seed");
    AdcRefConfig::new(offset, step, v_blt)
}
