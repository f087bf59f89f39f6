//! RRAM cell model: log-normal conductance per resistance state and
//! read-disturb drift of HRS cells toward LRS.
//!
//! Conductances are in normalized units where the nominal LRS conductance is
//! `exp(g_lrs_mu)` (1.0 by default).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Programmed resistance state. HRS stores bit 0, LRS stores bit 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResistState {
    Hrs,
    Lrs,
}

impl ResistState {
    pub fn from_bit(bit: u8) -> Self {
        if bit == 0 {
            ResistState::Hrs
        } else {
            ResistState::Lrs
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            ResistState::Hrs => 0,
            ResistState::Lrs => 1,
        }
    }
}

/// Log-normal conductance distributions for both states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCellDist", into = "RawCellDist")]
pub struct CellDistParams {
    g_lrs_mu: f64,
    g_lrs_sigma: f64,
    g_hrs_mu: f64,
    g_hrs_sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCellDist {
    g_lrs_mu: f64,
    g_lrs_sigma: f64,
    g_hrs_mu: f64,
    g_hrs_sigma: f64,
}

impl TryFrom<RawCellDist> for CellDistParams {
    type Error = Error;
    fn try_from(r: RawCellDist) -> Result<Self> {
        CellDistParams::new(r.g_lrs_mu, r.g_lrs_sigma, r.g_hrs_mu, r.g_hrs_sigma)
    }
}

impl From<CellDistParams> for RawCellDist {
    fn from(p: CellDistParams) -> Self {
        RawCellDist { g_lrs_mu: p.g_lrs_mu, g_lrs_sigma: p.g_lrs_sigma, g_hrs_mu: p.g_hrs_mu, g_hrs_sigma: p.g_hrs_sigma }
    }
}

impl Default for CellDistParams {
    /// On/off ratio 10 with 5% (LRS) and 15% (HRS) log-sigma.
    fn default() -> Self {
        Self { g_lrs_mu: 0.0, g_lrs_sigma: 0.05, g_hrs_mu: 0.1f64.ln(), g_hrs_sigma: 0.15 }
    }
}

impl CellDistParams {
    pub fn new(g_lrs_mu: f64, g_lrs_sigma: f64, g_hrs_mu: f64, g_hrs_sigma: f64) -> Result<Self> {
        if ![g_lrs_mu, g_lrs_sigma, g_hrs_mu, g_hrs_sigma].iter().all(|v| v.is_finite()) {
            return Err(Error::param("cell distribution parameters must be finite"));
        }
        if g_lrs_mu <= g_hrs_mu {
            return Err(Error::param("on/off ratio must exceed 1 (g_lrs_mu > g_hrs_mu)"));
        }
        if g_lrs_sigma < 0.0 || g_hrs_sigma < 0.0 {
            return Err(Error::param("conductance sigmas must be non-negative"));
        }
        Ok(Self { g_lrs_mu, g_lrs_sigma, g_hrs_mu, g_hrs_sigma })
    }

    /// Same nominals, zero cell-to-cell variance.
    pub fn noiseless(&self) -> Self {
        Self { g_lrs_sigma: 0.0, g_hrs_sigma: 0.0, ..*self }
    }

    pub fn g_lrs_mu(&self) -> f64 {
        self.g_lrs_mu
    }
    pub fn g_lrs_sigma(&self) -> f64 {
        self.g_lrs_sigma
    }
    pub fn g_hrs_mu(&self) -> f64 {
        self.g_hrs_mu
    }
    pub fn g_hrs_sigma(&self) -> f64 {
        self.g_hrs_sigma
    }

    pub fn g_lrs_nom(&self) -> f64 {
        self.g_lrs_mu.exp()
    }

    pub fn g_hrs_nom(&self) -> f64 {
        self.g_hrs_mu.exp()
    }

    fn mu_sigma(&self, state: ResistState) -> (f64, f64) {
        match state {
            ResistState::Lrs => (self.g_lrs_mu, self.g_lrs_sigma),
            ResistState::Hrs => (self.g_hrs_mu, self.g_hrs_sigma),
        }
    }
}

/// Draw `exp(N(mu, sigma))` for the given state.
pub fn sample_conductance<R: Rng + ?Sized>(state: ResistState, params: &CellDistParams, rng: &mut R) -> f64 {
    let (mu, sigma) = params.mu_sigma(state);
    if sigma == 0.0 {
        return mu.exp();
    }
    // sigma validated finite and non-negative at construction
    let n = Normal::new(mu, sigma).expect("validated sigma");
    n.sample(rng).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub state: ResistState,
    pub g: f64,
    pub stress_cycles: u64,
}

impl Cell {
    pub fn new(state: ResistState, g: f64) -> Result<Self> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::param(format!("conductance must be positive, got {g}")));
        }
        Ok(Self { state, g, stress_cycles: 0 })
    }

    pub fn bit(&self) -> u8 {
        self.state.bit()
    }
}

/// Read-disturb drift law parameters.
///
/// Per cycle at BL voltage `v`, the gap to the nominal LRS conductance shrinks
/// by the fraction `rate * (v / v_ref_bl)^gamma_v`, with `rate = alpha_hrs`
/// for HRS cells and `beta_lrs` for LRS cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub alpha_hrs: f64,
    pub beta_lrs: f64,
    pub v_ref_bl: f64,
    pub gamma_v: f64,
    /// Wall-clock duration of one stress cycle.
    #[serde(default = "default_seconds_per_cycle")]
    pub seconds_per_cycle: f64,
}

fn default_seconds_per_cycle() -> f64 {
    5.0 / 64.0e6
}

impl Default for DriftParams {
    fn default() -> Self {
        Self { alpha_hrs: 2.0e-7, beta_lrs: 7.0e-9, v_ref_bl: 1.3, gamma_v: 12.0, seconds_per_cycle: default_seconds_per_cycle() }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_hrs, self.beta_lrs, self.v_ref_bl, self.gamma_v, self.seconds_per_cycle];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::param("drift parameters must be finite"));
        }
        if !(self.alpha_hrs >= self.beta_lrs && self.beta_lrs >= 0.0) {
            return Err(Error::param("drift rates must satisfy alpha_hrs >= beta_lrs >= 0"));
        }
        if self.gamma_v < 0.0 {
            return Err(Error::param("gamma_v must be non-negative"));
        }
        if self.v_ref_bl <= 0.0 || self.seconds_per_cycle <= 0.0 {
            return Err(Error::param("v_ref_bl and seconds_per_cycle must be positive"));
        }
        Ok(())
    }

    /// Number of stress cycles spanning `seconds` of continuous reads.
    pub fn cycles_for_seconds(&self, seconds: f64) -> u64 {
        (seconds / self.seconds_per_cycle).round() as u64
    }

    /// Per-cycle fractional approach rate for a cell in `state` at `v_bl`.
    pub fn rate(&self, state: ResistState, v_bl: f64) -> f64 {
        let base = match state {
            ResistState::Hrs => self.alpha_hrs,
            ResistState::Lrs => self.beta_lrs,
        };
        let accel = if self.gamma_v == 0.0 { 1.0 } else { (v_bl / self.v_ref_bl).powf(self.gamma_v) };
        (base * accel).clamp(0.0, 1.0)
    }
}

/// A block of identical read-stress cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressEvent {
    pub v_bl: f64,
    /// Accepted for bookkeeping; the drift law does not depend on it.
    pub v_wl: f64,
    pub cycles: u64,
}

impl StressEvent {
    pub fn new(v_bl: f64, v_wl: f64, cycles: i64) -> Result<Self> {
        if cycles < 0 {
            return Err(Error::NegativeCycles(cycles));
        }
        if !(v_bl >= 0.0 && v_wl >= 0.0) {
            return Err(Error::param("stress voltages must be non-negative"));
        }
        Ok(Self { v_bl, v_wl, cycles: cycles as u64 })
    }
}

/// Apply a stress block to one cell. `g_lrs_nom` is the drift target.
pub fn apply_stress(cell: &Cell, stress: &StressEvent, params: &DriftParams, g_lrs_nom: f64) -> Cell {
    if stress.cycles == 0 {
        return *cell;
    }
    let rate = params.rate(cell.state, stress.v_bl);
    // (1 - rate)^cycles without losing precision for tiny rates
    let keep = if rate >= 1.0 { 0.0 } else { (stress.cycles as f64 * (-rate).ln_1p()).exp() };
    let mut g = g_lrs_nom - (g_lrs_nom - cell.g) * keep;
    if cell.g <= g_lrs_nom {
        g = g.min(g_lrs_nom);
    }
    Cell { state: cell.state, g, stress_cycles: cell.stress_cycles + stress.cycles }
}

/// Conductance after each event of `schedule`, applied in order.
pub fn drift_trajectory(cell: &Cell, schedule: &[StressEvent], params: &DriftParams, g_lrs_nom: f64) -> Result<Vec<f64>> {
    if schedule.is_empty() {
        return Err(Error::param("stress schedule must be non-empty"));
    }
    let mut c = *cell;
    Ok(schedule
        .iter()
        .map(|ev| {
            c = apply_stress(&c, ev, params, g_lrs_nom);
            c.g
        })
        .collect())
}
