//! 4-bit flash ADC with a tunable reference ladder.
//!
//! The ladder is `offset + j * step` for the 15 comparators; the output code
//! is the number of comparators whose (mismatched, noisy) threshold lies at or
//! below the input voltage.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_COMPARATORS: usize = 15;
pub const N_CODES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcRefConfig {
    pub offset: f64,
    pub step: f64,
    pub v_blt: f64,
}

impl Default for AdcRefConfig {
    /// Ladder spanning 1/6 .. 0.54 of a 0.3 V sensing range; codes saturate
    /// around golden value 6 on the default transfer.
    fn default() -> Self {
        Self { offset: 0.05, step: 0.008, v_blt: 0.3 }
    }
}

impl AdcRefConfig {
    pub fn new(offset: f64, step: f64, v_blt: f64) -> Result<Self> {
        let cfg = Self { offset, step, v_blt };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset.is_finite() && self.step.is_finite() && self.v_blt.is_finite()) {
            return Err(Error::param("reference config must be finite"));
        }
        if self.step <= 0.0 {
            return Err(Error::param("reference step must be positive"));
        }
        if self.offset < 0.0 {
            return Err(Error::param("reference offset must be non-negative"));
        }
        if self.v_blt <= self.offset {
            return Err(Error::param("BL target voltage must exceed the offset"));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> [f64; N_COMPARATORS] {
        std::array::from_fn(|j| self.offset + j as f64 * self.step)
    }
}

/// Comparator non-idealities of one ADC instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorMismatch {
    pub static_offsets: [f64; N_COMPARATORS],
    pub dynamic_sigma: f64,
}

impl ComparatorMismatch {
    pub fn ideal() -> Self {
        Self { static_offsets: [0.0; N_COMPARATORS], dynamic_sigma: 0.0 }
    }

    pub fn is_ideal(&self) -> bool {
        self.dynamic_sigma == 0.0 && self.static_offsets.iter().all(|&o| o == 0.0)
    }

    /// Effective per-comparator offsets for one conversion (static + dynamic).
    #[inline]
    pub fn draw_offsets<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; N_COMPARATORS] {
        if self.dynamic_sigma == 0.0 {
            return self.static_offsets;
        }
        std::array::from_fn(|j| {
            let z: f64 = StandardNormal.sample(rng);
            self.static_offsets[j] + self.dynamic_sigma * z
        })
    }
}

pub fn sample_mismatch<R: Rng + ?Sized>(sigma_static: f64, sigma_dynamic: f64, rng: &mut R) -> Result<ComparatorMismatch> {
    if !(sigma_static >= 0.0 && sigma_dynamic >= 0.0) {
        return Err(Error::param("mismatch sigmas must be non-negative"));
    }
    let static_offsets = if sigma_static == 0.0 {
        [0.0; N_COMPARATORS]
    } else {
        let n = Normal::new(0.0, sigma_static).map_err(|e| Error::param(e.to_string()))?;
        std::array::from_fn(|_| n.sample(rng))
    };
    Ok(ComparatorMismatch { static_offsets, dynamic_sigma: sigma_dynamic })
}

/// Thermometer count of `v` against thresholds shifted by `offsets`.
#[inline]
pub fn count_code(v: f64, thresholds: &[f64; N_COMPARATORS], offsets: &[f64; N_COMPARATORS]) -> u8 {
    thresholds.iter().zip(offsets).filter(|(t, o)| v >= **t + **o).count() as u8
}

pub fn decode<R: Rng + ?Sized>(v: f64, cfg: &AdcRefConfig, mismatch: &ComparatorMismatch, rng: &mut R) -> u8 {
    let offsets = mismatch.draw_offsets(rng);
    count_code(v, &cfg.thresholds(), &offsets)
}

/// Mismatch magnitudes for ADC construction, in volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcParams {
    pub reference: AdcRefConfig,
    pub sigma_static: f64,
    pub sigma_dynamic: f64,
}

impl Default for AdcParams {
    fn default() -> Self {
        let reference = AdcRefConfig::default();
        Self { reference, sigma_static: 0.25 * reference.step, sigma_dynamic: 0.1 * reference.step }
    }
}

impl AdcParams {
    pub fn ideal(reference: AdcRefConfig) -> Self {
        Self { reference, sigma_static: 0.0, sigma_dynamic: 0.0 }
    }
}

/// Persisted record of a tuned reference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedConfigRecord {
    pub scope: String,
    pub offset: f64,
    pub step: f64,
    pub v_blt: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stage, Streams};
    use proptest::prelude::*;

    fn rng() -> crate::rng::SimRng {
        Streams::new(3).stream(Stage::Characterize, &[])
    }

    #[test]
    fn ladder_values() {
        let t = AdcRefConfig::new(0.1, 0.02, 1.0).unwrap().thresholds();
        assert!((t[0] - 0.10).abs() < 1e-12);
        assert!((t[1] - 0.12).abs() < 1e-12);
        assert!((t[14] - 0.38).abs() < 1e-12);
        let u = AdcRefConfig::new(0.0, 1.0, 20.0).unwrap().thresholds();
        assert_eq!(u.to_vec(), (0..15).map(|j| j as f64).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(AdcRefConfig::new(0.1, 0.0, 1.0).is_err());
        assert!(AdcRefConfig::new(-0.1, 0.01, 1.0).is_err());
        assert!(AdcRefConfig::new(0.5, 0.01, 0.4).is_err());
    }

    #[test]
    fn decode_edges() {
        let cfg = AdcRefConfig::new(0.1, 0.02, 1.0).unwrap();
        let m = ComparatorMismatch::ideal();
        let mut r = rng();
        assert_eq!(decode(0.05, &cfg, &m, &mut r), 0);
        assert_eq!(decode(0.9, &cfg, &m, &mut r), 15);
        assert_eq!(decode(0.1 + 3.5 * 0.02, &cfg, &m, &mut r), 4);
    }

    #[test]
    fn mismatch_sampling() {
        let z = sample_mismatch(0.0, 0.0, &mut rng()).unwrap();
        assert!(z.is_ideal());
        let s = Streams::new(11);
        let lanes: Vec<_> = (0..8).map(|l| sample_mismatch(0.002, 0.0008, &mut s.stream(Stage::BuildMismatch, &[0, l])).unwrap()).collect();
        for a in 0..8 {
            for b in (a + 1)..8 {
                assert_ne!(lanes[a].static_offsets, lanes[b].static_offsets);
            }
        }
        let replay = sample_mismatch(0.002, 0.0008, &mut s.stream(Stage::BuildMismatch, &[0, 3])).unwrap();
        assert_eq!(replay, lanes[3]);
        assert!(sample_mismatch(-1.0, 0.0, &mut rng()).is_err());
    }

    proptest! {
        #[test]
        fn ladder_span(offset in 0.0f64..1.0, step in 1e-4f64..0.1) {
            let cfg = AdcRefConfig::new(offset, step, offset + 15.0 * step + 0.1).unwrap();
            let t = cfg.thresholds();
            prop_assert!(((t[14] - t[0]) - 14.0 * step).abs() < 1e-9);
            prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn decode_monotone_and_bounded(offset in 0.0f64..0.5, step in 1e-3f64..0.05, a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let cfg = AdcRefConfig::new(offset, step, 3.0).unwrap();
            let m = ComparatorMismatch::ideal();
            let mut r = rng();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cl = decode(lo, &cfg, &m, &mut r);
            let ch = decode(hi, &cfg, &m, &mut r);
            prop_assert!(cl <= ch);
            prop_assert!(ch <= 15);
        }

        #[test]
        fn one_code_per_threshold(offset in 0.0f64..0.5, step in 1e-3f64..0.05, j in 0usize..15) {
            let cfg = AdcRefConfig::new(offset, step, 3.0).unwrap();
            let t = cfg.thresholds()[j];
            let eps = step * 1e-3;
            let m = ComparatorMismatch::ideal();
            let mut r = rng();
            prop_assert_eq!(decode(t + eps, &cfg, &m, &mut r) - decode(t - eps, &cfg, &m, &mut r), 1);
        }
    }
}
