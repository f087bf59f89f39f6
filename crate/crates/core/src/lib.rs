//! Simulation of noisy RRAM compute-in-memory inference: device variation
//! and drift, flash ADC mismatch, reference calibration, effective-bit
//! extraction and bit-serial noisy network evaluation.

pub mod adc;
pub mod calib;
pub mod config;
pub mod crossbar;
pub mod device;
pub mod drift;
pub mod effbits;
pub mod error;
pub mod lad;
pub mod nn;
pub mod nnsim;
pub mod pipeline;
pub mod rng;
pub mod tasks;

pub use adc::{AdcParams, AdcRefConfig, ComparatorMismatch};
pub use calib::{BinMap, ResponseCounts, SearchGrid, TuningReport, TuningScope};
pub use config::{ExperimentConfig, PipelineStage, TaskKind};
pub use crossbar::{AccGroupId, BitPattern, ChipParams, CrossbarModule, TransferParams, WordlineInput};
pub use device::{CellDistParams, DriftParams, ResistState, StressEvent};
pub use error::{Error, Result};
pub use rng::{Stage, Streams};
