//! Evaluation harnesses run through the noisy forward pass: a GridWorld
//! reinforcement-learning task and a small image-classification task.

pub mod dqn;
pub mod gridworld;
pub mod supervised;

pub use dqn::{calibration_observations, evaluate_float, evaluate_policy, evaluate_quantized, train_policy, DqnParams, EvalReport, TrainReport};
pub use gridworld::{Action, Outcome, GridWorld, MissionFamily, MissionSet, Observation, StepOutcome};
pub use supervised::{accuracy_float, accuracy_quantized, eval_supervised, generate_dataset, train_classifier, Dataset, SupervisedParams};
