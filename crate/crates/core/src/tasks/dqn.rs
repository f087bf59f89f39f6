//! DQN training of the GridWorld MLP and mission-based policy evaluation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gridworld::{Action, MissionFamily, MissionSet, Observation, Outcome};
use crate::error::{Error, Result};
use crate::nn::{argmax, Adam, Grads, LayerSpec, Network};
use crate::nnsim::{fake_quantize, inject_static, noisy_forward, oracle_forward, MappedNetwork, QuantNetwork};
use crate::rng::{Stage, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnParams {
    pub hidden: usize,
    pub gamma: f32,
    pub lr: f32,
    pub batch: usize,
    pub replay_capacity: usize,
    /// Environment steps between target-network refreshes.
    pub target_update: usize,
    pub eps_start: f32,
    pub eps_end: f32,
    /// Steps over which exploration decays linearly.
    pub eps_decay: usize,
    pub train_steps: usize,
    pub learn_start: usize,
    pub eval_every: usize,
    pub eval_missions: usize,
    /// Stop once the validation win rate reaches this.
    pub target_win_rate: f64,
    /// Train through weights fake-quantized to this many bits.
    pub qat_bits: Option<u8>,
    /// Clamp every weight to `[-c, c]` after each update.
    pub weight_clip: Option<f32>,
    /// Pick the bootstrap action with the online network (Double DQN).
    pub double: bool,
}

impl Default for DqnParams {
    fn default() -> Self {
        Self {
            hidden: 32,
            gamma: 0.9,
            lr: 1e-3,
            batch: 32,
            replay_capacity: 20_000,
            target_update: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay: 20_000,
            train_steps: 80_000,
            learn_start: 1_000,
            eval_every: 2_500,
            eval_missions: 500,
            target_win_rate: 0.98,
            qat_bits: Some(4),
            weight_clip: Some(0.875),
            double: true,
        }
    }
}

impl DqnParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 || self.replay_capacity < self.batch || self.target_update == 0 || self.eval_every == 0 {
            return Err(Error::param("DQN sizes must be positive and replay must hold a batch"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.lr > 0.0) {
            return Err(Error::param("gamma must be in [0, 1] and lr positive"));
        }
        if self.weight_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::param("weight_clip must be positive"));
        }
        if self.qat_bits.is_some_and(|b| !(2..=16).contains(&b)) {
            return Err(Error::param("qat_bits must be in 2..=16"));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::param("exploration rates must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> [LayerSpec; 3] {
        [LayerSpec::Dense(self.hidden), LayerSpec::Relu, LayerSpec::Dense(4)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: f64,
    pub mean_steps: f64,
    pub n_missions: usize,
    pub wins: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Binomial standard error of the win rate.
    pub fn std_err(&self) -> f64 {
        (self.win_rate * (1.0 - self.win_rate) / self.n_missions.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub episodes: usize,
    /// (step, validation win rate) at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub best_win_rate: f64,
    pub reached_target: bool,
}

/// Play `n` missions of `set`, building a fresh policy per mission.
pub fn evaluate_with<F, P>(family: &MissionFamily, streams: &Streams, set: MissionSet, n: usize, make_policy: F) -> EvalReport
where
    F: Fn(u64) -> P + Sync,
    P: FnMut(&Observation) -> usize,
{
    let results: Vec<(bool, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut env = family.mission(streams, set, i);
            let mut policy = make_policy(i);
            loop {
                let a = policy(&env.observe());
                let s = env.step(Action::from_index(a)).expect("episode running");
                if s.done {
                    return (s.outcome == Outcome::Won, env.steps);
                }
            }
        })
        .collect();
    let wins = results.iter().filter(|r| r.0).count();
    let steps: usize = results.iter().map(|r| r.1).sum();
    EvalReport {
        win_rate: wins as f64 / n.max(1) as f64,
        mean_steps: steps as f64 / n.max(1) as f64,
        n_missions: n,
        wins,
        seed: streams.master,
    }
}

pub fn evaluate_float(net: &Network, family: &MissionFamily, n: usize, streams: &Streams, set: MissionSet) -> EvalReport {
    evaluate_with(family, streams, set, n, |_| |o: &Observation| argmax(&net.forward(o)))
}

/// Clean quantized policy through the integer oracle.
pub fn evaluate_quantized(q: &QuantNetwork, family: &MissionFamily, n: usize, streams: &Streams) -> EvalReport {
    evaluate_with(family, streams, MissionSet::Test, n, |_| |o: &Observation| argmax(&oracle_forward(q, o)))
}

/// Greedy noisy policy on test missions. With `reinject`, every mission
/// gets its own static-noise draw from `(Inject, mission)`, so missions are
/// independent chip instances; otherwise the network's current effective
/// values are used throughout. Dynamic noise comes from `(Forward, mission)`.
pub fn evaluate_policy(net: &MappedNetwork, family: &MissionFamily, n: usize, streams: &Streams, reinject: bool) -> EvalReport {
    evaluate_with(family, streams, MissionSet::Test, n, |i| {
        let local = if reinject { Some(inject_static(net, &streams.child(Stage::Inject, &[i]))) } else { None };
        let mut rng = streams.stream(Stage::Forward, &[i]);
        move |o: &Observation| argmax(&noisy_forward(local.as_ref().unwrap_or(net), o, &mut rng))
    })
}

/// Start-of-mission observations of training missions, for fixing
/// activation scales.
pub fn calibration_observations(family: &MissionFamily, streams: &Streams, n: usize) -> Vec<Vec<f32>> {
    (0..n as u64).map(|i| family.mission(streams, MissionSet::Train, i).observe().to_vec()).collect()
}

struct Transition {
    obs: Observation,
    action: usize,
    reward: f32,
    next: Observation,
    terminal: bool,
}

fn huber_grad(err: f32) -> f32 {
    err.clamp(-1.0, 1.0)
}

/// DQN with epsilon-greedy exploration, a replay buffer and a target network.
/// Returns the network with the best validation win rate. With `qat_bits`
/// the returned weights lie on that quantization grid.
pub fn train_policy(family: &MissionFamily, params: &DqnParams, streams: &Streams) -> Result<(Network, TrainReport)> {
    params.validate()?;
    family.validate()?;
    let mut rng = streams.stream(Stage::Train, &[0]);
    let mut shadow = Network::init([8, 1, 1], &params.architecture(), &mut streams.stream(Stage::Train, &[1]))?;
    if let Some(c) = params.weight_clip {
        shadow.clamp_weights(c);
    }
    let effective = |n: &Network| match params.qat_bits {
        Some(b) => fake_quantize(n, b),
        None => Ok(n.clone()),
    };
    let mut net = effective(&shadow)?;
    let mut target = net.clone();
    let mut best = net.clone();
    let mut opt = Adam::new(&net, params.lr);
    let mut grads = Grads::zeros_like(&net);
    let mut replay: Vec<Transition> = Vec::with_capacity(params.replay_capacity.min(1 << 20));
    let mut replay_head = 0usize;
    let mut report = TrainReport { steps: 0, episodes: 0, evals: Vec::new(), best_win_rate: -1.0, reached_target: false };

    let validate = |n: &Network| evaluate_float(n, family, params.eval_missions, streams, MissionSet::Validation).win_rate;
    let mut env = family.mission(streams, MissionSet::Train, 0);
    for step in 1..=params.train_steps {
        let frac = (step as f32 / params.eps_decay.max(1) as f32).min(1.0);
        let eps = params.eps_start + (params.eps_end - params.eps_start) * frac;
        let obs = env.observe();
        let action = if rng.random::<f32>() < eps { rng.random_range(0..4) } else { argmax(&net.forward(&obs)) };
        let s = env.step(Action::from_index(action))?;
        let t = Transition { obs, action, reward: s.reward, next: env.observe(), terminal: matches!(s.outcome, Outcome::Won | Outcome::Fell) };
        if replay.len() < params.replay_capacity {
            replay.push(t);
        } else {
            replay[replay_head] = t;
            replay_head = (replay_head + 1) % params.replay_capacity;
        }
        if s.done {
            report.episodes += 1;
            env = family.mission(streams, MissionSet::Train, report.episodes as u64);
        }

        if step >= params.learn_start && replay.len() >= params.batch {
            grads.clear();
            for _ in 0..params.batch {
                let tr = &replay[rng.random_range(0..replay.len())];
                let y = if tr.terminal {
                    tr.reward
                } else {
                    let q_next = target.forward(&tr.next);
                    let best = if params.double {
                        q_next[argmax(&net.forward(&tr.next))]
                    } else {
                        q_next.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                    };
                    tr.reward + params.gamma * best
                };
                let acts = net.forward_all(&tr.obs);
                let q = acts.last().unwrap();
                let mut d = [0.0f32; 4];
                d[tr.action] = huber_grad(q[tr.action] - y);
                net.backward(&acts, &d, &mut grads);
            }
            opt.step(&mut shadow, &grads, 1.0 / params.batch as f32);
            if let Some(c) = params.weight_clip {
                shadow.clamp_weights(c);
            }
            net = effective(&shadow)?;
        }
        if step % params.target_update == 0 {
            target = net.clone();
        }
        if step % params.eval_every == 0 {
            let w = validate(&net);
            report.evals.push((step, w));
            if w > report.best_win_rate {
                report.best_win_rate = w;
                best = net.clone();
            }
            if w >= params.target_win_rate {
                report.reached_target = true;
                report.steps = step;
                return Ok((best, report));
            }
        }
        report.steps = step;
    }
    if report.evals.is_empty() {
        report.best_win_rate = validate(&net);
        best = net;
    }
    Ok((best, report))
}
