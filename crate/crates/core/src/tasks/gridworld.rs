//! n x n GridWorld: reach the goal, avoid holes; walls block movement.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Stage, Streams};

pub type Pos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
        }
    }
}

/// Four collision flags (N, E, S, W: wall or hole adjacent) followed by the
/// non-negative goal-direction components (N, E, S, W) scaled by `n - 1`.
pub type Observation = [f32; 8];

pub const STEP_REWARD: f32 = -0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Won,
    Fell,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f32,
    pub done: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub n: usize,
    pub agent: Pos,
    pub goal: Pos,
    pub holes: Vec<Pos>,
    pub max_steps: usize,
    pub steps: usize,
    pub done: bool,
}

impl GridWorld {
    pub fn new(n: usize, agent: Pos, goal: Pos, holes: Vec<Pos>, max_steps: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::param("grid side must be at least 3"));
        }
        let inside = |p: Pos| p.0 < n && p.1 < n;
        if !inside(agent) || !inside(goal) || !holes.iter().all(|&h| inside(h)) {
            return Err(Error::param("positions must lie inside the grid"));
        }
        if holes.contains(&goal) || holes.contains(&agent) {
            return Err(Error::param("goal and start must not be holes"));
        }
        if max_steps == 0 {
            return Err(Error::param("max_steps must be positive"));
        }
        Ok(Self { n, agent, goal, holes, max_steps, steps: 0, done: agent == goal })
    }

    fn neighbor(&self, p: Pos, a: Action) -> Option<Pos> {
        let (dr, dc) = a.delta();
        let (r, c) = (p.0 as isize + dr, p.1 as isize + dc);
        if r < 0 || c < 0 || r >= self.n as isize || c >= self.n as isize {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn is_hole(&self, p: Pos) -> bool {
        self.holes.contains(&p)
    }

    pub fn observe(&self) -> Observation {
        let mut o = [0.0f32; 8];
        for (i, a) in Action::ALL.iter().enumerate() {
            o[i] = match self.neighbor(self.agent, *a) {
                None => 1.0,
                Some(p) if self.is_hole(p) => 1.0,
                _ => 0.0,
            };
        }
        let scale = (self.n - 1) as f32;
        let dr = self.goal.0 as f32 - self.agent.0 as f32;
        let dc = self.goal.1 as f32 - self.agent.1 as f32;
        o[4] = (-dr).max(0.0) / scale;
        o[5] = dc.max(0.0) / scale;
        o[6] = dr.max(0.0) / scale;
        o[7] = (-dc).max(0.0) / scale;
        o
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        self.steps += 1;
        if let Some(p) = self.neighbor(self.agent, action) {
            self.agent = p;
        }
        let (reward, outcome) = if self.agent == self.goal {
            (1.0, Outcome::Won)
        } else if self.is_hole(self.agent) {
            (-1.0, Outcome::Fell)
        } else if self.steps >= self.max_steps {
            (STEP_REWARD, Outcome::TimedOut)
        } else {
            (STEP_REWARD, Outcome::Running)
        };
        self.done = outcome != Outcome::Running;
        Ok(StepOutcome { reward, done: self.done, outcome })
    }

    /// Shortest path length from the agent to the goal avoiding holes.
    pub fn shortest_path(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n * self.n];
        let idx = |p: Pos| p.0 * self.n + p.1;
        let mut q = VecDeque::from([self.agent]);
        dist[idx(self.agent)] = 0;
        while let Some(p) = q.pop_front() {
            if p == self.goal {
                return Some(dist[idx(p)]);
            }
            for a in Action::ALL {
                if let Some(nb) = self.neighbor(p, a) {
                    if !self.is_hole(nb) && dist[idx(nb)] == usize::MAX {
                        dist[idx(nb)] = dist[idx(p)] + 1;
                        q.push_back(nb);
                    }
                }
            }
        }
        None
    }
}

/// Seeded random layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissionFamily {
    pub n: usize,
    pub n_holes: usize,
    /// Episode cap; `4 n^2` when zero.
    #[serde(default)]
    pub max_steps: usize,
}

impl Default for MissionFamily {
    fn default() -> Self {
        Self { n: 5, n_holes: 2, max_steps: 0 }
    }
}

/// Disjoint mission streams for training, model selection and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissionSet {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl MissionFamily {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::param("grid side must be at least 3"));
        }
        if self.n_holes + 2 > self.n * self.n / 2 {
            return Err(Error::param("too many holes for the grid"));
        }
        Ok(())
    }

    pub fn cap(&self) -> usize {
        if self.max_steps == 0 {
            4 * self.n * self.n
        } else {
            self.max_steps
        }
    }

    /// Random solvable layout with distinct start, goal and holes.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> GridWorld {
        let n = self.n;
        loop {
            let mut cells: Vec<Pos> = (0..n * n).map(|i| (i / n, i % n)).collect();
            for i in 0..self.n_holes + 2 {
                let j = rng.random_range(i..cells.len());
                cells.swap(i, j);
            }
            let env = GridWorld::new(n, cells[0], cells[1], cells[2..self.n_holes + 2].to_vec(), self.cap()).expect("valid layout");
            if env.shortest_path().is_some() {
                return env;
            }
        }
    }

    /// Mission `i` of `set`, identical across compared configurations.
    pub fn mission(&self, streams: &Streams, set: MissionSet, i: u64) -> GridWorld {
        self.generate(&mut streams.stream(Stage::Missions, &[set as u64, i]))
    }
}
