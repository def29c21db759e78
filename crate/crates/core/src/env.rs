//! Multi-agent plume search game over a rasterized field.
//!
//! All agents move simultaneously on the cell grid, sense the (noisy)
//! concentration at their cell and share one global reward.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plume::{apply_observation_noise, GridSpec, PlumeField};

pub const NUM_ACTIONS: usize = 6;
/// Per-agent feature count: concentration plus three normalized coordinates.
pub const OBS_FEATURES: usize = 4;

pub const REWARD_NEW_SOURCE: f64 = 10.0;
pub const REWARD_REVISIT: f64 = 0.0;
pub const REWARD_STEP: f64 = -1.0;

/// Concentrations are compressed as `log1p(c * scale)` with `c` in g/m³,
/// i.e. on the µg/m³ scale.
const CONCENTRATION_SCALE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
    Forward = 4,
    Backward = 5,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Left,
        Action::Right,
        Action::Up,
        Action::Down,
        Action::Forward,
        Action::Backward,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; NUM_ACTIONS] {
        let mut v = [0.0; NUM_ACTIONS];
        v[self.index()] = 1.0;
        v
    }

    /// Unit displacement `(dx, dy, dz)`.
    pub fn delta(self) -> [i64; 3] {
        match self {
            Action::Left => [-1, 0, 0],
            Action::Right => [1, 0, 0],
            Action::Up => [0, 0, 1],
            Action::Down => [0, 0, -1],
            Action::Forward => [0, 1, 0],
            Action::Backward => [0, -1, 0],
        }
    }
}

/// Moves one cell, staying put on any axis that would leave the grid.
pub fn apply_action(pos: [usize; 3], action: Action, grid: &GridSpec) -> [usize; 3] {
    let dims = grid.dims();
    let d = action.delta();
    std::array::from_fn(|a| {
        let next = pos[a] as i64 + d[a];
        if next < 0 || next >= dims[a] as i64 {
            pos[a]
        } else {
            next as usize
        }
    })
}

/// Global reward for one joint move, plus the updated visited-source flags.
///
/// Each agent scores +10 on an unvisited source, 0 on a visited one and -1
/// elsewhere. Agents are scanned in index order, so when two land on the
/// same new source the lower index claims it.
pub fn compute_reward(
    new_positions: &[[usize; 3]],
    source_cells: &[[usize; 3]],
    visited: &[bool],
) -> (f64, Vec<bool>) {
    let mut visited = visited.to_vec();
    let mut reward = 0.0;
    for pos in new_positions {
        match source_cells.iter().position(|c| c == pos) {
            Some(j) if !visited[j] => {
                visited[j] = true;
                reward += REWARD_NEW_SOURCE;
            }
            Some(_) => reward += REWARD_REVISIT,
            None => reward += REWARD_STEP,
        }
    }
    (reward, visited)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Noisy concentration in g/m³.
    pub concentration: f64,
    /// `log1p`-compressed concentration divided by the compressed field maximum.
    pub concentration_feature: f64,
    pub position: [usize; 3],
    /// Cell indices divided by `n - 1` per axis.
    pub normalized_position: [f64; 3],
}

impl Observation {
    pub fn features(&self) -> [f64; OBS_FEATURES] {
        let p = self.normalized_position;
        [self.concentration_feature, p[0], p[1], p[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    /// All sources found (as opposed to hitting the epoch cap).
    pub success: bool,
}

impl EnvStep {
    /// Flattened joint observation vector of length `4 * N`.
    pub fn joint_features(&self) -> Vec<f64> {
        self.observations.iter().flat_map(|o| o.features()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub max_epochs: usize,
    /// Per-episode noise fraction `k` is drawn uniformly from this range.
    pub noise_range: (f64, f64),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("at least one agent is required"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        let (lo, hi) = self.noise_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config(format!("invalid noise range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Finished,
}

/// One episode-at-a-time environment instance with its own RNG stream.
#[derive(Debug, Clone)]
pub struct PlumeEnv {
    config: EnvConfig,
    rng: ChaCha8Rng,
    field: Option<Arc<PlumeField>>,
    log_max: f64,
    positions: Vec<[usize; 3]>,
    found: Vec<bool>,
    cells_seen: Vec<bool>,
    unique_cells: usize,
    epoch: usize,
    noise_k: f64,
    phase: Phase,
}

impl PlumeEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(PlumeEnv {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            field: None,
            log_max: 0.0,
            positions: Vec::new(),
            found: Vec::new(),
            cells_seen: Vec::new(),
            unique_cells: 0,
            epoch: 0,
            noise_k: 0.0,
            phase: Phase::Idle,
        })
    }

    /// Restarts the RNG stream used for start cells and observation noise.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Starts an episode on `field`. Without explicit starts, each agent's
    /// cell is drawn uniformly from the grid.
    pub fn reset(&mut self, field: Arc<PlumeField>, starts: Option<&[[usize; 3]]>) -> Result<EnvStep> {
        let grid = field.grid;
        let n = self.config.n_agents;
        let positions = match starts {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::domain(format!("{} start positions for {n} agents", s.len())));
                }
                if let Some(p) = s.iter().find(|p| !grid.contains(**p)) {
                    return Err(Error::domain(format!("start position {p:?} outside the grid")));
                }
                s.to_vec()
            }
            None => (0..n)
                .map(|_| {
                    [
                        self.rng.random_range(0..grid.nx),
                        self.rng.random_range(0..grid.ny),
                        self.rng.random_range(0..grid.nz),
                    ]
                })
                .collect(),
        };
        let (lo, hi) = self.config.noise_range;
        self.noise_k = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        self.log_max = (field.max_concentration() * CONCENTRATION_SCALE).ln_1p();
        self.found = vec![false; field.sources.len()];
        self.cells_seen = vec![false; grid.cell_count()];
        self.unique_cells = 0;
        self.epoch = 0;
        self.positions = positions;
        self.field = Some(field);
        self.mark_seen();
        self.phase = Phase::Running;
        let observations = self.observe()?;
        Ok(EnvStep {
            observations,
            reward: 0.0,
            done: false,
            success: false,
        })
    }

    pub fn step(&mut self, joint_action: &[Action]) -> Result<EnvStep> {
        match self.phase {
            Phase::Idle => return Err(Error::Usage("step called before reset".into())),
            Phase::Finished => return Err(Error::Usage("step called after the episode finished".into())),
            Phase::Running => {}
        }
        if joint_action.len() != self.config.n_agents {
            return Err(Error::Usage(format!(
                "joint action has {} entries for {} agents",
                joint_action.len(),
                self.config.n_agents
            )));
        }
        let field = Arc::clone(self.field.as_ref().expect("running episode has a field"));
        for (pos, &a) in self.positions.iter_mut().zip(joint_action) {
            *pos = apply_action(*pos, a, &field.grid);
        }
        let (reward, found) = compute_reward(&self.positions, &field.source_cells, &self.found);
        self.found = found;
        self.epoch += 1;
        self.mark_seen();
        let success = self.found.iter().all(|&f| f);
        let done = success || self.epoch >= self.config.max_epochs;
        if done {
            self.phase = Phase::Finished;
        }
        let observations = self.observe()?;
        Ok(EnvStep {
            observations,
            reward,
            done,
            success,
        })
    }

    pub fn positions(&self) -> &[[usize; 3]] {
        &self.positions
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn noise_k(&self) -> f64 {
        self.noise_k
    }

    pub fn sources_found(&self) -> &[bool] {
        &self.found
    }

    /// Distinct cells occupied by any agent so far this episode (starts included).
    pub fn unique_cells_visited(&self) -> usize {
        self.unique_cells
    }

    fn mark_seen(&mut self) {
        let grid = self.field.as_ref().expect("field set").grid;
        for p in &self.positions {
            let idx = grid.flat_index(*p);
            if !self.cells_seen[idx] {
                self.cells_seen[idx] = true;
                self.unique_cells += 1;
            }
        }
    }

    fn observe(&mut self) -> Result<Vec<Observation>> {
        let field = self.field.as_ref().expect("field set");
        let grid = field.grid;
        let dims = grid.dims();
        let mut out = Vec::with_capacity(self.positions.len());
        for &p in &self.positions {
            let raw = field.at(p);
            let noisy = apply_observation_noise(raw, self.noise_k, &mut self.rng)?;
            let concentration_feature = if self.log_max > 0.0 {
                (noisy.max(0.0) * CONCENTRATION_SCALE).ln_1p() / self.log_max
            } else {
                0.0
            };
            out.push(Observation {
                concentration: noisy,
                concentration_feature,
                position: p,
                normalized_position: std::array::from_fn(|a| p[a] as f64 / (dims[a] - 1) as f64),
            });
        }
        Ok(out)
    }
}
