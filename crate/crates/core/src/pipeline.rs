//! Map-set generation, the multi-agent training loop and the evaluation harness.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{epsilon, read_agent, write_agent, Agent, AgentKind, AgentNet, EpsilonSchedule, LearnSettings};
use crate::env::{Action, EnvConfig, PlumeEnv, OBS_FEATURES};
use crate::error::{Error, Result};
use crate::mapfile::{encode_map, load_map, save_map};
use crate::nn::{HiddenState, NetworkShape};
use crate::plume::{rasterize_field, GridSpec, PlumeField, PlumeSource, StabilityClass};
use crate::replay::{ReplayBuffer, Transition};

/// Discrete parameter lattice the map generator draws source combinations from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapRanges {
    /// Inclusive `[min, max]` wind speed in m/s, walked in `wind_speed_step` increments.
    pub wind_speed: [f64; 2],
    pub wind_speed_step: f64,
    pub emission_rate: [f64; 2],
    pub emission_rate_step: f64,
    pub stack_height: [f64; 2],
    pub stack_height_step: f64,
    pub classes: Vec<StabilityClass>,
    /// Inclusive cell index range for source x positions.
    pub source_x_cells: [usize; 2],
    pub source_y_cells: [usize; 2],
    pub train_maps: usize,
    pub test_maps: usize,
    pub sources_per_map: usize,
}

impl Default for MapRanges {
    fn default() -> Self {
        MapRanges {
            wind_speed: [5.0, 12.0],
            wind_speed_step: 1.0,
            emission_rate: [8.0, 15.0],
            emission_rate_step: 1.0,
            stack_height: [10.0, 20.0],
            stack_height_step: 2.0,
            classes: vec![StabilityClass::A, StabilityClass::B, StabilityClass::C, StabilityClass::D],
            source_x_cells: [2, 9],
            source_y_cells: [3, 12],
            train_maps: 20,
            test_maps: 20,
            sources_per_map: 2,
        }
    }
}

fn lattice(range: [f64; 2], step: f64) -> Vec<f64> {
    let n = ((range[1] - range[0]) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| range[0] + i as f64 * step).collect()
}

impl MapRanges {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        for (name, r, step) in [
            ("wind_speed", self.wind_speed, self.wind_speed_step),
            ("emission_rate", self.emission_rate, self.emission_rate_step),
            ("stack_height", self.stack_height, self.stack_height_step),
        ] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || !(step > 0.0) {
                return Err(Error::config(format!("invalid {name} range {r:?} with step {step}")));
            }
        }
        if !(self.wind_speed[0] > 0.0) || !(self.emission_rate[0] > 0.0) || self.stack_height[0] < 0.0 {
            return Err(Error::config("source parameter ranges admit no valid source"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one stability class is required"));
        }
        for (name, r, n) in [("source_x_cells", self.source_x_cells, grid.nx), ("source_y_cells", self.source_y_cells, grid.ny)] {
            if r[0] > r[1] || r[1] >= n {
                return Err(Error::config(format!("{name} {r:?} does not fit a grid axis of {n} cells")));
            }
        }
        let top = grid.origin[2] + grid.nz as f64 * grid.cell_size[2];
        if self.stack_height[1] > top || self.stack_height[0] < grid.origin[2] {
            return Err(Error::config(format!("stack heights {:?} leave the grid's 0–{top} m", self.stack_height)));
        }
        if self.train_maps == 0 || self.test_maps == 0 || self.sources_per_map == 0 {
            return Err(Error::config("map counts and sources per map must be positive"));
        }
        let cells = (self.source_x_cells[1] - self.source_x_cells[0] + 1) * (self.source_y_cells[1] - self.source_y_cells[0] + 1);
        if cells < self.sources_per_map {
            return Err(Error::config("too few candidate source cells per map"));
        }
        let needed = (self.train_maps + self.test_maps) * self.sources_per_map;
        if self.combinations().len() < needed {
            return Err(Error::config(format!(
                "{} parameter combinations cannot supply {needed} distinct sources",
                self.combinations().len()
            )));
        }
        Ok(())
    }

    /// Every `(u, Q, H, class)` tuple on the lattice, in a fixed order.
    pub fn combinations(&self) -> Vec<SourceParams> {
        let mut out = Vec::new();
        for &u in &lattice(self.wind_speed, self.wind_speed_step) {
            for &q in &lattice(self.emission_rate, self.emission_rate_step) {
                for &h in &lattice(self.stack_height, self.stack_height_step) {
                    for &class in &self.classes {
                        out.push(SourceParams {
                            wind_speed: u,
                            emission_rate: q,
                            stack_height: h,
                            stability: class,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Position-free physical parameters of one source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub wind_speed: f64,
    pub emission_rate: f64,
    pub stack_height: f64,
    pub stability: StabilityClass,
}

impl SourceParams {
    pub fn of(source: &PlumeSource) -> Self {
        SourceParams {
            wind_speed: source.wind_speed,
            emission_rate: source.emission_rate,
            stack_height: source.stack_height,
            stability: source.stability,
        }
    }

    /// Exact bit-level key for set comparisons.
    pub fn key(&self) -> (u64, u64, u64, StabilityClass) {
        (self.wind_speed.to_bits(), self.emission_rate.to_bits(), self.stack_height.to_bits(), self.stability)
    }
}

/// Every tunable of a training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub obs_embed: usize,
    pub act_embed: usize,
    pub max_epochs: usize,
    pub gamma: f64,
    /// Reward multiplier used only inside the learning targets.
    pub reward_scale: f64,
    pub eps_max: f64,
    pub eps_min: f64,
    pub eps_lambda: f64,
    pub t_init: u64,
    pub total_episodes: u64,
    pub n_agents: usize,
    pub noise_range: [f64; 2],
    /// Environment steps between learning updates.
    pub train_every: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub replay_capacity: usize,
    pub checkpoint_every: u64,
    pub eval_episodes: usize,
    pub grid: GridSpec,
    pub maps: MapRanges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Full,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }
}

impl Hyperparameters {
    pub fn full() -> Self {
        Hyperparameters {
            learning_rate: 1e-3,
            tau: 0.01,
            batch_size: 768,
            seq_len: 75,
            hidden: 1024,
            obs_embed: 256,
            act_embed: 256,
            max_epochs: 5000,
            gamma: 0.999,
            reward_scale: 1.0,
            eps_max: 1.0,
            eps_min: 0.05,
            eps_lambda: 100.0,
            t_init: 22_000,
            total_episodes: 23_000,
            n_agents: 2,
            noise_range: [0.05, 0.10],
            train_every: 1,
            clip_norm: 10.0,
            replay_capacity: 1_000_000,
            checkpoint_every: 500,
            eval_episodes: 10_000,
            grid: GridSpec::default(),
            maps: MapRanges::default(),
        }
    }

    pub fn desk() -> Self {
        Hyperparameters {
            batch_size: 32,
            seq_len: 16,
            hidden: 64,
            obs_embed: 32,
            act_embed: 32,
            max_epochs: 300,
            t_init: 300,
            total_episodes: 1500,
            gamma: 0.99,
            reward_scale: 0.01,
            train_every: 32,
            replay_capacity: 100_000,
            checkpoint_every: 250,
            eval_episodes: 200,
            ..Hyperparameters::full()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Full => Hyperparameters::full(),
            Profile::Desk => Hyperparameters::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("obs_embed", self.obs_embed),
            ("act_embed", self.act_embed),
            ("max_epochs", self.max_epochs),
            ("n_agents", self.n_agents),
            ("replay_capacity", self.replay_capacity),
            ("eval_episodes", self.eval_episodes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.train_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("train_every and checkpoint_every must be positive"));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::config(format!("reward_scale must be positive, got {}", self.reward_scale)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.eps_max <= 1.0 && self.eps_max >= self.eps_min && self.eps_min >= 0.0) || !(self.eps_lambda > 0.0) {
            return Err(Error::config("epsilon schedule needs 1 >= eps_max >= eps_min >= 0 and lambda > 0"));
        }
        if self.total_episodes < self.t_init {
            return Err(Error::config("total_episodes must be at least t_init"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be >= 0"));
        }
        self.env_config().validate()?;
        self.grid.validate().map_err(|e| Error::config(e.to_string()))?;
        self.maps.validate(&self.grid)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let hp: Hyperparameters = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hyperparameters serialize")
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            n_agents: self.n_agents,
            max_epochs: self.max_epochs,
            noise_range: (self.noise_range[0], self.noise_range[1]),
        }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            eps_max: self.eps_max,
            eps_min: self.eps_min,
            lambda: self.eps_lambda,
            t_init: self.t_init,
        }
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            obs_dim: OBS_FEATURES * self.n_agents,
            obs_embed: self.obs_embed,
            act_embed: self.act_embed,
            hidden: self.hidden,
        }
    }

    pub fn learn_settings(&self) -> LearnSettings {
        LearnSettings {
            gamma: self.gamma,
            reward_scale: self.reward_scale,
            tau: self.tau,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Independent RNG stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const MAPGEN_STREAM: u64 = 1 << 60;
const INIT_STREAM: u64 = 2 << 60;
const SCHEDULE_STREAM: u64 = 3 << 60;

fn episode_stream(episode: u64, purpose: u64) -> u64 {
    episode * 4 + purpose
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Train and test fields; no source parameter tuple appears twice.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    pub seed: u64,
    pub train: Vec<Arc<PlumeField>>,
    pub test: Vec<Arc<PlumeField>>,
}

impl MapSet {
    /// SHA-256 over the serialized maps, train first.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in self.train.iter().chain(&self.test) {
            h.update(encode_map(f).as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn grid(&self) -> GridSpec {
        self.train[0].grid
    }
}

pub fn generate_map_set(hp: &Hyperparameters, seed: u64) -> Result<MapSet> {
    let ranges = &hp.maps;
    ranges.validate(&hp.grid)?;
    let grid = hp.grid;
    let mut rng = stream_rng(seed, MAPGEN_STREAM);
    let combos = ranges.combinations();
    let total = ranges.train_maps + ranges.test_maps;
    let per = ranges.sources_per_map;
    let picks = sample(&mut rng, combos.len(), total * per).into_vec();
    let [x0, x1] = ranges.source_x_cells;
    let [y0, y1] = ranges.source_y_cells;
    let width = y1 - y0 + 1;
    let cells = (x1 - x0 + 1) * width;
    let mut fields = Vec::with_capacity(total);
    for m in 0..total {
        let spots = sample(&mut rng, cells, per).into_vec();
        let sources = (0..per)
            .map(|s| {
                let p = combos[picks[m * per + s]];
                let (i, j) = (x0 + spots[s] / width, y0 + spots[s] % width);
                PlumeSource::new(
                    p.emission_rate,
                    p.wind_speed,
                    p.stack_height,
                    grid.axis_center(0, i),
                    grid.axis_center(1, j),
                    p.stability,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        fields.push(Arc::new(rasterize_field(&sources, &grid)?));
    }
    let test = fields.split_off(ranges.train_maps);
    Ok(MapSet {
        seed,
        train: fields,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSetManifest {
    pub seed: u64,
    pub digest: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const MAP_MANIFEST: &str = "maps.json";

/// Writes one text file per map plus `maps.json`.
pub fn save_map_set(set: &MapSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = MapSetManifest {
        seed: set.seed,
        digest: set.digest(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, fields, names) in [("train", &set.train, &mut manifest.train), ("test", &set.test, &mut manifest.test)] {
        for (i, f) in fields.iter().enumerate() {
            let name = format!("{split}_{i:02}.map");
            save_map(f, &dir.join(&name))?;
            names.push(name);
        }
    }
    write_json(&dir.join(MAP_MANIFEST), &manifest)
}

pub fn load_map_set(dir: &Path) -> Result<MapSet> {
    let manifest: MapSetManifest = read_json(&dir.join(MAP_MANIFEST))?;
    let load = |names: &[String]| -> Result<Vec<Arc<PlumeField>>> {
        names.iter().map(|n| load_map(&dir.join(n)).map(Arc::new)).collect()
    };
    let set = MapSet {
        seed: manifest.seed,
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    if set.train.is_empty() || set.test.is_empty() {
        return Err(Error::Load(format!("{}: map set has an empty split", dir.display())));
    }
    if set.digest() != manifest.digest {
        return Err(Error::Load(format!("{}: map files do not match the manifest digest", dir.display())));
    }
    Ok(set)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// One row of the training or evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub map_id: usize,
    pub epochs: usize,
    pub total_reward: f64,
    pub success: bool,
    pub unique_cells: usize,
    pub epsilon: f64,
}

pub const METRICS_HEADER: [&str; 7] = ["episode", "map_id", "epochs", "total_reward", "success", "unique_cells", "epsilon"];

/// Chooses a joint action each step; reset between episodes.
pub trait Controller: Send {
    fn begin_episode(&mut self);
    fn choose(&mut self, joint_obs: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Action>>;
}

/// The agents of one team with their per-episode recurrent state.
#[derive(Debug, Clone)]
pub struct Team {
    pub agents: Vec<Agent>,
    hidden: Vec<HiddenState>,
    prev: Vec<Option<Action>>,
}

impl Team {
    pub fn new(agents: Vec<Agent>) -> Self {
        let hidden = agents.iter().map(Agent::initial_hidden).collect();
        let prev = vec![None; agents.len()];
        Team { agents, hidden, prev }
    }

    pub fn kind(&self) -> AgentKind {
        self.agents[0].kind()
    }

    pub fn prev_actions(&self) -> &[Option<Action>] {
        &self.prev
    }
}

impl Controller for Team {
    fn begin_episode(&mut self) {
        for (h, a) in self.hidden.iter_mut().zip(&self.agents) {
            *h = a.initial_hidden();
        }
        self.prev.fill(None);
    }

    fn choose(&mut self, joint_obs: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        let mut out = Vec::with_capacity(self.agents.len());
        for i in 0..self.agents.len() {
            let (a, h) = self.agents[i].act(joint_obs, self.prev[i], &self.hidden[i], eps, rng)?;
            self.hidden[i] = h;
            self.prev[i] = Some(a);
            out.push(a);
        }
        Ok(out)
    }
}

fn build_agents(hp: &Hyperparameters, kind: AgentKind, seed: u64) -> Result<Vec<Agent>> {
    (0..hp.n_agents)
        .map(|i| {
            if !kind.is_learner() {
                return Ok(Agent::Random);
            }
            let mut rng = stream_rng(seed, INIT_STREAM + i as u64);
            AgentNet::new(kind, hp.network_shape(), hp.learning_rate, &mut rng).map(Agent::Learner)
        })
        .collect()
}

/// Result of [`train`]: the final team, its replay buffers and the episode log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub team: Team,
    pub replays: Vec<ReplayBuffer>,
    pub records: Vec<EpisodeRecord>,
    pub updates: u64,
    pub wall_clock_secs: f64,
}

/// Persistent training state kept next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub format: u32,
    pub kind: AgentKind,
    pub seed: u64,
    pub n_agents: usize,
    pub episodes_done: u64,
    pub total_steps: u64,
    pub updates: u64,
    pub maps_digest: String,
    pub agent_files: Vec<String>,
    pub replay_files: Vec<String>,
    pub hyperparameters: Hyperparameters,
}

pub const TRAIN_MANIFEST: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
const MANIFEST_FORMAT: u32 = 1;

struct TrainState {
    team: Team,
    replays: Vec<ReplayBuffer>,
    records: Vec<EpisodeRecord>,
    episodes_done: u64,
    total_steps: u64,
    updates: u64,
}

/// Runs the full exploration-then-learning schedule for one agent kind.
///
/// With `out`, metrics stream to `metrics.csv` and checkpoints land every
/// `checkpoint_every` episodes; an existing manifest there resumes the run.
pub fn train(hp: &Hyperparameters, maps: &MapSet, kind: AgentKind, seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    train_until(hp, maps, kind, seed, out, hp.total_episodes)
}

fn train_until(
    hp: &Hyperparameters,
    maps: &MapSet,
    kind: AgentKind,
    seed: u64,
    out: Option<&Path>,
    stop_after: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if maps.train.is_empty() {
        return Err(Error::config("training needs at least one map"));
    }
    if maps.grid() != hp.grid {
        return Err(Error::config("map grid differs from the configured grid"));
    }
    let started = Instant::now();
    let digest = maps.digest();
    let mut state = match out.map(|d| d.join(TRAIN_MANIFEST)).filter(|p| p.exists()) {
        Some(path) => resume(&path, hp, kind, seed, &digest)?,
        None => TrainState {
            team: Team::new(build_agents(hp, kind, seed)?),
            replays: (0..hp.n_agents)
                .map(|_| ReplayBuffer::new(hp.replay_capacity, hp.network_shape().obs_dim))
                .collect::<Result<_>>()?,
            records: Vec::new(),
            episodes_done: 0,
            total_steps: 0,
            updates: 0,
        },
    };
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(open_metrics(&dir.join(METRICS_FILE), &state.records)?)
        }
        None => None,
    };

    let mut env = PlumeEnv::new(hp.env_config(), seed)?;
    let schedule = hp.epsilon_schedule();
    let settings = hp.learn_settings();
    while state.episodes_done < hp.total_episodes.min(stop_after) {
        let episode = state.episodes_done;
        let record = run_training_episode(hp, maps, seed, episode, &schedule, &settings, &mut env, &mut state)?;
        if let Some(w) = metrics.as_mut() {
            w.serialize(&record).map_err(csv_error)?;
            w.flush()?;
        }
        state.records.push(record);
        state.episodes_done += 1;
        if let Some(dir) = out {
            if state.episodes_done % hp.checkpoint_every == 0 || state.episodes_done == hp.total_episodes {
                write_checkpoint(dir, hp, kind, seed, &digest, &state)?;
            }
        }
    }
    Ok(TrainOutcome {
        team: state.team,
        replays: state.replays,
        records: state.records,
        updates: state.updates,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_training_episode(
    hp: &Hyperparameters,
    maps: &MapSet,
    seed: u64,
    episode: u64,
    schedule: &EpsilonSchedule,
    settings: &LearnSettings,
    env: &mut PlumeEnv,
    state: &mut TrainState,
) -> Result<EpisodeRecord> {
    let map_id = stream_rng(seed, episode_stream(episode, 0)).random_range(0..maps.train.len());
    env.reseed(stream_rng(seed, episode_stream(episode, 1)).next_u64());
    let mut act_rng = stream_rng(seed, episode_stream(episode, 2));
    let mut learn_rng = stream_rng(seed, episode_stream(episode, 3));
    let eps = epsilon(episode, schedule);
    let learning = episode >= hp.t_init && state.team.kind().is_learner();

    let mut step = env.reset(Arc::clone(&maps.train[map_id]), None)?;
    state.team.begin_episode();
    let mut obs = step.joint_features();
    let mut total_reward = 0.0;
    while !step.done {
        let prev: Vec<Option<Action>> = state.team.prev_actions().to_vec();
        let actions = state.team.choose(&obs, eps, &mut act_rng)?;
        step = env.step(&actions)?;
        let next = step.joint_features();
        total_reward += step.reward;
        for (i, replay) in state.replays.iter_mut().enumerate() {
            replay.push(Transition {
                prev_action: prev[i],
                observation: obs.clone(),
                action: actions[i],
                reward: step.reward,
                next_observation: next.clone(),
                done: step.done,
                episode_id: episode,
            })?;
        }
        obs = next;
        state.total_steps += 1;
        if learning && state.total_steps % hp.train_every == 0 {
            for (agent, replay) in state.team.agents.iter_mut().zip(&state.replays) {
                if let Agent::Learner(net) = agent {
                    let batch = replay.sample_sequences(hp.batch_size, hp.seq_len, &mut learn_rng)?;
                    net.learn(&batch, settings)?;
                }
            }
            state.updates += 1;
        }
    }
    Ok(EpisodeRecord {
        episode,
        map_id,
        epochs: env.epoch(),
        total_reward,
        success: step.success,
        unique_cells: env.unique_cells_visited(),
        epsilon: eps,
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn open_metrics(path: &Path, kept: &[EpisodeRecord]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(File::create(path)?));
    w.write_record(METRICS_HEADER).map_err(csv_error)?;
    for r in kept {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(w)
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}", METRICS_HEADER.join(",")),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn agent_file(kind: AgentKind, i: usize) -> String {
    format!("{kind}_agent{i}.ckpt")
}

fn write_checkpoint(dir: &Path, hp: &Hyperparameters, kind: AgentKind, seed: u64, digest: &str, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut agent_files = Vec::new();
    for (i, a) in state.team.agents.iter().enumerate() {
        if let Agent::Learner(net) = a {
            let name = agent_file(kind, i);
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            write_agent(&mut w, net)?;
            std::io::Write::flush(&mut w)?;
            agent_files.push(name);
        }
    }
    let mut replay_files = Vec::new();
    if state.episodes_done < hp.total_episodes {
        for (i, r) in state.replays.iter().enumerate() {
            let name = format!("replay_agent{i}.bin");
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            r.write_to(&mut w)?;
            std::io::Write::flush(&mut w)?;
            replay_files.push(name);
        }
    } else {
        for i in 0..state.replays.len() {
            let _ = fs::remove_file(dir.join(format!("replay_agent{i}.bin")));
        }
    }
    let manifest = TrainManifest {
        format: MANIFEST_FORMAT,
        kind,
        seed,
        n_agents: hp.n_agents,
        episodes_done: state.episodes_done,
        total_steps: state.total_steps,
        updates: state.updates,
        maps_digest: digest.to_string(),
        agent_files,
        replay_files,
        hyperparameters: hp.clone(),
    };
    // written last so a crash mid-checkpoint leaves the previous manifest intact
    let tmp = dir.join(format!("{TRAIN_MANIFEST}.tmp"));
    write_json(&tmp, &manifest)?;
    fs::rename(tmp, dir.join(TRAIN_MANIFEST))?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<TrainManifest> {
    let m: TrainManifest = read_json(&dir.join(TRAIN_MANIFEST))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Load(format!("unsupported manifest format {}", m.format)));
    }
    Ok(m)
}

fn load_team(dir: &Path, m: &TrainManifest) -> Result<Team> {
    let agents = if m.kind.is_learner() {
        if m.agent_files.len() != m.n_agents {
            return Err(Error::Load(format!("manifest lists {} agent files for {} agents", m.agent_files.len(), m.n_agents)));
        }
        let expected = m.hyperparameters.network_shape();
        m.agent_files
            .iter()
            .map(|name| {
                let path = dir.join(name);
                let f = File::open(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
                let net = read_agent(&mut BufReader::new(f))?;
                if net.kind != m.kind || net.shape() != expected {
                    return Err(Error::Load(format!("{} does not match the manifest", path.display())));
                }
                Ok(Agent::Learner(net))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![Agent::Random; m.n_agents]
    };
    Ok(Team::new(agents))
}

fn resume(path: &Path, hp: &Hyperparameters, kind: AgentKind, seed: u64, digest: &str) -> Result<TrainState> {
    let dir = path.parent().expect("manifest has a parent directory");
    let m = read_manifest(dir)?;
    if m.kind != kind || m.seed != seed || m.hyperparameters != *hp || m.maps_digest != digest {
        return Err(Error::config(format!(
            "{} belongs to a different run (kind, seed, hyperparameters or maps differ)",
            path.display()
        )));
    }
    let team = load_team(dir, &m)?;
    let replays = if m.replay_files.is_empty() {
        if m.episodes_done < hp.total_episodes {
            return Err(Error::Load("checkpoint lacks replay buffers".into()));
        }
        (0..hp.n_agents)
            .map(|_| ReplayBuffer::new(hp.replay_capacity, hp.network_shape().obs_dim))
            .collect::<Result<_>>()?
    } else {
        m.replay_files
            .iter()
            .map(|name| {
                let f = File::open(dir.join(name))?;
                ReplayBuffer::read_from(&mut BufReader::new(f))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut records = read_metrics(&dir.join(METRICS_FILE))?;
    if (records.len() as u64) < m.episodes_done {
        return Err(Error::Load("metrics log is shorter than the checkpoint".into()));
    }
    records.truncate(m.episodes_done as usize);
    Ok(TrainState {
        team,
        replays,
        records,
        episodes_done: m.episodes_done,
        total_steps: m.total_steps,
        updates: m.updates,
    })
}

/// A trained (or random) team restored from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub label: String,
    pub manifest: TrainManifest,
    pub team: Team,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(dir)?;
    if manifest.episodes_done < manifest.hyperparameters.total_episodes {
        return Err(Error::Load(format!("{}: training has not finished", dir.display())));
    }
    let team = load_team(dir, &manifest)?;
    Ok(LoadedModel {
        label: format!("{}", dir.display()),
        manifest,
        team,
    })
}

/// One pre-drawn evaluation episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub map_id: usize,
    pub starts: Vec<[usize; 3]>,
    pub seed: u64,
}

/// Draws `episodes` (map, distinct start cells, noise seed) triples.
pub fn eval_schedule(n_maps: usize, grid: &GridSpec, n_agents: usize, episodes: usize, seed: u64) -> Result<Vec<EvalEpisode>> {
    if n_maps == 0 || episodes == 0 {
        return Err(Error::config("evaluation needs maps and a positive episode count"));
    }
    if n_agents > grid.cell_count() {
        return Err(Error::config("more agents than grid cells"));
    }
    let mut rng = stream_rng(seed, SCHEDULE_STREAM);
    Ok((0..episodes)
        .map(|_| {
            let map_id = rng.random_range(0..n_maps);
            let starts = sample(&mut rng, grid.cell_count(), n_agents)
                .into_iter()
                .map(|flat| [flat / (grid.ny * grid.nz), (flat / grid.nz) % grid.ny, flat % grid.nz])
                .collect();
            EvalEpisode {
                map_id,
                starts,
                seed: rng.next_u64(),
            }
        })
        .collect())
}

pub fn schedule_hash(schedule: &[EvalEpisode]) -> String {
    let mut h = Sha256::new();
    for e in schedule {
        h.update((e.map_id as u64).to_le_bytes());
        h.update((e.starts.len() as u64).to_le_bytes());
        for s in &e.starts {
            for v in s {
                h.update((*v as u64).to_le_bytes());
            }
        }
        h.update(e.seed.to_le_bytes());
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub label: String,
    pub kind: AgentKind,
    pub n_agents: usize,
    pub episodes: usize,
    /// Percent of episodes that located every source.
    pub success_rate: f64,
    pub avg_epochs: f64,
    pub avg_reward: f64,
    /// Mean percent of grid cells visited over successful episodes.
    pub exploration_fraction: Option<f64>,
    pub wall_clock_secs: f64,
    pub schedule_hash: String,
}

impl KpiReport {
    /// Equality of every deterministic field (wall clock excluded).
    pub fn same_results(&self, other: &KpiReport) -> bool {
        self.success_rate == other.success_rate
            && self.avg_epochs == other.avg_epochs
            && self.avg_reward == other.avg_reward
            && self.exploration_fraction == other.exploration_fraction
            && self.episodes == other.episodes
            && self.schedule_hash == other.schedule_hash
    }
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("PLUME_MARL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

fn run_eval_episode<C: Controller>(
    controller: &mut C,
    env: &mut PlumeEnv,
    maps: &[Arc<PlumeField>],
    ep: &EvalEpisode,
    index: usize,
) -> Result<EpisodeRecord> {
    let field = maps
        .get(ep.map_id)
        .ok_or_else(|| Error::config(format!("schedule names map {} of {}", ep.map_id, maps.len())))?;
    let n = env.config().n_agents;
    env.reseed(ep.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(ep.seed);
    rng.set_stream(1);
    let mut step = env.reset(Arc::clone(field), Some(&ep.starts[..n]))?;
    controller.begin_episode();
    let mut total = 0.0;
    while !step.done {
        let actions = controller.choose(&step.joint_features(), 0.0, &mut rng)?;
        step = env.step(&actions)?;
        total += step.reward;
    }
    Ok(EpisodeRecord {
        episode: index as u64,
        map_id: ep.map_id,
        epochs: env.epoch(),
        total_reward: total,
        success: step.success,
        unique_cells: env.unique_cells_visited(),
        epsilon: 0.0,
    })
}

/// Greedy rollouts of `controller` over a fixed schedule. Episodes run on up
/// to `PLUME_MARL_THREADS` threads; records come back in schedule order.
pub fn evaluate_controller<C: Controller + Clone + Sync>(
    controller: &C,
    maps: &[Arc<PlumeField>],
    env_config: EnvConfig,
    schedule: &[EvalEpisode],
) -> Result<Vec<EpisodeRecord>> {
    if schedule.is_empty() {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    if schedule.iter().any(|e| e.starts.len() < env_config.n_agents) {
        return Err(Error::config("schedule has fewer start cells than agents"));
    }
    let threads = thread_cap().min(schedule.len());
    let chunk = schedule.len().div_ceil(threads);
    let run_chunk = |offset: usize, part: &[EvalEpisode]| -> Result<Vec<EpisodeRecord>> {
        let mut c = controller.clone();
        let mut env = PlumeEnv::new(env_config, 0)?;
        part.iter()
            .enumerate()
            .map(|(i, ep)| run_eval_episode(&mut c, &mut env, maps, ep, offset + i))
            .collect()
    };
    if threads == 1 {
        return run_chunk(0, schedule);
    }
    let parts: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = schedule
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| {
                let run = &run_chunk;
                s.spawn(move || run(i * chunk, part))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(schedule.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Aggregates per-episode records into a report.
pub fn summarize(label: &str, kind: AgentKind, n_agents: usize, grid: &GridSpec, records: &[EpisodeRecord], schedule_hash: &str, wall_clock_secs: f64) -> KpiReport {
    let n = records.len() as f64;
    let wins: Vec<&EpisodeRecord> = records.iter().filter(|r| r.success).collect();
    let cells = grid.cell_count() as f64;
    KpiReport {
        label: label.to_string(),
        kind,
        n_agents,
        episodes: records.len(),
        success_rate: 100.0 * wins.len() as f64 / n,
        avg_epochs: records.iter().map(|r| r.epochs as f64).sum::<f64>() / n,
        avg_reward: records.iter().map(|r| r.total_reward).sum::<f64>() / n,
        exploration_fraction: (!wins.is_empty())
            .then(|| 100.0 * wins.iter().map(|r| r.unique_cells as f64 / cells).sum::<f64>() / wins.len() as f64),
        wall_clock_secs,
        schedule_hash: schedule_hash.to_string(),
    }
}

/// Greedy evaluation of `team` on the test maps under a given schedule.
pub fn evaluate_team(team: &Team, label: &str, hp: &Hyperparameters, maps: &MapSet, schedule: &[EvalEpisode]) -> Result<(KpiReport, Vec<EpisodeRecord>)> {
    if maps.grid() != hp.grid {
        return Err(Error::Load("checkpoint grid differs from the map grid".into()));
    }
    if team.agents.len() != hp.n_agents {
        return Err(Error::Load("team size differs from the configured agent count".into()));
    }
    let started = Instant::now();
    let records = evaluate_controller(team, &maps.test, hp.env_config(), schedule)?;
    let report = summarize(label, team.kind(), hp.n_agents, &hp.grid, &records, &schedule_hash(schedule), started.elapsed().as_secs_f64());
    Ok((report, records))
}

/// Loads a checkpoint and evaluates it on `episodes` scheduled test episodes.
pub fn evaluate(checkpoint: &Path, maps: &MapSet, episodes: usize, seed: u64) -> Result<KpiReport> {
    let model = load_model(checkpoint)?;
    let hp = &model.manifest.hyperparameters;
    let schedule = eval_schedule(maps.test.len(), &maps.grid(), hp.n_agents, episodes, seed)?;
    Ok(evaluate_team(&model.team, &model.label, hp, maps, &schedule)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schedule_hash: String,
    pub episodes: usize,
    /// Ranked best first.
    pub rows: Vec<KpiReport>,
}

/// Orders reports by success rate, then fewer epochs, then higher reward.
pub fn rank(rows: &mut [KpiReport]) {
    rows.sort_by(|a, b| {
        b.success_rate
            .total_cmp(&a.success_rate)
            .then(a.avg_epochs.total_cmp(&b.avg_epochs))
            .then(b.avg_reward.total_cmp(&a.avg_reward))
            .then(a.label.cmp(&b.label))
    });
}

/// Evaluates every model on one shared schedule. Models must agree on the
/// agent count unless `allow_mixed_agents` is set; then each team uses the
/// leading start cells of every scheduled episode.
pub fn compare(models: &[LoadedModel], maps: &MapSet, episodes: usize, seed: u64, allow_mixed_agents: bool) -> Result<Comparison> {
    if models.len() < 2 {
        return Err(Error::config("comparison needs at least two models"));
    }
    let counts: HashSet<usize> = models.iter().map(|m| m.manifest.n_agents).collect();
    if counts.len() > 1 && !allow_mixed_agents {
        return Err(Error::config(format!("models differ in agent count ({counts:?})")));
    }
    let max_agents = counts.into_iter().max().expect("nonempty");
    let schedule = eval_schedule(maps.test.len(), &maps.grid(), max_agents, episodes, seed)?;
    let mut rows = models
        .iter()
        .map(|m| evaluate_team(&m.team, &m.label, &m.manifest.hyperparameters, maps, &schedule).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut rows);
    Ok(Comparison {
        schedule_hash: schedule_hash(&schedule),
        episodes,
        rows,
    })
}

/// Fixed-width text table, one row per report.
pub fn render_table(rows: &[KpiReport]) -> String {
    let mut s = format!(
        "{:<4} {:<24} {:<7} {:>6} {:>9} {:>10} {:>11} {:>9} {:>9}\n",
        "rank", "model", "kind", "agents", "success%", "avg_epochs", "avg_reward", "explore%", "time_s"
    );
    for (i, r) in rows.iter().enumerate() {
        let explore = r.exploration_fraction.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            "{:<4} {:<24} {:<7} {:>6} {:>9.2} {:>10.2} {:>11.2} {:>9} {:>9.2}",
            i + 1,
            r.label,
            r.kind.name(),
            r.n_agents,
            r.success_rate,
            r.avg_epochs,
            r.avg_reward,
            explore,
            r.wall_clock_secs
        );
    }
    s
}

/// Writes `report.txt` and `report.json` into `dir`.
pub fn write_reports(dir: &Path, rows: &[KpiReport], schedule_hash: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let txt = dir.join("report.txt");
    let json = dir.join("report.json");
    fs::write(&txt, format!("schedule {schedule_hash}\n{}", render_table(rows)))?;
    write_json(
        &json,
        &Comparison {
            schedule_hash: schedule_hash.to_string(),
            episodes: rows.first().map_or(0, |r| r.episodes),
            rows: rows.to_vec(),
        },
    )?;
    Ok((txt, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Hyperparameters {
        let mut hp = Hyperparameters::desk();
        hp.grid = GridSpec {
            nx: 6,
            ny: 6,
            nz: 6,
            cell_size: [125.0, 125.0, 5.0],
            origin: [0.0; 3],
        };
        hp.maps.source_x_cells = [1, 3];
        hp.maps.source_y_cells = [1, 4];
        hp.maps.train_maps = 3;
        hp.maps.test_maps = 3;
        hp.hidden = 4;
        hp.obs_embed = 4;
        hp.act_embed = 4;
        hp.batch_size = 4;
        hp.seq_len = 3;
        hp.max_epochs = 20;
        hp.t_init = 3;
        hp.total_episodes = 6;
        hp.train_every = 2;
        hp.replay_capacity = 500;
        hp.checkpoint_every = 2;
        hp
    }

    #[test]
    fn profiles_validate() {
        Hyperparameters::full().validate().unwrap();
        Hyperparameters::desk().validate().unwrap();
        tiny().validate().unwrap();
        let full = Hyperparameters::full();
        assert_eq!((full.batch_size, full.seq_len, full.hidden, full.max_epochs), (768, 75, 1024, 5000));
        assert_eq!((full.t_init, full.total_episodes, full.gamma, full.tau), (22_000, 23_000, 0.999, 0.01));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut hp = tiny();
        hp.gamma = 0.0;
        assert!(hp.validate().is_err());
        let mut hp = tiny();
        hp.total_episodes = 2;
        assert!(hp.validate().is_err());
        let mut hp = tiny();
        hp.maps.wind_speed = [5.0, 5.0];
        hp.maps.emission_rate = [8.0, 8.0];
        hp.maps.stack_height = [10.0, 10.0];
        hp.maps.classes = vec![StabilityClass::A];
        assert!(matches!(hp.validate(), Err(Error::Config(_))));
        let mut hp = tiny();
        hp.maps.wind_speed = [0.0, 3.0];
        assert!(hp.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let hp = Hyperparameters::desk();
        let text = hp.to_toml();
        assert_eq!(Hyperparameters::from_toml_str(&text).unwrap(), hp);
        let bad = format!("{text}\nsurprise = 1\n");
        assert!(matches!(Hyperparameters::from_toml_str(&bad), Err(Error::Config(_))));
        let nested = text.replace("[grid]", "[grid]\nextra = 2");
        assert!(Hyperparameters::from_toml_str(&nested).is_err());
    }

    #[test]
    fn lattice_is_inclusive() {
        assert_eq!(lattice([10.0, 20.0], 2.0), vec![10.0, 12.0, 14.0, 16.0, 18.0, 20.0]);
        assert_eq!(MapRanges::default().combinations().len(), 8 * 8 * 6 * 4);
    }

    #[test]
    fn map_sets_are_disjoint_and_deterministic() {
        let hp = Hyperparameters::desk();
        let a = generate_map_set(&hp, 7).unwrap();
        let b = generate_map_set(&hp, 7).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), generate_map_set(&hp, 8).unwrap().digest());
        assert_eq!((a.train.len(), a.test.len()), (20, 20));
        let keys = |fs: &[Arc<PlumeField>]| -> HashSet<_> {
            fs.iter().flat_map(|f| f.sources.iter().map(|s| SourceParams::of(s).key())).collect()
        };
        let (tr, te) = (keys(&a.train), keys(&a.test));
        assert_eq!(tr.len(), 40);
        assert!(tr.is_disjoint(&te));
        for f in a.train.iter().chain(&a.test) {
            assert_eq!(f.sources.len(), 2);
            assert_ne!(f.source_cells[0], f.source_cells[1]);
            for c in &f.source_cells {
                assert!(f.grid.contains(*c));
                assert!((2..=9).contains(&c[0]) && (3..=12).contains(&c[1]));
            }
        }
    }

    #[test]
    fn schedule_is_deterministic_with_distinct_starts() {
        let grid = GridSpec::default();
        let s = eval_schedule(20, &grid, 3, 50, 1).unwrap();
        assert_eq!(s, eval_schedule(20, &grid, 3, 50, 1).unwrap());
        assert_ne!(schedule_hash(&s), schedule_hash(&eval_schedule(20, &grid, 3, 50, 2).unwrap()));
        for e in &s {
            assert!(e.map_id < 20);
            assert!(e.starts[0] != e.starts[1] && e.starts[1] != e.starts[2] && e.starts[0] != e.starts[2]);
            assert!(e.starts.iter().all(|c| grid.contains(*c)));
        }
    }

    #[derive(Clone)]
    struct Still;

    impl Controller for Still {
        fn begin_episode(&mut self) {}
        fn choose(&mut self, joint_obs: &[f64], _: f64, _: &mut ChaCha8Rng) -> Result<Vec<Action>> {
            Ok(vec![Action::Left; joint_obs.len() / OBS_FEATURES])
        }
    }

    #[test]
    fn stationary_team_fails_every_episode() {
        let hp = Hyperparameters::desk();
        let maps = generate_map_set(&hp, 3).unwrap();
        // x = 0 keeps `Left` a clamped no-op; sources never sit at x = 0
        let schedule: Vec<EvalEpisode> = (0..10)
            .map(|i| EvalEpisode {
                map_id: i % 20,
                starts: vec![[0, i, 3], [0, i + 1, 9]],
                seed: i as u64,
            })
            .collect();
        let records = evaluate_controller(&Still, &maps.test, hp.env_config(), &schedule).unwrap();
        let r = summarize("still", AgentKind::Random, 2, &hp.grid, &records, "", 0.0);
        assert_eq!(r.success_rate, 0.0);
        assert_eq!(r.avg_epochs, 300.0);
        assert_eq!(r.avg_reward, -600.0);
        assert_eq!(r.exploration_fraction, None);
        for rec in &records {
            assert_eq!(rec.unique_cells, 2);
            assert!((100.0 * rec.unique_cells as f64 / 4096.0 - 0.048828125).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_arithmetic() {
        let grid = GridSpec::default();
        let rec = |epochs, reward, success, cells| EpisodeRecord {
            episode: 0,
            map_id: 0,
            epochs,
            total_reward: reward,
            success,
            unique_cells: cells,
            epsilon: 0.0,
        };
        let rows = [rec(10, 5.0, true, 41), rec(300, -600.0, false, 500), rec(30, -30.0, true, 82), rec(300, -600.0, false, 9)];
        let r = summarize("x", AgentKind::Addrqn, 2, &grid, &rows, "h", 1.0);
        assert_eq!(r.success_rate, 50.0);
        assert_eq!(r.avg_epochs, 160.0);
        assert_eq!(r.avg_reward, -306.25);
        let expected = 100.0 * (41.0 / 4096.0 + 82.0 / 4096.0) / 2.0;
        assert!((r.exploration_fraction.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn training_gate_and_record_consistency() {
        let mut hp = tiny();
        hp.gamma = 1.0;
        hp.eps_min = 1.0;
        hp.t_init = 10;
        hp.total_episodes = 10;
        let maps = generate_map_set(&hp, 1).unwrap();
        let out = train(&hp, &maps, AgentKind::Addrqn, 5, None).unwrap();
        assert_eq!(out.records.len(), 10);
        assert_eq!(out.updates, 0);
        for (i, r) in out.records.iter().enumerate() {
            assert_eq!(r.episode, i as u64);
            assert!(r.epochs <= hp.max_epochs);
            assert_eq!(r.epsilon, 1.0);
            let steps: Vec<&Transition> = out.replays[0].iter().filter(|t| t.episode_id == i as u64).collect();
            assert_eq!(steps.len(), r.epochs);
            assert_eq!(steps.iter().map(|t| t.reward).sum::<f64>(), r.total_reward);
            if !r.success {
                assert_eq!(r.epochs, hp.max_epochs);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_learns_after_gate() {
        let hp = tiny();
        let maps = generate_map_set(&hp, 2).unwrap();
        let a = train(&hp, &maps, AgentKind::Addrqn, 9, None).unwrap();
        let b = train(&hp, &maps, AgentKind::Addrqn, 9, None).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.updates > 0);
        let (Agent::Learner(x), Agent::Learner(y)) = (&a.team.agents[0], &b.team.agents[0]) else {
            panic!("learners expected")
        };
        assert_eq!(x, y);
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let hp = tiny();
        let maps = generate_map_set(&hp, 4).unwrap();
        let whole = tempfile::tempdir().unwrap();
        train(&hp, &maps, AgentKind::Adrqn, 3, Some(whole.path())).unwrap();

        let split = tempfile::tempdir().unwrap();
        // stops after episode 5 with the last checkpoint at 4
        train_until(&hp, &maps, AgentKind::Adrqn, 3, Some(split.path()), 5).unwrap();
        assert_eq!(read_manifest(split.path()).unwrap().episodes_done, 4);
        assert_eq!(read_metrics(&split.path().join(METRICS_FILE)).unwrap().len(), 5);
        let resumed = train(&hp, &maps, AgentKind::Adrqn, 3, Some(split.path())).unwrap();
        assert_eq!(resumed.records.len(), 6);
        assert_eq!(dir_bytes(whole.path()), dir_bytes(split.path()));

        let mut other = hp.clone();
        other.tau = 0.5;
        let dirty = tempfile::tempdir().unwrap();
        train_until(&hp, &maps, AgentKind::Adrqn, 3, Some(dirty.path()), 2).unwrap();
        assert!(matches!(train(&other, &maps, AgentKind::Adrqn, 3, Some(dirty.path())), Err(Error::Config(_))));
        assert!(matches!(train(&hp, &maps, AgentKind::Drqn, 3, Some(dirty.path())), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation() {
        let hp = tiny();
        let maps = generate_map_set(&hp, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&hp, &maps, AgentKind::Addrqn, 1, Some(dir.path())).unwrap();
        let schedule = eval_schedule(maps.test.len(), &hp.grid, hp.n_agents, 12, 77).unwrap();
        let (live, live_records) = evaluate_team(&out.team, "live", &hp, &maps, &schedule).unwrap();
        let model = load_model(dir.path()).unwrap();
        let (back, back_records) = evaluate_team(&model.team, "live", &hp, &maps, &schedule).unwrap();
        assert_eq!(live_records, back_records);
        assert!(live.same_results(&back));
        let via_path = evaluate(dir.path(), &maps, 12, 77).unwrap();
        assert!(live.same_results(&via_path));
    }

    #[test]
    fn compare_shares_schedule_and_checks_agent_counts() {
        let hp = tiny();
        let maps = generate_map_set(&hp, 6).unwrap();
        let a = tempfile::tempdir().unwrap();
        train(&hp, &maps, AgentKind::Random, 1, Some(a.path())).unwrap();
        let m = load_model(a.path()).unwrap();
        let cmp = compare(&[m.clone(), m.clone()], &maps, 15, 4, false).unwrap();
        assert!(cmp.rows[0].same_results(&cmp.rows[1]));
        assert_eq!(cmp.rows[0].schedule_hash, cmp.schedule_hash);

        let mut hp3 = hp.clone();
        hp3.n_agents = 3;
        let b = tempfile::tempdir().unwrap();
        train(&hp3, &maps, AgentKind::Random, 1, Some(b.path())).unwrap();
        let m3 = load_model(b.path()).unwrap();
        assert!(matches!(compare(&[m.clone(), m3.clone()], &maps, 5, 4, false), Err(Error::Config(_))));
        let mixed = compare(&[m, m3], &maps, 5, 4, true).unwrap();
        assert_eq!(mixed.rows.len(), 2);
        assert!(compare(&[load_model(a.path()).unwrap()], &maps, 5, 4, false).is_err());
    }

    #[test]
    fn metrics_file_has_fixed_header() {
        let hp = tiny();
        let maps = generate_map_set(&hp, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&hp, &maps, AgentKind::Random, 8, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "episode,map_id,epochs,total_reward,success,unique_cells,epsilon");
        assert_eq!(text.lines().count(), 7);
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.records);
    }

    #[test]
    fn rank_orders_by_success_then_epochs() {
        let mk = |label: &str, s, e| KpiReport {
            label: label.into(),
            kind: AgentKind::Drqn,
            n_agents: 2,
            episodes: 1,
            success_rate: s,
            avg_epochs: e,
            avg_reward: 0.0,
            exploration_fraction: None,
            wall_clock_secs: 0.0,
            schedule_hash: String::new(),
        };
        let mut rows = vec![mk("a", 10.0, 50.0), mk("b", 20.0, 90.0), mk("c", 20.0, 40.0)];
        rank(&mut rows);
        let order: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(order, ["c", "b", "a"]);
    }
}
