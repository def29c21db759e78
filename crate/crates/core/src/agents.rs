//! Recurrent Q-learning agents (DRQN, DDRQN, ADRQN, ADDRQN) and the
//! random-walk baseline.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::env::{Action, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{
    adam_update, backward, clip_grad_norm, forward_sequences, read_adam, read_network, write_adam, write_network,
    AdamState, ForwardCache, HiddenState, NetworkParams, NetworkShape, TdTargets, Tensor2,
};
use crate::replay::SequenceBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Drqn,
    Ddrqn,
    Adrqn,
    Addrqn,
    Random,
}

impl AgentKind {
    pub const LEARNERS: [AgentKind; 4] = [AgentKind::Addrqn, AgentKind::Adrqn, AgentKind::Ddrqn, AgentKind::Drqn];

    /// Feeds the previous own action into the network.
    pub fn action_conditioned(self) -> bool {
        matches!(self, AgentKind::Adrqn | AgentKind::Addrqn)
    }

    /// Selects the bootstrap action with the online network.
    pub fn double_q(self) -> bool {
        matches!(self, AgentKind::Ddrqn | AgentKind::Addrqn)
    }

    pub fn is_learner(self) -> bool {
        self != AgentKind::Random
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Drqn => "drqn",
            AgentKind::Ddrqn => "ddrqn",
            AgentKind::Adrqn => "adrqn",
            AgentKind::Addrqn => "addrqn",
            AgentKind::Random => "random",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drqn" => Ok(AgentKind::Drqn),
            "ddrqn" => Ok(AgentKind::Ddrqn),
            "adrqn" => Ok(AgentKind::Adrqn),
            "addrqn" => Ok(AgentKind::Addrqn),
            "random" => Ok(AgentKind::Random),
            other => Err(Error::config(format!("unknown agent kind {other:?}"))),
        }
    }
}

/// Exploration rate: `eps_max` for the first `t_init` episodes, then an
/// exponential decay towards `eps_min` with time constant `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub eps_max: f64,
    pub eps_min: f64,
    pub lambda: f64,
    pub t_init: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            eps_max: 1.0,
            eps_min: 0.05,
            lambda: 100.0,
            t_init: 22_000,
        }
    }
}

pub fn epsilon(t: u64, s: &EpsilonSchedule) -> f64 {
    if t < s.t_init {
        return s.eps_max;
    }
    let elapsed = (t - s.t_init) as f64;
    s.eps_min + (s.eps_max - s.eps_min) * (-elapsed / s.lambda).exp()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice over six Q-values.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> Action {
    debug_assert_eq!(q.len(), NUM_ACTIONS);
    if eps > 0.0 && rng.random::<f64>() < eps {
        return Action::ALL[rng.random_range(0..NUM_ACTIONS)];
    }
    Action::ALL[argmax(q)]
}

/// Mean squared error over unmasked entries.
pub fn loss(q_taken: &[f64], y: &[f64], mask: &[bool]) -> Result<f64> {
    if q_taken.len() != y.len() || y.len() != mask.len() {
        return Err(Error::domain("loss inputs differ in length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((q, t), m) in q_taken.iter().zip(y).zip(mask) {
        if *m {
            sum += (t - q) * (t - q);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("every step is masked; the loss is undefined"));
    }
    Ok(sum / count as f64)
}

/// `target <- tau * online + (1 - tau) * target`, parameter by parameter.
pub fn soft_update(online: &NetworkParams, target: &mut NetworkParams, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau must lie in [0, 1], got {tau}")));
    }
    if online.shape() != target.shape() {
        return Err(Error::domain("online and target networks differ in shape"));
    }
    for (t, o) in target.blocks_mut().into_iter().zip(online.blocks()) {
        for (tv, ov) in t.data.iter_mut().zip(&o.data) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

/// Per-step regression targets for a [`SequenceBatch`], indexed `b * L + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub y: Vec<f64>,
    /// The discounted-away bootstrap value `Q(o', a*; θ⁻)`; zero on terminal
    /// and masked steps.
    pub bootstrap: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Online and target networks plus optimizer state for one learning agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    pub kind: AgentKind,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnSettings {
    pub gamma: f64,
    /// Multiplies rewards inside the targets. Greedy actions are unchanged by
    /// it, but it keeps Q values near unit scale.
    pub reward_scale: f64,
    pub tau: f64,
    pub clip_norm: Option<f64>,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(kind: AgentKind, shape: NetworkShape, lr: f64, rng: &mut R) -> Result<Self> {
        if !kind.is_learner() {
            return Err(Error::config("the random baseline has no network"));
        }
        let online = NetworkParams::new(shape, rng);
        let target = online.clone();
        let adam = AdamState::new(&online, lr);
        Ok(AgentNet {
            kind,
            online,
            target,
            adam,
        })
    }

    pub fn shape(&self) -> NetworkShape {
        self.online.shape()
    }

    /// One gradient step on a sampled batch followed by a soft target update.
    /// Returns the batch loss.
    pub fn learn(&mut self, batch: &SequenceBatch, settings: &LearnSettings) -> Result<f64> {
        let (obs, act) = unroll_inputs(batch, self.kind.action_conditioned());
        let steps = batch.seq_len + 1;
        let init = HiddenState::zeros(batch.batch, self.shape().hidden);
        let online = forward_sequences(&self.online, &obs, &act, steps, &init)?;
        let target = forward_sequences(&self.target, &obs, &act, steps, &init)?;
        let targets = targets_from_caches(batch, &online, &target, self.kind.double_q(), settings.gamma, settings.reward_scale);

        let rows = steps * batch.batch;
        let mut td = TdTargets {
            actions: vec![0; rows],
            targets: vec![0.0; rows],
            mask: vec![false; rows],
        };
        for b in 0..batch.batch {
            for t in 0..batch.seq_len {
                let i = batch.idx(b, t);
                let r = t * batch.batch + b;
                td.actions[r] = batch.actions[i].index();
                td.targets[r] = targets.y[i];
                td.mask[r] = targets.mask[i];
            }
        }
        let (loss, mut grads) = backward(&self.online, &online, &td)?;
        if let Some(max) = settings.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        adam_update(&mut self.online, &grads, &mut self.adam)?;
        soft_update(&self.online, &mut self.target, settings.tau)?;
        Ok(loss)
    }
}

/// Time-major inputs over `L + 1` steps: step `t < L` carries `(o_t, a_{t-1})`
/// and the step after a sequence's last valid transition carries
/// `(o'_t, a_t)`, so the same unroll yields both `Q(o_t)` and `Q(o'_t)`.
pub fn unroll_inputs(batch: &SequenceBatch, action_conditioned: bool) -> (Tensor2, Tensor2) {
    let (bs, len, d) = (batch.batch, batch.seq_len, batch.obs_dim);
    let rows = (len + 1) * bs;
    let mut obs = Tensor2::zeros(rows, d);
    let mut act = Tensor2::zeros(rows, NUM_ACTIONS);
    for b in 0..bs {
        let valid = batch.valid_len[b];
        for t in 0..valid {
            let r = t * bs + b;
            obs.data[r * d..(r + 1) * d].copy_from_slice(batch.observation(b, t));
            if action_conditioned {
                if let Some(a) = batch.prev_actions[batch.idx(b, t)] {
                    act.set(r, a.index(), 1.0);
                }
            }
        }
        if valid > 0 {
            let r = valid * bs + b;
            obs.data[r * d..(r + 1) * d].copy_from_slice(batch.next_observation(b, valid - 1));
            if action_conditioned {
                act.set(r, batch.actions[batch.idx(b, valid - 1)].index(), 1.0);
            }
        }
    }
    (obs, act)
}

fn targets_from_caches(
    batch: &SequenceBatch,
    online: &ForwardCache,
    target: &ForwardCache,
    double_q: bool,
    gamma: f64,
    scale: f64,
) -> Targets {
    let n = batch.batch * batch.seq_len;
    let mut y = vec![0.0; n];
    let mut bootstrap = vec![0.0; n];
    for b in 0..batch.batch {
        for t in 0..batch.valid_len[b] {
            let i = batch.idx(b, t);
            if !batch.mask[i] || batch.dones[i] {
                y[i] = scale * batch.rewards[i];
                continue;
            }
            let q_next = target.q_at(t + 1, b);
            let boot = if double_q {
                q_next[argmax(online.q_at(t + 1, b))]
            } else {
                q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            bootstrap[i] = boot;
            y[i] = scale * batch.rewards[i] + gamma * boot;
        }
    }
    for (v, m) in y.iter_mut().zip(&batch.mask) {
        if !m {
            *v = 0.0;
        }
    }
    Targets {
        y,
        bootstrap,
        mask: batch.mask.clone(),
    }
}

/// Bootstrapped targets for `batch` under `agent`'s networks and kind.
pub fn compute_targets(batch: &SequenceBatch, agent: &AgentNet, gamma: f64) -> Result<Targets> {
    if batch.batch == 0 || batch.valid_steps() == 0 {
        return Err(Error::domain("target computation needs a non-empty batch"));
    }
    let (obs, act) = unroll_inputs(batch, agent.kind.action_conditioned());
    let steps = batch.seq_len + 1;
    let init = HiddenState::zeros(batch.batch, agent.shape().hidden);
    let online = forward_sequences(&agent.online, &obs, &act, steps, &init)?;
    let target = forward_sequences(&agent.target, &obs, &act, steps, &init)?;
    Ok(targets_from_caches(batch, &online, &target, agent.kind.double_q(), gamma, 1.0))
}

/// A member of the team: either a learner or the random walker.
#[derive(Debug, Clone, PartialEq)]
pub enum Agent {
    Random,
    Learner(AgentNet),
}

impl Agent {
    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Random => AgentKind::Random,
            Agent::Learner(n) => n.kind,
        }
    }

    pub fn initial_hidden(&self) -> HiddenState {
        match self {
            Agent::Random => HiddenState::zeros(1, 0),
            Agent::Learner(n) => HiddenState::zeros(1, n.shape().hidden),
        }
    }

    /// One recurrent step and an ε-greedy pick. The random walker ignores
    /// everything but the RNG.
    pub fn act<R: Rng + ?Sized>(
        &self,
        joint_obs: &[f64],
        prev_action: Option<Action>,
        hidden: &HiddenState,
        eps: f64,
        rng: &mut R,
    ) -> Result<(Action, HiddenState)> {
        let net = match self {
            Agent::Random => return Ok((Action::ALL[rng.random_range(0..NUM_ACTIONS)], hidden.clone())),
            Agent::Learner(n) => n,
        };
        let obs = Tensor2::row_vector(joint_obs);
        let mut act = Tensor2::zeros(1, NUM_ACTIONS);
        if net.kind.action_conditioned() {
            if let Some(a) = prev_action {
                act.set(0, a.index(), 1.0);
            }
        }
        let cache = forward_sequences(&net.online, &obs, &act, 1, hidden)?;
        let action = select_action(cache.q_at(0, 0), eps, rng);
        Ok((action, cache.final_state))
    }
}

const AGENT_MAGIC: &[u8; 8] = b"PMAGENT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned agent checkpoint: header, shape, online and target blocks, Adam state.
pub fn write_agent<W: Write>(w: &mut W, agent: &AgentNet) -> Result<()> {
    w.write_all(AGENT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_str(w, agent.kind.name())?;
    let s = agent.shape();
    for v in [s.obs_dim, s.obs_embed, s.act_embed, s.hidden] {
        put_u64(w, v as u64)?;
    }
    write_network(w, "online.", &agent.online)?;
    write_network(w, "target.", &agent.target)?;
    write_adam(w, "adam.", &agent.adam)
}

pub fn read_agent<R: Read>(r: &mut R) -> Result<AgentNet> {
    expect_magic(r, AGENT_MAGIC)?;
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let kind: AgentKind = get_str(r)?.parse().map_err(|e: Error| Error::Load(e.to_string()))?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = get_u64(r)? as usize;
    }
    let shape = NetworkShape {
        obs_dim: dims[0],
        obs_embed: dims[1],
        act_embed: dims[2],
        hidden: dims[3],
    };
    let online = read_network(r, "online.", shape)?;
    let target = read_network(r, "target.", shape)?;
    let adam = read_adam(r, "adam.", shape)?;
    Ok(AgentNet {
        kind,
        online,
        target,
        adam,
    })
}
