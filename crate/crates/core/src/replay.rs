//! Per-agent experience replay serving contiguous within-episode sequences.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::binio::*;
use crate::env::Action;
use crate::error::{Error, Result};

/// One agent's view of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// `None` at the first step of an episode (encoded as the zero vector).
    pub prev_action: Option<Action>,
    pub observation: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
    pub episode_id: u64,
}

/// `batch` sequences of `seq_len` steps, stored row-major as `b * seq_len + t`.
///
/// Steps past a sequence's valid length are zero-filled and have `mask == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub next_observations: Vec<f64>,
    pub prev_actions: Vec<Option<Action>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub mask: Vec<bool>,
    pub episode_ids: Vec<u64>,
    pub valid_len: Vec<usize>,
}

impl SequenceBatch {
    pub fn zeros(batch: usize, seq_len: usize, obs_dim: usize) -> Self {
        let n = batch * seq_len;
        SequenceBatch {
            batch,
            seq_len,
            obs_dim,
            observations: vec![0.0; n * obs_dim],
            next_observations: vec![0.0; n * obs_dim],
            prev_actions: vec![None; n],
            actions: vec![Action::Left; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            mask: vec![false; n],
            episode_ids: vec![0; n],
            valid_len: vec![0; batch],
        }
    }

    pub fn idx(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }

    pub fn observation(&self, b: usize, t: usize) -> &[f64] {
        let i = self.idx(b, t) * self.obs_dim;
        &self.observations[i..i + self.obs_dim]
    }

    pub fn next_observation(&self, b: usize, t: usize) -> &[f64] {
        let i = self.idx(b, t) * self.obs_dim;
        &self.next_observations[i..i + self.obs_dim]
    }

    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Writes transition `tr` into slot `(b, t)` and marks it valid.
    pub fn set(&mut self, b: usize, t: usize, tr: &Transition) {
        let i = self.idx(b, t);
        let d = self.obs_dim;
        self.observations[i * d..(i + 1) * d].copy_from_slice(&tr.observation);
        self.next_observations[i * d..(i + 1) * d].copy_from_slice(&tr.next_observation);
        self.prev_actions[i] = tr.prev_action;
        self.actions[i] = tr.action;
        self.rewards[i] = tr.reward;
        self.dones[i] = tr.done;
        self.mask[i] = true;
        self.episode_ids[i] = tr.episode_id;
        self.valid_len[b] = self.valid_len[b].max(t + 1);
    }
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    items: VecDeque<Transition>,
    last_episode: Option<u64>,
}

const REPLAY_MAGIC: &[u8; 8] = b"PMREPLY1";

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        if obs_dim == 0 {
            return Err(Error::config("observation size must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            last_episode: None,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.observation.len() != self.obs_dim || t.next_observation.len() != self.obs_dim {
            return Err(Error::Usage(format!(
                "transition observations must have length {}, got {} and {}",
                self.obs_dim,
                t.observation.len(),
                t.next_observation.len()
            )));
        }
        if let Some(last) = self.last_episode {
            if t.episode_id < last {
                return Err(Error::Usage(format!(
                    "episode id went backwards ({} after {last})",
                    t.episode_id
                )));
            }
        }
        self.last_episode = Some(t.episode_id);
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Draws `batch` start positions uniformly over all stored transitions and
    /// copies up to `seq_len` following steps of the same episode from each,
    /// stopping after a terminal step.
    pub fn sample_sequences<R: Rng + ?Sized>(
        &self,
        batch: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<SequenceBatch> {
        if self.items.is_empty() {
            return Err(Error::NotReady("replay buffer is empty".into()));
        }
        if batch == 0 || seq_len == 0 {
            return Err(Error::domain("batch size and sequence length must be positive"));
        }
        let mut out = SequenceBatch::zeros(batch, seq_len, self.obs_dim);
        for b in 0..batch {
            let start = rng.random_range(0..self.items.len());
            let episode = self.items[start].episode_id;
            for t in 0..seq_len {
                let Some(tr) = self.items.get(start + t) else { break };
                if tr.episode_id != episode {
                    break;
                }
                out.set(b, t, tr);
                if tr.done {
                    break;
                }
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(REPLAY_MAGIC)?;
        put_u64(w, self.capacity as u64)?;
        put_u64(w, self.obs_dim as u64)?;
        put_u64(w, self.items.len() as u64)?;
        put_u64(w, self.last_episode.map_or(u64::MAX, |e| e))?;
        for t in &self.items {
            put_u32(w, t.prev_action.map_or(u32::MAX, |a| a.index() as u32))?;
            put_u32(w, t.action.index() as u32)?;
            put_f64(w, t.reward)?;
            put_u32(w, t.done as u32)?;
            put_u64(w, t.episode_id)?;
            put_f64s(w, &t.observation)?;
            put_f64s(w, &t.next_observation)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, REPLAY_MAGIC)?;
        let capacity = get_u64(r)? as usize;
        let obs_dim = get_u64(r)? as usize;
        let len = get_u64(r)? as usize;
        let last = get_u64(r)?;
        let mut buf = ReplayBuffer::new(capacity, obs_dim).map_err(|e| Error::Load(e.to_string()))?;
        if len > capacity {
            return Err(Error::Load(format!("replay holds {len} items but capacity is {capacity}")));
        }
        let action = |i: u32| {
            Action::from_index(i as usize).ok_or_else(|| Error::Load(format!("bad action index {i}")))
        };
        for _ in 0..len {
            let prev = get_u32(r)?;
            let prev_action = if prev == u32::MAX { None } else { Some(action(prev)?) };
            let act = action(get_u32(r)?)?;
            let reward = get_f64(r)?;
            let done = get_u32(r)? != 0;
            let episode_id = get_u64(r)?;
            let observation = get_f64s(r, obs_dim)?;
            let next_observation = get_f64s(r, obs_dim)?;
            buf.items.push_back(Transition {
                prev_action,
                observation,
                action: act,
                reward,
                next_observation,
                done,
                episode_id,
            });
        }
        buf.last_episode = (last != u64::MAX).then_some(last);
        Ok(buf)
    }
}
