//! Per-agent episodic novelty buffer and the intrinsic reward derived from
//! it. Each off-goal agent compares its position against previously stored
//! cells; sufficiently distant positions earn a small bonus and may be
//! stored themselves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::world::Coord;

/// Which distance aggregate over the stored cells drives the novelty test.
/// The reference formulation uses the maximum distance to any stored cell;
/// minimum distance is the more conventional alternative, kept selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoveltyAggregator {
    Max,
    Min,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreConfig {
    /// Buffer capacity M.
    pub capacity: usize,
    /// Novelty threshold tau is drawn uniformly from this range once per
    /// agent per episode.
    pub tau_range: (f64, f64),
    /// Insertion threshold rho.
    pub rho: f64,
    /// Intrinsic reward scale phi.
    pub phi: f64,
    /// Intrinsic reward base beta.
    pub beta: f64,
    /// Intrinsic rewards are injected only after this many global
    /// environment steps.
    pub warmup_steps: u64,
    pub aggregator: NoveltyAggregator,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            capacity: 80,
            tau_range: (1.0, 3.0),
            rho: 3.0,
            phi: 0.2,
            beta: 1.0,
            warmup_steps: 1_000_000,
            aggregator: NoveltyAggregator::Max,
        }
    }
}

impl ExploreConfig {
    pub fn warmup_passed(&self, global_step: u64) -> bool {
        global_step > self.warmup_steps
    }
}

/// Distances and reward produced for one step.
#[derive(Debug, Clone, Copy)]
pub struct Novelty {
    pub reward: f64,
    /// Aggregated distance used for the novelty and insertion tests;
    /// infinite when the buffer is empty.
    pub dist: f64,
    /// Minimum distance to any stored cell, reported back into the next
    /// observation's scalar vector; 0 when the buffer is empty.
    pub dmin: f64,
}

/// One agent's episodic buffer. Emptied at episode start; the threshold tau
/// is fixed for the whole episode.
#[derive(Debug, Clone)]
pub struct EpisodicBuffer {
    entries: Vec<Coord>,
    capacity: usize,
    pub tau: f64,
}

impl EpisodicBuffer {
    pub fn new(capacity: usize, tau: f64) -> EpisodicBuffer {
        EpisodicBuffer {
            entries: Vec::new(),
            capacity,
            tau,
        }
    }

    /// Fresh buffer for a new episode, with tau sampled from the configured
    /// range.
    pub fn start_episode<R: Rng>(config: &ExploreConfig, rng: &mut R) -> EpisodicBuffer {
        let (lo, hi) = config.tau_range;
        let tau = lo + (hi - lo) * rng.gen::<f64>();
        EpisodicBuffer::new(config.capacity, tau)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Computes the intrinsic reward for standing at `pos`. Agents on their
    /// goal never receive it. An empty buffer counts as maximally novel.
    /// The reward is two-valued: phi*beta when novel, 0 otherwise.
    pub fn intrinsic_reward(&self, config: &ExploreConfig, pos: Coord, on_goal: bool) -> Novelty {
        if self.entries.is_empty() {
            return Novelty {
                reward: if on_goal { 0.0 } else { config.phi * config.beta },
                dist: f64::INFINITY,
                dmin: 0.0,
            };
        }
        let mut dmin = f64::INFINITY;
        let mut dmax = f64::NEG_INFINITY;
        for &e in &self.entries {
            let d = pos.euclidean(e);
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        let dist = match config.aggregator {
            NoveltyAggregator::Max => dmax,
            NoveltyAggregator::Min => dmin,
        };
        let delta = if dist < self.tau { 1.0 } else { 0.0 };
        let reward = if on_goal {
            0.0
        } else {
            config.phi * (config.beta - delta)
        };
        Novelty { reward, dist, dmin }
    }

    /// Stores `pos` when it is distant enough (aggregated distance at least
    /// rho) or the buffer is empty. At capacity a uniformly random entry is
    /// overwritten, so the size never exceeds M.
    pub fn maybe_insert<R: Rng>(&mut self, config: &ExploreConfig, pos: Coord, dist: f64, rng: &mut R) {
        if !self.entries.is_empty() && dist < config.rho {
            return;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(pos);
        } else {
            let i = rng.gen_range(0..self.entries.len());
            self.entries[i] = pos;
        }
    }
}
