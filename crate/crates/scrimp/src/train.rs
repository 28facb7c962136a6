//! PPO + imitation trainer: episode collection with tie-breaking and
//! intrinsic rewards, generalized advantage estimation, the clipped
//! surrogate loss with its auxiliary heads, and the synchronous training
//! loop with CSV metrics and checkpoints.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, TrainError};
use crate::expert::prioritized_plan;
use crate::explore::{EpisodicBuffer, ExploreConfig};
use crate::numerics::{checkpoint, AdamConfig, Graph, Id, Tensor};
use crate::obs::{build_observation, DistanceField, ObsParams, Observation, PrevStep};
use crate::policy::{act, AgentCarry, NetConfig, PolicyNet, TeamOutput};
use crate::tiebreak::{resolve, PolicyAccess, TieBreakConfig};
use crate::world::{
    compute_blocking, generate_map, sample_agents, Action, Coord, Event, JointAction, WorldState,
    N_ACTIONS, REWARD_COLLISION,
};

/// Loss term weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficients {
    pub policy: f64,
    pub entropy: f64,
    pub valid: f64,
    pub block: f64,
    pub value_ext: f64,
    pub value_int: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            policy: 10.0,
            entropy: 0.01,
            valid: 0.5,
            block: 0.5,
            value_ext: 0.08,
            value_int: 0.08,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Environment steps to train for (a step is one joint action).
    pub total_env_steps: u64,
    /// Episodes collected per iteration before each update phase.
    pub episodes_per_iter: usize,
    pub epochs: usize,
    /// Minibatch size in agent-step samples.
    pub minibatch: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub coefficients: Coefficients,
    /// Probability that an episode is driven by the expert planner.
    pub imitation_ratio: f64,
    pub n_agents: usize,
    pub world_sizes: Vec<usize>,
    /// Obstacle density is drawn from a triangular distribution on
    /// [0, density_max] peaking at density_peak.
    pub density_max: f64,
    pub density_peak: f64,
    pub episode_limit: usize,
    pub net: NetConfig,
    pub tiebreak: TieBreakConfig,
    pub explore: ExploreConfig,
    /// Checkpoint every this many iterations; 0 saves only initial + final.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1234,
            total_env_steps: 3_000_000,
            episodes_per_iter: 16,
            epochs: 10,
            minibatch: 1024,
            gamma: 0.95,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 1e-5,
            grad_clip_norm: 10.0,
            coefficients: Coefficients::default(),
            imitation_ratio: 0.10,
            n_agents: 8,
            world_sizes: vec![10, 25, 40],
            density_max: 0.5,
            density_peak: 0.33,
            episode_limit: 256,
            net: NetConfig::default(),
            tiebreak: TieBreakConfig::default(),
            explore: ExploreConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration: 4 agents, empty 10x10 world, small network.
    pub fn desk_scale() -> TrainConfig {
        TrainConfig {
            n_agents: 4,
            world_sizes: vec![10],
            density_max: 0.0,
            density_peak: 0.0,
            net: NetConfig::small(64),
            ..TrainConfig::default()
        }
    }

    pub fn to_toml_string(&self) -> Result<String, TrainError> {
        toml::to_string_pretty(self).map_err(|e| TrainError::BadConfig {
            reason: e.to_string(),
        })
    }

    pub fn from_toml_str(s: &str) -> Result<TrainConfig, TrainError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| TrainError::BadConfig {
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: &str| {
            Err(TrainError::BadConfig {
                reason: reason.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.imitation_ratio) {
            return bad("imitation_ratio must be in [0, 1]");
        }
        if self.n_agents == 0 || self.world_sizes.is_empty() {
            return bad("need at least one agent and one world size");
        }
        if self.episode_limit == 0 || self.minibatch == 0 || self.epochs == 0 {
            return bad("episode_limit, minibatch, and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.density_max) || self.density_peak > self.density_max {
            return bad("densities must satisfy 0 <= peak <= max < 1");
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one agent's episode slice.
/// `dones[t]` marks transitions into terminal states (no bootstrapping
/// across them); `bootstrap` is the value estimate of the state after the
/// last step, used only when the tail is non-terminal. Returns
/// (advantages, returns) with returns[t] = advantages[t] + values[t].
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_max = rewards.len();
    assert_eq!(values.len(), t_max, "values length");
    assert_eq!(dones.len(), t_max, "dones length");
    let mut adv = vec![0.0; t_max];
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        let next_v = if dones[t] {
            0.0
        } else if t + 1 < t_max {
            values[t + 1]
        } else {
            bootstrap
        };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + if dones[t] { 0.0 } else { gamma * lambda * acc };
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Which actions are legal right now: moves into obstacles or off the map
/// are invalid, and so is directly returning to the previous cell. Staying
/// is always valid.
pub fn valid_actions(state: &WorldState, agent: usize, prev_pos: Option<Coord>) -> Vec<bool> {
    let pos = state.positions[agent];
    (0..N_ACTIONS)
        .map(|ai| {
            let a = Action::from_index(ai).unwrap();
            if a == Action::Stay {
                return true;
            }
            let t = pos.shifted(a);
            if !state.grid.is_free(t) {
                return false;
            }
            if let Some(p) = prev_pos {
                if t == p && p != pos {
                    return false;
                }
            }
            true
        })
        .collect()
}

/// All recorded data of one team step.
#[derive(Debug, Clone)]
pub struct TeamStep {
    pub obs: Vec<Observation>,
    pub carries_in: Vec<AgentCarry>,
    pub positions: Vec<Coord>,
    pub actions: Vec<usize>,
    /// Probability of the executed action under the masked policy at
    /// collection time; 1.0 placeholder in imitation episodes.
    pub old_probs: Vec<f64>,
    /// true = valid, used both as sampling mask and as BCE label.
    pub valid: Vec<Vec<bool>>,
    pub blocking_labels: Vec<f64>,
    pub reward_ext: Vec<f64>,
    pub reward_int: Vec<f64>,
    pub value_ext: Vec<f64>,
    pub value_int: Vec<f64>,
    pub expert_actions: Option<Vec<usize>>,
    // Filled by the batch builder before optimization.
    pub advantages: Vec<f64>,
    pub returns_ext: Vec<f64>,
    pub returns_int: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub steps: Vec<TeamStep>,
    pub bootstrap_ext: Vec<f64>,
    pub bootstrap_int: Vec<f64>,
    pub solved: bool,
    pub collisions: usize,
    pub imitation: bool,
    /// Expert planning failed; the episode carries no data.
    pub skipped: bool,
}

impl EpisodeData {
    pub fn env_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn mean_reward(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in &self.steps {
            for (re, ri) in s.reward_ext.iter().zip(&s.reward_int) {
                sum += re + ri;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Adapter giving the tie-break resolver value estimates: agents at their
/// current cell reuse the step's forward pass; hypothetically moved agents
/// get their observation rebuilt and re-encoded (messages from the previous
/// step are reused). Results are cached per (agent, cell).
pub struct NetValueAccess<'a> {
    pub net: &'a PolicyNet,
    pub state: &'a WorldState,
    pub team_out: &'a TeamOutput,
    pub carries_in: &'a [AgentCarry],
    pub prevs: &'a [PrevStep],
    pub fields: &'a [DistanceField],
    pub obs_params: ObsParams,
    pub valid: &'a [Vec<bool>],
    cache: RefCell<HashMap<(usize, Coord), f64>>,
}

impl<'a> NetValueAccess<'a> {
    pub fn new(
        net: &'a PolicyNet,
        state: &'a WorldState,
        team_out: &'a TeamOutput,
        carries_in: &'a [AgentCarry],
        prevs: &'a [PrevStep],
        fields: &'a [DistanceField],
        obs_params: ObsParams,
        valid: &'a [Vec<bool>],
    ) -> Self {
        NetValueAccess {
            net,
            state,
            team_out,
            carries_in,
            prevs,
            fields,
            obs_params,
            valid,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn summed_value(&self, agent: usize, pos: Coord) -> f64 {
        if pos == self.state.positions[agent] {
            let o = &self.team_out.outputs[agent];
            return o.value_ext + o.value_int;
        }
        if let Some(&v) = self.cache.borrow().get(&(agent, pos)) {
            return v;
        }
        let mut hypo = self.state.clone();
        hypo.positions[agent] = pos;
        let obs = build_observation(&hypo, agent, self.obs_params, self.prevs[agent], &self.fields[agent]);
        let (lstm_in, h, _c) = self.net.encode_single(&obs, &self.carries_in[agent]);
        let (ve, vi) = self.net.head_values(&lstm_in, &h, &self.team_out.fused[agent]);
        self.cache.borrow_mut().insert((agent, pos), ve + vi);
        ve + vi
    }
}

impl PolicyAccess for NetValueAccess<'_> {
    fn current_values(&self) -> Vec<f64> {
        self.team_out
            .outputs
            .iter()
            .map(|o| o.value_ext + o.value_int)
            .collect()
    }

    fn hypothetical_values(&self, positions: &[Coord]) -> Vec<f64> {
        positions
            .iter()
            .enumerate()
            .map(|(i, &p)| self.summed_value(i, p))
            .collect()
    }

    /// Logits with invalid actions pushed to effectively zero probability,
    /// so tie-break re-samples stay within the valid set.
    fn logits(&self, agent: usize) -> Vec<f64> {
        self.team_out.outputs[agent]
            .policy_logits
            .iter()
            .enumerate()
            .map(|(ai, &l)| if self.valid[agent][ai] { l } else { -1e9 })
            .collect()
    }
}

/// Samples an obstacle density from the triangular distribution on
/// [0, max] with the given peak.
pub fn sample_density<R: Rng>(rng: &mut R, max: f64, peak: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let u: f64 = rng.gen();
    let fc = peak / max;
    if u < fc {
        (u * max * peak).sqrt()
    } else {
        max - ((1.0 - u) * max * (max - peak)).sqrt()
    }
}

/// Rolls one episode. Expert-driven episodes whose plan fails are returned
/// with `skipped = true` and contribute nothing.
pub fn collect_episode(
    net: &PolicyNet,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    global_step: u64,
    expert_calls: &mut u64,
) -> Result<EpisodeData, TrainError> {
    let n = config.n_agents;
    let obs_params = ObsParams::new(config.net.fov);

    // Instance sampling with retries: map generation or agent placement can
    // fail on unlucky densities.
    let (grid, starts, goals) = {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let size = config.world_sizes[rng.gen_range(0..config.world_sizes.len())];
            let density = sample_density(rng, config.density_max, config.density_peak);
            let Ok(grid) = generate_map(size, density, rng) else {
                if attempt > 100 {
                    return Err(TrainError::BadConfig {
                        reason: "could not sample a training instance".into(),
                    });
                }
                continue;
            };
            let grid = std::sync::Arc::new(grid);
            match sample_agents(&grid, n, rng) {
                Ok((starts, goals)) => break (grid, starts, goals),
                Err(_) if attempt <= 100 => continue,
                Err(e) => return Err(e.into()),
            }
        }
    };

    let imitation = config.imitation_ratio > 0.0 && rng.gen::<f64>() < config.imitation_ratio;
    let plan = if imitation {
        *expert_calls += 1;
        match prioritized_plan(&grid, &starts, &goals, rng) {
            Some(p) => Some(p),
            None => {
                return Ok(EpisodeData {
                    steps: Vec::new(),
                    bootstrap_ext: vec![0.0; n],
                    bootstrap_int: vec![0.0; n],
                    solved: false,
                    collisions: 0,
                    imitation: true,
                    skipped: true,
                })
            }
        }
    } else {
        None
    };

    let mut state = WorldState::new(grid.clone(), starts, goals)?;
    let fields: Vec<DistanceField> = state
        .goals
        .iter()
        .map(|&g| DistanceField::compute(&grid, g))
        .collect();
    let mut carries: Vec<AgentCarry> = vec![AgentCarry::zeros(config.net.d_model); n];
    let mut buffers: Vec<EpisodicBuffer> = (0..n)
        .map(|_| EpisodicBuffer::start_episode(&config.explore, rng))
        .collect();
    let mut prevs: Vec<PrevStep> = vec![PrevStep::default(); n];
    let mut prev_positions: Vec<Option<Coord>> = vec![None; n];

    let mut steps: Vec<TeamStep> = Vec::new();
    let mut collisions = 0usize;
    let mut solved = false;

    for step_idx in 0..config.episode_limit {
        let obs: Vec<Observation> = (0..n)
            .map(|i| build_observation(&state, i, obs_params, prevs[i], &fields[i]))
            .collect();
        let team_out = net.forward_team(&obs, &carries, &state.positions);
        let valid: Vec<Vec<bool>> = (0..n)
            .map(|i| valid_actions(&state, i, prev_positions[i]))
            .collect();
        let blocking_labels: Vec<f64> = (0..n)
            .map(|i| if compute_blocking(&state, i) { 1.0 } else { 0.0 })
            .collect();

        let (final_actions, old_probs, stopped, expert_actions) = if let Some(plan) = &plan {
            let acts: Vec<Action> = (0..n)
                .map(|i| {
                    if step_idx < plan.makespan {
                        plan.actions[i][step_idx]
                    } else {
                        Action::Stay
                    }
                })
                .collect();
            let ea: Vec<usize> = acts.iter().map(|a| a.index()).collect();
            (acts, vec![1.0; n], Vec::new(), Some(ea))
        } else {
            let mut proposals = Vec::with_capacity(n);
            for i in 0..n {
                let forbidden: Vec<bool> = valid[i].iter().map(|&v| !v).collect();
                let (a, _, _) = act(&team_out.outputs[i].policy_logits, &forbidden, rng);
                proposals.push(a);
            }
            let access = NetValueAccess::new(
                net,
                &state,
                &team_out,
                &carries,
                &prevs,
                &fields,
                obs_params,
                &valid,
            );
            let outcome = resolve(
                &grid,
                &state.positions,
                &state.goals,
                &proposals,
                &access,
                &config.tiebreak,
                rng,
            );
            // Probability of the executed action under the masked policy.
            let probs: Vec<f64> = (0..n)
                .map(|i| {
                    let forbidden: Vec<bool> = valid[i].iter().map(|&v| !v).collect();
                    let p = crate::policy::masked_softmax(
                        &team_out.outputs[i].policy_logits,
                        &forbidden,
                    );
                    p[outcome.actions[i].index()].max(1e-12)
                })
                .collect();
            (outcome.actions, probs, outcome.stopped, None)
        };

        let (next_state, step_outcome) = state.joint_step(&JointAction(final_actions.clone()))?;
        let mut reward_ext = step_outcome.rewards.clone();
        for &s in &stopped {
            reward_ext[s] = REWARD_COLLISION;
        }
        collisions += stopped.len();
        for events in &step_outcome.events {
            collisions += events
                .iter()
                .filter(|&&e| e == Event::ObstacleCollision || e == Event::AgentCollision)
                .count();
        }

        // Intrinsic rewards at the new positions; buffers update regardless
        // of the warmup gate, only the injected reward is withheld.
        let warm = config.explore.warmup_passed(global_step + steps.len() as u64);
        let mut reward_int = vec![0.0; n];
        let mut dmins = vec![0.0; n];
        for i in 0..n {
            let pos = next_state.positions[i];
            let novelty = buffers[i].intrinsic_reward(&config.explore, pos, next_state.on_goal[i]);
            if warm {
                reward_int[i] = novelty.reward;
            }
            dmins[i] = novelty.dmin;
            buffers[i].maybe_insert(&config.explore, pos, novelty.dist, rng);
        }

        steps.push(TeamStep {
            obs,
            carries_in: carries.clone(),
            positions: state.positions.clone(),
            actions: final_actions.iter().map(|a| a.index()).collect(),
            old_probs,
            valid,
            blocking_labels,
            reward_ext: reward_ext.clone(),
            reward_int: reward_int.clone(),
            value_ext: team_out.outputs.iter().map(|o| o.value_ext).collect(),
            value_int: team_out.outputs.iter().map(|o| o.value_int).collect(),
            expert_actions,
            advantages: vec![0.0; n],
            returns_ext: vec![0.0; n],
            returns_int: vec![0.0; n],
        });

        for i in 0..n {
            prev_positions[i] = Some(state.positions[i]);
            prevs[i] = PrevStep {
                reward_ext: reward_ext[i],
                reward_int: reward_int[i],
                dmin: dmins[i],
                action: final_actions[i],
            };
        }
        carries = team_out.carries;
        state = next_state;
        if state.all_on_goal() {
            solved = true;
            break;
        }
    }

    // Bootstrap values for truncated episodes.
    let (bootstrap_ext, bootstrap_int) = if solved {
        (vec![0.0; n], vec![0.0; n])
    } else {
        let obs: Vec<Observation> = (0..n)
            .map(|i| build_observation(&state, i, obs_params, prevs[i], &fields[i]))
            .collect();
        let out = net.forward_team(&obs, &carries, &state.positions);
        (
            out.outputs.iter().map(|o| o.value_ext).collect(),
            out.outputs.iter().map(|o| o.value_int).collect(),
        )
    };

    Ok(EpisodeData {
        steps,
        bootstrap_ext,
        bootstrap_int,
        solved,
        collisions,
        imitation,
        skipped: false,
    })
}

/// Fills advantages and per-head returns in place, then normalizes the
/// advantages across the whole batch.
pub fn fill_advantages(episodes: &mut [EpisodeData], gamma: f64, lambda: f64) {
    let mut all_adv: Vec<f64> = Vec::new();
    for ep in episodes.iter_mut() {
        let t_max = ep.steps.len();
        if t_max == 0 {
            continue;
        }
        let n = ep.steps[0].reward_ext.len();
        for i in 0..n {
            let re: Vec<f64> = ep.steps.iter().map(|s| s.reward_ext[i]).collect();
            let ri: Vec<f64> = ep.steps.iter().map(|s| s.reward_int[i]).collect();
            let ve: Vec<f64> = ep.steps.iter().map(|s| s.value_ext[i]).collect();
            let vi: Vec<f64> = ep.steps.iter().map(|s| s.value_int[i]).collect();
            let combined_r: Vec<f64> = re.iter().zip(&ri).map(|(a, b)| a + b).collect();
            let combined_v: Vec<f64> = ve.iter().zip(&vi).map(|(a, b)| a + b).collect();
            let mut dones = vec![false; t_max];
            dones[t_max - 1] = ep.solved;
            let (adv, _) = compute_gae(
                &combined_r,
                &combined_v,
                &dones,
                ep.bootstrap_ext[i] + ep.bootstrap_int[i],
                gamma,
                lambda,
            );
            let (_, ret_e) = compute_gae(&re, &ve, &dones, ep.bootstrap_ext[i], gamma, lambda);
            let (_, ret_i) = compute_gae(&ri, &vi, &dones, ep.bootstrap_int[i], gamma, lambda);
            for t in 0..t_max {
                ep.steps[t].advantages[i] = adv[t];
                ep.steps[t].returns_ext[i] = ret_e[t];
                ep.steps[t].returns_int[i] = ret_i[t];
                all_adv.push(adv[t]);
            }
        }
    }
    if all_adv.len() < 2 {
        return;
    }
    let mean = all_adv.iter().sum::<f64>() / all_adv.len() as f64;
    let var = all_adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all_adv.len() as f64;
    let std = var.sqrt().max(1e-8);
    for ep in episodes.iter_mut() {
        for s in &mut ep.steps {
            for a in &mut s.advantages {
                *a = (*a - mean) / std;
            }
        }
    }
}

/// Per-minibatch loss diagnostics (already averaged per agent-step).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub policy: f64,
    pub value_ext: f64,
    pub value_int: f64,
    pub entropy: f64,
    pub valid: f64,
    pub block: f64,
}

impl LossParts {
    fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.policy += other.policy * w;
        self.value_ext += other.value_ext * w;
        self.value_int += other.value_int * w;
        self.entropy += other.entropy * w;
        self.valid += other.valid * w;
        self.block += other.block * w;
    }
}

/// Clipped PPO surrogate: min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv),
/// summed over all rows.
pub fn clipped_objective(g: &mut Graph, ratio: Id, adv: Id, eps: f64) -> Id {
    let surr1 = g.tape.mul(ratio, adv);
    let clipped = g.tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let surr2 = g.tape.mul(clipped, adv);
    let m = g.tape.min_elem(surr1, surr2);
    g.tape.sum_all(m)
}

/// Builds the loss for one team step on the given graph. `scale` converts
/// per-step sums into the minibatch mean (1 / total agent samples).
/// Returns the scalar loss node plus diagnostics (already scaled).
pub fn step_loss(
    net: &PolicyNet,
    g: &mut Graph,
    ts: &TeamStep,
    config: &TrainConfig,
    scale: f64,
) -> (Id, LossParts) {
    let n = ts.obs.len();
    let dm = config.net.d_model;
    let coef = &config.coefficients;

    let (maps_t, scalars_t) = net.pack_observations(&ts.obs);
    let mut h = Vec::with_capacity(n * dm);
    let mut c = Vec::with_capacity(n * dm);
    let mut msg = Vec::with_capacity(n * dm);
    for carry in &ts.carries_in {
        h.extend_from_slice(&carry.hidden);
        c.extend_from_slice(&carry.cell);
        msg.extend_from_slice(&carry.message);
    }
    let maps = g.input(maps_t);
    let scalars = g.input(scalars_t);
    let hid = g.input(Tensor::new(vec![n, dm], h));
    let cell = g.input(Tensor::new(vec![n, dm], c));
    let msgs = g.input(Tensor::new(vec![n, dm], msg));
    let ids = net.forward_graph(g, maps, scalars, hid, cell, msgs, &ts.positions);

    let valid_mask: Vec<bool> = ts.valid.iter().flatten().copied().collect();
    let probs_masked = g.tape.softmax(ids.logits, Some(&valid_mask));
    let probs_unmasked = ids.probs;

    let mut terms: Vec<(Id, f64)> = Vec::new();
    let mut parts = LossParts::default();

    if let Some(expert) = &ts.expert_actions {
        // Imitation: cross-entropy against the expert action under the
        // unmasked policy (expert moves may violate the validity mask).
        let p_exp = g.tape.gather_cols(probs_unmasked, expert);
        let p_safe = g.tape.add_scalar(p_exp, 1e-12);
        let logp = g.tape.log(p_safe);
        let ce = g.tape.sum_all(logp);
        terms.push((ce, -coef.policy * scale));
        parts.policy = -g.value(ce).item() * scale;
    } else {
        let p_taken = g.tape.gather_cols(probs_masked, &ts.actions);
        let inv_old = g.input(Tensor::new(
            vec![n, 1],
            ts.old_probs.iter().map(|&p| 1.0 / p).collect(),
        ));
        let ratio = g.tape.mul(p_taken, inv_old);
        let adv = g.input(Tensor::new(vec![n, 1], ts.advantages.clone()));
        let surrogate = clipped_objective(g, ratio, adv, config.clip_eps);
        terms.push((surrogate, -coef.policy * scale));
        parts.policy = g.value(surrogate).item() * scale;
    }

    // Entropy bonus of the masked policy (the distribution actions are
    // drawn from). Masked probabilities are exactly 0 and contribute 0.
    let p_safe = g.tape.add_scalar(probs_masked, 1e-12);
    let logp = g.tape.log(p_safe);
    let plogp = g.tape.mul(probs_masked, logp);
    let neg_entropy = g.tape.sum_all(plogp);
    terms.push((neg_entropy, coef.entropy * scale));
    parts.entropy = -g.value(neg_entropy).item() * scale;

    // Value heads against their per-stream returns.
    let ret_e = g.input(Tensor::new(vec![n, 1], ts.returns_ext.clone()));
    let err_e = g.tape.sub(ids.value_ext, ret_e);
    let sq_e = g.tape.mul(err_e, err_e);
    let mse_e = g.tape.sum_all(sq_e);
    terms.push((mse_e, coef.value_ext * scale));
    parts.value_ext = g.value(mse_e).item() * scale;

    let ret_i = g.input(Tensor::new(vec![n, 1], ts.returns_int.clone()));
    let err_i = g.tape.sub(ids.value_int, ret_i);
    let sq_i = g.tape.mul(err_i, err_i);
    let mse_i = g.tape.sum_all(sq_i);
    terms.push((mse_i, coef.value_int * scale));
    parts.value_int = g.value(mse_i).item() * scale;

    // Valid-action BCE on the unmasked policy: valid actions should carry
    // the probability mass, invalid ones none.
    let labels = g.input(Tensor::new(
        vec![n, N_ACTIONS],
        valid_mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    ));
    let bce_valid = bce_sum(g, probs_unmasked, labels);
    terms.push((bce_valid, coef.valid * scale));
    parts.valid = g.value(bce_valid).item() * scale;

    // Blocking head BCE.
    let block_prob = g.tape.sigmoid(ids.blocking_logit);
    let block_labels = g.input(Tensor::new(vec![n, 1], ts.blocking_labels.clone()));
    let bce_block = bce_sum(g, block_prob, block_labels);
    terms.push((bce_block, coef.block * scale));
    parts.block = g.value(bce_block).item() * scale;

    // Combine: sum of weighted terms.
    let mut total = None;
    for (id, w) in terms {
        let scaled = g.tape.mul_scalar(id, w);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.tape.add(acc, scaled),
        });
    }
    (total.unwrap(), parts)
}

/// Binary cross-entropy summed over all elements: predictions in (0, 1),
/// labels in {0, 1}.
fn bce_sum(g: &mut Graph, pred: Id, labels: Id) -> Id {
    let p_safe = g.tape.add_scalar(pred, 1e-12);
    let log_p = g.tape.log(p_safe);
    let neg_p = g.tape.mul_scalar(pred, -1.0);
    let one_minus_p = g.tape.add_scalar(neg_p, 1.0 + 1e-12);
    let log_1mp = g.tape.log(one_minus_p);
    let neg_y = g.tape.mul_scalar(labels, -1.0);
    let one_minus_y = g.tape.add_scalar(neg_y, 1.0);
    let t1 = g.tape.mul(labels, log_p);
    let t2 = g.tape.mul(one_minus_y, log_1mp);
    let s = g.tape.add(t1, t2);
    let total = g.tape.sum_all(s);
    g.tape.mul_scalar(total, -1.0)
}

/// One optimization pass: `epochs` sweeps of shuffled minibatches.
/// Returns averaged loss diagnostics. Aborts on non-finite loss.
pub fn update(
    net: &mut PolicyNet,
    episodes: &[EpisodeData],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts, TrainError> {
    let steps: Vec<&TeamStep> = episodes.iter().flat_map(|e| e.steps.iter()).collect();
    if steps.is_empty() {
        return Ok(LossParts::default());
    }
    let n = config.n_agents;
    let steps_per_minibatch = (config.minibatch / n).max(1);
    let adam = AdamConfig {
        lr: config.lr,
        clip_norm: config.grad_clip_norm,
        ..AdamConfig::default()
    };

    let mut diag = LossParts::default();
    let mut n_minibatches = 0usize;
    let mut order: Vec<usize> = (0..steps.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(steps_per_minibatch) {
            let samples = (chunk.len() * n) as f64;
            let scale = 1.0 / samples;
            let mut grad_store = net.store.clone();
            grad_store.zero_grads();
            let mut mb_parts = LossParts::default();
            for &si in chunk {
                let mut g = Graph::new(&net.store);
                let (loss, parts) = step_loss(net, &mut g, steps[si], config, scale);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::Numerics(NumericsError::NonFinite {
                        context: format!("training loss (parts {parts:?})"),
                    }));
                }
                g.backward_into(loss, &mut grad_store);
                mb_parts.add_scaled(&parts, 1.0);
            }
            let names: Vec<String> = grad_store.names().map(String::from).collect();
            for name in &names {
                let grad = grad_store.grad(name).clone();
                net.store.accumulate_grad(name, &grad);
            }
            net.store.adam_step(&adam);
            diag.add_scaled(&mb_parts, 1.0);
            n_minibatches += 1;
        }
    }
    if n_minibatches > 0 {
        let w = 1.0 / n_minibatches as f64;
        let d = diag;
        diag = LossParts::default();
        diag.add_scaled(&d, w);
    }
    Ok(diag)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub csv: String,
    pub env_steps: u64,
    pub iterations: usize,
    pub expert_calls: u64,
}

pub const METRICS_HEADER: &str =
    "iteration,env_steps,mean_reward,success_rate,mean_episode_length,loss_policy,loss_value_ext,loss_value_int,entropy,loss_valid,loss_block";

/// Synchronous training loop: collect episodes, fill advantages, run PPO
/// epochs, log one CSV row per iteration, checkpoint at the configured
/// cadence. Deterministic for a fixed config.
pub fn train_loop(config: &TrainConfig, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let meta = serde_json::to_string(&config.net).map_err(|e| TrainError::BadConfig {
        reason: e.to_string(),
    })?;

    let mut net = PolicyNet::new(config.net.clone(), config.seed);
    checkpoint::save(&out_dir.join("checkpoint_init.ckpt"), &net.store, &meta)
        .map_err(TrainError::Numerics)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut env_steps: u64 = 0;
    let mut expert_calls: u64 = 0;
    let mut iteration = 0usize;

    while env_steps < config.total_env_steps {
        iteration += 1;
        let mut episodes = Vec::with_capacity(config.episodes_per_iter);
        for _ in 0..config.episodes_per_iter {
            let ep = collect_episode(&net, config, &mut rng, env_steps, &mut expert_calls)?;
            env_steps += ep.env_steps() as u64;
            if !ep.skipped {
                episodes.push(ep);
            }
        }
        fill_advantages(&mut episodes, config.gamma, config.gae_lambda);

        let solved = episodes.iter().filter(|e| e.solved).count();
        let sr = if episodes.is_empty() {
            0.0
        } else {
            solved as f64 / episodes.len() as f64
        };
        let solved_lengths: Vec<usize> = episodes
            .iter()
            .filter(|e| e.solved)
            .map(|e| e.env_steps())
            .collect();
        let mean_el = if solved_lengths.is_empty() {
            config.episode_limit as f64
        } else {
            solved_lengths.iter().sum::<usize>() as f64 / solved_lengths.len() as f64
        };
        let total_reward: f64 = episodes.iter().map(|e| e.mean_reward()).sum();
        let mean_reward = if episodes.is_empty() {
            0.0
        } else {
            total_reward / episodes.len() as f64
        };

        let diag = update(&mut net, &episodes, config, &mut rng)?;
        let _ = writeln!(
            csv,
            "{iteration},{env_steps},{mean_reward},{sr},{mean_el},{},{},{},{},{},{}",
            diag.policy, diag.value_ext, diag.value_int, diag.entropy, diag.valid, diag.block
        );

        if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 {
            checkpoint::save(
                &out_dir.join(format!("checkpoint_iter{iteration}.ckpt")),
                &net.store,
                &meta,
            )
            .map_err(TrainError::Numerics)?;
        }
    }

    checkpoint::save(&out_dir.join("checkpoint_final.ckpt"), &net.store, &meta)
        .map_err(TrainError::Numerics)?;
    std::fs::write(out_dir.join("metrics.csv"), &csv)?;
    Ok(TrainSummary {
        csv,
        env_steps,
        iterations: iteration,
        expert_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore};
    use crate::policy::CommMode;
    use crate::world::Grid;
    use std::sync::Arc;

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            seed: 7,
            total_env_steps: 60,
            episodes_per_iter: 2,
            epochs: 1,
            minibatch: 8,
            n_agents: 2,
            world_sizes: vec![6],
            density_max: 0.1,
            density_peak: 0.05,
            episode_limit: 16,
            imitation_ratio: 0.0,
            net: NetConfig {
                fov: 3,
                d_model: 8,
                n_heads: 2,
                d_k: 4,
                ffn_dim: 16,
                n_blocks: 1,
                n_actions: N_ACTIONS,
                conv_channels: [2, 3, 4],
                scalar_dim: 3,
                comm_mode: CommMode::Global,
                positional_embedding: true,
                gru_bias_init: 2.0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gae_single_terminal_step() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 99.0, 0.95, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn gae_constant_values_closed_form() {
        // Zero rewards, constant value c, non-terminal with bootstrap c:
        // every delta is c(gamma - 1), so adv_t = c(gamma-1) * sum (gamma
        // lambda)^k over the remaining steps.
        let (gamma, lambda, c, t_max) = (0.95, 0.9, 2.0, 6);
        let (adv, _) = compute_gae(
            &vec![0.0; t_max],
            &vec![c; t_max],
            &vec![false; t_max],
            c,
            gamma,
            lambda,
        );
        for t in 0..t_max {
            let mut expect = 0.0;
            for k in 0..(t_max - t) {
                expect += (gamma * lambda).powi(k as i32) * c * (gamma - 1.0);
            }
            assert!((adv[t] - expect).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn gae_matches_bruteforce_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_max = 20;
        let rewards: Vec<f64> = (0..t_max).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let values: Vec<f64> = (0..t_max).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let bootstrap = rng.gen::<f64>();
        let dones = vec![false; t_max];
        let (gamma, lambda) = (0.95, 0.95);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda);
        // Direct double sum.
        for t in 0..t_max {
            let mut expect = 0.0;
            for k in 0..(t_max - t) {
                let u = t + k;
                let next_v = if u + 1 < t_max { values[u + 1] } else { bootstrap };
                let delta = rewards[u] + gamma * next_v - values[u];
                expect += (gamma * lambda).powi(k as i32) * delta;
            }
            assert!((adv[t] - expect).abs() < 1e-10, "t={t}");
            assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_stops_at_terminal() {
        // Terminal in the middle: advantages before it must ignore later
        // steps entirely.
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, 0.5, 0.5];
        let dones = [false, true, false];
        let (adv, _) = compute_gae(&rewards, &values, &dones, 9.0, 0.9, 0.9);
        // Step 1 is terminal: delta = 2 - 0.5.
        assert!((adv[1] - 1.5).abs() < 1e-12);
        // Step 0 bootstraps from step 1 only.
        let delta0 = 1.0 + 0.9 * 0.5 - 0.5;
        assert!((adv[0] - (delta0 + 0.9 * 0.9 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn valid_action_labels() {
        // Obstacle to the right, agent came from above.
        let mut cells = vec![false; 25];
        cells[2 * 5 + 3] = true; // (2,3)
        let grid = Arc::new(Grid::new(5, cells).unwrap());
        let state = WorldState::new(
            grid,
            vec![Coord::new(2, 2)],
            vec![Coord::new(4, 4)],
        )
        .unwrap();
        let prev = Some(Coord::new(1, 2));
        let valid = valid_actions(&state, 0, prev);
        assert!(!valid[Action::Right.index()], "obstacle move must be invalid");
        assert!(!valid[Action::Up.index()], "returning to previous cell must be invalid");
        assert!(valid[Action::Down.index()]);
        assert!(valid[Action::Left.index()]);
        assert!(valid[Action::Stay.index()]);
    }

    #[test]
    fn valid_actions_at_border() {
        let grid = Arc::new(Grid::new(4, vec![false; 16]).unwrap());
        let state = WorldState::new(grid, vec![Coord::new(0, 0)], vec![Coord::new(3, 3)]).unwrap();
        let valid = valid_actions(&state, 0, None);
        assert!(!valid[Action::Up.index()]);
        assert!(!valid[Action::Left.index()]);
        assert!(valid[Action::Down.index()]);
        assert!(valid[Action::Right.index()]);
    }

    #[test]
    fn clipped_surrogate_arithmetic() {
        // ratio 1.5, adv 2, eps 0.2: min(3.0, 1.2*2) = 2.4.
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ratio = g.input(Tensor::new(vec![1, 1], vec![1.5]));
        let adv = g.input(Tensor::new(vec![1, 1], vec![2.0]));
        let s = clipped_objective(&mut g, ratio, adv, 0.2);
        assert!((g.value(s).item() - 2.4).abs() < 1e-12);
        // Negative advantage: clip to the other side, min(-3, -1.2*... )
        let mut g2 = Graph::new(&store);
        let ratio = g2.input(Tensor::new(vec![1, 1], vec![0.5]));
        let adv = g2.input(Tensor::new(vec![1, 1], vec![-2.0]));
        let s = clipped_objective(&mut g2, ratio, adv, 0.2);
        // min(0.5 * -2, 0.8 * -2) = min(-1.0, -1.6) = -1.6.
        assert!((g2.value(s).item() + 1.6).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_entropy_is_ln5() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::new(vec![1, 5], vec![0.3; 5]));
        let p = g.tape.softmax(logits, None);
        let p_safe = g.tape.add_scalar(p, 1e-12);
        let lp = g.tape.log(p_safe);
        let plp = g.tape.mul(p, lp);
        let neg_ent = g.tape.sum_all(plp);
        let entropy = -g.value(neg_ent).item();
        assert!((entropy - 5f64.ln()).abs() < 1e-9, "entropy {entropy}");
    }

    /// Builds a real rollout and returns (net, config, steps) for loss tests.
    fn fixture_batch() -> (PolicyNet, TrainConfig, Vec<EpisodeData>) {
        let config = tiny_train_config();
        let net = PolicyNet::new(config.net.clone(), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut expert_calls = 0;
        let mut episodes = Vec::new();
        while episodes.iter().map(|e: &EpisodeData| e.env_steps()).sum::<usize>() < 2 {
            let ep = collect_episode(&net, &config, &mut rng, 0, &mut expert_calls).unwrap();
            if ep.env_steps() > 0 {
                episodes.push(ep);
            }
        }
        fill_advantages(&mut episodes, config.gamma, config.gae_lambda);
        (net, config, episodes)
    }

    #[test]
    fn ppo_ratio_one_gives_mean_advantage() {
        let (net, config, episodes) = fixture_batch();
        let ts = &episodes[0].steps[0];
        let n = ts.obs.len() as f64;
        let mut g = Graph::new(&net.store);
        let (_, parts) = step_loss(&net, &mut g, ts, &config, 1.0 / n);
        // Same parameters as collection: ratio = 1 everywhere, so the
        // surrogate equals the mean advantage.
        let mean_adv: f64 = ts.advantages.iter().sum::<f64>() / n;
        assert!(
            (parts.policy - mean_adv).abs() < 1e-9,
            "policy part {} vs mean advantage {mean_adv}",
            parts.policy
        );
    }

    #[test]
    fn full_loss_grad_check_two_steps() {
        let (mut net, config, episodes) = fixture_batch();
        // Jitter parameters off ReLU kinks (binary inputs + zero biases sit
        // exactly on them, where finite differences legitimately disagree).
        let mut jrng = ChaCha8Rng::seed_from_u64(77);
        let names: Vec<String> = net.store.names().map(String::from).collect();
        for name in &names {
            for v in net.store.get_mut(name).data_mut() {
                *v += 0.08 * (jrng.gen::<f64>() - 0.5);
            }
        }
        let steps: Vec<&TeamStep> = episodes.iter().flat_map(|e| e.steps.iter()).take(2).collect();
        assert!(steps.len() == 2);
        let report = grad_check(
            &net.store,
            |g| {
                let mut total = None;
                for ts in &steps {
                    let (loss, _) = step_loss(&net, g, ts, &config, 0.25);
                    total = Some(match total {
                        None => loss,
                        Some(acc) => g.tape.add(acc, loss),
                    });
                }
                total.unwrap()
            },
            1e-5,
        );
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn cross_entropy_limits() {
        // One-hot on the expert action -> CE near 0; uniform -> ln 5.
        let store = ParamStore::new();
        let ce = |logits: Vec<f64>, expert: usize| -> f64 {
            let mut g = Graph::new(&store);
            let l = g.input(Tensor::new(vec![1, 5], logits));
            let p = g.tape.softmax(l, None);
            let p_exp = g.tape.gather_cols(p, &[expert]);
            let p_safe = g.tape.add_scalar(p_exp, 1e-12);
            let lp = g.tape.log(p_safe);
            let s = g.tape.sum_all(lp);
            -g.value(s).item()
        };
        assert!(ce(vec![40.0, 0.0, 0.0, 0.0, 0.0], 0) < 1e-9);
        assert!((ce(vec![0.7; 5], 3) - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn no_expert_calls_without_imitation() {
        let config = tiny_train_config();
        let net = PolicyNet::new(config.net.clone(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut expert_calls = 0;
        for _ in 0..5 {
            let _ = collect_episode(&net, &config, &mut rng, 0, &mut expert_calls).unwrap();
        }
        assert_eq!(expert_calls, 0);
    }

    #[test]
    fn imitation_episodes_call_expert_and_store_actions() {
        let config = TrainConfig {
            imitation_ratio: 1.0,
            ..tiny_train_config()
        };
        let net = PolicyNet::new(config.net.clone(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut expert_calls = 0;
        let ep = collect_episode(&net, &config, &mut rng, 0, &mut expert_calls).unwrap();
        assert_eq!(expert_calls, 1);
        if !ep.skipped {
            assert!(ep.steps.iter().all(|s| s.expert_actions.is_some()));
        }
    }

    #[test]
    fn density_sampler_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = sample_density(&mut rng, 0.5, 0.33);
            assert!((0.0..0.5).contains(&d));
        }
        assert_eq!(sample_density(&mut rng, 0.0, 0.0), 0.0);
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let config = TrainConfig {
            total_env_steps: 0,
            ..tiny_train_config()
        };
        let dir = tempfile::tempdir().unwrap();
        train_loop(&config, dir.path()).unwrap();
        let (saved, _) = checkpoint::load(&dir.path().join("checkpoint_final.ckpt")).unwrap();
        let fresh = PolicyNet::new(config.net.clone(), config.seed);
        for (name, t) in fresh.store.iter() {
            assert_eq!(saved.get(name).data(), t.data(), "param {name} changed");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_train_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = train_loop(&config, d1.path()).unwrap();
        let s2 = train_loop(&config, d2.path()).unwrap();
        assert_eq!(s1.csv, s2.csv, "metrics CSV must be reproducible");
        assert_eq!(s1.env_steps, s2.env_steps);
        let c1 = std::fs::read(d1.path().join("checkpoint_final.ckpt")).unwrap();
        let c2 = std::fs::read(d2.path().join("checkpoint_final.ckpt")).unwrap();
        assert_eq!(c1, c2, "final checkpoints must be byte-identical");
    }

    #[test]
    fn config_toml_round_trip() {
        let config = TrainConfig::desk_scale();
        let s = config.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.n_agents, config.n_agents);
        assert_eq!(back.net.d_model, config.net.d_model);
        assert_eq!(back.coefficients.policy, config.coefficients.policy);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.imitation_ratio = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.world_sizes.clear();
        assert!(c.validate().is_err());
    }
}
