//! Evaluation metrics and suite runner. Reports per-episode episode length
//! (EL), maximum simultaneous on-goal agents (MR), obstacle-collision ratio
//! (CO) and a success flag (SR), plus mean/std aggregates. Failed episodes
//! keep their EL in the row but are excluded from the EL aggregate.

use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::explore::{EpisodicBuffer, ExploreConfig};
use crate::obs::{build_observation, DistanceField, ObsParams, PrevStep};
use crate::par::map_indexed;
use crate::policy::{act, act_greedy, AgentCarry, PolicyNet};
use crate::tiebreak::{resolve, TieBreakConfig};
use crate::train::{valid_actions, NetValueAccess};
use crate::world::{
    generate_map, sample_agents, Action, Coord, Event, JointAction, WorldState,
};

/// One evaluation scenario family: `episodes` random instances with
/// `n` agents on `m` x `m` maps at the given obstacle density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSuite {
    pub n_agents: usize,
    pub map_size: usize,
    pub density: f64,
    pub episodes: usize,
    pub seed: u64,
    pub episode_limit: usize,
    /// Greedy action selection instead of sampling.
    pub greedy: bool,
}

impl Default for EvalSuite {
    fn default() -> Self {
        EvalSuite {
            n_agents: 8,
            map_size: 10,
            density: 0.0,
            episodes: 100,
            seed: 0,
            episode_limit: 256,
            greedy: false,
        }
    }
}

/// Raw counts of one evaluated episode, before ratio formulas.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeTrace {
    pub episode_length: usize,
    pub n_agents: usize,
    /// Collisions with static obstacles and map boundaries.
    pub obstacle_collisions: usize,
    /// Largest number of agents simultaneously on their goals at any step.
    pub max_on_goal: usize,
    pub solved: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeRow {
    pub el: usize,
    pub mr: usize,
    /// Percent: obstacle collisions / (EL * n) * 100.
    pub co: f64,
    pub success: bool,
}

impl EpisodeRow {
    pub fn from_trace(t: &EpisodeTrace) -> EpisodeRow {
        let denom = (t.episode_length * t.n_agents) as f64;
        EpisodeRow {
            el: t.episode_length,
            mr: t.max_on_goal,
            co: if denom == 0.0 {
                0.0
            } else {
                t.obstacle_collisions as f64 / denom * 100.0
            },
            success: t.solved,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EpisodeRow>,
    /// Over successful episodes only.
    pub el: MeanStd,
    pub mr: MeanStd,
    pub co: MeanStd,
    /// Fraction of solved episodes in [0, 1].
    pub success_rate: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EpisodeRow>) -> EvalReport {
        let solved_el: Vec<f64> = rows
            .iter()
            .filter(|r| r.success)
            .map(|r| r.el as f64)
            .collect();
        let mr: Vec<f64> = rows.iter().map(|r| r.mr as f64).collect();
        let co: Vec<f64> = rows.iter().map(|r| r.co).collect();
        let sr = if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64
        };
        EvalReport {
            el: mean_std(&solved_el),
            mr: mean_std(&mr),
            co: mean_std(&co),
            success_rate: sr,
            rows,
        }
    }

    pub const CSV_HEADER: &'static str = "episode,el,mr,co_percent,success";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{}", r.el, r.mr, r.co, r.success as u8);
        }
        out
    }
}

/// Rolls one policy-driven episode and returns its raw counts. Uses the
/// same action pipeline as training (masking, tie-breaking, carried
/// messages) but no learning machinery.
pub fn rollout_episode(
    net: &PolicyNet,
    suite: &EvalSuite,
    tiebreak: &TieBreakConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeTrace, TrainError> {
    let n = suite.n_agents;
    let obs_params = ObsParams::new(net.config.fov);
    let explore = ExploreConfig::default();

    let (grid, starts, goals) = {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let Ok(grid) = generate_map(suite.map_size, suite.density, rng) else {
                if attempt > 100 {
                    return Err(TrainError::BadConfig {
                        reason: "could not sample an evaluation instance".into(),
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

    let mut state = WorldState::new(grid.clone(), starts, goals)?;
    let fields: Vec<DistanceField> = state
        .goals
        .iter()
        .map(|&g| DistanceField::compute(&grid, g))
        .collect();
    let mut carries: Vec<AgentCarry> = vec![AgentCarry::zeros(net.config.d_model); n];
    let mut buffers: Vec<EpisodicBuffer> = (0..n)
        .map(|_| EpisodicBuffer::start_episode(&explore, rng))
        .collect();
    let mut prevs: Vec<PrevStep> = vec![PrevStep::default(); n];
    let mut prev_positions: Vec<Option<Coord>> = vec![None; n];

    let mut obstacle_collisions = 0usize;
    let mut max_on_goal = state.on_goal.iter().filter(|&&g| g).count();
    let mut episode_length = suite.episode_limit;
    let mut solved = false;

    for step in 0..suite.episode_limit {
        let obs: Vec<_> = (0..n)
            .map(|i| build_observation(&state, i, obs_params, prevs[i], &fields[i]))
            .collect();
        let team_out = net.forward_team(&obs, &carries, &state.positions);
        let valid: Vec<Vec<bool>> = (0..n)
            .map(|i| valid_actions(&state, i, prev_positions[i]))
            .collect();

        let mut proposals: Vec<Action> = Vec::with_capacity(n);
        for i in 0..n {
            let forbidden: Vec<bool> = valid[i].iter().map(|&v| !v).collect();
            let a = if suite.greedy {
                act_greedy(&team_out.outputs[i].policy_logits, &forbidden)
            } else {
                act(&team_out.outputs[i].policy_logits, &forbidden, rng).0
            };
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
            tiebreak,
            rng,
        );

        let (next_state, step_outcome) = state.joint_step(&JointAction(outcome.actions.clone()))?;
        for events in &step_outcome.events {
            obstacle_collisions += events
                .iter()
                .filter(|&&e| e == Event::ObstacleCollision)
                .count();
        }
        for i in 0..n {
            let pos = next_state.positions[i];
            let novelty = buffers[i].intrinsic_reward(&explore, pos, next_state.on_goal[i]);
            buffers[i].maybe_insert(&explore, pos, novelty.dist, rng);
            prev_positions[i] = Some(state.positions[i]);
            prevs[i] = PrevStep {
                reward_ext: step_outcome.rewards[i],
                reward_int: 0.0,
                dmin: novelty.dmin,
                action: outcome.actions[i],
            };
        }
        carries = team_out.carries;
        state = next_state;
        max_on_goal = max_on_goal.max(state.on_goal.iter().filter(|&&g| g).count());
        if state.all_on_goal() {
            solved = true;
            episode_length = step + 1;
            break;
        }
    }

    Ok(EpisodeTrace {
        episode_length,
        n_agents: n,
        obstacle_collisions,
        max_on_goal,
        solved,
    })
}

/// Evaluates a policy over one suite. Episodes run in parallel with
/// per-episode derived seeds, so the report does not depend on scheduling.
pub fn evaluate(
    net: &PolicyNet,
    suite: &EvalSuite,
    tiebreak: &TieBreakConfig,
) -> Result<EvalReport, TrainError> {
    let traces: Vec<Result<EpisodeTrace, TrainError>> = map_indexed(suite.episodes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(suite.seed.wrapping_add(i as u64));
        rollout_episode(net, suite, tiebreak, &mut rng)
    });
    let mut rows = Vec::with_capacity(traces.len());
    for t in traces {
        rows.push(EpisodeRow::from_trace(&t?));
    }
    Ok(EvalReport::from_rows(rows))
}

pub const SUITE_CSV_HEADER: &str =
    "n_agents,map_size,density,episodes,success_rate,el_mean,el_std,mr_mean,mr_std,co_mean,co_std";

/// Batch evaluation over several suites, one aggregate CSV row per suite.
pub fn run_suite(
    net: &PolicyNet,
    suites: &[EvalSuite],
    tiebreak: &TieBreakConfig,
) -> Result<String, TrainError> {
    let mut csv = String::from(SUITE_CSV_HEADER);
    csv.push('\n');
    for s in suites {
        let report = evaluate(net, s, tiebreak)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.n_agents,
            s.map_size,
            s.density,
            s.episodes,
            report.success_rate,
            report.el.mean,
            report.el.std,
            report.mr.mean,
            report.mr.std,
            report.co.mean,
            report.co.std
        );
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::NetConfig;

    fn trace(el: usize, n: usize, obst: usize, mr: usize, solved: bool) -> EpisodeTrace {
        EpisodeTrace {
            episode_length: el,
            n_agents: n,
            obstacle_collisions: obst,
            max_on_goal: mr,
            solved,
        }
    }

    #[test]
    fn collision_ratio_formula() {
        // 2 obstacle collisions over a 50-step episode with 4 agents:
        // 2 / (50 * 4) * 100 = 1.00%.
        let row = EpisodeRow::from_trace(&trace(50, 4, 2, 4, true));
        assert!((row.co - 1.00).abs() < 1e-12);
    }

    #[test]
    fn perfect_single_agent_episode() {
        let row = EpisodeRow::from_trace(&trace(3, 1, 0, 1, true));
        assert_eq!(row.co, 0.0);
        assert!(row.success);
        let report = EvalReport::from_rows(vec![row]);
        assert_eq!(report.success_rate, 1.0);
        assert_eq!(report.co.mean, 0.0);
        assert_eq!(report.el.mean, 3.0);
    }

    #[test]
    fn mr_counts_simultaneous_on_goal_agents() {
        // All agents on goal at some step: MR equals the team size.
        let row = EpisodeRow::from_trace(&trace(10, 5, 0, 5, true));
        assert_eq!(row.mr, 5);
    }

    #[test]
    fn failed_episode_length_excluded_from_aggregate() {
        let rows = vec![
            EpisodeRow::from_trace(&trace(10, 2, 0, 2, true)),
            EpisodeRow::from_trace(&trace(256, 2, 0, 1, false)),
            EpisodeRow::from_trace(&trace(20, 2, 0, 2, true)),
        ];
        let report = EvalReport::from_rows(rows);
        assert_eq!(report.el.mean, 15.0, "failed EL must not enter the mean");
        assert!((report.success_rate - 2.0 / 3.0).abs() < 1e-12);
        // MR and CO aggregate over all episodes.
        assert!((report.mr.mean - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_std() {
        let rows = vec![
            EpisodeRow::from_trace(&trace(10, 1, 0, 1, true)),
            EpisodeRow::from_trace(&trace(20, 1, 0, 1, true)),
        ];
        let report = EvalReport::from_rows(rows);
        assert_eq!(report.el.mean, 15.0);
        assert_eq!(report.el.std, 5.0);
    }

    #[test]
    fn empty_report() {
        let report = EvalReport::from_rows(Vec::new());
        assert_eq!(report.success_rate, 0.0);
        assert_eq!(report.to_csv(), format!("{}\n", EvalReport::CSV_HEADER));
    }

    #[test]
    fn empty_suite_list_yields_header_only() {
        let net = PolicyNet::new(NetConfig::small(8), 0);
        let csv = run_suite(&net, &[], &TieBreakConfig::default()).unwrap();
        assert_eq!(csv, format!("{SUITE_CSV_HEADER}\n"));
    }

    fn tiny_suite() -> EvalSuite {
        EvalSuite {
            n_agents: 2,
            map_size: 6,
            density: 0.0,
            episodes: 3,
            seed: 11,
            episode_limit: 12,
            greedy: false,
        }
    }

    #[test]
    fn evaluate_runs_and_is_deterministic() {
        let net = PolicyNet::new(NetConfig::small(8), 4);
        let tb = TieBreakConfig::default();
        let r1 = evaluate(&net, &tiny_suite(), &tb).unwrap();
        let r2 = evaluate(&net, &tiny_suite(), &tb).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.rows.len(), 3);
        for row in &r1.rows {
            assert!(row.el <= 12);
            assert!(row.mr <= 2);
        }
    }

    #[test]
    fn suite_csv_is_deterministic() {
        let net = PolicyNet::new(NetConfig::small(8), 4);
        let tb = TieBreakConfig::default();
        let suites = [tiny_suite()];
        let c1 = run_suite(&net, &suites, &tb).unwrap();
        let c2 = run_suite(&net, &suites, &tb).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.lines().count(), 2);
    }
}
