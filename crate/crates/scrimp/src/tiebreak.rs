//! Pre-execution conflict anticipation and value-based stochastic priority
//! resolution. Before a joint action is executed, agents whose proposed
//! moves would collide are grouped; one member of each group wins the right
//! to move (weighted by how much team value its move preserves plus a
//! goal-distance term) and the losers re-sample. Unresolvable groups fall
//! back to forced stops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{act, act_greedy, masked_softmax};
use crate::world::{Action, Coord, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreakMode {
    /// Winner sampled from the value-based priority distribution (default).
    Value,
    /// Winner chosen uniformly at random.
    Random,
    /// No winner: every conflicting mover is stopped with the collision
    /// penalty.
    Stop,
    /// Winner is the argmax of the priority distribution.
    Greedy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TieBreakConfig {
    pub mode: TieBreakMode,
    /// Weight of the goal-distance term in the priority logits.
    pub mu: f64,
    /// Resolution rounds before the forced-stop fallback; `None` means one
    /// round per agent on the team.
    pub max_rounds: Option<usize>,
}

impl Default for TieBreakConfig {
    fn default() -> Self {
        TieBreakConfig {
            mode: TieBreakMode::Value,
            mu: 0.1,
            max_rounds: None,
        }
    }
}

/// Maximal set of agents whose proposed moves mutually conflict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictGroup {
    /// Sorted agent indices.
    pub members: Vec<usize>,
}

/// What the resolver needs from the policy: value estimates for hypothetical
/// next states and current policy logits for re-sampling. Implementations
/// wrap the network; tests substitute fixtures.
pub trait PolicyAccess {
    /// Summed value-head output (external + intrinsic) per agent at the
    /// current state.
    fn current_values(&self) -> Vec<f64>;
    /// Summed value-head output per agent if the team occupied `positions`
    /// at the next step.
    fn hypothetical_values(&self, positions: &[Coord]) -> Vec<f64>;
    /// Current policy logits of one agent.
    fn logits(&self, agent: usize) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct TieBreakOutcome {
    pub actions: Vec<Action>,
    /// Agents force-stopped by the fallback (or by stop mode); the caller
    /// charges these the collision penalty.
    pub stopped: Vec<usize>,
}

/// The cell an agent will occupy next step if its proposal executes alone:
/// moves into obstacles or out of bounds leave it in place, matching how
/// the environment resolves them.
pub fn proposed_target(grid: &Grid, pos: Coord, action: Action) -> Coord {
    let t = pos.shifted(action);
    if grid.is_free(t) {
        t
    } else {
        pos
    }
}

/// Groups agents whose simultaneous execution would produce vertex or swap
/// conflicts. Groups are maximal (transitively merged) and disjoint;
/// following chains and rotation cycles are conflict-free.
pub fn anticipate(grid: &Grid, positions: &[Coord], proposals: &[Action]) -> Vec<ConflictGroup> {
    let n = positions.len();
    assert_eq!(proposals.len(), n);
    let targets: Vec<Coord> = (0..n)
        .map(|i| proposed_target(grid, positions[i], proposals[i]))
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    let mut conflicted = vec![false; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let vertex = targets[i] == targets[j];
            let swap = targets[i] == positions[j]
                && targets[j] == positions[i]
                && targets[i] != positions[i]
                && targets[j] != positions[j];
            if vertex || swap {
                conflicted[i] = true;
                conflicted[j] = true;
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if conflicted[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups
        .into_values()
        .map(|members| ConflictGroup { members })
        .collect()
}

/// Team value difference between the current state and one hypothetical
/// next state: sum over agents of (value now - value then). Larger means
/// the hypothetical loses more team value.
pub fn team_value_diff(values_now: &[f64], values_hypo: &[f64]) -> f64 {
    assert_eq!(values_now.len(), values_hypo.len());
    values_now
        .iter()
        .zip(values_hypo)
        .map(|(a, b)| a - b)
        .sum()
}

/// Priority distribution over group members: softmax of
/// (diff_i + mu * d_i / sum_k d_k). When every member sits on its goal the
/// distance term is dropped.
pub fn priority_probs(diffs: &[f64], dists: &[f64], mu: f64) -> Vec<f64> {
    assert_eq!(diffs.len(), dists.len());
    let sum_d: f64 = dists.iter().sum();
    let logits: Vec<f64> = diffs
        .iter()
        .zip(dists)
        .map(|(&diff, &d)| {
            if sum_d > 0.0 {
                diff + mu * d / sum_d
            } else {
                diff
            }
        })
        .collect();
    masked_softmax(&logits, &vec![false; logits.len()])
}

/// Resolves all anticipated conflicts for one step. Runs up to R rounds of
/// winner selection and loser re-sampling; any conflicts surviving R rounds
/// are dissolved by force-stopping the movers involved (cascading until no
/// conflict remains). The returned actions produce no agent collisions when
/// executed.
pub fn resolve<R: Rng>(
    grid: &Grid,
    positions: &[Coord],
    goals: &[Coord],
    proposals: &[Action],
    policy: &dyn PolicyAccess,
    config: &TieBreakConfig,
    rng: &mut R,
) -> TieBreakOutcome {
    let n = positions.len();
    let mut actions = proposals.to_vec();
    let mut stopped: Vec<usize> = Vec::new();
    let rounds = match config.mode {
        TieBreakMode::Stop => 0,
        _ => config.max_rounds.unwrap_or(n),
    };

    for _ in 0..rounds {
        let groups = anticipate(grid, positions, &actions);
        if groups.is_empty() {
            break;
        }
        for group in &groups {
            let winner = select_winner(grid, positions, goals, &actions, group, policy, config, rng);
            for &m in &group.members {
                if m == winner || actions[m] == Action::Stay {
                    // Losers that already stay keep staying unless they are
                    // the contested cell's occupant forced out; that case is
                    // the winner moving into them, handled by re-sampling
                    // below only when they lose with a move available.
                    continue;
                }
                actions[m] = resample(policy, m, actions[m], rng);
            }
            // A staying loser whose cell the winner enters must vacate.
            let winner_target = proposed_target(grid, positions[winner], actions[winner]);
            for &m in &group.members {
                if m != winner && actions[m] == Action::Stay && positions[m] == winner_target {
                    actions[m] = resample(policy, m, Action::Stay, rng);
                }
            }
        }
    }

    // Fallback: force-stop movers still in conflict, cascading because a
    // newly stopped agent can block a previously clean follower.
    loop {
        let groups = anticipate(grid, positions, &actions);
        if groups.is_empty() {
            break;
        }
        for group in &groups {
            for &m in &group.members {
                if actions[m] != Action::Stay {
                    actions[m] = Action::Stay;
                    stopped.push(m);
                }
            }
        }
    }
    stopped.sort_unstable();
    stopped.dedup();
    TieBreakOutcome { actions, stopped }
}

/// Picks the group member allowed to keep its proposal.
fn select_winner<R: Rng>(
    grid: &Grid,
    positions: &[Coord],
    goals: &[Coord],
    actions: &[Action],
    group: &ConflictGroup,
    policy: &dyn PolicyAccess,
    config: &TieBreakConfig,
    rng: &mut R,
) -> usize {
    let k = group.members.len();
    match config.mode {
        TieBreakMode::Random => group.members[rng.gen_range(0..k)],
        TieBreakMode::Stop => unreachable!("stop mode skips winner selection"),
        TieBreakMode::Value | TieBreakMode::Greedy => {
            let values_now = policy.current_values();
            let mut diffs = Vec::with_capacity(k);
            let mut dists = Vec::with_capacity(k);
            for &i in &group.members {
                let hypo = hypothetical_positions(grid, positions, actions, group, i, policy);
                let values_hypo = policy.hypothetical_values(&hypo);
                diffs.push(team_value_diff(&values_now, &values_hypo));
                dists.push(positions[i].euclidean(goals[i]));
            }
            let probs = priority_probs(&diffs, &dists, config.mu);
            let idx = if config.mode == TieBreakMode::Greedy {
                probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            } else {
                sample_index(&probs, rng)
            };
            group.members[idx]
        }
    }
}

/// Joint next positions if `mover` executes its action and the other group
/// members re-sample greedily with their conflicting action masked.
/// Everyone outside the group executes its current proposal.
fn hypothetical_positions(
    grid: &Grid,
    positions: &[Coord],
    actions: &[Action],
    group: &ConflictGroup,
    mover: usize,
    policy: &dyn PolicyAccess,
) -> Vec<Coord> {
    let n = positions.len();
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        let action = if i == mover || !group.members.contains(&i) {
            actions[i]
        } else {
            let mut forbidden = vec![false; crate::world::N_ACTIONS];
            forbidden[actions[i].index()] = true;
            act_greedy(&policy.logits(i), &forbidden)
        };
        next.push(proposed_target(grid, positions[i], action));
    }
    next
}

fn resample<R: Rng>(policy: &dyn PolicyAccess, agent: usize, conflicting: Action, rng: &mut R) -> Action {
    let logits = policy.logits(agent);
    let mut forbidden = vec![false; logits.len()];
    forbidden[conflicting.index()] = true;
    let (action, _, _) = act(&logits, &forbidden, rng);
    action
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    probs.len() - 1
}
