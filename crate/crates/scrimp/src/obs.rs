//! Per-agent partial observations: eight binary FOV channels plus the
//! seven-scalar vector.

use std::fmt::Write as _;

use crate::world::{bfs_distances, Action, Coord, Grid, WorldState};

pub const N_CHANNELS: usize = 8;

/// Channel indices, in the fixed order of the observation tensor.
pub mod channel {
    pub const HEUR_UP: usize = 0;
    pub const HEUR_DOWN: usize = 1;
    pub const HEUR_LEFT: usize = 2;
    pub const HEUR_RIGHT: usize = 3;
    pub const OBSTACLES: usize = 4;
    pub const AGENTS: usize = 5;
    pub const OWN_GOAL: usize = 6;
    pub const OTHER_GOALS: usize = 7;
}

/// BFS distance from every free cell to a fixed goal. `u32::MAX` marks
/// unreachable cells; queries outside the world return None.
#[derive(Debug, Clone)]
pub struct DistanceField {
    size: usize,
    goal: Coord,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn compute(grid: &Grid, goal: Coord) -> DistanceField {
        DistanceField {
            size: grid.size(),
            goal,
            dist: bfs_distances(grid, goal, None),
        }
    }

    pub fn goal(&self) -> Coord {
        self.goal
    }

    /// Distance of a cell, None if out of bounds or unreachable.
    pub fn get(&self, c: Coord) -> Option<u32> {
        if c.row < 0 || c.col < 0 || c.row as usize >= self.size || c.col as usize >= self.size {
            return None;
        }
        match self.dist[c.row as usize * self.size + c.col as usize] {
            u32::MAX => None,
            d => Some(d),
        }
    }
}

/// Scalar inputs carried over from the previous step.
#[derive(Debug, Clone, Copy)]
pub struct PrevStep {
    pub reward_ext: f64,
    pub reward_int: f64,
    pub dmin: f64,
    pub action: Action,
}

impl Default for PrevStep {
    fn default() -> Self {
        // Episode start: no previous step; Stay is the neutral action and
        // dmin of the empty buffer is 0.
        PrevStep {
            reward_ext: 0.0,
            reward_int: 0.0,
            dmin: 0.0,
            action: Action::Stay,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObsParams {
    pub fov: usize,
    /// PRIMAL-style projection of out-of-FOV goals onto the FOV border for
    /// observable agents. Off by default: only goals inside the FOV are
    /// marked.
    pub border_projection: bool,
}

impl ObsParams {
    pub fn new(fov: usize) -> ObsParams {
        assert!(fov >= 3 && fov % 2 == 1, "fov must be odd and >= 3");
        ObsParams {
            fov,
            border_projection: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub fov: usize,
    /// `N_CHANNELS * fov * fov` values in channel-major order, each 0 or 1.
    pub maps: Vec<f64>,
    /// [dx, dy, d, re_prev, ri_prev, dmin_prev, a_prev/5]
    pub scalars: [f64; 7],
}

impl Observation {
    pub fn map(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.maps[(ch * self.fov + r) * self.fov + c]
    }

    fn map_mut(&mut self, ch: usize, r: usize, c: usize) -> &mut f64 {
        &mut self.maps[(ch * self.fov + r) * self.fov + c]
    }

    /// Text dump of all channels, one grid per channel.
    pub fn dump(&self) -> String {
        const NAMES: [&str; N_CHANNELS] = [
            "heur-up",
            "heur-down",
            "heur-left",
            "heur-right",
            "obstacles",
            "agents",
            "own-goal",
            "other-goals",
        ];
        let mut out = String::new();
        for (ch, name) in NAMES.iter().enumerate() {
            let _ = writeln!(out, "[{name}]");
            for r in 0..self.fov {
                for c in 0..self.fov {
                    out.push(if self.map(ch, r, c) > 0.5 { '1' } else { '0' });
                }
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "scalars: dx={:.4} dy={:.4} d={:.4} re={:.4} ri={:.4} dmin={:.4} a={:.4}",
            self.scalars[0],
            self.scalars[1],
            self.scalars[2],
            self.scalars[3],
            self.scalars[4],
            self.scalars[5],
            self.scalars[6]
        );
        out
    }
}

/// Fills the four heuristic channels: a FOV cell is marked for an action iff
/// taking that action from the cell lands on a free cell with strictly
/// smaller BFS distance to the goal.
pub fn heuristic_maps(field: &DistanceField, grid: &Grid, center: Coord, fov: usize) -> Vec<f64> {
    let half = (fov / 2) as i32;
    let mut maps = vec![0.0; 4 * fov * fov];
    for r in 0..fov {
        for c in 0..fov {
            let cell = Coord::new(center.row - half + r as i32, center.col - half + c as i32);
            if !grid.is_free(cell) {
                continue;
            }
            let Some(d) = field.get(cell) else { continue };
            for (a_idx, action) in Action::MOVES.iter().enumerate() {
                let nb = cell.shifted(*action);
                if grid.is_free(nb) {
                    if let Some(dn) = field.get(nb) {
                        if dn < d {
                            maps[(a_idx * fov + r) * fov + c] = 1.0;
                        }
                    }
                }
            }
        }
    }
    maps
}

/// Builds the full observation of one agent: FOV centered on the agent,
/// out-of-bounds marked as obstacles, other-agent and goal channels, and the
/// seven-scalar vector.
pub fn build_observation(
    state: &WorldState,
    agent: usize,
    params: ObsParams,
    prev: PrevStep,
    field: &DistanceField,
) -> Observation {
    let fov = params.fov;
    let half = (fov / 2) as i32;
    let pos = state.positions[agent];
    let goal = state.goals[agent];
    let m = state.grid.size() as f64;

    let mut obs = Observation {
        fov,
        maps: vec![0.0; N_CHANNELS * fov * fov],
        scalars: [0.0; 7],
    };

    let heur = heuristic_maps(field, &state.grid, pos, fov);
    obs.maps[..4 * fov * fov].copy_from_slice(&heur);

    let in_window = |c: Coord| {
        (c.row - pos.row + half) >= 0
            && (c.row - pos.row + half) < fov as i32
            && (c.col - pos.col + half) >= 0
            && (c.col - pos.col + half) < fov as i32
    };
    let window_rc = |c: Coord| {
        (
            (c.row - pos.row + half) as usize,
            (c.col - pos.col + half) as usize,
        )
    };

    for r in 0..fov {
        for c in 0..fov {
            let cell = Coord::new(pos.row - half + r as i32, pos.col - half + c as i32);
            if state.grid.is_obstacle(cell) {
                *obs.map_mut(channel::OBSTACLES, r, c) = 1.0;
            }
        }
    }

    for (j, &p) in state.positions.iter().enumerate() {
        if j != agent && in_window(p) {
            let (r, c) = window_rc(p);
            *obs.map_mut(channel::AGENTS, r, c) = 1.0;
            // Goals of observable agents.
            let g = state.goals[j];
            if in_window(g) {
                let (gr, gc) = window_rc(g);
                *obs.map_mut(channel::OTHER_GOALS, gr, gc) = 1.0;
            } else if params.border_projection {
                let gr = (g.row - pos.row + half).clamp(0, fov as i32 - 1) as usize;
                let gc = (g.col - pos.col + half).clamp(0, fov as i32 - 1) as usize;
                *obs.map_mut(channel::OTHER_GOALS, gr, gc) = 1.0;
            }
        }
    }

    if in_window(goal) {
        let (r, c) = window_rc(goal);
        *obs.map_mut(channel::OWN_GOAL, r, c) = 1.0;
    }

    let dx = (goal.col - pos.col) as f64 / m;
    let dy = (goal.row - pos.row) as f64 / m;
    let d = pos.euclidean(goal) / m;
    obs.scalars = [
        dx,
        dy,
        d,
        prev.reward_ext,
        prev.reward_int,
        prev.dmin,
        prev.action.index() as f64 / 5.0,
    ];
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_map, sample_agents, WorldState};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn empty_world(m: usize, starts: &[(i32, i32)], goals: &[(i32, i32)]) -> WorldState {
        let grid = Arc::new(Grid::new(m, vec![false; m * m]).unwrap());
        WorldState::new(
            grid,
            starts.iter().map(|&(r, c)| Coord::new(r, c)).collect(),
            goals.iter().map(|&(r, c)| Coord::new(r, c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn heuristic_marks_goal_direction() {
        let st = empty_world(7, &[(3, 1)], &[(3, 5)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        // Center cell of the FOV is the agent itself.
        assert_eq!(obs.map(channel::HEUR_RIGHT, 1, 1), 1.0);
        assert_eq!(obs.map(channel::HEUR_LEFT, 1, 1), 0.0);
    }

    #[test]
    fn on_goal_agent_has_no_improving_action() {
        let st = empty_world(7, &[(3, 3)], &[(3, 3)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        for ch in 0..4 {
            assert_eq!(obs.map(ch, 1, 1), 0.0);
        }
    }

    #[test]
    fn unreachable_goal_gives_empty_heuristics() {
        // Goal sealed off in the corner.
        let mut obstacles = vec![false; 25];
        obstacles[1] = true; // (0,1)
        obstacles[5] = true; // (1,0)
        obstacles[6] = true; // (1,1)
        let grid = Grid::new(5, obstacles).unwrap();
        let field = DistanceField::compute(&grid, Coord::new(0, 0));
        let maps = heuristic_maps(&field, &grid, Coord::new(3, 3), 5);
        assert!(maps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_agent_empty_channels() {
        let st = empty_world(7, &[(3, 3)], &[(0, 0)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(obs.map(channel::AGENTS, r, c), 0.0);
                assert_eq!(obs.map(channel::OTHER_GOALS, r, c), 0.0);
            }
        }
    }

    #[test]
    fn corner_agent_sees_five_boundary_obstacles() {
        let st = empty_world(7, &[(0, 0)], &[(5, 5)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        let count: f64 = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| obs.map(channel::OBSTACLES, r, c))
            .sum();
        assert_eq!(count, 5.0);
    }

    #[test]
    fn own_goal_channel_single_mark() {
        let st = empty_world(7, &[(3, 3)], &[(3, 4)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        let count: f64 = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| obs.map(channel::OWN_GOAL, r, c))
            .sum();
        assert_eq!(count, 1.0);
    }

    #[test]
    fn scalars_normalized() {
        let st = empty_world(10, &[(0, 0)], &[(3, 4)]);
        let field = DistanceField::compute(&st.grid, st.goals[0]);
        let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);
        assert!((obs.scalars[0] - 0.4).abs() < 1e-12);
        assert!((obs.scalars[1] - 0.3).abs() < 1e-12);
        assert!((obs.scalars[2] - 0.5).abs() < 1e-12);
        assert!((obs.scalars[6] - 0.8).abs() < 1e-12); // Stay / 5
    }

    #[test]
    fn observation_ignores_cells_outside_fov() {
        // Mutating an obstacle outside the FOV must not change the non-heuristic
        // channels; heuristic channels only depend on the distance field, which
        // we hold fixed here.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let grid = Arc::new(generate_map(9, 0.2, &mut rng).unwrap());
            let Ok((starts, goals)) = sample_agents(&grid, 2, &mut rng) else {
                continue;
            };
            let st = WorldState::new(grid.clone(), starts, goals).unwrap();
            let field = DistanceField::compute(&st.grid, st.goals[0]);
            let obs = build_observation(&st, 0, ObsParams::new(3), PrevStep::default(), &field);

            // Flip a far-away free cell into an obstacle.
            let pos = st.positions[0];
            let far: Vec<Coord> = grid
                .free_cells()
                .into_iter()
                .filter(|c| {
                    (c.row - pos.row).abs() > 1 || (c.col - pos.col).abs() > 1
                })
                .filter(|c| *c != st.positions[1] && *c != st.goals[0] && *c != st.goals[1])
                .collect();
            if far.is_empty() {
                continue;
            }
            let flip = far[rng.gen_range(0..far.len())];
            let mut mutated = vec![false; 81];
            for c in 0..81 {
                let coord = Coord::new((c / 9) as i32, (c % 9) as i32);
                mutated[c] = !grid.is_free(coord) || coord == flip;
            }
            let Ok(g2) = Grid::new(9, mutated) else { continue };
            let g2 = Arc::new(g2);
            if g2.component(st.positions[0]) != g2.component(st.goals[0])
                || g2.component(st.positions[1]) != g2.component(st.goals[1])
            {
                continue;
            }
            let st2 = WorldState::new(g2, st.positions.clone(), st.goals.clone()).unwrap();
            let obs2 = build_observation(&st2, 0, ObsParams::new(3), PrevStep::default(), &field);
            let fxf = 9; // 3x3 window
            assert_eq!(
                &obs.maps[4 * fxf..],
                &obs2.maps[4 * fxf..],
                "non-heuristic channels changed after out-of-FOV mutation"
            );
            assert_eq!(obs.scalars, obs2.scalars);
        }
    }

    #[test]
    fn heuristics_match_bfs_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 100 {
            let grid = match generate_map(8, 0.25, &mut rng) {
                Ok(g) => Arc::new(g),
                Err(_) => continue,
            };
            let free = grid.free_cells();
            if free.len() < 2 {
                continue;
            }
            let goal = free[rng.gen_range(0..free.len())];
            let center = free[rng.gen_range(0..free.len())];
            let field = DistanceField::compute(&grid, goal);
            let fov = 5;
            let maps = heuristic_maps(&field, &grid, center, fov);
            let half = (fov / 2) as i32;
            for r in 0..fov {
                for c in 0..fov {
                    let cell = Coord::new(center.row - half + r as i32, center.col - half + c as i32);
                    for (a_idx, action) in Action::MOVES.iter().enumerate() {
                        let nb = cell.shifted(*action);
                        let expected = match (
                            grid.is_free(cell),
                            field.get(cell),
                            grid.is_free(nb),
                            field.get(nb),
                        ) {
                            (true, Some(d), true, Some(dn)) => dn < d,
                            _ => false,
                        };
                        let got = maps[(a_idx * fov + r) * fov + c] > 0.5;
                        assert_eq!(got, expected, "cell {cell:?} action {action:?}");
                    }
                }
            }
            checked += 1;
        }
    }
}
