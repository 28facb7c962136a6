//! Gridworld MAPF environment: simultaneous joint stepping with vertex/swap
//! conflict semantics, rewards, blocking detection, and map/scenario handling.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::WorldError;

/// Default episode time limit.
pub const EPISODE_LIMIT: usize = 256;

/// Extra path length (strict) beyond which an agent counts as blocking another.
pub const BLOCKING_THRESHOLD: u32 = 10;

pub const REWARD_MOVE: f64 = -0.3;
pub const REWARD_STAY_ON_GOAL: f64 = 0.0;
pub const REWARD_STAY_OFF_GOAL: f64 = -0.3;
pub const REWARD_COLLISION: f64 = -2.0;
pub const REWARD_BLOCK: f64 = -1.0;

/// Grid coordinate, row-major, 0-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub row: i32,
    pub col: i32,
}

impl Coord {
    pub fn new(row: i32, col: i32) -> Self {
        Coord { row, col }
    }

    pub fn shifted(self, action: Action) -> Coord {
        let (dr, dc) = action.delta();
        Coord::new(self.row + dr, self.col + dc)
    }

    pub fn euclidean(self, other: Coord) -> f64 {
        let dr = (self.row - other.row) as f64;
        let dc = (self.col - other.col) as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// The five discrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

pub const N_ACTIONS: usize = 5;

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::Stay => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// The action undoing this one (Stay reverses to Stay).
    pub fn reverse(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            Action::Stay => Action::Stay,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            Action::Up => 'U',
            Action::Down => 'D',
            Action::Left => 'L',
            Action::Right => 'R',
            Action::Stay => 'S',
        }
    }

    pub fn from_char(c: char) -> Option<Action> {
        match c {
            'U' => Some(Action::Up),
            'D' => Some(Action::Down),
            'L' => Some(Action::Left),
            'R' => Some(Action::Right),
            'S' => Some(Action::Stay),
            _ => None,
        }
    }
}

/// Static obstacle map with connected-component labels over free cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    size: usize,
    obstacles: Vec<bool>,
    component_id: Vec<i32>,
}

impl Grid {
    /// Builds a grid from an obstacle mask and labels 4-connected free regions.
    pub fn new(size: usize, obstacles: Vec<bool>) -> Result<Grid, WorldError> {
        if obstacles.len() != size * size {
            return Err(WorldError::BadGrid {
                reason: format!("mask length {} != {}x{}", obstacles.len(), size, size),
            });
        }
        let mut grid = Grid {
            size,
            obstacles,
            component_id: vec![-1; size * size],
        };
        grid.label_components();
        Ok(grid)
    }

    fn label_components(&mut self) {
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.size * self.size {
            if self.obstacles[start] || self.component_id[start] >= 0 {
                continue;
            }
            self.component_id[start] = next;
            queue.push_back(start);
            while let Some(idx) = queue.pop_front() {
                let c = Coord::new((idx / self.size) as i32, (idx % self.size) as i32);
                for a in Action::MOVES {
                    let nb = c.shifted(a);
                    if self.is_free(nb) {
                        let ni = self.index(nb);
                        if self.component_id[ni] < 0 {
                            self.component_id[ni] = next;
                            queue.push_back(ni);
                        }
                    }
                }
            }
            next += 1;
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn index(&self, c: Coord) -> usize {
        c.row as usize * self.size + c.col as usize
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        c.row >= 0 && c.col >= 0 && (c.row as usize) < self.size && (c.col as usize) < self.size
    }

    /// Out-of-bounds cells count as obstacles.
    pub fn is_obstacle(&self, c: Coord) -> bool {
        !self.in_bounds(c) || self.obstacles[self.index(c)]
    }

    pub fn is_free(&self, c: Coord) -> bool {
        !self.is_obstacle(c)
    }

    /// Component label of a free cell; None for obstacles and out-of-bounds.
    pub fn component(&self, c: Coord) -> Option<i32> {
        if self.is_free(c) {
            Some(self.component_id[self.index(c)])
        } else {
            None
        }
    }

    pub fn obstacle_count(&self) -> usize {
        self.obstacles.iter().filter(|&&o| o).count()
    }

    pub fn free_cells(&self) -> Vec<Coord> {
        (0..self.size * self.size)
            .filter(|&i| !self.obstacles[i])
            .map(|i| Coord::new((i / self.size) as i32, (i % self.size) as i32))
            .collect()
    }

    /// Serializes to the map text format: first line "m", then m lines of
    /// '.' (free) and '@' (obstacle).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                out.push(if self.obstacles[r * self.size + c] { '@' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Grid, WorldError> {
        let mut lines = text.lines();
        let size: usize = lines
            .next()
            .ok_or_else(|| WorldError::BadGrid {
                reason: "empty map file".into(),
            })?
            .trim()
            .parse()
            .map_err(|_| WorldError::BadGrid {
                reason: "first line must be the world size".into(),
            })?;
        let mut obstacles = Vec::with_capacity(size * size);
        for r in 0..size {
            let line = lines.next().ok_or_else(|| WorldError::BadGrid {
                reason: format!("missing row {r}"),
            })?;
            let row: Vec<char> = line.trim_end().chars().collect();
            if row.len() != size {
                return Err(WorldError::BadGrid {
                    reason: format!("row {r} has {} cells, expected {size}", row.len()),
                });
            }
            for ch in row {
                match ch {
                    '.' => obstacles.push(false),
                    '@' => obstacles.push(true),
                    other => {
                        return Err(WorldError::BadGrid {
                            reason: format!("unexpected map character {other:?}"),
                        })
                    }
                }
            }
        }
        Grid::new(size, obstacles)
    }
}

/// Samples an obstacle map: each cell is independently an obstacle with the
/// given probability. Redraws (up to 100 times) if no free cell exists.
pub fn generate_map<R: Rng>(size: usize, density: f64, rng: &mut R) -> Result<Grid, WorldError> {
    if size < 3 {
        return Err(WorldError::BadGrid {
            reason: format!("size {size} < 3"),
        });
    }
    if !(0.0..1.0).contains(&density) {
        return Err(WorldError::BadDensity { density });
    }
    for _ in 0..100 {
        let obstacles: Vec<bool> = (0..size * size).map(|_| rng.gen::<f64>() < density).collect();
        if obstacles.iter().any(|&o| !o) {
            return Grid::new(size, obstacles);
        }
    }
    Err(WorldError::NoFreeCells { size, density })
}

/// Samples n distinct starts and n distinct goals, each start/goal pair
/// inside one connected free region.
pub fn sample_agents<R: Rng>(
    grid: &Grid,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Coord>, Vec<Coord>), WorldError> {
    let free = grid.free_cells();
    if free.len() < n {
        return Err(WorldError::Infeasible {
            reason: format!("{} free cells for {n} agents", free.len()),
        });
    }
    // Starts: uniform over free cells without replacement.
    let starts = sample_distinct(&free, n, rng);
    // Goals: per agent, uniform over the free cells of its start component,
    // distinct across agents. Rejection with retries.
    'attempt: for _ in 0..200 {
        let mut goals: Vec<Coord> = Vec::with_capacity(n);
        for &s in &starts {
            let comp = grid.component(s).expect("start on free cell");
            let candidates: Vec<Coord> = free
                .iter()
                .copied()
                .filter(|&c| grid.component(c) == Some(comp) && !goals.contains(&c))
                .collect();
            if candidates.is_empty() {
                continue 'attempt;
            }
            goals.push(candidates[rng.gen_range(0..candidates.len())]);
        }
        return Ok((starts, goals));
    }
    Err(WorldError::Infeasible {
        reason: "could not place distinct goals in shared components".into(),
    })
}

fn sample_distinct<R: Rng>(pool: &[Coord], n: usize, rng: &mut R) -> Vec<Coord> {
    // Partial Fisher-Yates over a copy.
    let mut pool = pool.to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

/// One action per agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction(pub Vec<Action>);

/// Per-agent event tags emitted by a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Moved,
    StayedOnGoal,
    StayedOffGoal,
    ObstacleCollision,
    AgentCollision,
    Blocking,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub events: Vec<Vec<Event>>,
    pub all_on_goal: bool,
}

impl StepOutcome {
    pub fn agent_has(&self, agent: usize, event: Event) -> bool {
        self.events[agent].contains(&event)
    }
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub grid: Arc<Grid>,
    pub positions: Vec<Coord>,
    pub goals: Vec<Coord>,
    pub step: usize,
    pub on_goal: Vec<bool>,
    pub collision_counts: Vec<u32>,
}

impl WorldState {
    pub fn new(grid: Arc<Grid>, starts: Vec<Coord>, goals: Vec<Coord>) -> Result<WorldState, WorldError> {
        let n = starts.len();
        if goals.len() != n {
            return Err(WorldError::Infeasible {
                reason: "starts/goals length mismatch".into(),
            });
        }
        for i in 0..n {
            if !grid.is_free(starts[i]) || !grid.is_free(goals[i]) {
                return Err(WorldError::Infeasible {
                    reason: format!("agent {i} start or goal on obstacle"),
                });
            }
            if grid.component(starts[i]) != grid.component(goals[i]) {
                return Err(WorldError::Infeasible {
                    reason: format!("agent {i} start and goal in different regions"),
                });
            }
            for j in 0..i {
                if starts[i] == starts[j] || goals[i] == goals[j] {
                    return Err(WorldError::Infeasible {
                        reason: "duplicate start or goal".into(),
                    });
                }
            }
        }
        let on_goal = starts.iter().zip(&goals).map(|(s, g)| s == g).collect();
        Ok(WorldState {
            grid,
            positions: starts,
            goals,
            step: 0,
            on_goal,
            collision_counts: vec![0; n],
        })
    }

    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn all_on_goal(&self) -> bool {
        self.on_goal.iter().all(|&g| g)
    }

    /// Applies a joint action simultaneously and returns the successor state
    /// plus rewards and events.
    pub fn joint_step(&self, joint: &JointAction) -> Result<(WorldState, StepOutcome), WorldError> {
        let n = self.n_agents();
        if joint.0.len() != n {
            return Err(WorldError::BadJointAction {
                got: joint.0.len(),
                expected: n,
            });
        }

        let res = resolve_moves(&self.grid, &self.positions, &joint.0);

        let mut next = self.clone();
        next.positions = res.new_positions.clone();
        next.step += 1;
        let mut rewards = vec![0.0; n];
        let mut events: Vec<Vec<Event>> = vec![Vec::new(); n];
        for i in 0..n {
            next.on_goal[i] = next.positions[i] == next.goals[i];
            if res.obstacle_hit[i] {
                next.collision_counts[i] += 1;
                rewards[i] = REWARD_COLLISION;
                events[i].push(Event::ObstacleCollision);
            } else if res.agent_conflict[i] {
                rewards[i] = REWARD_COLLISION;
                events[i].push(Event::AgentCollision);
            } else if next.positions[i] != self.positions[i] {
                rewards[i] = REWARD_MOVE;
                events[i].push(Event::Moved);
            } else if next.on_goal[i] {
                rewards[i] = REWARD_STAY_ON_GOAL;
                events[i].push(Event::StayedOnGoal);
            } else {
                rewards[i] = REWARD_STAY_OFF_GOAL;
                events[i].push(Event::StayedOffGoal);
            }
        }
        // Blocking penalty stacks on top of the movement/collision reward.
        for i in 0..n {
            if compute_blocking(&next, i) {
                rewards[i] += REWARD_BLOCK;
                events[i].push(Event::Blocking);
            }
        }
        let outcome = StepOutcome {
            rewards,
            events,
            all_on_goal: next.all_on_goal(),
        };
        Ok((next, outcome))
    }

    /// ASCII rendering: agents as digits (mod 10), goals as letters, both as '*'.
    pub fn render(&self) -> String {
        let m = self.grid.size();
        let mut cells: Vec<char> = (0..m * m)
            .map(|i| if self.grid.obstacles[i] { '@' } else { '.' })
            .collect();
        for (i, g) in self.goals.iter().enumerate() {
            cells[g.row as usize * m + g.col as usize] =
                char::from_digit((i % 26) as u32 + 10, 36).unwrap();
        }
        for (i, p) in self.positions.iter().enumerate() {
            let idx = p.row as usize * m + p.col as usize;
            cells[idx] = if self.on_goal[i] {
                '*'
            } else {
                char::from_digit((i % 10) as u32, 10).unwrap()
            };
        }
        let mut out = String::new();
        for r in 0..m {
            out.extend(&cells[r * m..(r + 1) * m]);
            out.push('\n');
        }
        out
    }
}

/// Result of simultaneous move resolution.
pub(crate) struct MoveResolution {
    pub new_positions: Vec<Coord>,
    pub obstacle_hit: Vec<bool>,
    pub agent_conflict: Vec<bool>,
}

/// Simultaneous move semantics shared by the environment and the joint-BFS
/// oracle. Obstacle-directed moves are invalidated first; then vertex and swap
/// conflicts are invalidated to a fixed point (an agent whose target was
/// vacated by a now-invalidated move also stays). Following chains survive.
pub(crate) fn resolve_moves(grid: &Grid, positions: &[Coord], actions: &[Action]) -> MoveResolution {
    let n = positions.len();
    let mut obstacle_hit = vec![false; n];
    let mut agent_conflict = vec![false; n];
    let mut targets: Vec<Coord> = Vec::with_capacity(n);
    for i in 0..n {
        let t = positions[i].shifted(actions[i]);
        if t != positions[i] && grid.is_obstacle(t) {
            obstacle_hit[i] = true;
            targets.push(positions[i]);
        } else {
            targets.push(t);
        }
    }
    // Fixed point: each pass invalidates at least one mover or terminates.
    loop {
        let mut invalidated = false;
        // Vertex conflicts: any cell targeted by more than one agent. Only
        // movers are invalidated; agents staying there keep their cell.
        for i in 0..n {
            if targets[i] == positions[i] {
                continue;
            }
            let contested = (0..n).any(|j| j != i && targets[j] == targets[i]);
            if contested {
                agent_conflict[i] = true;
                invalidated = true;
            }
        }
        if invalidated {
            for i in 0..n {
                if agent_conflict[i] {
                    targets[i] = positions[i];
                }
            }
            continue;
        }
        // Swap conflicts: two movers exchanging cells.
        for i in 0..n {
            if targets[i] == positions[i] {
                continue;
            }
            for j in 0..n {
                if j != i
                    && targets[j] != positions[j]
                    && targets[i] == positions[j]
                    && targets[j] == positions[i]
                {
                    agent_conflict[i] = true;
                    agent_conflict[j] = true;
                    invalidated = true;
                }
            }
        }
        if invalidated {
            for i in 0..n {
                if agent_conflict[i] {
                    targets[i] = positions[i];
                }
            }
            continue;
        }
        break;
    }
    MoveResolution {
        new_positions: targets,
        obstacle_hit,
        agent_conflict,
    }
}

/// BFS distances from `source` over free cells, optionally with one extra
/// cell treated as an obstacle. `u32::MAX` marks unreachable cells.
pub fn bfs_distances(grid: &Grid, source: Coord, extra_obstacle: Option<Coord>) -> Vec<u32> {
    let m = grid.size();
    let mut dist = vec![u32::MAX; m * m];
    if !grid.is_free(source) || Some(source) == extra_obstacle {
        return dist;
    }
    let idx = |c: Coord| c.row as usize * m + c.col as usize;
    dist[idx(source)] = 0;
    let mut queue = VecDeque::new();
    queue.push_back(source);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)];
        for a in Action::MOVES {
            let nb = c.shifted(a);
            if grid.is_free(nb) && Some(nb) != extra_obstacle && dist[idx(nb)] == u32::MAX {
                dist[idx(nb)] = d + 1;
                queue.push_back(nb);
            }
        }
    }
    dist
}

/// True iff some other off-goal agent's shortest path to its goal is extended
/// by strictly more than [`BLOCKING_THRESHOLD`] steps (or made unreachable)
/// when `agent`'s cell is treated as an obstacle. Other agents are treated as
/// free space.
pub fn compute_blocking(state: &WorldState, agent: usize) -> bool {
    let m = state.grid.size();
    let pos = state.positions[agent];
    let idx = |c: Coord| c.row as usize * m + c.col as usize;
    for j in 0..state.n_agents() {
        if j == agent || state.on_goal[j] {
            continue;
        }
        let free = bfs_distances(&state.grid, state.goals[j], None)[idx(state.positions[j])];
        if free == u32::MAX {
            continue; // goal unreachable regardless of the tested agent
        }
        let blocked =
            bfs_distances(&state.grid, state.goals[j], Some(pos))[idx(state.positions[j])];
        if blocked == u32::MAX || blocked > free + BLOCKING_THRESHOLD {
            return true;
        }
    }
    false
}

/// True iff all agents are on goal or the step limit has been reached.
pub fn episode_done(state: &WorldState, limit: usize) -> bool {
    state.all_on_goal() || state.step >= limit
}

/// Scenario text format: first line n, then per agent one line
/// "start_row start_col goal_row goal_col" (0-indexed).
pub fn scenario_to_text(starts: &[Coord], goals: &[Coord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", starts.len());
    for (s, g) in starts.iter().zip(goals) {
        let _ = writeln!(out, "{} {} {} {}", s.row, s.col, g.row, g.col);
    }
    out
}

pub fn scenario_from_text(text: &str) -> Result<(Vec<Coord>, Vec<Coord>), WorldError> {
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .ok_or_else(|| WorldError::BadScenario {
            reason: "empty scenario file".into(),
        })?
        .trim()
        .parse()
        .map_err(|_| WorldError::BadScenario {
            reason: "first line must be the agent count".into(),
        })?;
    let mut starts = Vec::with_capacity(n);
    let mut goals = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines.next().ok_or_else(|| WorldError::BadScenario {
            reason: format!("missing agent {i}"),
        })?;
        let nums: Vec<i32> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| WorldError::BadScenario {
                reason: format!("bad agent line {i:?}"),
            })?;
        if nums.len() != 4 {
            return Err(WorldError::BadScenario {
                reason: format!("agent {i}: expected 4 numbers, got {}", nums.len()),
            });
        }
        starts.push(Coord::new(nums[0], nums[1]));
        goals.push(Coord::new(nums[2], nums[3]));
    }
    Ok((starts, goals))
}
