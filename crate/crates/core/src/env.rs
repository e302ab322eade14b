//! Grid warehouse as a partially observable Markov game.
//!
//! `N` agents share a rectangular grid. Tasks appear at random cells and must
//! be carried to one of the four corner drop-offs. Each step every agent
//! either claims one of its `K` nearest open tasks (actions `1..=K`) or skips
//! (action `K+1`); claimed agents auto-navigate one Manhattan step per tick
//! toward the pickup and then the drop. Rewards are shaped: claiming,
//! picking up and delivering pay increasing amounts, idle steps cost a small
//! penalty. A delivered task immediately spawns a replacement, so the active
//! task count is conserved.

use serde::{Deserialize, Serialize};

use crate::buffer::{StepRecord, TrajectoryBuffer};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Label value used when an agent has neither a bound task nor any open
/// candidate. Cannot occur with `task_pool > n_agents`.
pub const NO_LABEL: u8 = u8::MAX;

/// Number of features per candidate task row in an observation.
pub const TASK_FEATURES: usize = 5;

/// Number of self features (normalized x, normalized y, carrying flag).
pub const SELF_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub fn manhattan(self, other: GridPos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskStatus {
    Open,
    Assigned,
    Carried,
    Delivered,
}

#[derive(Clone, Debug)]
pub struct TaskDescriptor {
    pub pickup: GridPos,
    pub drop: GridPos,
    /// Drop-corner id in 0..4; doubles as the task category label.
    pub category: u8,
    pub status: TaskStatus,
}

/// Shaped reward magnitudes. Delivery must dominate pickup, pickup must
/// dominate assignment, and idling must cost.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub r_assign: f64,
    pub r_pick: f64,
    pub r_drop: f64,
    pub r_unassigned: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_assign: 0.1, r_pick: 0.5, r_drop: 1.0, r_unassigned: -0.01 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_drop > self.r_pick && self.r_pick > self.r_assign && self.r_assign > 0.0) {
            return Err(Error::config("rewards must satisfy r_drop > r_pick > r_assign > 0"));
        }
        if self.r_unassigned >= 0.0 {
            return Err(Error::config("r_unassigned must be negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    /// Candidate slots per observation (top-K nearest open tasks).
    pub k_candidates: usize,
    /// Episode length in steps.
    pub episode_len: usize,
    /// Number of simultaneously active (non-delivered) tasks.
    pub task_pool: usize,
    pub rewards: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            width: 10,
            height: 10,
            n_agents: 3,
            k_candidates: 4,
            episode_len: 300,
            task_pool: 6,
            rewards: RewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::config("grid must be at least 4x4"));
        }
        if self.n_agents < 1 || self.k_candidates < 1 {
            return Err(Error::config("need at least one agent and one candidate slot"));
        }
        if self.episode_len < 1 {
            return Err(Error::config("episode length must be positive"));
        }
        if self.task_pool <= self.n_agents {
            return Err(Error::config("task pool must exceed the agent count"));
        }
        let free_cells = self.width * self.height - 4;
        if self.n_agents > free_cells {
            return Err(Error::config("more agents than free cells"));
        }
        Ok(())
    }

    /// Observation dimensionality: self features plus K candidate rows.
    pub fn obs_dim(&self) -> usize {
        SELF_FEATURES + TASK_FEATURES * self.k_candidates
    }

    pub fn corners(&self) -> [GridPos; 4] {
        [
            GridPos { x: 0, y: 0 },
            GridPos { x: self.width - 1, y: 0 },
            GridPos { x: 0, y: self.height - 1 },
            GridPos { x: self.width - 1, y: self.height - 1 },
        ]
    }
}

/// Per-agent view: fixed-size feature vector plus the candidate mask.
#[derive(Clone, Debug)]
pub struct Observation<S> {
    /// `[x/w, y/h, carrying]` followed by K rows of
    /// `[pickup_x/w, pickup_y/h, drop_x/w, drop_y/h, heuristic]`,
    /// zero-padded past the open-task count.
    pub features: Vec<S>,
    /// True for candidate slots holding a real open task.
    pub mask: Vec<bool>,
    /// Task category describing this agent's context (bound task if any,
    /// else the nearest open candidate).
    pub label: u8,
}

#[derive(Clone, Copy, Debug)]
struct Agent {
    pos: GridPos,
    /// Bound task index (assigned or carried).
    task: Option<usize>,
    carrying: bool,
}

/// Per-agent event flags for one step; rewards decompose exactly over these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AgentEvents {
    pub assigned: bool,
    pub picked: bool,
    pub delivered: bool,
    /// Agent had no bound task after the claim phase.
    pub unassigned: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult<S> {
    pub observations: Vec<Observation<S>>,
    pub rewards: Vec<S>,
    pub events: Vec<AgentEvents>,
    pub done: bool,
}

/// The environment: grid state, task pool, per-agent bindings and the seeded
/// stream that drives task spawning.
#[derive(Clone, Debug)]
pub struct WarehouseEnv<S> {
    config: EnvConfig,
    agents: Vec<Agent>,
    tasks: Vec<TaskDescriptor>,
    t: usize,
    rng: SeededRng,
    /// Candidate task indices behind each agent's latest observation; claim
    /// actions resolve against these.
    candidates: Vec<Vec<Option<usize>>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> WarehouseEnv<S> {
    /// Fresh environment with agents and tasks placed by seeded draws.
    pub fn reset(seed: u64, config: &EnvConfig) -> Result<(Self, Vec<Observation<S>>)> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let corners = config.corners();

        let mut agents = Vec::with_capacity(config.n_agents);
        let mut used: Vec<GridPos> = corners.to_vec();
        while agents.len() < config.n_agents {
            let pos = GridPos {
                x: rng.index(config.width),
                y: rng.index(config.height),
            };
            if used.contains(&pos) {
                continue;
            }
            used.push(pos);
            agents.push(Agent { pos, task: None, carrying: false });
        }

        let mut env = WarehouseEnv {
            config: config.clone(),
            agents,
            tasks: Vec::new(),
            t: 0,
            rng,
            candidates: vec![vec![None; config.k_candidates]; config.n_agents],
            _marker: std::marker::PhantomData,
        };
        for _ in 0..config.task_pool {
            env.spawn_task();
        }
        let obs = env.build_observations();
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.episode_len
    }

    fn spawn_task(&mut self) {
        let corners = self.config.corners();
        let corner_id = self.rng.index(4);
        let drop = corners[corner_id];
        let pickup = loop {
            let pos = GridPos {
                x: self.rng.index(self.config.width),
                y: self.rng.index(self.config.height),
            };
            if corners.contains(&pos) {
                continue;
            }
            let taken = self
                .tasks
                .iter()
                .any(|t| t.status != TaskStatus::Delivered && t.pickup == pos);
            if !taken {
                break pos;
            }
        };
        self.tasks.push(TaskDescriptor {
            pickup,
            drop,
            category: corner_id as u8,
            status: TaskStatus::Open,
        });
    }

    /// Agent-to-task travel estimate: walk to the pickup, then to the drop,
    /// normalized into [0, 1] by the longest such path on this grid.
    fn heuristic(&self, agent_pos: GridPos, task: &TaskDescriptor) -> f64 {
        let total = agent_pos.manhattan(task.pickup) + task.pickup.manhattan(task.drop);
        let diameter = (self.config.width - 1) + (self.config.height - 1);
        total as f64 / (2 * diameter) as f64
    }

    /// The K open tasks nearest to the agent, re-ranked every call.
    fn rank_candidates(&self, agent_pos: GridPos) -> Vec<Option<usize>> {
        let mut open: Vec<(usize, f64)> = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.status == TaskStatus::Open)
            .map(|(i, t)| (i, self.heuristic(agent_pos, t)))
            .collect();
        open.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        (0..self.config.k_candidates)
            .map(|k| open.get(k).map(|(i, _)| *i))
            .collect()
    }

    fn build_observations(&mut self) -> Vec<Observation<S>> {
        let w = self.config.width as f64;
        let h = self.config.height as f64;
        let mut out = Vec::with_capacity(self.config.n_agents);
        let mut all_candidates = Vec::with_capacity(self.config.n_agents);
        for agent in &self.agents {
            let candidates = self.rank_candidates(agent.pos);
            let mut features = Vec::with_capacity(self.config.obs_dim());
            features.push(S::of(agent.pos.x as f64 / w));
            features.push(S::of(agent.pos.y as f64 / h));
            features.push(if agent.carrying { S::one() } else { S::zero() });
            let mut mask = Vec::with_capacity(self.config.k_candidates);
            for slot in &candidates {
                match slot {
                    Some(ti) => {
                        let task = &self.tasks[*ti];
                        features.push(S::of(task.pickup.x as f64 / w));
                        features.push(S::of(task.pickup.y as f64 / h));
                        features.push(S::of(task.drop.x as f64 / w));
                        features.push(S::of(task.drop.y as f64 / h));
                        features.push(S::of(self.heuristic(agent.pos, task)));
                        mask.push(true);
                    }
                    None => {
                        features.extend(std::iter::repeat(S::zero()).take(TASK_FEATURES));
                        mask.push(false);
                    }
                }
            }
            let label = match agent.task {
                Some(ti) => self.tasks[ti].category,
                None => match candidates.first().copied().flatten() {
                    Some(ti) => self.tasks[ti].category,
                    None => NO_LABEL,
                },
            };
            out.push(Observation { features, mask, label });
            all_candidates.push(candidates);
        }
        self.candidates = all_candidates;
        out
    }

    /// Advance one tick. Actions are `1..=K` (claim candidate) or `K+1`
    /// (skip). Claims resolve in agent order, so on conflict the lower agent
    /// index wins and the loser idles this step.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult<S>> {
        if self.done() {
            return Err(Error::domain("step on finished episode"));
        }
        if actions.len() != self.config.n_agents {
            return Err(Error::shape(format!(
                "expected {} actions, got {}",
                self.config.n_agents,
                actions.len()
            )));
        }
        let k = self.config.k_candidates;
        for &a in actions {
            if a < 1 || a > k + 1 {
                return Err(Error::domain(format!("action {a} outside 1..={}", k + 1)));
            }
        }

        let mut events = vec![AgentEvents::default(); self.config.n_agents];

        // Claim phase, in agent order.
        for i in 0..self.config.n_agents {
            if self.agents[i].task.is_some() {
                continue;
            }
            let action = actions[i];
            if action <= k {
                if let Some(ti) = self.candidates[i][action - 1] {
                    if self.tasks[ti].status == TaskStatus::Open {
                        self.tasks[ti].status = TaskStatus::Assigned;
                        self.agents[i].task = Some(ti);
                        events[i].assigned = true;
                    }
                }
            }
            if self.agents[i].task.is_none() {
                events[i].unassigned = true;
            }
        }

        // Movement phase: bound agents walk one Manhattan step (x first),
        // picking up or delivering on arrival.
        for i in 0..self.config.n_agents {
            let Some(ti) = self.agents[i].task else { continue };
            let target = if self.agents[i].carrying {
                self.tasks[ti].drop
            } else {
                self.tasks[ti].pickup
            };
            let pos = &mut self.agents[i].pos;
            if pos.x != target.x {
                pos.x = if target.x > pos.x { pos.x + 1 } else { pos.x - 1 };
            } else if pos.y != target.y {
                pos.y = if target.y > pos.y { pos.y + 1 } else { pos.y - 1 };
            }
            let arrived = *pos == target;
            if arrived {
                if self.agents[i].carrying {
                    self.tasks[ti].status = TaskStatus::Delivered;
                    self.agents[i].carrying = false;
                    self.agents[i].task = None;
                    events[i].delivered = true;
                    self.spawn_task();
                } else {
                    self.tasks[ti].status = TaskStatus::Carried;
                    self.agents[i].carrying = true;
                    events[i].picked = true;
                }
            }
        }

        let rewards = events.iter().map(|e| reward_for::<S>(e, &self.config.rewards)).collect();

        self.t += 1;
        let done = self.done();
        let observations = self.build_observations();
        Ok(StepResult { observations, rewards, events, done })
    }

    /// Count of non-delivered tasks; constant across steps by construction.
    pub fn active_task_count(&self) -> usize {
        self.tasks.iter().filter(|t| t.status != TaskStatus::Delivered).count()
    }

    pub fn tasks(&self) -> &[TaskDescriptor] {
        &self.tasks
    }

    pub fn agent_positions(&self) -> Vec<GridPos> {
        self.agents.iter().map(|a| a.pos).collect()
    }

    pub fn carrying_flags(&self) -> Vec<bool> {
        self.agents.iter().map(|a| a.carrying).collect()
    }

    /// Single-screen ASCII rendering for debugging traces. Agents are
    /// digits, open pickups `o`, carried/assigned pickups `x`, corners `D`.
    pub fn render(&self) -> String {
        let mut grid = vec![vec!['.'; self.config.width]; self.config.height];
        for corner in self.config.corners() {
            grid[corner.y][corner.x] = 'D';
        }
        for task in &self.tasks {
            match task.status {
                TaskStatus::Open => grid[task.pickup.y][task.pickup.x] = 'o',
                TaskStatus::Assigned => grid[task.pickup.y][task.pickup.x] = 'x',
                _ => {}
            }
        }
        for (i, agent) in self.agents.iter().enumerate() {
            grid[agent.pos.y][agent.pos.x] =
                char::from_digit((i % 10) as u32, 10).unwrap_or('?');
        }
        let mut out = String::new();
        for row in grid {
            out.extend(row);
            out.push('\n');
        }
        out
    }
}

/// Reward for one agent-step from its event flags. Kept as a free function
/// so tests can recompute the identical expression from logged events.
pub fn reward_for<S: Scalar>(events: &AgentEvents, rewards: &RewardConfig) -> S {
    let mut r = S::zero();
    if events.assigned {
        r += S::of(rewards.r_assign);
    }
    if events.picked {
        r += S::of(rewards.r_pick);
    }
    if events.delivered {
        r += S::of(rewards.r_drop);
    }
    if events.unassigned {
        r += S::of(rewards.r_unassigned);
    }
    r
}

/// Nearest-open-task policy: claim candidate 1 when any candidate is open,
/// otherwise skip. Bound agents skip.
pub fn heuristic_action<S: Scalar>(obs: &Observation<S>, bound: bool, k: usize) -> usize {
    if bound || !obs.mask.iter().any(|&m| m) {
        k + 1
    } else {
        1
    }
}

/// Roll episodes with the nearest-task policy and record every transition.
pub fn collect_heuristic_dataset<S: Scalar>(
    config: &EnvConfig,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryBuffer<S>> {
    if episodes < 1 || steps < 1 {
        return Err(Error::config("need at least one episode and one step"));
    }
    let mut cfg = config.clone();
    cfg.episode_len = steps;
    let mut buffer = TrajectoryBuffer::new(cfg.obs_dim(), cfg.k_candidates);
    for ep in 0..episodes {
        let (mut env, mut obs) = WarehouseEnv::<S>::reset(seed.wrapping_add(ep as u64), &cfg)?;
        let mut bound = vec![false; cfg.n_agents];
        for t in 0..steps {
            let actions: Vec<usize> = obs
                .iter()
                .zip(&bound)
                .map(|(o, &b)| heuristic_action(o, b, cfg.k_candidates))
                .collect();
            let result = env.step(&actions)?;
            for i in 0..cfg.n_agents {
                buffer.push(StepRecord {
                    episode: ep as u32,
                    t: t as u32,
                    agent: i as u32,
                    features: obs[i].features.clone(),
                    mask: obs[i].mask.clone(),
                    action: actions[i],
                    reward: result.rewards[i],
                    done: result.done,
                    label: obs[i].label,
                    unassigned: result.events[i].unassigned,
                    delivered: result.events[i].delivered,
                });
                bound[i] = !result.events[i].unassigned && !result.events[i].delivered;
            }
            obs = result.observations;
        }
    }
    Ok(buffer)
}

/// Episode-level throughput KPIs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Kpis {
    /// Mean deliveries per episode.
    pub deliveries_per_episode: f64,
    /// Percentage of agent-steps spent without a bound task.
    pub unassigned_pct: f64,
}

/// KPIs over a recorded trajectory buffer.
pub fn episode_kpis<S: Scalar>(buffer: &TrajectoryBuffer<S>) -> Kpis {
    let records = buffer.records();
    if records.is_empty() {
        return Kpis::default();
    }
    let episodes = records.iter().map(|r| r.episode).max().unwrap() as f64 + 1.0;
    let deliveries = records.iter().filter(|r| r.delivered).count() as f64;
    let idle = records.iter().filter(|r| r.unassigned).count() as f64;
    Kpis {
        deliveries_per_episode: deliveries / episodes,
        unassigned_pct: 100.0 * idle / records.len() as f64,
    }
}
