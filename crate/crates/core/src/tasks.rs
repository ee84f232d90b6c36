//! Synthetic multi-task continuous control: point-mass analogues of
//! direction-following, velocity-tracking and goal-reaching families.
//!
//! Goal parameters never enter the observation, so a policy can only tell
//! tasks apart from its prompt and its own history.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::hash_keys;

pub const DT: f64 = 0.1;
pub const MAX_SPEED_DIR: f64 = 2.0;
pub const MAX_STATE_DIM: usize = 4;
pub const MAX_ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PointDir,
    PointVel,
    PointReach,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::PointDir, TaskFamily::PointVel, TaskFamily::PointReach];

    pub fn dims(self) -> (usize, usize) {
        match self {
            TaskFamily::PointDir | TaskFamily::PointReach => (4, 2),
            TaskFamily::PointVel => (2, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParam {
    GoalAngle { theta: f64 },
    TargetVelocity { v: f64 },
    GoalPosition { x: f64, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRange {
    pub r_min: f64,
    pub r_max: f64,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family: TaskFamily,
    pub parameter: TaskParam,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_len: usize,
    pub discount: f64,
    pub score_range: Option<ScoreRange>,
}

impl TaskSpec {
    pub fn new(task_id: usize, parameter: TaskParam, episode_len: usize) -> Self {
        let family = match parameter {
            TaskParam::GoalAngle { .. } => TaskFamily::PointDir,
            TaskParam::TargetVelocity { .. } => TaskFamily::PointVel,
            TaskParam::GoalPosition { .. } => TaskFamily::PointReach,
        };
        let (state_dim, action_dim) = family.dims();
        Self {
            task_id,
            family,
            parameter,
            state_dim,
            action_dim,
            episode_len,
            discount: 0.99,
            score_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim > MAX_STATE_DIM || self.action_dim > MAX_ACTION_DIM {
            return Err(Error::InvalidArgument(format!(
                "task {} dims ({}, {}) exceed ({MAX_STATE_DIM}, {MAX_ACTION_DIM})",
                self.task_id, self.state_dim, self.action_dim
            )));
        }
        if let Some(r) = &self.score_range {
            if !(r.r_min < r.r_max) {
                return Err(Error::InvalidArgument(format!(
                    "task {} score range [{}, {}] is empty",
                    self.task_id, r.r_min, r.r_max
                )));
            }
        }
        Ok(())
    }
}

/// Proportional gains of the scripted behaviour controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub dir_kv: f64,
    pub vel_kv: f64,
    pub reach_kp: f64,
    pub reach_kd: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            dir_kv: 5.0,
            vel_kv: 5.0,
            reach_kp: 3.0,
            reach_kd: 3.0,
        }
    }
}

/// Linear annealing of behaviour-noise std across a task's trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub start_std: f64,
    pub end_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            start_std: 1.0,
            end_std: 0.05,
        }
    }
}

impl NoiseSchedule {
    pub fn std_for(&self, index: usize, n: usize) -> f64 {
        if n <= 1 {
            return self.start_std;
        }
        self.start_std + (self.end_std - self.start_std) * index as f64 / (n - 1) as f64
    }
}

/// One offline episode (or a window of one). Row-major `[T, dim]` buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub rtg: Vec<f32>,
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f32 {
        self.rtg.first().copied().unwrap_or(0.0)
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Steps `[start, start + len)` as a new trajectory (rtg values are kept,
    /// not recomputed).
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        let end = start + len;
        Trajectory {
            task_id: self.task_id,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[start * self.state_dim..end * self.state_dim].to_vec(),
            actions: self.actions[start * self.action_dim..end * self.action_dim].to_vec(),
            rewards: self.rewards[start..end].to_vec(),
            rtg: self.rtg[start..end].to_vec(),
            timesteps: self.timesteps[start..end].to_vec(),
        }
    }

    pub fn empty(task_id: usize, state_dim: usize, action_dim: usize) -> Trajectory {
        Trajectory {
            task_id,
            state_dim,
            action_dim,
            states: vec![],
            actions: vec![],
            rewards: vec![],
            rtg: vec![],
            timesteps: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub valid_dims: Vec<bool>,
}

/// Suffix sums of `rewards`, accumulated from the last step backwards.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0f32;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

fn clip(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Deterministic transition of the point-mass dynamics.
pub fn step_env(task: &TaskSpec, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
    if state.len() != task.state_dim || action.len() != task.action_dim {
        return Err(Error::shape(
            "step_env",
            format!(
                "task {} expects state {} / action {}, got {} / {}",
                task.task_id,
                task.state_dim,
                task.action_dim,
                state.len(),
                action.len()
            ),
        ));
    }
    if !state.iter().chain(action).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("step_env input for task {}", task.task_id)));
    }
    let a: Vec<f64> = action.iter().map(|&v| clip(v)).collect();
    match task.parameter {
        TaskParam::GoalAngle { theta } => {
            let (px, py, vx, vy) = (state[0], state[1], state[2], state[3]);
            let (mut nvx, mut nvy) = (vx + a[0] * DT, vy + a[1] * DT);
            let speed = (nvx * nvx + nvy * nvy).sqrt();
            if speed > MAX_SPEED_DIR {
                nvx *= MAX_SPEED_DIR / speed;
                nvy *= MAX_SPEED_DIR / speed;
            }
            let reward = nvx * theta.cos() + nvy * theta.sin();
            Ok((vec![px + vx * DT, py + vy * DT, nvx, nvy], reward))
        }
        TaskParam::TargetVelocity { v: target } => {
            let (p, v) = (state[0], state[1]);
            let nv = v + a[0] * DT;
            Ok((vec![p + v * DT, nv], -(nv - target).abs()))
        }
        TaskParam::GoalPosition { x, y } => {
            let (px, py, vx, vy) = (state[0], state[1], state[2], state[3]);
            let (npx, npy) = (px + vx * DT, py + vy * DT);
            let reward = -((npx - x).powi(2) + (npy - y).powi(2)).sqrt();
            Ok((vec![npx, npy, vx + a[0] * DT, vy + a[1] * DT], reward))
        }
    }
}

/// Start state: positions uniform in `[-0.1, 0.1]`, zero velocity.
pub fn reset(task: &TaskSpec, rng: &mut impl Rng) -> Vec<f64> {
    match task.family {
        TaskFamily::PointVel => vec![rng.random_range(-0.1..0.1), 0.0],
        _ => vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0, 0.0],
    }
}

/// Noise-free scripted controller toward the task objective.
pub fn controller_action(task: &TaskSpec, gains: &ControllerGains, state: &[f64]) -> Vec<f64> {
    match task.parameter {
        TaskParam::GoalAngle { theta } => {
            let (gx, gy) = (MAX_SPEED_DIR * theta.cos(), MAX_SPEED_DIR * theta.sin());
            vec![
                clip(gains.dir_kv * (gx - state[2])),
                clip(gains.dir_kv * (gy - state[3])),
            ]
        }
        TaskParam::TargetVelocity { v } => vec![clip(gains.vel_kv * (v - state[1]))],
        TaskParam::GoalPosition { x, y } => vec![
            clip(gains.reach_kp * (x - state[0]) - gains.reach_kd * state[2]),
            clip(gains.reach_kp * (y - state[1]) - gains.reach_kd * state[3]),
        ],
    }
}

fn rollout_with(
    task: &TaskSpec,
    seed_keys: &[u64],
    mut policy: impl FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(seed_keys));
    let mut state = reset(task, &mut rng);
    let mut traj = Trajectory::empty(task.task_id, task.state_dim, task.action_dim);
    for t in 0..task.episode_len {
        let action: Vec<f64> = policy(&state, &mut rng).into_iter().map(clip).collect();
        let (next, reward) = step_env(task, &state, &action)?;
        traj.states.extend(state.iter().map(|&v| v as f32));
        traj.actions.extend(action.iter().map(|&v| v as f32));
        traj.rewards.push(reward as f32);
        traj.timesteps.push(t);
        state = next;
    }
    traj.rtg = compute_rtg(&traj.rewards);
    Ok(traj)
}

/// Mixed-quality offline data: the scripted controller plus Gaussian action
/// noise whose std anneals linearly from the first to the last trajectory.
pub fn generate_dataset(
    task: &TaskSpec,
    n_traj: usize,
    schedule: &NoiseSchedule,
    gains: &ControllerGains,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    (0..n_traj)
        .map(|i| {
            let std = schedule.std_for(i, n_traj);
            let noise = Normal::new(0.0, std.max(1e-12)).expect("positive std");
            rollout_with(task, &[seed, task.task_id as u64, i as u64], |s, rng| {
                controller_action(task, gains, s)
                    .into_iter()
                    .map(|a| a + noise.sample(rng))
                    .collect()
            })
        })
        .collect()
}

pub const RANGE_EPISODES: usize = 100;
const RANGE_SEED: u64 = 0x5eed_0f_5c07e;

/// Per-task `(R_min, R_max)`: mean return of a uniform-random policy and of
/// the noise-free controller over [`RANGE_EPISODES`] episodes each.
pub fn score_range_oracle(task: &TaskSpec, gains: &ControllerGains) -> Result<ScoreRange> {
    let mut r_max = 0.0;
    let mut r_min = 0.0;
    for e in 0..RANGE_EPISODES as u64 {
        let expert = rollout_with(task, &[RANGE_SEED, task.task_id as u64, e, 1], |s, _| {
            controller_action(task, gains, s)
        })?;
        let random = rollout_with(task, &[RANGE_SEED, task.task_id as u64, e, 2], |_, rng| {
            (0..task.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        })?;
        r_max += expert.episode_return() as f64;
        r_min += random.episode_return() as f64;
    }
    let n = RANGE_EPISODES as f64;
    Ok(ScoreRange {
        r_min: r_min / n,
        r_max: r_max / n,
        provenance: format!(
            "r_min: mean return of uniform-random actions over {RANGE_EPISODES} episodes; \
             r_max: mean return of the noise-free scripted controller over {RANGE_EPISODES} episodes"
        ),
    })
}

/// `100 (R - R_min) / (R_max - R_min)` clipped to `[0, 100]`.
pub fn normalized_score(task: &TaskSpec, episode_return: f64) -> Result<f64> {
    let r = task
        .score_range
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("task {} has no score range", task.task_id)))?;
    if r.r_min == r.r_max {
        return Err(Error::InvalidArgument(format!(
            "task {} has a degenerate score range",
            task.task_id
        )));
    }
    Ok((100.0 * (episode_return - r.r_min) / (r.r_max - r.r_min)).clamp(0.0, 100.0))
}

/// Zero-pad states and actions on the right to the given widths.
pub fn pad_and_mask(traj: &Trajectory, max_state_dim: usize, max_action_dim: usize) -> Result<(Trajectory, ActionMask)> {
    if traj.state_dim > max_state_dim || traj.action_dim > max_action_dim {
        return Err(Error::InvalidArgument(format!(
            "trajectory dims ({}, {}) exceed ({max_state_dim}, {max_action_dim})",
            traj.state_dim, traj.action_dim
        )));
    }
    let pad = |src: &[f32], from: usize, to: usize| -> Vec<f32> {
        if from == 0 {
            return vec![];
        }
        src.chunks(from)
            .flat_map(|row| row.iter().copied().chain(std::iter::repeat_n(0.0, to - from)))
            .collect()
    };
    let padded = Trajectory {
        task_id: traj.task_id,
        state_dim: max_state_dim,
        action_dim: max_action_dim,
        states: pad(&traj.states, traj.state_dim, max_state_dim),
        actions: pad(&traj.actions, traj.action_dim, max_action_dim),
        rewards: traj.rewards.clone(),
        rtg: traj.rtg.clone(),
        timesteps: traj.timesteps.clone(),
    };
    let mask = ActionMask {
        valid_dims: (0..max_action_dim).map(|d| d < traj.action_dim).collect(),
    };
    Ok((padded, mask))
}

/// Indices of the top-return quartile (at least one), best first; ties go
/// to the lower index.
pub fn top_quartile(dataset: &[Trajectory]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        dataset[b]
            .episode_return()
            .total_cmp(&dataset[a].episode_return())
            .then(a.cmp(&b))
    });
    order.truncate(dataset.len().div_ceil(4).max(1));
    order
}

/// A contiguous `kstar`-step window from a top-quartile trajectory.
pub fn sample_prompt_with(dataset: &[Trajectory], kstar: usize, rng: &mut impl Rng) -> Result<Trajectory> {
    let first = dataset.first().ok_or(Error::EmptyDataset(usize::MAX))?;
    let pool = top_quartile(dataset);
    let pick = &dataset[pool[rng.random_range(0..pool.len())]];
    if kstar > pick.len() {
        return Err(Error::InvalidArgument(format!(
            "prompt length {kstar} exceeds trajectory length {}",
            pick.len()
        )));
    }
    if kstar == 0 {
        return Ok(Trajectory::empty(first.task_id, first.state_dim, first.action_dim));
    }
    let start = rng.random_range(0..=pick.len() - kstar);
    Ok(pick.window(start, kstar))
}

pub fn sample_prompt(dataset: &[Trajectory], kstar: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prompt_with(dataset, kstar, &mut rng)
}

/// Tasks evenly spread over each family's parameter range.
pub fn build_suite(n_dir: usize, n_vel: usize, n_reach: usize, episode_len: usize) -> Vec<TaskSpec> {
    let mut tasks = Vec::new();
    for i in 0..n_dir {
        let theta = 2.0 * PI * i as f64 / n_dir as f64;
        tasks.push(TaskParam::GoalAngle { theta });
    }
    for i in 0..n_vel {
        let v = if n_vel == 1 { 1.6 } else { 0.2 + 2.8 * i as f64 / (n_vel - 1) as f64 };
        tasks.push(TaskParam::TargetVelocity { v });
    }
    for i in 0..n_reach {
        let a = 2.0 * PI * i as f64 / n_reach as f64 + 0.3;
        let r = if i % 2 == 0 { 0.8 } else { 0.5 };
        tasks.push(TaskParam::GoalPosition { x: r * a.cos(), y: r * a.sin() });
    }
    tasks
        .into_iter()
        .enumerate()
        .map(|(id, p)| TaskSpec::new(id, p, episode_len))
        .collect()
}

/// Named task suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// 6 direction, 5 velocity, 5 reaching tasks.
    Default16,
    /// 18 / 15 / 15.
    Dense48,
    /// Three clusters of four direction tasks, headings within a few mrad of
    /// 0, pi/2 and pi. The 0 and pi families reward opposite actions.
    Planted12,
    /// Two clusters of direction tasks with opposite headings.
    PlantedConflict,
}

impl SuiteKind {
    pub fn tasks(self, episode_len: usize) -> Vec<TaskSpec> {
        match self {
            SuiteKind::Default16 => build_suite(6, 5, 5, episode_len),
            SuiteKind::Dense48 => build_suite(18, 15, 15, episode_len),
            SuiteKind::Planted12 => planted(&[0.0, PI / 2.0, PI], 4, episode_len),
            SuiteKind::PlantedConflict => planted(&[0.0, PI], 4, episode_len),
        }
    }

    /// Planted cluster label per task (family index for the regular suites).
    pub fn labels(self, tasks: &[TaskSpec]) -> Vec<usize> {
        match self {
            SuiteKind::Planted12 | SuiteKind::PlantedConflict => tasks.iter().map(|t| t.task_id / 4).collect(),
            _ => tasks
                .iter()
                .map(|t| TaskFamily::ALL.iter().position(|&f| f == t.family).unwrap())
                .collect(),
        }
    }
}

fn planted(centres: &[f64], per_cluster: usize, episode_len: usize) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for &c in centres {
        for j in 0..per_cluster {
            let offset = 0.002 * (j as f64 - (per_cluster as f64 - 1.0) / 2.0);
            let id = out.len();
            out.push(TaskSpec::new(id, TaskParam::GoalAngle { theta: c + offset }, episode_len));
        }
    }
    out
}

/// Per-family counts of a task list.
pub fn family_counts(tasks: &[TaskSpec]) -> BTreeMap<TaskFamily, usize> {
    let mut m = BTreeMap::new();
    for t in tasks {
        *m.entry(t.family).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(p: TaskParam) -> TaskSpec {
        TaskSpec::new(0, p, 64)
    }

    #[test]
    fn rtg_is_suffix_sum() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(compute_rtg(&[-1.0]), vec![-1.0]);
    }

    #[test]
    fn exact_velocity_tracking_has_zero_reward() {
        let t = task(TaskParam::TargetVelocity { v: 1.3 });
        let (_, r) = step_env(&t, &[0.0, 1.3], &[0.0]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn direction_reward_is_projected_velocity() {
        let t = task(TaskParam::GoalAngle { theta: 0.0 });
        let (next, r) = step_env(&t, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(next, vec![0.1, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn direction_speed_is_clipped() {
        let t = task(TaskParam::GoalAngle { theta: 0.0 });
        let (next, r) = step_env(&t, &[0.0, 0.0, 2.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((next[2] - 2.0).abs() < 1e-12);
        assert!((r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reaching_at_goal_is_zero() {
        let t = task(TaskParam::GoalPosition { x: 0.3, y: -0.2 });
        let (_, r) = step_env(&t, &[0.3, -0.2, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn actions_are_clipped_and_inputs_checked() {
        let t = task(TaskParam::TargetVelocity { v: 0.0 });
        let (a, _) = step_env(&t, &[0.0, 0.0], &[5.0]).unwrap();
        let (b, _) = step_env(&t, &[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(step_env(&t, &[f64::NAN, 0.0], &[0.0]), Err(Error::NonFinite(_))));
        assert!(step_env(&t, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn dataset_rtg_and_determinism() {
        let t = task(TaskParam::GoalPosition { x: 0.5, y: 0.5 });
        let a = generate_dataset(&t, 5, &NoiseSchedule::default(), &ControllerGains::default(), 3).unwrap();
        let b = generate_dataset(&t, 5, &NoiseSchedule::default(), &ControllerGains::default(), 3).unwrap();
        assert_eq!(a, b);
        for traj in &a {
            let total: f32 = traj.rewards.iter().rev().fold(0.0, |acc, &r| acc + r);
            assert_eq!(traj.rtg[0], total);
        }
        assert!(generate_dataset(&t, 0, &NoiseSchedule::default(), &ControllerGains::default(), 3).is_err());
    }

    #[test]
    fn annealed_noise_improves_reaching_returns() {
        let t = task(TaskParam::GoalPosition { x: -0.6, y: 0.4 });
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..10 {
            let d = generate_dataset(&t, 8, &NoiseSchedule::default(), &ControllerGains::default(), seed).unwrap();
            first += d[0].episode_return();
            last += d[7].episode_return();
        }
        assert!(last >= first, "last {last} first {first}");
    }

    #[test]
    fn normalized_score_endpoints_and_clipping() {
        let mut t = task(TaskParam::TargetVelocity { v: 1.0 });
        assert!(normalized_score(&t, 0.0).is_err());
        t.score_range = Some(ScoreRange {
            r_min: -10.0,
            r_max: 30.0,
            provenance: String::new(),
        });
        assert_eq!(normalized_score(&t, -10.0).unwrap(), 0.0);
        assert_eq!(normalized_score(&t, 30.0).unwrap(), 100.0);
        assert_eq!(normalized_score(&t, 10.0).unwrap(), 50.0);
        assert_eq!(normalized_score(&t, 99.0).unwrap(), 100.0);
        assert_eq!(normalized_score(&t, -99.0).unwrap(), 0.0);
        t.score_range.as_mut().unwrap().r_max = -10.0;
        assert!(normalized_score(&t, 0.0).is_err());
    }

    #[test]
    fn padding_and_masks() {
        let t = task(TaskParam::TargetVelocity { v: 1.0 });
        let d = generate_dataset(&t, 1, &NoiseSchedule::default(), &ControllerGains::default(), 0).unwrap();
        let (p, m) = pad_and_mask(&d[0], 4, 2).unwrap();
        assert_eq!(m.valid_dims, vec![true, false]);
        assert_eq!(p.state(3), &[d[0].state(3)[0], d[0].state(3)[1], 0.0, 0.0]);
        assert_eq!(p.action(5)[1], 0.0);
        let (same, m2) = pad_and_mask(&p, 4, 2).unwrap();
        assert_eq!(same, p);
        assert_eq!(m2.valid_dims, vec![true, true]);
        assert!(pad_and_mask(&p, 3, 2).is_err());
    }

    #[test]
    fn prompts_come_from_top_quartile() {
        let t = task(TaskParam::GoalPosition { x: 0.2, y: 0.7 });
        let d = generate_dataset(&t, 12, &NoiseSchedule::default(), &ControllerGains::default(), 1).unwrap();
        let mut returns: Vec<f32> = d.iter().map(|x| x.episode_return()).collect();
        returns.sort_by(f32::total_cmp);
        let median = returns[returns.len() / 2];
        for seed in 0..20 {
            let p = sample_prompt(&d, 5, seed).unwrap();
            assert_eq!(p.len(), 5);
            let src = d
                .iter()
                .find(|tr| tr.states.windows(p.states.len()).any(|w| w == p.states.as_slice()))
                .unwrap();
            assert!(src.episode_return() >= median);
        }
        assert_eq!(sample_prompt(&d, 5, 7).unwrap(), sample_prompt(&d, 5, 7).unwrap());
        assert_eq!(sample_prompt(&d, 64, 7).unwrap().len(), 64);
        assert!(sample_prompt(&d, 65, 7).is_err());
        assert!(matches!(sample_prompt(&[], 5, 7), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn default_suite_shape() {
        let s = SuiteKind::Default16.tasks(64);
        assert_eq!(s.len(), 16);
        let c = family_counts(&s);
        assert_eq!(c[&TaskFamily::PointDir], 6);
        assert_eq!(c[&TaskFamily::PointVel], 5);
        assert_eq!(c[&TaskFamily::PointReach], 5);
        assert_eq!(SuiteKind::Dense48.tasks(64).len(), 48);
        for t in &s {
            t.validate().unwrap();
            if let TaskParam::GoalPosition { x, y } = t.parameter {
                assert!(x.abs() <= 1.0 && y.abs() <= 1.0);
            }
        }
        assert_eq!(SuiteKind::Planted12.labels(&SuiteKind::Planted12.tasks(64)), vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
