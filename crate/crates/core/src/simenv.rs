//! Planar mobile manipulator: a unicycle base carrying a two-link arm and a
//! gripper, with a disk obstacle that makes the approach bimodal.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seeds::{child_rng, derive_seed, Rng};
use crate::{Error, Result};

pub const OBS_DIM: usize = 13;
pub const ACTION_DIM: usize = 5;
pub const NUM_TASKS: usize = 3;

const SIDE_STREAM: u64 = 0x51de;
const DISTURBANCE_STREAM: u64 = 0xd157;
const DEMO_NOISE_STREAM: u64 = 0xde70;
/// Execution noise used when recording demonstrations.
pub const DEMO_NOISE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ReachLeftRight,
    PickDetour,
    Place,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::ReachLeftRight, Task::PickDetour, Task::Place];

    pub fn index(self) -> usize {
        match self {
            Task::ReachLeftRight => 0,
            Task::PickDetour => 1,
            Task::Place => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::ReachLeftRight => "reach_left_right",
            Task::PickDetour => "pick_detour",
            Task::Place => "place",
        }
    }

    pub fn one_hot(self) -> [f64; NUM_TASKS] {
        let mut v = [0.0; NUM_TASKS];
        v[self.index()] = 1.0;
        v
    }

    fn obstacle_on_line(self) -> bool {
        !matches!(self, Task::Place)
    }

    fn gripper_goal_met(self, command: f64) -> bool {
        match self {
            Task::ReachLeftRight => true,
            Task::PickDetour => command <= -0.5,
            Task::Place => command >= 0.5,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Which way the expert passes the obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Left,
    Right,
    Auto,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Left => "left",
            Mode::Right => "right",
            Mode::Auto => "auto",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Mode::Left | Mode::Auto => 1.0,
            Mode::Right => -1.0,
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Mode::Left),
            "right" => Ok(Mode::Right),
            "auto" => Ok(Mode::Auto),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    #[default]
    None,
    /// Constant world-frame base velocity with a per-episode heading.
    Drift,
    /// I.i.d. Gaussian base velocity noise every step.
    Jitter,
}

impl FromStr for DisturbanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "drift" => Ok(Self::Drift),
            "jitter" => Ok(Self::Jitter),
            _ => Err(Error::Config(format!("unknown disturbance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceConfig {
    pub kind: DisturbanceKind,
    /// m/s for drift, per-axis std in m/s for jitter.
    pub magnitude: f64,
    pub seed: u64,
}

impl DisturbanceConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn drift(magnitude: f64, seed: u64) -> Self {
        Self { kind: DisturbanceKind::Drift, magnitude, seed }
    }

    pub fn jitter(magnitude: f64, seed: u64) -> Self {
        Self { kind: DisturbanceKind::Jitter, magnitude, seed }
    }
}

/// Physical constants and episode limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub workspace: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub max_joint_speed: f64,
    pub gripper_rate: f64,
    pub link1: f64,
    pub link2: f64,
    pub base_radius: f64,
    pub success_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_steps: 200,
            workspace: 5.0,
            max_linear_speed: 0.5,
            max_angular_speed: 1.5,
            max_joint_speed: 1.5,
            gripper_rate: 0.25,
            link1: 0.35,
            link2: 0.3,
            base_radius: 0.15,
            success_radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub task: Task,
    pub seed: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub q1: f64,
    pub q2: f64,
    pub gripper: f64,
    pub target: [f64; 2],
    pub obstacle: Obstacle,
    pub step: usize,
    drift_heading: f64,
    disturbance_rng: Option<Rng>,
}

impl PartialEq for EnvState {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task
            && self.seed == other.seed
            && self.physical() == other.physical()
            && self.target == other.target
            && self.obstacle == other.obstacle
            && self.step == other.step
    }
}

impl EnvState {
    /// Base pose, joints and gripper.
    pub fn physical(&self) -> [f64; 6] {
        [self.x, self.y, self.theta, self.q1, self.q2, self.gripper]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub done: bool,
    pub success: bool,
    pub collision: bool,
}

fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn clamp1(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Distance from point `p` to segment `a`–`b`.
fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((a[0] + t * ab[0] - p[0]).powi(2) + (a[1] + t * ab[1] - p[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Default)]
pub struct Env {
    pub config: EnvConfig,
}

impl Env {
    pub fn new(config: EnvConfig) -> Self {
        Self { config }
    }

    /// Deterministic initial state for `(task, seed)`.
    pub fn reset(&self, task: Task, seed: u64, disturbance: &DisturbanceConfig) -> (EnvState, Vec<f64>) {
        let mut rng = child_rng(seed, 0);
        let x = rng.random_range(-0.2..=0.2);
        let y = rng.random_range(-0.2..=0.2);
        let bearing = rng.random_range(-0.15..=0.15);
        let dist = rng.random_range(1.8..=2.5);
        let theta = bearing + rng.random_range(-0.1..=0.1);
        let u = [f64::cos(bearing), f64::sin(bearing)];
        let n = [-u[1], u[0]];
        let along = rng.random_range(0.95..=1.15);
        let radius = rng.random_range(0.25..=0.35);
        let lateral = if task.obstacle_on_line() {
            rng.random_range(-0.05..=0.05)
        } else {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            side * rng.random_range(0.8..=1.0)
        };
        let obstacle = Obstacle {
            x: x + along * u[0] + lateral * n[0],
            y: y + along * u[1] + lateral * n[1],
            radius,
        };
        let target = [x + dist * u[0], y + dist * u[1]];
        let q1 = rng.random_range(-INIT_Q1_SPREAD..=INIT_Q1_SPREAD);
        let gripper = match task {
            Task::PickDetour => 1.0,
            Task::Place => 0.0,
            Task::ReachLeftRight => 0.5,
        };
        let (drift_heading, disturbance_rng) = match disturbance.kind {
            DisturbanceKind::None => (0.0, None),
            _ => {
                let mut drng = child_rng(derive_seed(disturbance.seed, seed), DISTURBANCE_STREAM);
                let heading = drng.random_range(-PI..PI);
                (heading, Some(drng))
            }
        };
        let state = EnvState {
            task,
            seed,
            x,
            y,
            theta,
            q1,
            q2: 1.2,
            gripper,
            target,
            obstacle,
            step: 0,
            drift_heading,
            disturbance_rng,
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn end_effector(&self, s: &EnvState) -> [f64; 2] {
        let (l1, l2) = (self.config.link1, self.config.link2);
        let a1 = s.theta + s.q1;
        let a2 = a1 + s.q2;
        [s.x + l1 * a1.cos() + l2 * a2.cos(), s.y + l1 * a1.sin() + l2 * a2.sin()]
    }

    pub fn end_effector_error(&self, s: &EnvState) -> f64 {
        let ee = self.end_effector(s);
        ((ee[0] - s.target[0]).powi(2) + (ee[1] - s.target[1]).powi(2)).sqrt()
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f64> {
        let ee = self.end_effector(s);
        vec![
            s.x,
            s.y,
            s.theta,
            s.q1,
            s.q2,
            s.gripper,
            ee[0],
            ee[1],
            s.target[0] - ee[0],
            s.target[1] - ee[1],
            s.obstacle.x - s.x,
            s.obstacle.y - s.y,
            s.step as f64 / self.config.max_steps as f64,
        ]
    }

    pub fn in_collision(&self, s: &EnvState) -> bool {
        let d = ((s.x - s.obstacle.x).powi(2) + (s.y - s.obstacle.y).powi(2)).sqrt();
        d < s.obstacle.radius + self.config.base_radius
    }

    /// Advance one control step. Actions are clamped to [−1, 1] and scaled.
    pub fn step(&self, s: &mut EnvState, action: &[f64], disturbance: &DisturbanceConfig) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!("action has {} entries, expected {ACTION_DIM}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite action".into()));
        }
        let c = &self.config;
        let a: Vec<f64> = action.iter().map(|&v| clamp1(v)).collect();
        let v = a[0] * c.max_linear_speed;
        let w = a[1] * c.max_angular_speed;
        let (mut vx, mut vy) = (v * s.theta.cos(), v * s.theta.sin());
        match disturbance.kind {
            DisturbanceKind::None => {}
            DisturbanceKind::Drift => {
                vx += disturbance.magnitude * s.drift_heading.cos();
                vy += disturbance.magnitude * s.drift_heading.sin();
            }
            DisturbanceKind::Jitter => {
                let rng = s.disturbance_rng.as_mut().expect("jitter state seeded at reset");
                let noise: [f64; 2] = [rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)];
                vx += disturbance.magnitude * noise[0];
                vy += disturbance.magnitude * noise[1];
            }
        }
        s.x = (s.x + vx * c.dt).clamp(-c.workspace, c.workspace);
        s.y = (s.y + vy * c.dt).clamp(-c.workspace, c.workspace);
        s.theta = wrap_angle(s.theta + w * c.dt);
        s.q1 = (s.q1 + a[2] * c.max_joint_speed * c.dt).clamp(-PI, PI);
        s.q2 = (s.q2 + a[3] * c.max_joint_speed * c.dt).clamp(-PI, PI);
        s.gripper = (s.gripper + a[4] * c.gripper_rate).clamp(0.0, 1.0);
        s.step += 1;
        let collision = self.in_collision(s);
        let success = !collision
            && self.end_effector_error(s) <= c.success_radius
            && s.task.gripper_goal_met(a[4]);
        let done = collision || success || s.step >= c.max_steps;
        Ok(StepOutcome { observation: self.observe(s), done, success, collision })
    }

    /// Whether the straight segment from the base to the target passes within
    /// `margin` of the inflated obstacle.
    pub fn path_blocked(&self, s: &EnvState, margin: f64) -> bool {
        let d = point_segment_distance([s.obstacle.x, s.obstacle.y], [s.x, s.y], s.target);
        d < s.obstacle.radius + self.config.base_radius + margin
    }
}

/// Per-episode side for `Mode::Auto`: a fair coin keyed by the reset seed.
pub fn auto_side(seed: u64) -> Mode {
    if derive_seed(seed, SIDE_STREAM) & 1 == 0 {
        Mode::Left
    } else {
        Mode::Right
    }
}

const INIT_Q1_SPREAD: f64 = 0.1;
const BLOCK_MARGIN: f64 = 0.1;
const DETOUR_CLEARANCE: f64 = 0.3;
const STANDOFF: f64 = 0.45;
const TUCK_Q1: f64 = 0.8;
const REST_Q2: f64 = 1.2;
const GRIP_SWITCH_RADIUS: f64 = 0.15;

fn ik(env: &Env, s: &EnvState) -> (f64, f64) {
    let (l1, l2) = (env.config.link1, env.config.link2);
    let dx = s.target[0] - s.x;
    let dy = s.target[1] - s.y;
    let (sin, cos) = s.theta.sin_cos();
    let px = cos * dx + sin * dy;
    let py = -sin * dx + cos * dy;
    let r = (px * px + py * py).sqrt().clamp((l1 - l2).abs() + 1e-6, l1 + l2 - 1e-6);
    let c2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = py.atan2(px) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    (wrap_angle(q1), q2)
}

/// Scripted expert. Steers around the obstacle on the chosen side, stops at
/// a standoff from the target, reaches with the arm and actuates the gripper.
/// `Mode::Auto` resolves to the per-episode coin [`auto_side`].
pub fn expert_policy(env: &Env, s: &EnvState, mode: Mode) -> Vec<f64> {
    let mode = if mode == Mode::Auto { auto_side(s.seed) } else { mode };
    let side = mode.sign();
    let to_target = [s.target[0] - s.x, s.target[1] - s.y];
    let dist = (to_target[0].powi(2) + to_target[1].powi(2)).sqrt();
    let blocked = env.path_blocked(s, BLOCK_MARGIN);

    let (aim, speed, q_goal) = if blocked {
        let u = [to_target[0] / dist, to_target[1] / dist];
        let n = [-u[1], u[0]];
        let offset = s.obstacle.radius + env.config.base_radius + DETOUR_CLEARANCE;
        let aim = [s.obstacle.x + side * offset * n[0], s.obstacle.y + side * offset * n[1]];
        (aim, 1.0, (side * TUCK_Q1, REST_Q2))
    } else {
        let reach = env.config.link1 + env.config.link2;
        let q_goal = if dist < reach + 0.25 { ik(env, s) } else { (0.0, REST_Q2) };
        (s.target, ((dist - STANDOFF) / 0.3).clamp(0.0, 1.0), q_goal)
    };
    let bearing = (aim[1] - s.y).atan2(aim[0] - s.x);
    let heading_err = wrap_angle(bearing - s.theta);
    let v = speed * heading_err.cos().max(0.0);
    let omega = if blocked || dist > STANDOFF + 0.05 { clamp1(2.0 * heading_err) } else { 0.0 };
    let dq1 = clamp1(2.0 * wrap_angle(q_goal.0 - s.q1));
    let dq2 = clamp1(2.0 * wrap_angle(q_goal.1 - s.q2));
    let near = env.end_effector_error(s) < GRIP_SWITCH_RADIUS;
    let grip = match s.task {
        Task::ReachLeftRight => 0.0,
        Task::PickDetour => {
            if near {
                -1.0
            } else {
                1.0
            }
        }
        Task::Place => {
            if near {
                1.0
            } else {
                -1.0
            }
        }
    };
    vec![v, omega, dq1, dq2, grip]
}

/// One logged expert step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub task: Task,
    pub mode: Mode,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_obs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: usize,
    pub task: Task,
    pub mode: Mode,
    pub reset_seed: u64,
    pub observations: Vec<Vec<f64>>,
    /// Expert labels.
    pub actions: Vec<Vec<f64>>,
    /// Actions sent to the environment; empty when they equal the labels.
    pub executed: Vec<Vec<f64>>,
    pub final_obs: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    /// What was actually applied at every step.
    pub fn executed_actions(&self) -> &[Vec<f64>] {
        if self.executed.is_empty() {
            &self.actions
        } else {
            &self.executed
        }
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    /// Episodes attempted, including dropped failures.
    pub attempted: usize,
}

/// Fraction of attempts the expert may fail before generation is aborted.
pub const MAX_EXPERT_FAILURE: f64 = 0.05;

/// Roll out the expert from `(task, reset_seed)` with a fixed side.
pub fn expert_episode(env: &Env, task: Task, reset_seed: u64, mode: Mode) -> Result<(Episode, bool)> {
    perturbed_expert_episode(env, task, reset_seed, mode, 0.0)
}

/// Expert episode where the executed action carries Gaussian noise of scale
/// `noise` on the base and arm channels while the recorded label stays the
/// clean expert action, so demonstrations include recoveries from small
/// deviations.
pub fn perturbed_expert_episode(
    env: &Env,
    task: Task,
    reset_seed: u64,
    mode: Mode,
    noise: f64,
) -> Result<(Episode, bool)> {
    let none = DisturbanceConfig::none();
    let mut rng = child_rng(reset_seed, DEMO_NOISE_STREAM);
    let (mut s, mut obs) = env.reset(task, reset_seed, &none);
    let mut episode = Episode {
        index: 0,
        task,
        mode,
        reset_seed,
        observations: Vec::new(),
        actions: Vec::new(),
        executed: Vec::new(),
        final_obs: Vec::new(),
    };
    loop {
        let a = expert_policy(env, &s, mode);
        let mut executed = a.clone();
        if noise > 0.0 {
            for v in &mut executed[..ACTION_DIM - 1] {
                *v += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let out = env.step(&mut s, &executed, &none)?;
        episode.observations.push(std::mem::replace(&mut obs, out.observation));
        if noise > 0.0 {
            episode.executed.push(executed);
        }
        episode.actions.push(a);
        if out.done {
            episode.final_obs = obs;
            return Ok((episode, out.success));
        }
    }
}

/// Expert demonstrations in auto mode with exactly balanced sides: the
/// left/right assignment is a seeded shuffle of an alternating sequence.
pub fn generate_dataset(env: &Env, task: Task, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Config("episode count must be at least 1".into()));
    }
    let mut sides: Vec<Mode> = (0..episodes).map(|i| if i % 2 == 0 { Mode::Left } else { Mode::Right }).collect();
    sides.shuffle(&mut child_rng(seed, SIDE_STREAM));
    let mut out = Dataset { episodes: Vec::new(), attempted: episodes };
    for (i, &mode) in sides.iter().enumerate() {
        let (mut ep, success) = perturbed_expert_episode(env, task, derive_seed(seed, i as u64), mode, DEMO_NOISE)?;
        if success {
            ep.index = i;
            out.episodes.push(ep);
        }
    }
    let failures = episodes - out.episodes.len();
    if failures as f64 > MAX_EXPERT_FAILURE * episodes as f64 {
        return Err(Error::Generation(format!(
            "expert failed {failures} of {episodes} episodes on {task}"
        )));
    }
    Ok(out)
}

impl Dataset {
    pub fn records(&self) -> impl Iterator<Item = StepRecord> + '_ {
        self.episodes.iter().flat_map(|ep| {
            let last = ep.len() - 1;
            (0..ep.len()).map(move |t| StepRecord {
                episode: ep.index,
                step: t,
                task: ep.task,
                mode: ep.mode,
                obs: ep.observations[t].clone(),
                action: ep.actions[t].clone(),
                executed: ep.executed.get(t).cloned(),
                success: (t == last).then_some(true),
                reset_seed: (t == last).then_some(ep.reset_seed),
                final_obs: (t == last).then(|| ep.final_obs.clone()),
            })
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write JSON-lines; gzip-compressed when the path ends in `.gz`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::default());
            self.write_jsonl(&mut enc)?;
            enc.finish()?.flush()?;
        } else {
            self.write_jsonl(file)?;
        }
        Ok(())
    }

    /// Read JSON-lines, detecting gzip by its magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut text = Vec::new();
            GzDecoder::new(bytes.as_slice()).read_to_end(&mut text)?;
            Self::read_jsonl(text.as_slice())
        } else {
            Self::read_jsonl(bytes.as_slice())
        }
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut episodes: Vec<Episode> = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if rec.obs.len() != OBS_DIM || rec.action.len() != ACTION_DIM {
                return Err(Error::Shape(format!("line {}: wrong observation or action width", lineno + 1)));
            }
            let fresh = episodes.last().is_none_or(|e| e.index != rec.episode);
            if fresh {
                episodes.push(Episode {
                    index: rec.episode,
                    task: rec.task,
                    mode: rec.mode,
                    reset_seed: 0,
                    observations: Vec::new(),
                    actions: Vec::new(),
                    executed: Vec::new(),
                    final_obs: Vec::new(),
                });
            }
            let ep = episodes.last_mut().expect("pushed above");
            if rec.step != ep.actions.len() {
                return Err(Error::Data(format!("line {}: steps out of order", lineno + 1)));
            }
            ep.observations.push(rec.obs);
            if let Some(a) = rec.executed {
                if a.len() != ACTION_DIM || ep.executed.len() != ep.actions.len() {
                    return Err(Error::Data(format!("line {}: executed actions must be logged on every step", lineno + 1)));
                }
                ep.executed.push(a);
            }
            ep.actions.push(rec.action);
            if let Some(seed) = rec.reset_seed {
                ep.reset_seed = seed;
            }
            if let Some(obs) = rec.final_obs {
                ep.final_obs = obs;
            }
        }
        let attempted = episodes.last().map_or(0, |e| e.index + 1);
        Ok(Self { episodes, attempted })
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Fraction of episodes that pass on the left.
    pub fn left_fraction(&self) -> f64 {
        let left = self.episodes.iter().filter(|e| e.mode == Mode::Left).count();
        left as f64 / self.episodes.len().max(1) as f64
    }
}

/// Execute `actions` open-loop from `state`, stopping when the episode ends.
/// Returns the visited states (excluding the start) and the final outcome.
pub fn execute_open_loop(
    env: &Env,
    state: &EnvState,
    actions: &[Vec<f64>],
    disturbance: &DisturbanceConfig,
) -> Result<(Vec<EnvState>, Option<StepOutcome>)> {
    let mut s = state.clone();
    let mut visited = Vec::with_capacity(actions.len());
    let mut last = None;
    for a in actions {
        let out = env.step(&mut s, a, disturbance)?;
        visited.push(s.clone());
        let done = out.done;
        last = Some(out);
        if done {
            break;
        }
    }
    Ok((visited, last))
}
