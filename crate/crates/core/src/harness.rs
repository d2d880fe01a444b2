//! Closed-loop chunk execution, evaluation, ablation tables and exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::policy::{
    training_samples, FlopsEstimate, HeadKind, ObsNorm, Policy, PolicyConfig, ScoreInput, TrainConfig, TrainLogEntry,
};
use crate::residual::{apply_residual, collect_residual_dataset, CollectConfig, Residual, ResidualConfig};
use crate::schedule::{ActionChunk, ScheduleConfig};
use crate::seeds::{child_rng, derive_seed, Rng};
use crate::simenv::{execute_open_loop, expert_policy, Dataset, DisturbanceConfig, Env, EnvState, Mode, Task, ACTION_DIM};
use crate::vocabulary::{kmeans_fit, segment_chunks, AnchorVocabulary, NormStats};
use crate::{Error, Result};

const QUERY_STREAM: u64 = 0x9e4e;
const EVAL_DOMAIN: u64 = 0xe7a1_0000;
const VOCAB_STREAM: u64 = 0x70cb;
const INIT_STREAM: u64 = 0x1417;
const RESIDUAL_STREAM: u64 = 0x4e51;
/// Queries excluded from latency statistics at the start of an evaluation.
pub const LATENCY_WARMUP: usize = 10;

/// Output of one policy query.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Chunk to execute, normalized.
    pub nominal: ActionChunk,
    pub candidates: Vec<ActionChunk>,
    pub chosen: usize,
    pub reverse_steps: usize,
}

/// Anything that proposes an action chunk from the current state.
pub trait ChunkPolicy {
    fn horizon(&self) -> usize;

    /// Statistics mapping normalized chunks to environment actions.
    fn stats(&self) -> &NormStats;

    /// Learned policies only read `obs`; scripted ones may use `state`.
    fn plan(&self, env: &Env, state: &EnvState, obs: &[f64], rng: &mut Rng) -> Result<Plan>;

    fn flops(&self, _episode_steps: usize) -> Option<FlopsEstimate> {
        None
    }

    fn num_params(&self) -> usize {
        0
    }
}

impl ChunkPolicy for Policy {
    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn stats(&self) -> &NormStats {
        self.model.vocab().stats()
    }

    fn plan(&self, _env: &Env, state: &EnvState, obs: &[f64], rng: &mut Rng) -> Result<Plan> {
        let g = self.generate(obs, state.task, rng)?;
        Ok(Plan { nominal: g.chunk, candidates: g.candidates, chosen: g.chosen, reverse_steps: g.reverse_steps })
    }

    fn flops(&self, episode_steps: usize) -> Option<FlopsEstimate> {
        Some(self.model.flops_estimate(episode_steps))
    }

    fn num_params(&self) -> usize {
        self.model.num_params()
    }
}

fn unit_stats() -> NormStats {
    NormStats::from_bounds(vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM]).expect("valid bounds")
}

/// The scripted expert as a chunk policy: it plans by simulating itself
/// `horizon` steps ahead without disturbance.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub mode: Mode,
    pub horizon: usize,
    stats: NormStats,
}

impl ExpertPolicy {
    pub fn new(mode: Mode, horizon: usize) -> Self {
        Self { mode, horizon, stats: unit_stats() }
    }
}

impl ChunkPolicy for ExpertPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn plan(&self, env: &Env, state: &EnvState, _obs: &[f64], _rng: &mut Rng) -> Result<Plan> {
        let mut s = state.clone();
        let none = DisturbanceConfig::none();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let a = expert_policy(env, &s, self.mode);
            rows.push(a.clone());
            if env.step(&mut s, &a, &none)?.done {
                break;
            }
        }
        while rows.len() < self.horizon {
            rows.push(rows.last().expect("at least one step").clone());
        }
        let chunk = ActionChunk::from_rows(&rows)?;
        Ok(Plan { nominal: chunk.clone(), candidates: vec![chunk], chosen: 0, reverse_steps: 0 })
    }
}

/// Uniform random actions.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub horizon: usize,
    stats: NormStats,
}

impl RandomPolicy {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, stats: unit_stats() }
    }
}

impl ChunkPolicy for RandomPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn plan(&self, _env: &Env, _state: &EnvState, _obs: &[f64], rng: &mut Rng) -> Result<Plan> {
        let v = (0..self.horizon * ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let chunk = ActionChunk::new(self.horizon, ACTION_DIM, v)?;
        Ok(Plan { nominal: chunk.clone(), candidates: vec![chunk], chosen: 0, reverse_steps: 0 })
    }
}

/// What an observer sees right before each environment step.
#[derive(Debug)]
pub struct StepView<'a> {
    pub state: &'a EnvState,
    pub obs: &'a [f64],
    /// Nominal action, normalized and clamped to [−1, 1].
    pub nominal: &'a [f64],
    /// Action after residual correction, normalized.
    pub applied: &'a [f64],
    pub phase: usize,
    pub query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub trial: usize,
    pub episode: usize,
    pub reset_seed: u64,
    pub success: bool,
    pub collision: bool,
    pub steps: usize,
    pub queries: usize,
    pub final_ee_error: f64,
    pub flops_per_episode: Option<u64>,
    /// Wall time per policy query, seconds.
    #[serde(skip)]
    pub query_seconds: Vec<f64>,
    /// Policy plus residual wall time over the whole episode, seconds.
    #[serde(skip)]
    pub compute_seconds: f64,
}

/// One executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub query: usize,
    pub phase: usize,
    pub pose: [f64; 3],
    pub joints: [f64; 2],
    pub gripper: f64,
    pub action: Vec<f64>,
}

/// One policy query with its candidates rolled forward for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub index: usize,
    pub step: usize,
    pub chosen: usize,
    /// Predicted base positions per candidate, one per chunk step.
    pub candidate_paths: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub metrics: EpisodeMetrics,
    pub trajectory: Vec<TrajectoryStep>,
    pub queries: Vec<QueryRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutOptions {
    pub disturbance: DisturbanceConfig,
    pub record_candidates: bool,
}

/// Base positions reached by executing `chunk` open-loop from `state` with no
/// disturbance, padded with the last position if the episode ends early.
fn predicted_path(env: &Env, state: &EnvState, chunk: &ActionChunk, stats: &NormStats) -> Result<Vec<[f64; 2]>> {
    let none = DisturbanceConfig::none();
    let mut s = state.clone();
    let mut path = Vec::with_capacity(chunk.horizon());
    let mut done = false;
    for j in 0..chunk.horizon() {
        if !done {
            let a: Vec<f64> = chunk.step(j).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            done = env.step(&mut s, &stats.denormalize_action(&a), &none)?.done;
        }
        path.push([s.x, s.y]);
    }
    Ok(path)
}

fn check_compatible(policy: &dyn ChunkPolicy, residual: Option<&Residual>) -> Result<()> {
    if policy.stats().dim() != ACTION_DIM {
        return Err(Error::Shape(format!(
            "policy acts in {} dimensions, environment expects {ACTION_DIM}",
            policy.stats().dim()
        )));
    }
    if let Some(r) = residual {
        let rc = r.config();
        if rc.horizon != policy.horizon() || rc.action_dim != ACTION_DIM {
            return Err(Error::Shape(format!(
                "residual built for horizon {} and {} actions, policy has horizon {}",
                rc.horizon,
                rc.action_dim,
                policy.horizon()
            )));
        }
    }
    Ok(())
}

/// Receding-horizon execution: query a chunk, execute its steps (each
/// optionally corrected by the residual), replan when the chunk is spent.
/// Per-query randomness is derived from `reset_seed`.
pub fn rollout(
    env: &Env,
    policy: &dyn ChunkPolicy,
    residual: Option<&Residual>,
    task: Task,
    reset_seed: u64,
    opts: &RolloutOptions,
    mut observer: impl FnMut(&StepView<'_>),
) -> Result<Rollout> {
    check_compatible(policy, residual)?;
    let stats = policy.stats();
    let horizon = policy.horizon();
    let query_seed = derive_seed(reset_seed, QUERY_STREAM);
    let (mut state, mut obs) = env.reset(task, reset_seed, &opts.disturbance);
    let mut trajectory = Vec::new();
    let mut queries = Vec::new();
    let mut query_seconds = Vec::new();
    let mut compute = 0.0;
    let mut success = false;
    let mut collision = false;
    'episode: for q in 0.. {
        let mut rng = child_rng(query_seed, q as u64);
        let t0 = Instant::now();
        let plan = policy.plan(env, &state, &obs, &mut rng)?;
        let dt = t0.elapsed().as_secs_f64();
        query_seconds.push(dt);
        compute += dt;
        if plan.nominal.shape() != (horizon, ACTION_DIM) {
            return Err(Error::Shape("policy returned a chunk of the wrong shape".into()));
        }
        if opts.record_candidates {
            let candidate_paths = plan
                .candidates
                .iter()
                .map(|c| predicted_path(env, &state, c, stats))
                .collect::<Result<Vec<_>>>()?;
            queries.push(QueryRecord { index: q, step: state.step, chosen: plan.chosen, candidate_paths });
        }
        for j in 0..horizon {
            let nominal: Vec<f64> = plan.nominal.step(j).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let applied = match residual {
                Some(r) => {
                    let t0 = Instant::now();
                    let delta = r.predict(&obs, task, &nominal, j)?;
                    compute += t0.elapsed().as_secs_f64();
                    apply_residual(&nominal, &delta)?
                }
                None => nominal.clone(),
            };
            observer(&StepView { state: &state, obs: &obs, nominal: &nominal, applied: &applied, phase: j, query: q });
            let action = stats.denormalize_action(&applied);
            let out = env.step(&mut state, &action, &opts.disturbance)?;
            trajectory.push(TrajectoryStep {
                step: state.step,
                query: q,
                phase: j,
                pose: [state.x, state.y, state.theta],
                joints: [state.q1, state.q2],
                gripper: state.gripper,
                action,
            });
            obs = out.observation;
            if out.done {
                success = out.success;
                collision = out.collision;
                break 'episode;
            }
        }
    }
    let steps = state.step;
    Ok(Rollout {
        metrics: EpisodeMetrics {
            trial: 0,
            episode: 0,
            reset_seed,
            success,
            collision,
            steps,
            queries: query_seconds.len(),
            final_ee_error: env.end_effector_error(&state),
            flops_per_episode: policy.flops(env.config.max_steps).map(|f| f.per_episode),
            query_seconds,
            compute_seconds: compute,
        },
        trajectory,
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: Task,
    pub trials: usize,
    pub episodes: usize,
    pub seed: u64,
    pub disturbance: DisturbanceConfig,
    pub record_candidates: bool,
}

impl EvalConfig {
    pub fn new(task: Task, trials: usize, episodes: usize, seed: u64) -> Self {
        Self { task, trials, episodes, seed, disturbance: DisturbanceConfig::none(), record_candidates: false }
    }

    /// Reset seed of episode `e` in trial `t`; trials draw disjoint blocks.
    pub fn reset_seed(&self, trial: usize, episode: usize) -> u64 {
        derive_seed(derive_seed(self.seed ^ EVAL_DOMAIN, trial as u64), episode as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub episodes: Vec<EpisodeMetrics>,
    pub rollouts: Vec<Rollout>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        self.episodes.iter().filter(|e| e.success).count() as f64 / n
    }

    pub fn successes(&self) -> Vec<bool> {
        self.episodes.iter().map(|e| e.success).collect()
    }

    /// Median query latency over the evaluation, excluding the warm-up.
    pub fn median_query_seconds(&self) -> f64 {
        let mut all: Vec<f64> = self.episodes.iter().flat_map(|e| e.query_seconds.iter().copied()).collect();
        if all.len() > LATENCY_WARMUP {
            all.drain(..LATENCY_WARMUP);
        }
        median(&mut all)
    }

    /// Executed steps per second of policy compute.
    pub fn step_frequency(&self) -> f64 {
        let steps: usize = self.episodes.iter().map(|e| e.steps).sum();
        let secs: f64 = self.episodes.iter().map(|e| e.compute_seconds).sum();
        steps as f64 / secs.max(f64::MIN_POSITIVE)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run `trials × episodes` seeded episodes.
pub fn evaluate(env: &Env, policy: &dyn ChunkPolicy, residual: Option<&Residual>, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.episodes == 0 || cfg.trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial and one episode".into()));
    }
    check_compatible(policy, residual)?;
    let opts = RolloutOptions { disturbance: cfg.disturbance, record_candidates: cfg.record_candidates };
    let mut per_trial = Vec::with_capacity(cfg.trials);
    let mut episodes = Vec::with_capacity(cfg.trials * cfg.episodes);
    let mut rollouts = Vec::new();
    for trial in 0..cfg.trials {
        let mut wins = 0;
        for ep in 0..cfg.episodes {
            let mut r = rollout(env, policy, residual, cfg.task, cfg.reset_seed(trial, ep), &opts, |_| {})?;
            r.metrics.trial = trial;
            r.metrics.episode = ep;
            wins += r.metrics.success as usize;
            episodes.push(r.metrics.clone());
            if cfg.record_candidates {
                rollouts.push(r);
            }
        }
        per_trial.push(wins as f64 / cfg.episodes as f64);
    }
    let (mean, std) = mean_std(&per_trial);
    Ok(EvalReport { per_trial, mean, std, episodes, rollouts })
}

/// Per-episode CSV. The first line echoes the run configuration; timing is
/// deliberately absent so identical seeds give identical bytes.
pub fn write_episode_csv<W: Write>(mut w: W, config_echo: &str, episodes: &[EpisodeMetrics]) -> Result<()> {
    writeln!(w, "# config {config_echo}")?;
    writeln!(w, "trial,episode,reset_seed,success,collision,steps,queries,final_ee_error,flops_per_episode")?;
    for e in episodes {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            e.trial,
            e.episode,
            e.reset_seed,
            e.success as u8,
            e.collision as u8,
            e.steps,
            e.queries,
            e.final_ee_error,
            e.flops_per_episode.map_or(String::new(), |f| f.to_string())
        )?;
    }
    Ok(())
}

/// One-sided sign test on paired binary outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where only the first arm succeeded.
    pub first_only: usize,
    pub second_only: usize,
    /// P(X ≥ first_only) for X ~ Binomial(first_only + second_only, ½).
    pub p_value: f64,
}

pub fn sign_test(first: &[bool], second: &[bool]) -> Result<SignTest> {
    if first.len() != second.len() {
        return Err(Error::Shape("sign test needs paired outcomes".into()));
    }
    let first_only = first.iter().zip(second).filter(|(a, b)| **a && !**b).count();
    let second_only = first.iter().zip(second).filter(|(a, b)| !**a && **b).count();
    let n = first_only + second_only;
    let mut p = 0.0;
    let mut log_c = 0.0f64; // ln C(n, k), starting at k = 0
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= first_only {
            p += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    Ok(SignTest { first_only, second_only, p_value: p.min(1.0) })
}

/// A rendered comparison table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n|", self.columns.join(" | "));
        for _ in &self.columns {
            s.push_str("---|");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub head: HeadKind,
    pub reverse_steps: usize,
    pub success_rate: f64,
    pub episodes: usize,
    pub median_query_seconds: f64,
    pub query_hz: f64,
}

/// Success and latency at several reverse-step budgets for the from-noise
/// and anchored heads, over identical episode seeds.
pub fn ablation_denoise_budget(
    env: &Env,
    anchored: &Policy,
    from_noise: &Policy,
    anchored_budgets: &[usize],
    from_noise_budgets: &[usize],
    cfg: &EvalConfig,
) -> Result<(Vec<BudgetRow>, Vec<EvalReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let runs = from_noise_budgets
        .iter()
        .map(|&k| (from_noise, k))
        .chain(anchored_budgets.iter().map(|&k| (anchored, k)));
    for (policy, k) in runs {
        let p = policy.with_denoise_steps(Some(k))?;
        let report = evaluate(env, &p, None, cfg)?;
        let lat = report.median_query_seconds();
        rows.push(BudgetRow {
            head: p.config().head,
            reverse_steps: k,
            success_rate: report.success_rate(),
            episodes: report.episodes.len(),
            median_query_seconds: lat,
            query_hz: 1.0 / lat,
        });
        reports.push(report);
    }
    Ok((rows, reports))
}

pub fn budget_table(rows: &[BudgetRow]) -> Table {
    Table {
        columns: ["head", "reverse_steps", "success_rate", "episodes", "median_query_ms", "query_hz"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.head.to_string(),
                    r.reverse_steps.to_string(),
                    format!("{:.3}", r.success_rate),
                    r.episodes.to_string(),
                    format!("{:.3}", r.median_query_seconds * 1e3),
                    format!("{:.1}", r.query_hz),
                ]
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRow {
    pub head: HeadKind,
    pub horizon: usize,
    pub success_rate: f64,
    pub episodes: usize,
    pub encoder_flops_per_episode: u64,
    pub flops_per_episode: u64,
}

/// Success and analytic compute per (head, horizon).
pub fn ablation_chunk_sweep(env: &Env, heads: &[&Policy], cfg: &EvalConfig) -> Result<Vec<ChunkRow>> {
    heads
        .iter()
        .map(|p| {
            let report = evaluate(env, *p, None, cfg)?;
            let f = p.model.flops_estimate(env.config.max_steps);
            Ok(ChunkRow {
                head: p.config().head,
                horizon: p.config().horizon,
                success_rate: report.success_rate(),
                episodes: report.episodes.len(),
                encoder_flops_per_episode: f.encoder_per_episode,
                flops_per_episode: f.per_episode,
            })
        })
        .collect()
}

pub fn chunk_table(rows: &[ChunkRow]) -> Table {
    Table {
        columns: ["head", "horizon", "success_rate", "episodes", "encoder_flops_per_episode", "flops_per_episode"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.head.to_string(),
                    r.horizon.to_string(),
                    format!("{:.3}", r.success_rate),
                    r.episodes.to_string(),
                    r.encoder_flops_per_episode.to_string(),
                    r.flops_per_episode.to_string(),
                ]
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub residual: bool,
    pub success_rate: f64,
    pub episodes: usize,
    pub step_hz: f64,
    pub residual_params: usize,
    pub total_params: usize,
}

/// Paired evaluation of the frozen policy with and without the residual.
pub fn ablation_residual(
    env: &Env,
    policy: &Policy,
    residual: &Residual,
    cfg: &EvalConfig,
) -> Result<(Vec<ResidualRow>, SignTest)> {
    let without = evaluate(env, policy, None, cfg)?;
    let with = evaluate(env, policy, Some(residual), cfg)?;
    let base = ChunkPolicy::num_params(policy);
    let total = base + residual.num_params();
    let rows = vec![
        ResidualRow {
            residual: false,
            success_rate: without.success_rate(),
            episodes: without.episodes.len(),
            step_hz: without.step_frequency(),
            residual_params: 0,
            total_params: base,
        },
        ResidualRow {
            residual: true,
            success_rate: with.success_rate(),
            episodes: with.episodes.len(),
            step_hz: with.step_frequency(),
            residual_params: residual.num_params(),
            total_params: total,
        },
    ];
    let test = sign_test(&with.successes(), &without.successes())?;
    Ok((rows, test))
}

pub fn residual_table(rows: &[ResidualRow]) -> Table {
    Table {
        columns: ["residual", "success_rate", "episodes", "step_hz", "residual_params", "total_params"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.residual.to_string(),
                    format!("{:.3}", r.success_rate),
                    r.episodes.to_string(),
                    format!("{:.1}", r.step_hz),
                    r.residual_params.to_string(),
                    r.total_params.to_string(),
                ]
            })
            .collect(),
    }
}

/// One plotted point of one candidate chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VizRow {
    pub episode: usize,
    pub query: usize,
    pub anchor: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub chosen: bool,
}

/// Flatten recorded candidates: one row per (query, anchor, chunk step).
pub fn export_trajectory_viz(episode: usize, rollout: &Rollout) -> Vec<VizRow> {
    let mut rows = Vec::new();
    for q in &rollout.queries {
        for (m, path) in q.candidate_paths.iter().enumerate() {
            for (j, p) in path.iter().enumerate() {
                rows.push(VizRow { episode, query: q.index, anchor: m, step: j, x: p[0], y: p[1], chosen: m == q.chosen });
            }
        }
    }
    rows
}

pub fn write_viz_csv<W: Write>(mut w: W, rows: &[VizRow]) -> Result<()> {
    writeln!(w, "episode,query,anchor,step,x,y,chosen")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.episode, r.query, r.anchor, r.step, r.x, r.y, r.chosen as u8)?;
    }
    Ok(())
}

pub fn read_viz_csv(text: &str) -> Result<Vec<VizRow>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("viz line {}: expected 7 fields", i + 1)));
        }
        let bad = |_| Error::Format(format!("viz line {}: unparsable field", i + 1));
        out.push(VizRow {
            episode: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            query: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            anchor: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            step: f[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            x: f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            y: f[5].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            chosen: f[6] == "1",
        });
    }
    Ok(out)
}

/// Mean candidate end-position spread (root of the summed per-axis
/// variance across anchors) in the first and last quartile of each
/// episode's queries, pooled over the given episodes.
pub fn candidate_spread(rows: &[VizRow], episodes: &[usize]) -> (f64, f64) {
    let mut ends: BTreeMap<(usize, usize), BTreeMap<usize, (usize, [f64; 2])>> = BTreeMap::new();
    for r in rows.iter().filter(|r| episodes.contains(&r.episode)) {
        let slot = ends.entry((r.episode, r.query)).or_default().entry(r.anchor).or_insert((0, [r.x, r.y]));
        if r.step >= slot.0 {
            *slot = (r.step, [r.x, r.y]);
        }
    }
    let mut per_episode: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((ep, _), anchors) in &ends {
        let pts: Vec<[f64; 2]> = anchors.values().map(|v| v.1).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>() / n;
        per_episode.entry(*ep).or_default().push(var.sqrt());
    }
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for spreads in per_episode.values() {
        let n = spreads.len();
        let q = n.div_ceil(4);
        early.extend_from_slice(&spreads[..q]);
        late.extend_from_slice(&spreads[n - q..]);
    }
    (mean_std(&early).0, mean_std(&late).0)
}

/// Generations at reset states compared with both expert modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCheck {
    pub queries: usize,
    /// Within `delta` of the left or right expert chunk.
    pub near_mode: usize,
    /// Within `delta` of the entrywise mean of the two expert chunks.
    pub near_midpoint: usize,
    pub mean_midpoint_distance: f64,
    /// The first chunk, repeated open-loop without replanning, hit the obstacle.
    pub open_loop_collisions: usize,
}

impl ModeCheck {
    pub fn mode_fraction(&self) -> f64 {
        self.near_mode as f64 / self.queries.max(1) as f64
    }

    pub fn midpoint_fraction(&self) -> f64 {
        self.near_midpoint as f64 / self.queries.max(1) as f64
    }

    pub fn collision_fraction(&self) -> f64 {
        self.open_loop_collisions as f64 / self.queries.max(1) as f64
    }
}

/// Left and right expert chunks from `state`, normalized with `stats`.
pub fn expert_mode_chunks(
    env: &Env,
    state: &EnvState,
    horizon: usize,
    stats: &NormStats,
) -> Result<(ActionChunk, ActionChunk)> {
    let mut rng = child_rng(0, 0);
    let mut chunk = |mode| -> Result<ActionChunk> {
        let plan = ExpertPolicy::new(mode, horizon).plan(env, state, &[], &mut rng)?;
        let rows: Vec<Vec<f64>> = (0..horizon).map(|j| stats.normalize_action(plan.nominal.step(j))).collect();
        ActionChunk::from_rows(&rows)
    };
    Ok((chunk(Mode::Left)?, chunk(Mode::Right)?))
}

/// Repeat `chunk` (normalized) open-loop from `state` until the episode
/// ends; true on collision.
pub fn open_loop_collides(env: &Env, state: &EnvState, chunk: &ActionChunk, stats: &NormStats) -> Result<bool> {
    let actions: Vec<Vec<f64>> = (0..chunk.horizon()).map(|j| stats.denormalize_action(chunk.step(j))).collect();
    let plan: Vec<Vec<f64>> = actions.iter().cycle().take(env.config.max_steps).cloned().collect();
    let (_, last) = execute_open_loop(env, state, &plan, &DisturbanceConfig::none())?;
    Ok(last.is_some_and(|o| o.collision))
}

/// Reset for `seed`, then move the scene into its mirror-symmetric form:
/// base at the origin facing the target along +x, obstacle centred on the
/// line, shoulder at zero. Distances and the obstacle radius keep their
/// seeded values. Nothing in the observation then hints at a side.
pub fn symmetric_scene(env: &Env, task: Task, seed: u64) -> (EnvState, Vec<f64>) {
    let (mut s, _) = env.reset(task, seed, &DisturbanceConfig::none());
    let dist = (s.target[0] - s.x).hypot(s.target[1] - s.y);
    let along = (s.obstacle.x - s.x).hypot(s.obstacle.y - s.y);
    s.x = 0.0;
    s.y = 0.0;
    s.theta = 0.0;
    s.q1 = 0.0;
    s.target = [dist, 0.0];
    s.obstacle.x = along;
    s.obstacle.y = 0.0;
    let obs = env.observe(&s);
    (s, obs)
}

/// Query `policy` once at the symmetric scene of each seed and classify the
/// generation against the two expert modes with tolerance `delta` (mean
/// absolute distance, normalized units).
pub fn mode_check(env: &Env, policy: &Policy, task: Task, reset_seeds: &[u64], delta: f64) -> Result<ModeCheck> {
    let stats = policy.model.vocab().stats();
    let mut check = ModeCheck {
        queries: reset_seeds.len(),
        near_mode: 0,
        near_midpoint: 0,
        mean_midpoint_distance: 0.0,
        open_loop_collisions: 0,
    };
    for &seed in reset_seeds {
        let (state, obs) = symmetric_scene(env, task, seed);
        let (left, right) = expert_mode_chunks(env, &state, policy.config().horizon, stats)?;
        let mid = left.midpoint(&right)?;
        let mut rng = child_rng(derive_seed(seed, QUERY_STREAM), 0);
        let chunk = policy.generate(&obs, task, &mut rng)?.chunk;
        let to_mid = chunk.mean_abs_distance(&mid);
        check.near_mode += (chunk.mean_abs_distance(&left).min(chunk.mean_abs_distance(&right)) <= delta) as usize;
        check.near_midpoint += (to_mid <= delta) as usize;
        check.mean_midpoint_distance += to_mid / reset_seeds.len() as f64;
        check.open_loop_collisions += open_loop_collides(env, &state, &chunk, stats)? as usize;
    }
    Ok(check)
}

/// Segment every episode into sliding chunks, fit normalization on
/// them and cluster the normalized chunks.
pub fn build_vocabulary(
    dataset: &Dataset,
    horizon: usize,
    clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<AnchorVocabulary> {
    let mut chunks = Vec::new();
    for ep in &dataset.episodes {
        chunks.extend(segment_chunks(&ep.actions, horizon)?);
    }
    if chunks.is_empty() {
        return Err(Error::Data("dataset has no full chunks at this horizon".into()));
    }
    let stats = NormStats::fit(&chunks)?;
    let normalized = chunks.iter().map(|c| stats.normalize(c)).collect::<Result<Vec<_>>>()?;
    kmeans_fit(&normalized, clusters, stats, &mut child_rng(seed, VOCAB_STREAM), max_iters)
}

/// Build and train a policy of the configured head on `dataset`.
pub fn fit_policy(
    dataset: &Dataset,
    vocab: AnchorVocabulary,
    run: &RunConfig,
    on_log: impl FnMut(&TrainLogEntry),
) -> Result<Policy> {
    let obs_norm = ObsNorm::fit(dataset.episodes.iter().flat_map(|e| e.observations.iter().map(Vec::as_slice)))?;
    let samples = training_samples(dataset, run.horizon, vocab.stats())?;
    let mut policy = Policy::new(run.policy_config(), vocab, obs_norm, &mut child_rng(run.seed, INIT_STREAM))?;
    policy.train(&samples, &run.train_config(), on_log)?;
    Ok(policy)
}

/// Collect relabeled rollouts of the frozen `policy` under the configured
/// disturbance and fit a residual on them, aggregating over DAgger rounds.
pub fn fit_residual(env: &Env, policy: &Policy, run: &RunConfig) -> Result<Residual> {
    let config = ResidualConfig { eps_res: run.eps_res, horizon: run.horizon, ..ResidualConfig::default() };
    let mut residual = Residual::new(config, policy.model.obs_norm().clone(), &mut child_rng(run.seed, INIT_STREAM))?;
    let mut samples = Vec::new();
    for round in 0..run.residual_rounds.max(1) {
        let collect = CollectConfig {
            task: run.task,
            episodes: run.residual_episodes,
            seed: derive_seed(derive_seed(run.seed, RESIDUAL_STREAM), round as u64),
            eps_res: run.eps_res,
            disturbance: run.disturbance,
        };
        let active = (round > 0).then_some(&residual);
        let (fresh, _) = collect_residual_dataset(env, policy, active, &collect)?;
        samples.extend(fresh);
        let train = TrainConfig {
            steps: run.residual_steps,
            batch_size: run.batch_size,
            lr: run.residual_lr,
            seed: derive_seed(run.seed, round as u64),
            ..TrainConfig::default()
        };
        residual.train(&samples, &train)?;
    }
    Ok(residual)
}

/// Every knob of one experiment. Parsed from JSON or `key=value` lines
/// (dotted keys address nested fields, e.g. `disturbance.kind=drift`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub head: HeadKind,
    pub horizon: usize,
    pub schedule: ScheduleConfig,
    pub rho: f64,
    pub denoise_steps: Option<usize>,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub lambda: f64,
    pub eps_res: f64,
    pub residual: bool,
    pub residual_episodes: usize,
    pub residual_steps: usize,
    /// Collect-and-train rounds; rounds after the first roll out with the
    /// residual in the loop and aggregate the data.
    pub residual_rounds: usize,
    pub residual_lr: f64,
    pub disturbance: DisturbanceConfig,
    pub seed: u64,
    pub data_episodes: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_episodes: usize,
    pub trials: usize,
    pub context_dim: usize,
    pub denoiser_hidden: Vec<usize>,
    pub shared_noise: bool,
    pub score_input: ScoreInput,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let t = TrainConfig::default();
        Self {
            task: Task::PickDetour,
            head: p.head,
            horizon: p.horizon,
            schedule: p.schedule,
            rho: p.rho,
            denoise_steps: None,
            clusters: 20,
            kmeans_iters: 100,
            lambda: p.lambda,
            eps_res: ResidualConfig::default().eps_res,
            residual: false,
            residual_episodes: 300,
            residual_steps: 4000,
            residual_rounds: 3,
            residual_lr: 1e-3,
            disturbance: DisturbanceConfig::none(),
            seed: 0,
            data_episodes: 2000,
            train_steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            eval_episodes: 100,
            trials: 3,
            context_dim: p.context_dim,
            denoiser_hidden: p.denoiser_hidden,
            shared_noise: false,
            score_input: ScoreInput::Initial,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let value = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed)?
        } else {
            let mut root = serde_json::Map::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
                set_dotted(&mut root, k.trim(), parse_scalar(v.trim()))?;
            }
            Value::Object(root)
        };
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides on top of this config.
    pub fn with_overrides(&self, pairs: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let root = value.as_object_mut().expect("struct serializes to an object");
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))?;
            set_dotted(root, k.trim(), parse_scalar(v.trim()))?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_episodes == 0 || self.trials == 0 {
            return Err(Error::Config("eval_episodes and trials must be at least 1".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        self.policy_config().validate()
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            head: self.head,
            horizon: self.horizon,
            schedule: self.schedule,
            rho: self.rho,
            denoise_steps: self.denoise_steps,
            lambda: self.lambda,
            context_dim: self.context_dim,
            denoiser_hidden: self.denoiser_hidden.clone(),
            shared_noise: self.shared_noise,
            score_input: self.score_input,
            ..PolicyConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            task: self.task,
            trials: self.trials,
            episodes: self.eval_episodes,
            seed: self.seed,
            disturbance: self.disturbance,
            record_candidates: false,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn set_dotted(root: &mut serde_json::Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config("empty key".into()))?;
    let mut node = root;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
        node = entry.as_object_mut().ok_or_else(|| Error::Config(format!("{p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
