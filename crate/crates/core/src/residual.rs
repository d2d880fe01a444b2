//! Bounded per-step residual correction applied on top of a frozen chunk
//! policy, and its relabeling-based training.

use std::path::Path;

use numkit::io::{read_container_file, write_container_file};
use numkit::{adam_step, mlp_backward, mlp_forward, sinusoidal_embed, Activation, AdamConfig, Mlp, MlpSpec, ParamStore, Tensor2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::harness::{rollout, ChunkPolicy, RolloutOptions};
use crate::policy::{ObsNorm, TrainConfig};
use crate::seeds::{child_rng, derive_seed, Rng};
use crate::simenv::{expert_policy, DisturbanceConfig, Env, Mode, Task, ACTION_DIM, NUM_TASKS, OBS_DIM};
use crate::{Error, Result};

const RESIDUAL_MAGIC: [u8; 4] = *b"ANVR";
const PHASE_MAX_PERIOD: f64 = 100.0;
const TRAIN_STREAM: u64 = 0x4e51;
const OBS_MEAN: &str = "obs.mean";
const OBS_STD: &str = "obs.std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    /// Bound on every correction entry, in normalized action units.
    pub eps_res: f64,
    pub hidden: usize,
    pub phase_embed_dim: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            eps_res: 0.1,
            hidden: 32,
            phase_embed_dim: 8,
            horizon: 5,
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            num_tasks: NUM_TASKS,
        }
    }
}

impl ResidualConfig {
    fn spec(&self) -> Result<MlpSpec> {
        if !(self.eps_res > 0.0) {
            return Err(Error::Config(format!("residual bound must be positive, got {}", self.eps_res)));
        }
        if self.phase_embed_dim % 2 != 0 || self.horizon == 0 {
            return Err(Error::Config("phase embedding must be even and horizon positive".into()));
        }
        let input = self.obs_dim + self.num_tasks + self.action_dim + self.phase_embed_dim;
        Ok(MlpSpec::new(vec![input, self.hidden, self.action_dim], Activation::Gelu, Activation::Tanh)?)
    }
}

/// `clamp(nominal + delta, −1, 1)`.
pub fn apply_residual(nominal: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if nominal.len() != delta.len() {
        return Err(Error::Shape(format!("nominal has {} entries, correction {}", nominal.len(), delta.len())));
    }
    Ok(nominal.iter().zip(delta).map(|(a, d)| (a + d).clamp(-1.0, 1.0)).collect())
}

/// One relabeled execution step.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub obs: Vec<f64>,
    pub task: Task,
    /// Nominal action in normalized units.
    pub nominal: Vec<f64>,
    pub phase: usize,
    /// Clamped correction target.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Residual {
    config: ResidualConfig,
    net: Mlp,
    obs_norm: ObsNorm,
    phase_embeds: Vec<Vec<f64>>,
    pub store: ParamStore,
}

impl Residual {
    /// All-zero weights: the correction is exactly zero until trained.
    pub fn zeroed(config: ResidualConfig, obs_norm: ObsNorm) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Mlp::register_zeroed(&mut store, "residual", config.spec()?)?;
        Self::assemble(config, net, obs_norm, store)
    }

    /// Random hidden layer, zero output layer.
    pub fn new(config: ResidualConfig, obs_norm: ObsNorm, rng: &mut Rng) -> Result<Self> {
        let mut r = Self::randomized(config, obs_norm, rng)?;
        r.net.zero_output_layer(&mut r.store);
        Ok(r)
    }

    /// Random weights in every layer.
    pub fn randomized(config: ResidualConfig, obs_norm: ObsNorm, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Mlp::register(&mut store, "residual", config.spec()?, rng)?;
        Self::assemble(config, net, obs_norm, store)
    }

    fn assemble(config: ResidualConfig, net: Mlp, obs_norm: ObsNorm, store: ParamStore) -> Result<Self> {
        if obs_norm.mean.len() != config.obs_dim {
            return Err(Error::Shape("observation statistics do not match the observation width".into()));
        }
        let phase_embeds = (0..config.horizon)
            .map(|j| sinusoidal_embed(j, config.phase_embed_dim, PHASE_MAX_PERIOD))
            .collect::<numkit::Result<Vec<_>>>()?;
        Ok(Self { config, net, obs_norm, phase_embeds, store })
    }

    pub fn config(&self) -> &ResidualConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.net.spec().num_params()
    }

    fn input_row(&self, obs: &[f64], task: Task, nominal: &[f64], phase: usize) -> Result<Vec<f64>> {
        if phase >= self.config.horizon {
            return Err(Error::Contract(format!("phase {phase} outside chunk horizon {}", self.config.horizon)));
        }
        if obs.len() != self.config.obs_dim || nominal.len() != self.config.action_dim {
            return Err(Error::Shape("residual input width mismatch".into()));
        }
        if !nominal.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite nominal action".into()));
        }
        let mut row = self.obs_norm.apply(obs);
        let mut hot = vec![0.0; self.config.num_tasks];
        hot[task.index()] = 1.0;
        row.extend(hot);
        row.extend_from_slice(nominal);
        row.extend_from_slice(&self.phase_embeds[phase]);
        Ok(row)
    }

    /// Correction for one execution step, each entry within ±`eps_res`.
    pub fn predict(&self, obs: &[f64], task: Task, nominal: &[f64], phase: usize) -> Result<Vec<f64>> {
        let row = Tensor2::row_vector(&self.input_row(obs, task, nominal, phase)?);
        let eps = self.config.eps_res;
        Ok(self.net.infer(&self.store, &row)?.data().iter().map(|v| eps * v).collect())
    }

    fn batch_input(&self, batch: &[&ResidualSample]) -> Result<Tensor2> {
        let rows = batch
            .iter()
            .map(|s| self.input_row(&s.obs, s.task, &s.nominal, s.phase))
            .collect::<Result<Vec<_>>>()?;
        let cols = rows.first().map_or(0, Vec::len);
        Ok(Tensor2::new(batch.len(), cols, rows.concat())?)
    }

    /// Mean absolute error between corrections and targets.
    pub fn loss(&self, store: &mut ParamStore, batch: &[&ResidualSample], grad: bool) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty residual batch".into()));
        }
        let (y, tape) = mlp_forward(&self.net, store, &self.batch_input(batch)?)?;
        let d = self.config.action_dim;
        let eps = self.config.eps_res;
        let scale = 1.0 / (batch.len() * d) as f64;
        let mut loss = 0.0;
        let mut upstream = Tensor2::zeros(batch.len(), d);
        for (i, s) in batch.iter().enumerate() {
            if s.target.len() != d {
                return Err(Error::Shape("residual target width mismatch".into()));
            }
            for k in 0..d {
                let diff = eps * y.get(i, k) - s.target[k];
                loss += diff.abs() * scale;
                let g = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                upstream.set(i, k, g * eps * scale);
            }
        }
        if grad {
            mlp_backward(&tape, store, &upstream)?;
        }
        Ok(loss)
    }

    /// Adam on the residual weights only; returns the loss over the full
    /// dataset after training.
    pub fn train(&mut self, samples: &[ResidualSample], cfg: &TrainConfig) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("residual dataset is empty".into()));
        }
        let mut rng = child_rng(cfg.seed, TRAIN_STREAM);
        let adam = AdamConfig::with_lr(cfg.lr);
        for _ in 0..cfg.steps {
            let batch: Vec<&ResidualSample> =
                (0..cfg.batch_size.max(1)).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
            let mut store = std::mem::take(&mut self.store);
            store.zero_grads();
            let res = self.loss(&mut store, &batch, true);
            self.store = store;
            res?;
            adam_step(&mut self.store, &adam)?;
        }
        self.dataset_loss(samples)
    }

    pub fn dataset_loss(&self, samples: &[ResidualSample]) -> Result<f64> {
        let all: Vec<&ResidualSample> = samples.iter().collect();
        let mut store = self.store.clone();
        self.loss(&mut store, &all, false)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("residual.json"), serde_json::to_string_pretty(&self.config)?)?;
        let mean = Tensor2::row_vector(&self.obs_norm.mean);
        let std = Tensor2::row_vector(&self.obs_norm.std);
        let mut tensors: Vec<(&str, &Tensor2)> = self.store.named_values().collect();
        tensors.push((OBS_MEAN, &mean));
        tensors.push((OBS_STD, &std));
        write_container_file(dir.join("residual.bin"), RESIDUAL_MAGIC, &[], &tensors)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ResidualConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("residual.json"))?)?;
        let mut r = Self::zeroed(config, ObsNorm::identity(OBS_DIM))?;
        let (_, tensors) = read_container_file(dir.join("residual.bin"), RESIDUAL_MAGIC, 0)?;
        let extras = r.store.assign_values(tensors)?;
        let (mut mean, mut std) = (None, None);
        for (name, t) in extras {
            match name.as_str() {
                OBS_MEAN => mean = Some(t.into_data()),
                OBS_STD => std = Some(t.into_data()),
                other => return Err(Error::Format(format!("unexpected tensor {other:?} in residual file"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == r.config.obs_dim && std.len() == mean.len() => {
                r.obs_norm = ObsNorm { mean, std };
                Ok(r)
            }
            _ => Err(Error::Format("residual file lacks observation statistics".into())),
        }
    }
}

/// Relabeling options for [`collect_residual_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub task: Task,
    pub episodes: usize,
    pub seed: u64,
    pub eps_res: f64,
    pub disturbance: DisturbanceConfig,
}

/// Expert action at `state` on whichever side lies closer to the nominal.
fn nearest_expert_action(env: &Env, state: &crate::simenv::EnvState, nominal_env: &[f64]) -> Vec<f64> {
    let left = expert_policy(env, state, Mode::Left);
    let right = expert_policy(env, state, Mode::Right);
    let dist = |a: &[f64]| a.iter().zip(nominal_env).map(|(x, y)| (x - y).abs()).sum::<f64>();
    if dist(&right) < dist(&left) {
        right
    } else {
        left
    }
}

/// Correction target: the expert's action at the realized state minus the
/// nominal, in normalized units, clamped to ±`eps_res`.
pub fn relabel(expert_norm: &[f64], nominal: &[f64], eps_res: f64) -> Vec<f64> {
    expert_norm.iter().zip(nominal).map(|(e, a)| (e - a).clamp(-eps_res, eps_res)).collect()
}

/// Roll out the frozen policy, optionally with a residual already in the
/// loop, and relabel every executed step against the scripted expert queried
/// at the realized state. Episodes that error are dropped; the second value
/// counts them.
pub fn collect_residual_dataset(
    env: &Env,
    policy: &dyn ChunkPolicy,
    active: Option<&Residual>,
    cfg: &CollectConfig,
) -> Result<(Vec<ResidualSample>, usize)> {
    let stats = policy.stats().clone();
    let mut samples = Vec::new();
    let mut dropped = 0;
    for ep in 0..cfg.episodes {
        let reset_seed = derive_seed(cfg.seed, ep as u64);
        let mut local = Vec::new();
        let opts = RolloutOptions { disturbance: cfg.disturbance, record_candidates: false };
        let outcome = rollout(env, policy, active, cfg.task, reset_seed, &opts, |step| {
            let nominal_env = stats.denormalize_action(step.nominal);
            let expert = nearest_expert_action(env, step.state, &nominal_env);
            local.push(ResidualSample {
                obs: step.obs.to_vec(),
                task: cfg.task,
                nominal: step.nominal.to_vec(),
                phase: step.phase,
                target: relabel(&stats.normalize_action(&expert), step.nominal, cfg.eps_res),
            });
        });
        match outcome {
            Ok(_) => samples.extend(local),
            Err(_) => dropped += 1,
        }
    }
    Ok((samples, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;

    #[test]
    fn apply_residual_examples() {
        assert_eq!(apply_residual(&[0.95], &[0.1]).unwrap(), vec![1.0]);
        let a = apply_residual(&[0.2, -0.3], &[0.05, 0.05]).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] + 0.25).abs() < 1e-15);
        assert_eq!(apply_residual(&[0.4, -0.7], &[0.0, 0.0]).unwrap(), vec![0.4, -0.7]);
    }

    #[test]
    fn zeroed_residual_is_silent() {
        let r = Residual::zeroed(ResidualConfig::default(), ObsNorm::identity(OBS_DIM)).unwrap();
        let d = r.predict(&[0.3; OBS_DIM], Task::PickDetour, &[0.5; ACTION_DIM], 2).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phase_outside_horizon_is_contract_error() {
        let r = Residual::zeroed(ResidualConfig::default(), ObsNorm::identity(OBS_DIM)).unwrap();
        let err = r.predict(&[0.0; OBS_DIM], Task::Place, &[0.0; ACTION_DIM], 5);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn output_respects_bound() {
        let mut rng = rng_from_seed(3);
        let r = Residual::randomized(ResidualConfig::default(), ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
        for _ in 0..200 {
            let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-50.0..50.0)).collect();
            let nom: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            for v in r.predict(&obs, Task::Place, &nom, 1).unwrap() {
                assert!(v.abs() <= 0.1);
            }
        }
    }

    #[test]
    fn relabel_constant_offset() {
        assert_eq!(relabel(&[0.25, 0.0], &[0.2, 0.0], 0.1), vec![0.25 - 0.2, 0.0]);
        assert_eq!(relabel(&[1.0], &[0.0], 0.1), vec![0.1]);
    }
}
