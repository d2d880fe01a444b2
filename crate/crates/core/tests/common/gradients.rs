//! Finite-difference gradient errors of every training loss at reduced widths.

use anchor_core::policy::{HeadKind, ObsNorm, Policy, PolicyConfig, TrainSample};
use anchor_core::residual::{Residual, ResidualConfig, ResidualSample};
use anchor_core::schedule::ActionChunk;
use anchor_core::seeds::{rng_from_seed, standard_normals, Rng};
use anchor_core::simenv::{Task, ACTION_DIM, OBS_DIM};
use anchor_core::vocabulary::{AnchorVocabulary, NormStats};
use numkit::{grad_check, NumError};
use rand::Rng as _;

pub const TOL: f64 = 1e-4;
const HORIZON: usize = 2;

fn small_config(head: HeadKind) -> PolicyConfig {
    PolicyConfig {
        head,
        horizon: HORIZON,
        context_dim: 6,
        encoder_hidden: 12,
        time_embed_dim: 4,
        denoiser_hidden: vec![16, 16],
        scorer_hidden: 8,
        ..PolicyConfig::default()
    }
}

fn random_vocab(rng: &mut Rng, m: usize) -> AnchorVocabulary {
    let anchors = (0..m)
        .map(|_| {
            let v = (0..HORIZON * ACTION_DIM).map(|_| rng.random_range(-0.8..0.8)).collect();
            ActionChunk::new(HORIZON, ACTION_DIM, v).unwrap()
        })
        .collect();
    let stats = NormStats::from_bounds(vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM]).unwrap();
    AnchorVocabulary::new(anchors, stats).unwrap()
}

fn random_samples(rng: &mut Rng, n: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| TrainSample {
            obs: standard_normals(rng, OBS_DIM),
            task: Task::ALL[i % 3],
            target: ActionChunk::new(
                HORIZON,
                ACTION_DIM,
                (0..HORIZON * ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        })
        .collect()
}

pub fn policy_grad_error(head: HeadKind, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let vocab = random_vocab(&mut rng, 3);
    let mut policy =
        Policy::randomized(small_config(head), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    // Odd batch: with an L1 loss, sign sums over an even batch can cancel to an
    // exact zero gradient that finite differences only see as rounding noise.
    let samples = random_samples(&mut rng, 5);
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let mut noise = policy.model.draw_noise(batch.len(), &mut rng);
    // Timesteps near the top of the training range: at the smallest
    // timesteps the denoiser gradients shrink with the noise scale until
    // finite differences drown in rounding error.
    let top = policy.model.train_range().tau_start();
    for (i, tau) in noise.taus.iter_mut().enumerate() {
        *tau = top.saturating_sub(i);
    }
    let model = policy.model.clone();
    grad_check(&mut policy.store, |store, grad| {
        model
            .loss(store, &batch, &noise, grad)
            .map(|r| r.total)
            .map_err(|e| NumError::Config(e.to_string()))
    })
}

pub fn residual_grad_error(seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let config = ResidualConfig { hidden: 6, horizon: 3, ..ResidualConfig::default() };
    let mut residual = Residual::randomized(config, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let samples: Vec<ResidualSample> = (0..5)
        .map(|i| ResidualSample {
            obs: standard_normals(&mut rng, OBS_DIM),
            task: Task::ALL[i % 3],
            nominal: (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            phase: i % 3,
            target: (0..ACTION_DIM).map(|_| rng.random_range(-0.1..0.1)).collect(),
        })
        .collect();
    let batch: Vec<&ResidualSample> = samples.iter().collect();
    let frozen = residual.clone();
    grad_check(&mut residual.store, |store, grad| {
        frozen.loss(store, &batch, grad).map_err(|e| NumError::Config(e.to_string()))
    })
}
