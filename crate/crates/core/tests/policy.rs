use anchor_core::policy::{
    argmax, HeadKind, ObsNorm, Policy, PolicyConfig, TrainConfig, TrainLogEntry, TrainSample,
};
use anchor_core::schedule::{ActionChunk, X0_CLAMP};
use anchor_core::seeds::{rng_from_seed, standard_normals, Rng};
use anchor_core::simenv::{Task, ACTION_DIM, OBS_DIM};
use anchor_core::vocabulary::{assign_positive, AnchorVocabulary, NormStats};
use numkit::{Activation, MlpSpec};
use proptest::prelude::*;
use rand::Rng as _;

const H: usize = 2;

fn small(head: HeadKind) -> PolicyConfig {
    PolicyConfig {
        head,
        horizon: H,
        context_dim: 8,
        encoder_hidden: 16,
        time_embed_dim: 4,
        denoiser_hidden: vec![32, 32],
        scorer_hidden: 16,
        ..PolicyConfig::default()
    }
}

fn unit_stats() -> NormStats {
    NormStats::from_bounds(vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM]).unwrap()
}

fn random_chunk(rng: &mut Rng, scale: f64) -> ActionChunk {
    ActionChunk::new(H, ACTION_DIM, (0..H * ACTION_DIM).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_vocab(rng: &mut Rng, m: usize) -> AnchorVocabulary {
    AnchorVocabulary::new((0..m).map(|_| random_chunk(rng, 0.9)).collect(), unit_stats()).unwrap()
}

fn random_samples(rng: &mut Rng, n: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| TrainSample { obs: standard_normals(rng, OBS_DIM), task: Task::ALL[i % 3], target: random_chunk(rng, 1.0) })
        .collect()
}

fn constant_chunk(v: f64) -> ActionChunk {
    ActionChunk::new(H, ACTION_DIM, vec![v; H * ACTION_DIM]).unwrap()
}

fn mean_abs_diff(a: &ActionChunk, b: &ActionChunk) -> f64 {
    a.l1_distance(b) / a.values().len() as f64
}

#[test]
fn fresh_anchored_loss_matches_closed_form() {
    let mut rng = rng_from_seed(4);
    let m = 20;
    let vocab = random_vocab(&mut rng, m);
    let mut policy = Policy::new(small(HeadKind::Anchored), vocab.clone(), ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let samples = random_samples(&mut rng, 7);
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let noise = policy.model.draw_noise(batch.len(), &mut rng);
    let report = policy.model.loss(&mut policy.store, &batch, &noise, false).unwrap();

    let schedule = policy.model.schedule().clone();
    let mut recon = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (pos, _) = assign_positive(&s.target, &vocab).unwrap();
        let (a, sd) = schedule.coefficients(noise.taus[i]).unwrap();
        let eps = noise.eps.row(i * m + pos);
        let err: f64 = vocab
            .anchor(pos)
            .values()
            .iter()
            .zip(eps)
            .zip(s.target.values())
            .map(|((x, e), t)| (((a * x + sd * e) / a).clamp(-X0_CLAMP, X0_CLAMP) - t).abs())
            .sum();
        recon += err / (H * ACTION_DIM) as f64;
    }
    recon /= samples.len() as f64;
    let bce = m as f64 * std::f64::consts::LN_2;
    assert!((report.bce - bce).abs() < 1e-9, "{} vs {bce}", report.bce);
    assert!((report.recon_l1 - recon).abs() < 1e-9);
    assert!((report.total - (recon + bce)).abs() < 1e-9);
}

#[test]
fn score_weight_scales_the_classification_term() {
    let mut rng = rng_from_seed(8);
    let vocab = random_vocab(&mut rng, 5);
    let cfg = PolicyConfig { lambda: 2.5, ..small(HeadKind::Anchored) };
    let mut policy = Policy::new(cfg, vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let samples = random_samples(&mut rng, 3);
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let noise = policy.model.draw_noise(3, &mut rng);
    let r = policy.model.loss(&mut policy.store, &batch, &noise, false).unwrap();
    assert!((r.total - (r.recon_l1 + 2.5 * r.bce)).abs() < 1e-12);
}

#[test]
fn l1_head_settles_between_symmetric_modes() {
    let c = 0.6;
    let mut rng = rng_from_seed(11);
    let vocab = random_vocab(&mut rng, 2);
    let mut policy = Policy::new(small(HeadKind::L1), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let obs = vec![0.2; OBS_DIM];
    let samples: Vec<TrainSample> = (0..40)
        .map(|i| TrainSample {
            obs: obs.clone(),
            task: Task::PickDetour,
            target: constant_chunk(if i % 2 == 0 { c } else { -c }),
        })
        .collect();
    let mut last: Option<TrainLogEntry> = None;
    let cfg = TrainConfig { steps: 600, lr: 3e-3, log_every: 100, ..TrainConfig::default() };
    policy.train(&samples, &cfg, |e| last = Some(*e)).unwrap();
    let plateau = last.unwrap().loss.recon_l1;
    assert!((plateau - c).abs() <= 0.05 * c, "plateau {plateau}");
    let g = policy.generate(&obs, Task::PickDetour, &mut rng).unwrap();
    assert!(g.chunk.values().iter().all(|v| v.abs() < c));
}

#[test]
fn l1_head_memorizes_a_single_sample() {
    let mut rng = rng_from_seed(12);
    let vocab = random_vocab(&mut rng, 2);
    let mut policy = Policy::new(small(HeadKind::L1), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let sample = random_samples(&mut rng, 1).remove(0);
    let cfg = TrainConfig { steps: 800, batch_size: 4, lr: 3e-3, ..TrainConfig::default() };
    policy.train(std::slice::from_ref(&sample), &cfg, |_| {}).unwrap();
    let g = policy.generate(&sample.obs, sample.task, &mut rng).unwrap();
    assert!(mean_abs_diff(&g.chunk, &sample.target) < 0.02);
}

#[test]
fn anchored_head_memorizes_a_single_sample() {
    let mut rng = rng_from_seed(13);
    let vocab = random_vocab(&mut rng, 4);
    let mut policy = Policy::new(small(HeadKind::Anchored), vocab.clone(), ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let offset = random_chunk(&mut rng, 0.15);
    let target = ActionChunk::new(
        H,
        ACTION_DIM,
        vocab.anchor(2).values().iter().zip(offset.values()).map(|(a, o)| a + o).collect(),
    )
    .unwrap();
    let sample = TrainSample { obs: standard_normals(&mut rng, OBS_DIM), task: Task::Place, target };
    let (pos, _) = assign_positive(&sample.target, &vocab).unwrap();
    let cfg = TrainConfig { steps: 10000, batch_size: 16, lr: 1e-3, ..TrainConfig::default() };
    let last = policy.train(std::slice::from_ref(&sample), &cfg, |_| {}).unwrap();
    assert_eq!(last.score_accuracy, Some(1.0));
    let before = mean_abs_diff(vocab.anchor(pos), &sample.target);
    let mut recon = 0.0;
    for tau in 0..10 {
        let mut noise = policy.model.draw_noise(1, &mut rng);
        noise.taus[0] = tau;
        recon += policy.model.loss(&mut policy.store, &[&sample], &noise, false).unwrap().recon_l1 / 10.0;
    }
    assert!(recon < 0.5 * before, "{recon} vs {before}");
    for seed in 0..5 {
        let g = policy.generate(&sample.obs, sample.task, &mut rng_from_seed(seed)).unwrap();
        assert_eq!(g.chosen, pos);
    }
}

#[test]
fn saved_policy_reloads_identically() {
    let mut rng = rng_from_seed(6);
    for head in [HeadKind::Anchored, HeadKind::FromNoise, HeadKind::L1] {
        let vocab = random_vocab(&mut rng, 3);
        let norm = ObsNorm { mean: standard_normals(&mut rng, OBS_DIM), std: vec![1.5; OBS_DIM] };
        let policy = Policy::randomized(small(head), vocab, norm, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        policy.save(dir.path()).unwrap();
        let back = Policy::load(dir.path()).unwrap();
        assert_eq!(back.config(), policy.config());
        assert_eq!(back.model.obs_norm(), policy.model.obs_norm());
        assert_eq!(back.model.vocab(), policy.model.vocab());
        assert_eq!(back.store.flat_values(), policy.store.flat_values());
        let obs = standard_normals(&mut rng, OBS_DIM);
        let a = policy.generate(&obs, Task::Place, &mut rng_from_seed(1)).unwrap();
        let b = back.generate(&obs, Task::Place, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_policy_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Policy::load(dir.path()).is_err());
}

#[test]
fn flops_follow_the_chunk_length() {
    let mut rng = rng_from_seed(2);
    let flops = |h: usize, rng: &mut Rng| {
        let stats = unit_stats();
        let anchors = (0..4)
            .map(|_| ActionChunk::new(h, ACTION_DIM, vec![0.1; h * ACTION_DIM]).unwrap())
            .collect();
        let vocab = AnchorVocabulary::new(anchors, stats).unwrap();
        let cfg = PolicyConfig { horizon: h, ..small(HeadKind::Anchored) };
        Policy::new(cfg, vocab, ObsNorm::identity(OBS_DIM), rng).unwrap().model.flops_estimate(200)
    };
    let (f1, f2, f5) = (flops(1, &mut rng), flops(2, &mut rng), flops(5, &mut rng));
    assert_eq!(f1.queries_per_episode, 200);
    assert_eq!(f2.queries_per_episode, 100);
    assert_eq!(f5.queries_per_episode, 40);
    assert_eq!(f1.encoder_per_episode, 2 * f2.encoder_per_episode);
    assert_eq!(f1.encoder_per_episode, 5 * f5.encoder_per_episode);
    assert_eq!(f1.per_episode, (f1.encoder_per_query + f1.head_per_query) * 200);
}

#[test]
fn dense_layer_costs_two_flops_per_weight() {
    for (r, c) in [(3, 7), (64, 128), (1, 1)] {
        let spec = MlpSpec::new(vec![r, c], Activation::Gelu, Activation::Identity).unwrap();
        assert_eq!(spec.flops_per_sample(), 2 * r as u64 * c as u64);
    }
}

#[test]
fn anchored_query_cost_counts_every_candidate_and_step() {
    let mut rng = rng_from_seed(3);
    let vocab = random_vocab(&mut rng, 6);
    let p = Policy::new(small(HeadKind::Anchored), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let d = H * ACTION_DIM;
    let input = (d + 4 + 8) as u64;
    let denoiser = 2 * (input * 32 + 32 * 32 + 32 * d as u64);
    let scorer = 2 * (input * 16 + 16);
    let f = p.model.flops_estimate(10);
    assert_eq!(f.head_per_query, 6 * 10 * denoiser + 6 * scorer);
    assert_eq!(f.encoder_per_query, 2 * ((OBS_DIM + 3) as u64 * 16 + 16 * 8));
}

#[test]
fn zero_encoder_gives_zero_context() {
    let mut rng = rng_from_seed(5);
    let vocab = random_vocab(&mut rng, 3);
    let p = Policy::zeroed(small(HeadKind::Anchored), vocab, ObsNorm::identity(OBS_DIM)).unwrap();
    let ctx = p.encode_context(&standard_normals(&mut rng, OBS_DIM), Task::ReachLeftRight).unwrap();
    assert_eq!(ctx, vec![0.0; 8]);
}

#[test]
fn single_anchor_vocabulary_returns_its_candidate() {
    let mut rng = rng_from_seed(7);
    let vocab = random_vocab(&mut rng, 1);
    let p = Policy::randomized(small(HeadKind::Anchored), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let g = p.generate(&standard_normals(&mut rng, OBS_DIM), Task::Place, &mut rng).unwrap();
    assert_eq!(g.chosen, 0);
    assert_eq!(g.candidates.len(), 1);
    assert_eq!(g.chunk, g.candidates[0]);
}

#[test]
fn reverse_step_budget_can_be_overridden() {
    let mut rng = rng_from_seed(9);
    let vocab = random_vocab(&mut rng, 2);
    let p = Policy::new(small(HeadKind::FromNoise), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    assert_eq!(p.generate(&[0.0; OBS_DIM], Task::Place, &mut rng).unwrap().reverse_steps, 50);
    let q = p.with_denoise_steps(Some(10)).unwrap();
    assert_eq!(q.generate(&[0.0; OBS_DIM], Task::Place, &mut rng).unwrap().reverse_steps, 10);
}

#[test]
fn wrong_observation_width_is_a_shape_error() {
    let mut rng = rng_from_seed(1);
    let vocab = random_vocab(&mut rng, 2);
    let p = Policy::new(small(HeadKind::Anchored), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
    let err = p.generate(&[0.0; 3], Task::Place, &mut rng).unwrap_err();
    assert_eq!(err.kind(), "shape");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_deterministic_and_scores_are_probabilities(seed in 0u64..10_000, m in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let vocab = random_vocab(&mut rng, m);
        let p = Policy::randomized(small(HeadKind::Anchored), vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap();
        let obs = standard_normals(&mut rng, OBS_DIM);
        let a = p.generate(&obs, Task::ReachLeftRight, &mut rng_from_seed(seed + 1)).unwrap();
        let b = p.generate(&obs, Task::ReachLeftRight, &mut rng_from_seed(seed + 1)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.scores.len(), m);
        prop_assert!(a.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert_eq!(a.chosen, argmax(&a.scores));
        prop_assert!(a.chunk.values().iter().all(|v| v.is_finite() && v.abs() <= X0_CLAMP));
    }

    #[test]
    fn argmax_is_invariant_under_monotone_maps(values in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let i = argmax(&values);
        let mapped: Vec<f64> = values.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let shifted: Vec<f64> = values.iter().map(|&z| 3.0 * z - 7.0).collect();
        prop_assert!(values.iter().all(|&v| v <= values[i]));
        prop_assert_eq!(argmax(&shifted), i);
        let j = argmax(&mapped);
        prop_assert_eq!(mapped[j], mapped[i]);
    }
}
