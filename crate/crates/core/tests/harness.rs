use anchor_core::harness::{
    candidate_spread, evaluate, expert_mode_chunks, export_trajectory_viz, median, open_loop_collides, read_viz_csv,
    rollout, sign_test, symmetric_scene, write_episode_csv, write_viz_csv, ChunkPolicy, EvalConfig, ExpertPolicy,
    Plan, RandomPolicy, RolloutOptions, RunConfig, Table, VizRow,
};
use anchor_core::policy::{HeadKind, ObsNorm, Policy, PolicyConfig};
use anchor_core::schedule::ActionChunk;
use anchor_core::seeds::{rng_from_seed, Rng};
use anchor_core::simenv::{DisturbanceKind, Env, EnvState, Mode, Task, ACTION_DIM, OBS_DIM};
use anchor_core::vocabulary::{AnchorVocabulary, NormStats};
use proptest::prelude::*;
use rand::Rng as _;

fn unit_stats() -> NormStats {
    NormStats::from_bounds(vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM]).unwrap()
}

struct Idle {
    horizon: usize,
    stats: NormStats,
}

impl ChunkPolicy for Idle {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn plan(&self, _env: &Env, _state: &EnvState, _obs: &[f64], _rng: &mut Rng) -> anchor_core::Result<Plan> {
        let chunk = ActionChunk::zeros(self.horizon, ACTION_DIM);
        Ok(Plan { nominal: chunk.clone(), candidates: vec![chunk], chosen: 0, reverse_steps: 0 })
    }
}

fn tiny_policy(horizon: usize, m: usize, seed: u64) -> Policy {
    let mut rng = rng_from_seed(seed);
    let anchors = (0..m)
        .map(|_| {
            ActionChunk::new(horizon, ACTION_DIM, (0..horizon * ACTION_DIM).map(|_| rng.random_range(-0.5..0.5)).collect())
                .unwrap()
        })
        .collect();
    let vocab = AnchorVocabulary::new(anchors, unit_stats()).unwrap();
    let cfg = PolicyConfig {
        head: HeadKind::Anchored,
        horizon,
        context_dim: 6,
        encoder_hidden: 8,
        time_embed_dim: 4,
        denoiser_hidden: vec![12],
        scorer_hidden: 6,
        ..PolicyConfig::default()
    };
    Policy::randomized(cfg, vocab, ObsNorm::identity(OBS_DIM), &mut rng).unwrap()
}

#[test]
fn expert_succeeds_and_random_fails() {
    let env = Env::default();
    for task in Task::ALL {
        let cfg = EvalConfig::new(task, 1, 100, 3);
        let expert = evaluate(&env, &ExpertPolicy::new(Mode::Left, 5), None, &cfg).unwrap();
        assert!(expert.success_rate() >= 0.99, "{task}: {}", expert.success_rate());
        let random = evaluate(&env, &RandomPolicy::new(5), None, &cfg).unwrap();
        assert!(random.success_rate() <= 0.05, "{task}: {}", random.success_rate());
    }
}

#[test]
fn single_step_chunks_query_every_step() {
    let env = Env::default();
    let report = evaluate(&env, &ExpertPolicy::new(Mode::Right, 1), None, &EvalConfig::new(Task::Place, 1, 10, 1)).unwrap();
    assert!(report.episodes.iter().all(|e| e.queries == e.steps));
}

#[test]
fn full_length_failure_queries_once_per_chunk() {
    let env = Env::default();
    let idle = Idle { horizon: 5, stats: unit_stats() };
    let r = rollout(&env, &idle, None, Task::PickDetour, 4, &RolloutOptions::default(), |_| {}).unwrap();
    assert!(!r.metrics.success);
    assert_eq!(r.metrics.steps, 200);
    assert_eq!(r.metrics.queries, 40);
}

#[test]
fn replanning_waits_for_the_chunk_to_finish() {
    let env = Env::default();
    for h in 1..=10 {
        let r = rollout(&env, &ExpertPolicy::new(Mode::Left, h), None, Task::PickDetour, 9, &RolloutOptions::default(), |_| {})
            .unwrap();
        assert_eq!(r.metrics.queries, r.metrics.steps.div_ceil(h), "horizon {h}");
        assert!(r.trajectory.iter().all(|s| s.phase < h && s.query == (s.step - 1) / h));
    }
}

#[test]
fn episode_csv_is_byte_identical_across_runs() {
    let env = Env::default();
    let policy = tiny_policy(3, 3, 2);
    let cfg = EvalConfig::new(Task::ReachLeftRight, 2, 3, 7);
    let render = || {
        let report = evaluate(&env, &policy, None, &cfg).unwrap();
        let mut out = Vec::new();
        write_episode_csv(&mut out, "{\"seed\":7}", &report.episodes).unwrap();
        out
    };
    let a = render();
    assert_eq!(a, render());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 2 + 6);
    assert!(text.starts_with("# config {\"seed\":7}\ntrial,episode,"));
}

#[test]
fn viz_export_has_one_row_per_candidate_step() {
    let env = Env::default();
    let (h, m) = (4, 3);
    let policy = tiny_policy(h, m, 5);
    let opts = RolloutOptions { record_candidates: true, ..RolloutOptions::default() };
    let r = rollout(&env, &policy, None, Task::PickDetour, 12, &opts, |_| {}).unwrap();
    let rows = export_trajectory_viz(0, &r);
    assert_eq!(rows.len(), r.metrics.queries * m * h);
    for q in 0..r.metrics.queries {
        for j in 0..h {
            let chosen = rows.iter().filter(|v| v.query == q && v.step == j && v.chosen).count();
            assert_eq!(chosen, 1);
        }
    }
    let mut csv = Vec::new();
    write_viz_csv(&mut csv, &rows).unwrap();
    assert_eq!(read_viz_csv(&String::from_utf8(csv).unwrap()).unwrap(), rows);
}

#[test]
fn malformed_viz_csv_is_rejected() {
    let err = read_viz_csv("episode,query,anchor,step,x,y,chosen\n0,1,2\n").unwrap_err();
    assert_eq!(err.kind(), "format");
    assert!(read_viz_csv("header\n0,0,0,0,x,0,1\n").is_err());
}

#[test]
fn candidate_spread_uses_final_points_per_quartile() {
    let mut rows = Vec::new();
    for q in 0..4 {
        let gap = if q == 0 { 1.0 } else if q == 3 { 0.2 } else { 0.5 };
        for (anchor, x) in [(0, -gap), (1, gap)] {
            rows.push(VizRow { episode: 0, query: q, anchor, step: 0, x: 9.0, y: 9.0, chosen: false });
            rows.push(VizRow { episode: 0, query: q, anchor, step: 1, x, y: 0.0, chosen: anchor == 0 });
        }
    }
    let (early, late) = candidate_spread(&rows, &[0]);
    assert!((early - 1.0).abs() < 1e-12);
    assert!((late - 0.2).abs() < 1e-12);
}

#[test]
fn sign_test_matches_binomial_tail() {
    let first = [true, true, true, true, true, false, true];
    let second = [false, false, false, false, false, false, true];
    let t = sign_test(&first, &second).unwrap();
    assert_eq!((t.first_only, t.second_only), (5, 0));
    assert!((t.p_value - 1.0 / 32.0).abs() < 1e-15);
    let t = sign_test(&[true, false, false], &[false, true, true]).unwrap();
    assert!((t.p_value - 7.0 / 8.0).abs() < 1e-15);
    assert!(sign_test(&[true], &[]).is_err());
}

#[test]
fn median_handles_even_and_odd_lengths() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    assert!(median(&mut []).is_nan());
}

#[test]
fn tables_render_as_csv_and_markdown() {
    let t = Table { columns: vec!["a".into(), "b".into()], rows: vec![vec!["1".into(), "2".into()]] };
    assert_eq!(t.to_csv(), "a,b\n1,2\n");
    assert_eq!(t.to_markdown(), "| a | b |\n|---|---|\n| 1 | 2 |\n");
}

#[test]
fn symmetric_scene_hides_the_side() {
    let env = Env::default();
    for seed in 0..20 {
        let (state, obs) = symmetric_scene(&env, Task::PickDetour, seed);
        assert_eq!((state.x, state.y, state.theta, state.q1), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(state.obstacle.y, 0.0);
        assert!(state.obstacle.x > 0.0 && state.obstacle.x < state.target[0]);
        assert_eq!(obs, env.observe(&state));
        let stats = unit_stats();
        let (left, right) = expert_mode_chunks(&env, &state, 5, &stats).unwrap();
        assert!(left.mean_abs_distance(&right) > 0.1);
        let mid = left.midpoint(&right).unwrap();
        assert!(open_loop_collides(&env, &state, &mid, &stats).unwrap(), "seed {seed}");
        assert!(!open_loop_collides(&env, &state, &left, &stats).unwrap() || !open_loop_collides(&env, &state, &right, &stats).unwrap());
    }
}

#[test]
fn config_parses_from_key_value_and_json() {
    let kv = RunConfig::parse("# run\nhorizon = 8\nhead = \"l1\"\ndisturbance.kind = drift\ndisturbance.magnitude = 0.05\n")
        .unwrap();
    assert_eq!(kv.horizon, 8);
    assert_eq!(kv.head, HeadKind::L1);
    assert_eq!(kv.disturbance.kind, DisturbanceKind::Drift);
    assert_eq!(kv.disturbance.magnitude, 0.05);
    let json = RunConfig::parse(&kv.to_json()).unwrap();
    assert_eq!(json, kv);
    let o = kv.with_overrides(&["seed=9".into(), "denoise_steps=3".into()]).unwrap();
    assert_eq!((o.seed, o.denoise_steps), (9, Some(3)));
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
}

#[test]
fn invalid_configs_are_rejected() {
    for text in ["horizon", "horizon = 0", "trials = 0", "rho = 0", "head = \"bogus\"", "{\"clusters\": 0}"] {
        let err = RunConfig::parse(text).unwrap_err();
        assert_eq!(err.kind(), "config", "{text}: {err}");
    }
    assert!(RunConfig::default().with_overrides(&["nokey".into()]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn queries_cover_every_step(h in 1usize..12, seed in 0u64..1000) {
        let env = Env::default();
        let r = rollout(&env, &RandomPolicy::new(h), None, Task::Place, seed, &RolloutOptions::default(), |_| {}).unwrap();
        prop_assert_eq!(r.metrics.queries, r.metrics.steps.div_ceil(h));
        prop_assert!(r.metrics.steps >= 1 && r.metrics.steps <= 200);
        prop_assert_eq!(r.trajectory.len(), r.metrics.steps);
    }

    #[test]
    fn sign_test_p_value_is_a_probability(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..60)) {
        let a: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let t = sign_test(&a, &b).unwrap();
        let r = sign_test(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
        prop_assert_eq!(t.first_only, r.second_only);
        if t.first_only + t.second_only > 0 {
            prop_assert!(t.p_value + r.p_value >= 1.0 - 1e-12);
        }
    }
}
