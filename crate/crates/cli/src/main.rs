//! `anchor`: generate demonstrations, build anchor vocabularies, train and
//! evaluate chunk policies, run the ablations and export visualization data.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchor_core::harness::{
    ablation_chunk_sweep, ablation_denoise_budget, ablation_residual, budget_table, build_vocabulary,
    candidate_spread, chunk_table, evaluate, export_trajectory_viz, fit_policy, fit_residual, residual_table,
    write_episode_csv, write_viz_csv, ChunkPolicy, RunConfig, Table,
};
use anchor_core::policy::{HeadKind, Policy};
use anchor_core::residual::Residual;
use anchor_core::simenv::{generate_dataset, Dataset, DisturbanceConfig, Env, Task, ACTION_DIM};
use anchor_core::vocabulary::{coverage, segment_chunks, AnchorVocabulary};
use anchor_core::{Error, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "anchor", version, about = "Anchored truncated diffusion experiments on a planar mobile manipulator")]
struct Cli {
    /// Run configuration, as `key=value` lines or a JSON object.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set disturbance.kind=drift`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scripted expert and write demonstrations as JSON lines.
    GenData(GenData),
    /// Cluster demonstration chunks into an anchor vocabulary.
    BuildAnchors(BuildAnchors),
    /// Train a chunk policy; streams a JSON-lines log.
    Train(Train),
    /// Fit the per-step residual corrector on rollouts of a frozen policy.
    TrainResidual(TrainResidual),
    /// Evaluate a policy and write the per-episode CSV.
    Eval(Eval),
    /// Comparison tables.
    #[command(subcommand)]
    Ablate(Ablation),
    /// Export per-query candidate paths for plotting.
    VizExport(VizExport),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(t) = self.task {
            run.task = t;
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
    }
}

#[derive(Debug, Args)]
struct EvalSize {
    /// Episodes per trial.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

impl EvalSize {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(e) = self.episodes {
            run.eval_episodes = e;
        }
        if let Some(t) = self.trials {
            run.trials = t;
        }
    }
}

#[derive(Debug, Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output path; a `.gz` suffix compresses.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildAnchors {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    head: Option<HeadKind>,
    /// Chunk horizon H.
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Demonstrations to train on; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Prebuilt vocabulary; clustered from the dataset when absent.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Output directory for the policy files and `train_log.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainResidual {
    #[command(flatten)]
    common: Common,
    /// Directory of the frozen policy.
    #[arg(long)]
    policy: PathBuf,
    /// Rollouts collected per round.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Constant drift speed in m/s during collection.
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    size: EvalSize,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    residual: Option<PathBuf>,
    /// Reverse-step budget override for diffusion heads.
    #[arg(long)]
    denoise_steps: Option<usize>,
    /// Constant drift speed in m/s.
    #[arg(long)]
    drift: Option<f64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Ablation {
    /// Success and latency over reverse-step budgets.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        size: EvalSize,
        #[arg(long)]
        anchored: PathBuf,
        #[arg(long)]
        from_noise: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,5")]
        anchored_steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50,25,10,5")]
        from_noise_steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success and analytic compute across chunk horizons.
    Chunks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        size: EvalSize,
        /// Policy directories, one per (head, horizon).
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired evaluation with and without the residual.
    Residual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        size: EvalSize,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        residual: PathBuf,
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct VizExport {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let run = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    run.with_overrides(&cli.overrides)
}

fn load_policy(dir: &Path, run: &mut RunConfig) -> Result<Policy> {
    let policy = Policy::load(dir)?;
    run.head = policy.config().head;
    run.horizon = policy.config().horizon;
    run.denoise_steps = policy.config().denoise_steps;
    Ok(policy)
}

fn set_drift(run: &mut RunConfig, drift: Option<f64>) {
    if let Some(m) = drift {
        run.disturbance = DisturbanceConfig::drift(m, run.disturbance.seed);
    }
}

fn print_json(value: serde_json::Value) -> Result<()> {
    writeln!(io::stdout(), "{value}")?;
    Ok(())
}

fn write_table(out: Option<&Path>, run: &RunConfig, table: &Table) -> Result<()> {
    if let Some(path) = out {
        fs::write(path, format!("# config {}\n{}", run.to_json(), table.to_csv()))?;
    }
    write!(io::stdout(), "{}", table.to_markdown())?;
    Ok(())
}

fn demonstrations(env: &Env, run: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p),
        None => generate_dataset(env, run.task, run.data_episodes, run.seed),
    }
}

fn gen_data(mut run: RunConfig, args: &GenData) -> Result<()> {
    args.common.apply(&mut run);
    if let Some(n) = args.episodes {
        run.data_episodes = n;
    }
    let ds = generate_dataset(&Env::default(), run.task, run.data_episodes, run.seed)?;
    ds.save(&args.out)?;
    print_json(json!({
        "task": run.task.name(),
        "episodes": ds.episodes.len(),
        "steps": ds.num_steps(),
        "left_fraction": ds.left_fraction(),
        "out": args.out,
    }))
}

fn build_anchors(mut run: RunConfig, args: &BuildAnchors) -> Result<()> {
    if let Some(h) = args.horizon {
        run.horizon = h;
    }
    if let Some(m) = args.clusters {
        run.clusters = m;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    let ds = Dataset::load(&args.dataset)?;
    let vocab = build_vocabulary(&ds, run.horizon, run.clusters, run.seed, run.kmeans_iters)?;
    vocab.save(&args.out)?;
    let mut chunks = Vec::new();
    for ep in &ds.episodes {
        for c in segment_chunks(&ep.actions, run.horizon)? {
            chunks.push(vocab.stats().normalize(&c)?);
        }
    }
    let cov = coverage(&chunks, &vocab)?;
    print_json(json!({
        "anchors": vocab.len(),
        "horizon": run.horizon,
        "chunks": chunks.len(),
        "coverage": cov,
        "out": args.out,
    }))
}

fn train(mut run: RunConfig, args: &Train) -> Result<()> {
    args.common.apply(&mut run);
    if let Some(h) = args.head {
        run.head = h;
    }
    if let Some(h) = args.chunks {
        run.horizon = h;
    }
    if let Some(s) = args.steps {
        run.train_steps = s;
    }
    run.validate()?;
    let env = Env::default();
    let ds = demonstrations(&env, &run, args.dataset.as_deref())?;
    let vocab = match &args.anchors {
        Some(p) => AnchorVocabulary::load(p, Some((run.horizon, ACTION_DIM)))?,
        None => build_vocabulary(&ds, run.horizon, run.clusters, run.seed, run.kmeans_iters)?,
    };
    fs::create_dir_all(&args.out)?;
    let mut log = io::BufWriter::new(fs::File::create(args.out.join("train_log.jsonl"))?);
    let mut stdout = io::stdout().lock();
    let mut failure = None;
    let policy = fit_policy(&ds, vocab, &run, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| writeln!(stdout, "{line}")) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    log.flush()?;
    policy.save(&args.out)?;
    fs::write(args.out.join("run.json"), run.to_json())?;
    Ok(())
}

fn train_residual(mut run: RunConfig, args: &TrainResidual) -> Result<()> {
    args.common.apply(&mut run);
    if let Some(n) = args.episodes {
        run.residual_episodes = n;
    }
    if let Some(r) = args.rounds {
        run.residual_rounds = r;
    }
    set_drift(&mut run, args.drift);
    let policy = load_policy(&args.policy, &mut run)?;
    run.validate()?;
    let residual = fit_residual(&Env::default(), &policy, &run)?;
    residual.save(&args.out)?;
    fs::write(args.out.join("run.json"), run.to_json())?;
    print_json(json!({
        "residual_params": residual.num_params(),
        "policy_params": ChunkPolicy::num_params(&policy),
        "rounds": run.residual_rounds.max(1),
        "episodes_per_round": run.residual_episodes,
        "disturbance": run.disturbance,
        "out": args.out,
    }))
}

fn eval(mut run: RunConfig, args: &Eval) -> Result<()> {
    args.common.apply(&mut run);
    args.size.apply(&mut run);
    set_drift(&mut run, args.drift);
    let mut policy = load_policy(&args.policy, &mut run)?;
    if args.denoise_steps.is_some() {
        policy = policy.with_denoise_steps(args.denoise_steps)?;
        run.denoise_steps = args.denoise_steps;
    }
    let residual = args.residual.as_deref().map(Residual::load).transpose()?;
    run.residual = residual.is_some();
    run.validate()?;
    let report = evaluate(&Env::default(), &policy, residual.as_ref(), &run.eval_config())?;
    match &args.out {
        Some(path) => {
            let mut buf = Vec::new();
            write_episode_csv(&mut buf, &run.to_json(), &report.episodes)?;
            fs::write(path, buf)?;
            print_json(json!({
                "success_rate": report.success_rate(),
                "per_trial": report.per_trial,
                "mean": report.mean,
                "std": report.std,
                "episodes": report.episodes.len(),
                "out": path,
            }))
        }
        None => write_episode_csv(io::stdout().lock(), &run.to_json(), &report.episodes),
    }
}

fn ablate(mut run: RunConfig, which: &Ablation) -> Result<()> {
    let env = Env::default();
    match which {
        Ablation::Denoise { common, size, anchored, from_noise, anchored_steps, from_noise_steps, out } => {
            common.apply(&mut run);
            size.apply(&mut run);
            let a = load_policy(anchored, &mut run)?;
            let f = Policy::load(from_noise)?;
            if f.config().head != HeadKind::FromNoise {
                return Err(Error::Config(format!("{} holds a {} head, not from_noise", from_noise.display(), f.config().head)));
            }
            let (rows, _) = ablation_denoise_budget(&env, &a, &f, anchored_steps, from_noise_steps, &run.eval_config())?;
            write_table(out.as_deref(), &run, &budget_table(&rows))
        }
        Ablation::Chunks { common, size, policies, out } => {
            common.apply(&mut run);
            size.apply(&mut run);
            let loaded = policies.iter().map(Policy::load).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Policy> = loaded.iter().collect();
            let rows = ablation_chunk_sweep(&env, &refs, &run.eval_config())?;
            write_table(out.as_deref(), &run, &chunk_table(&rows))
        }
        Ablation::Residual { common, size, policy, residual, drift, out } => {
            common.apply(&mut run);
            size.apply(&mut run);
            set_drift(&mut run, *drift);
            let p = load_policy(policy, &mut run)?;
            let r = Residual::load(residual)?;
            run.residual = true;
            let (rows, test) = ablation_residual(&env, &p, &r, &run.eval_config())?;
            write_table(out.as_deref(), &run, &residual_table(&rows))?;
            print_json(json!({ "sign_test": test }))
        }
    }
}

fn viz_export(mut run: RunConfig, args: &VizExport) -> Result<()> {
    args.common.apply(&mut run);
    if let Some(n) = args.episodes {
        run.eval_episodes = n;
    }
    let policy = load_policy(&args.policy, &mut run)?;
    let cfg = anchor_core::harness::EvalConfig { trials: 1, record_candidates: true, ..run.eval_config() };
    let report = evaluate(&Env::default(), &policy, None, &cfg)?;
    let mut rows = Vec::new();
    let mut successes = Vec::new();
    for (i, r) in report.rollouts.iter().enumerate() {
        rows.extend(export_trajectory_viz(i, r));
        if r.metrics.success {
            successes.push(i);
        }
    }
    let mut buf = Vec::new();
    write_viz_csv(&mut buf, &rows)?;
    fs::write(&args.out, buf)?;
    let (early, late) = candidate_spread(&rows, &successes);
    print_json(json!({
        "rows": rows.len(),
        "episodes": report.rollouts.len(),
        "successes": successes.len(),
        "early_spread": early,
        "late_spread": late,
        "out": args.out,
    }))
}

fn run(cli: &Cli) -> Result<()> {
    let run = base_config(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(run, a),
        Command::BuildAnchors(a) => build_anchors(run, a),
        Command::Train(a) => train(run, a),
        Command::TrainResidual(a) => train_residual(run, a),
        Command::Eval(a) => eval(run, a),
        Command::Ablate(which) => ablate(run, which),
        Command::VizExport(a) => viz_export(run, a),
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
