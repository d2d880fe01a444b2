//! Action heads. A shared context encoder feeds either the anchored
//! denoiser plus scorer or a direct L1 chunk regressor.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numkit::{
    adam_step, mlp_backward, mlp_forward, sinusoidal_embed, Activation, AdamConfig, Mlp, MlpSpec, ParamStore,
    Tensor2,
};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::schedule::{
    anchored_forward, reverse_chain_batch, ActionChunk, DiffusionSchedule, ScheduleConfig, TruncatedRange, X0_CLAMP,
};
use crate::seeds::{child_rng, standard_normals, Rng};
use crate::simenv::{Dataset, Task, ACTION_DIM, NUM_TASKS, OBS_DIM};
use crate::vocabulary::{assign_positive, chunk_at, AnchorVocabulary, NormStats};
use crate::{Error, Result};

const TIME_MAX_PERIOD: f64 = 1000.0;
const LOGIT_CLAMP: f64 = 30.0;
const TRAIN_STREAM: u64 = 0x7ea1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Anchored truncated diffusion with a scoring head.
    Anchored,
    /// Deterministic chunk regression trained with mean absolute error.
    L1,
    /// Diffusion over the full schedule started from noise instead of anchors.
    FromNoise,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Anchored => "anchored",
            HeadKind::L1 => "l1",
            HeadKind::FromNoise => "from_noise",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(HeadKind::Anchored),
            "l1" => Ok(HeadKind::L1),
            "from_noise" | "from_noise_diffusion" => Ok(HeadKind::FromNoise),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

/// What the score head sees at inference, always paired with emb(τ_start).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreInput {
    /// The anchor's noisy initialization, i.e. the same kind of input the
    /// score head is trained on.
    #[default]
    Initial,
    /// The final denoised chunk.
    Denoised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub head: HeadKind,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub time_embed_dim: usize,
    /// Hidden widths of the denoiser, also used by the L1 regressor.
    pub denoiser_hidden: Vec<usize>,
    pub scorer_hidden: usize,
    /// Weight of the score cross-entropy against the reconstruction term.
    pub lambda: f64,
    pub schedule: ScheduleConfig,
    /// Fraction of the schedule used for anchored training and inference.
    pub rho: f64,
    /// Reverse steps at inference; defaults to the training range.
    pub denoise_steps: Option<usize>,
    /// Draw one noise sample shared by all anchors at inference.
    pub shared_noise: bool,
    pub score_input: ScoreInput,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Anchored,
            horizon: 5,
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            num_tasks: NUM_TASKS,
            context_dim: 64,
            encoder_hidden: 128,
            time_embed_dim: 32,
            denoiser_hidden: vec![256, 256],
            scorer_hidden: 128,
            lambda: 1.0,
            schedule: ScheduleConfig::default(),
            rho: 0.2,
            denoise_steps: None,
            shared_noise: false,
            score_input: ScoreInput::Initial,
        }
    }
}

impl PolicyConfig {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    fn train_range(&self) -> Result<TruncatedRange> {
        match self.head {
            HeadKind::FromNoise => TruncatedRange::new(1.0, self.schedule.steps),
            _ => TruncatedRange::new(self.rho, self.schedule.steps),
        }
    }

    fn infer_range(&self) -> Result<TruncatedRange> {
        match self.denoise_steps {
            Some(k) => TruncatedRange::from_steps(k, self.schedule.steps),
            None => self.train_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 || self.obs_dim == 0 || self.num_tasks == 0 {
            return Err(Error::Config("horizon and dimensions must be positive".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("score weight must be non-negative, got {}", self.lambda)));
        }
        if self.denoiser_hidden.is_empty() {
            return Err(Error::Config("denoiser needs at least one hidden layer".into()));
        }
        self.train_range()?;
        self.infer_range()?;
        Ok(())
    }
}

/// Per-dimension standardization of raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a>(observations: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for o in observations {
            if sum.is_empty() {
                sum = vec![0.0; o.len()];
                sq = vec![0.0; o.len()];
            }
            if o.len() != sum.len() {
                return Err(Error::Shape("observations differ in width".into()));
            }
            for (k, v) in o.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("no observations to fit".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                if var.sqrt() < 1e-6 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

/// One supervised example: raw observation, task and normalized target chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub obs: Vec<f64>,
    pub task: Task,
    pub target: ActionChunk,
}

/// One example per recorded step; targets are the next `horizon` actions,
/// padded with the final action.
pub fn training_samples(dataset: &Dataset, horizon: usize, stats: &NormStats) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(dataset.num_steps());
    for ep in &dataset.episodes {
        for t in 0..ep.len() {
            out.push(TrainSample {
                obs: ep.observations[t].clone(),
                task: ep.task,
                target: stats.normalize(&chunk_at(&ep.actions, t, horizon)?)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("dataset has no steps".into()));
    }
    Ok(out)
}

/// Noise for one training batch: a timestep per sample and a noise chunk per
/// (sample, candidate) row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub taus: Vec<usize>,
    pub eps: Tensor2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_l1: f64,
    pub bce: f64,
    pub total: f64,
    /// Fraction of samples whose highest-scoring anchor is the positive one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Selected chunk in normalized units.
    pub chunk: ActionChunk,
    pub chosen: usize,
    /// Sigmoid scores per candidate.
    pub scores: Vec<f64>,
    /// Every denoised candidate, in anchor order.
    pub candidates: Vec<ActionChunk>,
    pub reverse_steps: usize,
}

/// Analytic dense-layer FLOP counts (2·rows·cols per layer per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub encoder_per_query: u64,
    pub head_per_query: u64,
    pub queries_per_episode: u64,
    pub encoder_per_episode: u64,
    pub per_episode: u64,
}

#[derive(Debug, Clone)]
enum HeadNets {
    Diffusion { denoiser: Mlp, scorer: Mlp },
    Regressor { net: Mlp },
}

/// Network layout, schedule and vocabulary; the weights live in a separate
/// [`ParamStore`] so losses can be evaluated against perturbed copies.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    config: PolicyConfig,
    encoder: Mlp,
    nets: HeadNets,
    obs_norm: ObsNorm,
    vocab: AnchorVocabulary,
    schedule: DiffusionSchedule,
    train_range: TruncatedRange,
    infer_range: TruncatedRange,
    time_embeds: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub model: PolicyModel,
    pub store: ParamStore,
}

fn net_specs(c: &PolicyConfig) -> Result<(MlpSpec, MlpSpec, Option<MlpSpec>)> {
    let encoder = MlpSpec::new(
        vec![c.obs_dim + c.num_tasks, c.encoder_hidden, c.context_dim],
        Activation::Gelu,
        Activation::Tanh,
    )?;
    let d = c.chunk_len();
    let mut widths = vec![];
    match c.head {
        HeadKind::L1 => {
            widths.push(c.context_dim);
            widths.extend(&c.denoiser_hidden);
            widths.push(d);
            Ok((encoder, MlpSpec::new(widths, Activation::Gelu, Activation::Identity)?, None))
        }
        _ => {
            let input = d + c.time_embed_dim + c.context_dim;
            widths.push(input);
            widths.extend(&c.denoiser_hidden);
            widths.push(d);
            let denoiser = MlpSpec::new(widths, Activation::Gelu, Activation::Identity)?;
            let scorer = MlpSpec::new(vec![input, c.scorer_hidden, 1], Activation::Gelu, Activation::Identity)?;
            Ok((encoder, denoiser, Some(scorer)))
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy from a logit clamped to ±30.
fn bce_logit(z: f64, y: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn stack(chunks: &[ActionChunk]) -> Result<Tensor2> {
    let cols = chunks.first().map_or(0, |c| c.values().len());
    let data: Vec<f64> = chunks.iter().flat_map(|c| c.values().iter().copied()).collect();
    Ok(Tensor2::new(chunks.len(), cols, data)?)
}

fn unstack(t: &Tensor2, horizon: usize, dim: usize) -> Result<Vec<ActionChunk>> {
    (0..t.rows()).map(|r| ActionChunk::new(horizon, dim, t.row(r).to_vec())).collect()
}

fn rows_of(row: &[f64], times: usize) -> Tensor2 {
    Tensor2::row_vector(row).repeat_rows(times)
}

impl PolicyModel {
    fn build(config: PolicyConfig, encoder: Mlp, nets: HeadNets, obs_norm: ObsNorm, vocab: AnchorVocabulary) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let time_embeds = (0..schedule.steps())
            .map(|t| sinusoidal_embed(t, config.time_embed_dim, TIME_MAX_PERIOD))
            .collect::<numkit::Result<Vec<_>>>()?;
        Ok(Self {
            train_range: config.train_range()?,
            infer_range: config.infer_range()?,
            config,
            encoder,
            nets,
            obs_norm,
            vocab,
            schedule,
            time_embeds,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &AnchorVocabulary {
        &self.vocab
    }

    pub fn obs_norm(&self) -> &ObsNorm {
        &self.obs_norm
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn infer_range(&self) -> TruncatedRange {
        self.infer_range
    }

    pub fn train_range(&self) -> TruncatedRange {
        self.train_range
    }

    /// Number of candidates scored per query.
    pub fn num_candidates(&self) -> usize {
        match self.nets {
            HeadNets::Diffusion { .. } => self.vocab.len(),
            HeadNets::Regressor { .. } => 1,
        }
    }

    /// `[standardized obs ‖ one-hot task]`.
    pub fn encoder_input(&self, obs: &[f64], task: Task) -> Result<Vec<f64>> {
        if obs.len() != self.config.obs_dim {
            return Err(Error::Shape(format!(
                "observation has {} entries, encoder expects {}",
                obs.len(),
                self.config.obs_dim
            )));
        }
        if task.index() >= self.config.num_tasks {
            return Err(Error::Config(format!("task {task} outside the configured task set")));
        }
        let mut v = self.obs_norm.apply(obs);
        let mut hot = vec![0.0; self.config.num_tasks];
        hot[task.index()] = 1.0;
        v.extend(hot);
        Ok(v)
    }

    fn batch_encoder_input(&self, batch: &[&TrainSample]) -> Result<Tensor2> {
        let rows = batch.iter().map(|s| self.encoder_input(&s.obs, s.task)).collect::<Result<Vec<_>>>()?;
        let cols = self.config.obs_dim + self.config.num_tasks;
        Ok(Tensor2::new(batch.len(), cols, rows.concat())?)
    }

    /// Latent context for one observation.
    pub fn encode_context(&self, store: &ParamStore, obs: &[f64], task: Task) -> Result<Vec<f64>> {
        let input = Tensor2::row_vector(&self.encoder_input(obs, task)?);
        Ok(self.encoder.infer(store, &input)?.into_data())
    }

    /// Noise in the layout [`PolicyModel::loss`] expects.
    pub fn draw_noise(&self, batch: usize, rng: &mut Rng) -> BatchNoise {
        let taus = (0..batch).map(|_| self.train_range.sample_timestep(rng)).collect();
        let rows = batch * self.train_candidates();
        let cols = self.config.chunk_len();
        let eps = Tensor2::new(rows, cols, standard_normals(rng, rows * cols)).expect("sized above");
        BatchNoise { taus, eps }
    }

    fn train_candidates(&self) -> usize {
        match self.config.head {
            HeadKind::Anchored => self.vocab.len(),
            HeadKind::FromNoise | HeadKind::L1 => 1,
        }
    }

    /// Batch-mean training loss; accumulates gradients when `grad` is set.
    pub fn loss(&self, store: &mut ParamStore, batch: &[&TrainSample], noise: &BatchNoise, grad: bool) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (h, d) = (self.config.horizon, self.config.action_dim);
        if let Some(s) = batch.iter().find(|s| s.target.shape() != (h, d)) {
            return Err(Error::Shape(format!("target chunk {:?} vs configured {h}x{d}", s.target.shape())));
        }
        match &self.nets {
            HeadNets::Diffusion { denoiser, scorer } => self.diffusion_loss(denoiser, scorer, store, batch, noise, grad),
            HeadNets::Regressor { net } => self.regression_loss(net, store, batch, grad),
        }
    }

    fn regression_loss(&self, net: &Mlp, store: &mut ParamStore, batch: &[&TrainSample], grad: bool) -> Result<LossReport> {
        let b = batch.len();
        let dl = self.config.chunk_len();
        let (ctx, enc_tape) = mlp_forward(&self.encoder, store, &self.batch_encoder_input(batch)?)?;
        let (pred, tape) = mlp_forward(net, store, &ctx)?;
        let mut loss = 0.0;
        let mut upstream = Tensor2::zeros(b, dl);
        let scale = 1.0 / (b * dl) as f64;
        for (i, s) in batch.iter().enumerate() {
            for (k, (&p, &t)) in pred.row(i).iter().zip(s.target.values()).enumerate() {
                loss += (p - t).abs() * scale;
                upstream.set(i, k, sign(p - t) * scale);
            }
        }
        if grad {
            let d_ctx = mlp_backward(&tape, store, &upstream)?;
            mlp_backward(&enc_tape, store, &d_ctx)?;
        }
        Ok(LossReport { recon_l1: loss, bce: 0.0, total: loss, score_accuracy: None })
    }

    fn diffusion_loss(
        &self,
        denoiser: &Mlp,
        scorer: &Mlp,
        store: &mut ParamStore,
        batch: &[&TrainSample],
        noise: &BatchNoise,
        grad: bool,
    ) -> Result<LossReport> {
        let b = batch.len();
        let m = self.train_candidates();
        let dl = self.config.chunk_len();
        let e = self.config.time_embed_dim;
        let c = self.config.context_dim;
        if noise.taus.len() != b || noise.eps.shape() != (b * m, dl) {
            return Err(Error::Shape("noise does not match the batch".into()));
        }
        let (ctx, enc_tape) = mlp_forward(&self.encoder, store, &self.batch_encoder_input(batch)?)?;
        let ctx_rep = ctx.repeat_rows(m);

        let mut noisy = Tensor2::zeros(b * m, dl);
        let mut temb = Tensor2::zeros(b * m, e);
        let mut coef = Vec::with_capacity(b);
        let mut positives = Vec::with_capacity(b);
        for (i, s) in batch.iter().enumerate() {
            let tau = noise.taus[i];
            let (a, sd) = self.schedule.coefficients(tau)?;
            coef.push((a, sd));
            positives.push(match self.config.head {
                HeadKind::Anchored => assign_positive(&s.target, &self.vocab)?.0,
                _ => 0,
            });
            for j in 0..m {
                let anchor = match self.config.head {
                    HeadKind::Anchored => self.vocab.anchor(j).values(),
                    _ => s.target.values(),
                };
                let row = i * m + j;
                let eps = noise.eps.row(row).to_vec();
                for (k, out) in noisy.row_mut(row).iter_mut().enumerate() {
                    *out = a * anchor[k] + sd * eps[k];
                }
                temb.row_mut(row).copy_from_slice(&self.time_embeds[tau]);
            }
        }
        let (logits, sc_tape) = mlp_forward(scorer, store, &Tensor2::hcat(&[&noisy, &temb, &ctx_rep])?)?;

        // Only the positive anchor's reconstruction enters the loss, so the
        // denoiser runs on one row per sample.
        let mut pos_noisy = Tensor2::zeros(b, dl);
        let mut pos_temb = Tensor2::zeros(b, e);
        for i in 0..b {
            let row = i * m + positives[i];
            pos_noisy.row_mut(i).copy_from_slice(noisy.row(row));
            pos_temb.row_mut(i).copy_from_slice(temb.row(row));
        }
        let (eps_hat, den_tape) = mlp_forward(denoiser, store, &Tensor2::hcat(&[&pos_noisy, &pos_temb, &ctx])?)?;
        let mut xhat = Tensor2::zeros(b, dl);
        let mut inside = vec![false; b * dl];
        for i in 0..b {
            let (a, sd) = coef[i];
            for k in 0..dl {
                let raw = (pos_noisy.get(i, k) - sd * eps_hat.get(i, k)) / a;
                inside[i * dl + k] = raw.abs() <= X0_CLAMP;
                xhat.set(i, k, raw.clamp(-X0_CLAMP, X0_CLAMP));
            }
        }

        let mut recon = 0.0;
        let mut bce = 0.0;
        let mut correct = 0usize;
        for (i, s) in batch.iter().enumerate() {
            let pos = positives[i];
            recon += xhat.row(i).iter().zip(s.target.values()).map(|(x, t)| (x - t).abs()).sum::<f64>() / dl as f64;
            let z: Vec<f64> = (0..m).map(|j| logits.get(i * m + j, 0)).collect();
            bce += z.iter().enumerate().map(|(j, &zj)| bce_logit(zj, (j == pos) as u8 as f64)).sum::<f64>();
            if argmax(&z) == pos {
                correct += 1;
            }
        }
        let bf = b as f64;
        let report = LossReport {
            recon_l1: recon / bf,
            bce: bce / bf,
            total: (recon + self.config.lambda * bce) / bf,
            score_accuracy: Some(correct as f64 / bf),
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric("training loss is not finite".into()));
        }
        if grad {
            let mut d_logits = Tensor2::zeros(b * m, 1);
            for i in 0..b {
                for j in 0..m {
                    let z = logits.get(i * m + j, 0);
                    if z.abs() < LOGIT_CLAMP {
                        let y = (j == positives[i]) as u8 as f64;
                        d_logits.set(i * m + j, 0, self.config.lambda * (sigmoid(z) - y) / bf);
                    }
                }
            }
            let d_sc_in = mlp_backward(&sc_tape, store, &d_logits)?;
            let scale = 1.0 / (dl as f64 * bf);
            let mut d_eps = Tensor2::zeros(b, dl);
            for (i, s) in batch.iter().enumerate() {
                let (a, sd) = coef[i];
                for (k, &t) in s.target.values().iter().enumerate() {
                    if inside[i * dl + k] {
                        d_eps.set(i, k, -sign(xhat.get(i, k) - t) * scale * sd / a);
                    }
                }
            }
            let d_den_in = mlp_backward(&den_tape, store, &d_eps)?;
            let mut d_ctx = d_sc_in.slice_cols(dl + e, c)?.sum_row_groups(m)?;
            d_ctx.add_assign(&d_den_in.slice_cols(dl + e, c)?)?;
            mlp_backward(&enc_tape, store, &d_ctx)?;
        }
        Ok(report)
    }

    /// Generate one chunk for `obs`. Anchored heads denoise every anchor
    /// from the truncation boundary and return the best-scoring candidate;
    /// the from-noise head starts all candidates from zero-mean noise.
    pub fn generate(&self, store: &ParamStore, obs: &[f64], task: Task, rng: &mut Rng) -> Result<Generation> {
        let (h, d) = (self.config.horizon, self.config.action_dim);
        let ctx = Tensor2::row_vector(&self.encode_context(store, obs, task)?);
        let (denoiser, scorer) = match &self.nets {
            HeadNets::Regressor { net } => {
                let chunk = ActionChunk::new(h, d, net.infer(store, &ctx)?.into_data())?;
                return Ok(Generation {
                    candidates: vec![chunk.clone()],
                    chunk,
                    chosen: 0,
                    scores: vec![1.0],
                    reverse_steps: 0,
                });
            }
            HeadNets::Diffusion { denoiser, scorer } => (denoiser, scorer),
        };
        let m = self.vocab.len();
        let dl = h * d;
        let tau_start = self.infer_range.tau_start();
        let shared = self.config.shared_noise.then(|| standard_normals(rng, dl));
        let mut inits = Vec::with_capacity(m);
        for j in 0..m {
            let eps = ActionChunk::new(h, d, shared.clone().unwrap_or_else(|| standard_normals(rng, dl)))?;
            let anchor = match self.config.head {
                HeadKind::FromNoise => ActionChunk::zeros(h, d),
                _ => self.vocab.anchor(j).clone(),
            };
            inits.push(anchored_forward(&anchor, &eps, tau_start, &self.schedule)?);
        }
        let ctx_rep = ctx.repeat_rows(m);
        let initial = inits.clone();
        let candidates = reverse_chain_batch(
            inits,
            |batch, tau| {
                let input = Tensor2::hcat(&[&stack(batch)?, &rows_of(&self.time_embeds[tau], m), &ctx_rep])?;
                unstack(&denoiser.infer(store, &input)?, h, d)
            },
            &self.infer_range,
            &self.schedule,
        )?;
        let score_embed = rows_of(&self.time_embeds[self.train_range.tau_start()], m);
        let scored = match self.config.score_input {
            ScoreInput::Initial => &initial,
            ScoreInput::Denoised => &candidates,
        };
        let logits = scorer.infer(store, &Tensor2::hcat(&[&stack(scored)?, &score_embed, &ctx_rep])?)?;
        let chosen = argmax(logits.data());
        Ok(Generation {
            chunk: candidates[chosen].clone(),
            chosen,
            scores: logits.data().iter().map(|&z| sigmoid(z)).collect(),
            candidates,
            reverse_steps: self.infer_range.steps,
        })
    }

    pub fn flops_estimate(&self, episode_steps: usize) -> FlopsEstimate {
        let encoder = self.encoder.spec().flops_per_sample();
        let head = match &self.nets {
            HeadNets::Regressor { net } => net.spec().flops_per_sample(),
            HeadNets::Diffusion { denoiser, scorer } => {
                let m = self.vocab.len() as u64;
                denoiser.spec().flops_per_sample() * m * self.infer_range.steps as u64
                    + scorer.spec().flops_per_sample() * m
            }
        };
        let queries = episode_steps.div_ceil(self.config.horizon) as u64;
        FlopsEstimate {
            encoder_per_query: encoder,
            head_per_query: head,
            queries_per_episode: queries,
            encoder_per_episode: encoder * queries,
            per_episode: (encoder + head) * queries,
        }
    }

    pub fn num_params(&self) -> usize {
        let nets = match &self.nets {
            HeadNets::Regressor { net } => net.spec().num_params(),
            HeadNets::Diffusion { denoiser, scorer } => denoiser.spec().num_params() + scorer.spec().num_params(),
        };
        self.encoder.spec().num_params() + nets
    }
}

/// Optimizer settings for [`Policy::train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay floor as a fraction of `lr`.
    pub final_lr_ratio: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 10000, batch_size: 64, lr: 1e-3, final_lr_ratio: 0.1, seed: 0, log_every: 100 }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (PI * progress).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
    }
}

/// A logged window of training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

const OBS_MEAN: &str = "obs.mean";
const OBS_STD: &str = "obs.std";
const CONFIG_FILE: &str = "policy.json";
const PARAMS_FILE: &str = "params.bin";
const VOCAB_FILE: &str = "vocab.bin";

impl Policy {
    /// Fresh weights. Output layers of every head start at zero, so an
    /// untrained diffusion head predicts zero noise and scores 0.5.
    pub fn new(config: PolicyConfig, vocab: AnchorVocabulary, obs_norm: ObsNorm, rng: &mut Rng) -> Result<Self> {
        Self::create(config, vocab, obs_norm, Some(rng))
    }

    /// Every weight and bias zero.
    pub fn zeroed(config: PolicyConfig, vocab: AnchorVocabulary, obs_norm: ObsNorm) -> Result<Self> {
        Self::create(config, vocab, obs_norm, None)
    }

    /// Random weights everywhere, output layers included (used by gradient
    /// checks, where zero layers would hide most of the network).
    pub fn randomized(config: PolicyConfig, vocab: AnchorVocabulary, obs_norm: ObsNorm, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (model, _) = Self::register(&config, &vocab, &obs_norm, &mut store, Some(rng))?;
        Ok(Self { model: PolicyModel::build(config, model.0, model.1, obs_norm, vocab)?, store })
    }

    #[allow(clippy::type_complexity)]
    fn register(
        config: &PolicyConfig,
        vocab: &AnchorVocabulary,
        obs_norm: &ObsNorm,
        store: &mut ParamStore,
        rng: Option<&mut Rng>,
    ) -> Result<((Mlp, HeadNets), Vec<Mlp>)> {
        config.validate()?;
        if (vocab.horizon(), vocab.dim()) != (config.horizon, config.action_dim) {
            return Err(Error::Shape(format!(
                "vocabulary chunks are {}x{}, policy expects {}x{}",
                vocab.horizon(),
                vocab.dim(),
                config.horizon,
                config.action_dim
            )));
        }
        if obs_norm.mean.len() != config.obs_dim {
            return Err(Error::Shape("observation statistics do not match the observation width".into()));
        }
        let (enc_spec, main_spec, scorer_spec) = net_specs(config)?;
        let mut reg = |name: &str, spec: MlpSpec, rng: &mut Option<&mut Rng>| -> Result<Mlp> {
            Ok(match rng {
                Some(r) => Mlp::register(store, name, spec, &mut **r)?,
                None => Mlp::register_zeroed(store, name, spec)?,
            })
        };
        let mut rng = rng;
        let encoder = reg("encoder", enc_spec, &mut rng)?;
        let (nets, heads) = match scorer_spec {
            None => {
                let net = reg("regressor", main_spec, &mut rng)?;
                (HeadNets::Regressor { net: net.clone() }, vec![net])
            }
            Some(s) => {
                let denoiser = reg("denoiser", main_spec, &mut rng)?;
                let scorer = reg("scorer", s, &mut rng)?;
                (HeadNets::Diffusion { denoiser: denoiser.clone(), scorer: scorer.clone() }, vec![denoiser, scorer])
            }
        };
        Ok(((encoder, nets), heads))
    }

    fn create(config: PolicyConfig, vocab: AnchorVocabulary, obs_norm: ObsNorm, rng: Option<&mut Rng>) -> Result<Self> {
        let mut store = ParamStore::new();
        let ((encoder, nets), heads) = Self::register(&config, &vocab, &obs_norm, &mut store, rng)?;
        for h in &heads {
            h.zero_output_layer(&mut store);
        }
        Ok(Self { model: PolicyModel::build(config, encoder, nets, obs_norm, vocab)?, store })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.model.config
    }

    pub fn generate(&self, obs: &[f64], task: Task, rng: &mut Rng) -> Result<Generation> {
        self.model.generate(&self.store, obs, task, rng)
    }

    pub fn encode_context(&self, obs: &[f64], task: Task) -> Result<Vec<f64>> {
        self.model.encode_context(&self.store, obs, task)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainSample], rng: &mut Rng, adam: &AdamConfig) -> Result<LossReport> {
        let noise = self.model.draw_noise(batch.len(), rng);
        self.store.zero_grads();
        let report = self.model.loss(&mut self.store, batch, &noise, true)?;
        adam_step(&mut self.store, adam)?;
        Ok(report)
    }

    /// Minibatch Adam with cosine learning-rate decay. `on_log` receives the
    /// mean report over each window of `log_every` steps.
    pub fn train(
        &mut self,
        samples: &[TrainSample],
        cfg: &TrainConfig,
        mut on_log: impl FnMut(&TrainLogEntry),
    ) -> Result<LossReport> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = child_rng(cfg.seed, TRAIN_STREAM);
        let mut window = Vec::new();
        let mut last = LossReport::default();
        for step in 0..cfg.steps {
            let batch: Vec<&TrainSample> =
                (0..cfg.batch_size).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
            last = self.train_step(&batch, &mut rng, &AdamConfig::with_lr(cfg.lr_at(step)))?;
            window.push(last);
            if cfg.log_every > 0 && (window.len() == cfg.log_every || step + 1 == cfg.steps) {
                on_log(&TrainLogEntry { step: step + 1, loss: mean_report(&window) });
                window.clear();
            }
        }
        Ok(last)
    }

    /// Directory layout: `policy.json`, `params.bin` (weights plus input
    /// statistics) and `vocab.bin`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.model.config)?)?;
        let mean = Tensor2::row_vector(&self.model.obs_norm.mean);
        let std = Tensor2::row_vector(&self.model.obs_norm.std);
        self.store.save_with(dir.join(PARAMS_FILE), &[(OBS_MEAN, &mean), (OBS_STD, &std)])?;
        self.model.vocab.save(dir.join(VOCAB_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: PolicyConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let vocab = AnchorVocabulary::load(dir.join(VOCAB_FILE), Some((config.horizon, config.action_dim)))?;
        let mut policy = Self::zeroed(config, vocab, ObsNorm::identity(OBS_DIM))?;
        let extras = policy.store.load_values(dir.join(PARAMS_FILE))?;
        let mut mean = None;
        let mut std = None;
        for (name, t) in extras {
            match name.as_str() {
                OBS_MEAN => mean = Some(t.into_data()),
                OBS_STD => std = Some(t.into_data()),
                other => return Err(Error::Format(format!("unexpected tensor {other:?} in parameter file"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == policy.model.config.obs_dim && std.len() == mean.len() => {
                policy.model.obs_norm = ObsNorm { mean, std };
            }
            _ => return Err(Error::Format("parameter file lacks observation statistics".into())),
        }
        Ok(policy)
    }

    /// Copy with a different inference budget.
    pub fn with_denoise_steps(&self, steps: Option<usize>) -> Result<Self> {
        let mut p = self.clone();
        p.model.config.denoise_steps = steps;
        p.model.infer_range = p.model.config.infer_range()?;
        Ok(p)
    }
}

fn mean_report(window: &[LossReport]) -> LossReport {
    let n = window.len().max(1) as f64;
    let acc: Vec<f64> = window.iter().filter_map(|r| r.score_accuracy).collect();
    LossReport {
        recon_l1: window.iter().map(|r| r.recon_l1).sum::<f64>() / n,
        bce: window.iter().map(|r| r.bce).sum::<f64>() / n,
        total: window.iter().map(|r| r.total).sum::<f64>() / n,
        score_accuracy: (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64),
    }
}
