//! Noise schedule, anchored forward noising, x0 inversion and the
//! deterministic reverse chain over a truncated timestep range.

use numkit::Tensor2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seeds::Rng;
use crate::{Error, Result};

/// Per-entry bound applied to reconstructed clean chunks.
pub const X0_CLAMP: f64 = 1.5;

/// An H×d block of (normalized) actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(Tensor2);

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let t = Tensor2::new(horizon, dim, values)?;
        Self::from_tensor(t)
    }

    pub fn from_tensor(t: Tensor2) -> Result<Self> {
        if t.rows() == 0 || t.cols() == 0 {
            return Err(Error::Shape("action chunk must be non-empty".into()));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("action chunk has non-finite entries".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self(Tensor2::zeros(horizon, dim))
    }

    /// Build from per-step action rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged action rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn horizon(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn step(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor2 {
        self.0
    }

    /// Sum of absolute entry differences.
    pub fn l1_distance(&self, other: &ActionChunk) -> f64 {
        self.values().iter().zip(other.values()).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Mean absolute entry difference.
    pub fn mean_abs_distance(&self, other: &ActionChunk) -> f64 {
        self.l1_distance(other) / self.values().len() as f64
    }

    /// Entrywise average of two chunks.
    pub fn midpoint(&self, other: &ActionChunk) -> Result<ActionChunk> {
        check_shape(self, other.shape())?;
        let v = self.values().iter().zip(other.values()).map(|(a, b)| 0.5 * (a + b)).collect();
        ActionChunk::new(self.horizon(), self.dim(), v)
    }
}

fn check_shape(chunk: &ActionChunk, shape: (usize, usize)) -> Result<()> {
    if chunk.shape() != shape {
        return Err(Error::Shape(format!("chunk {:?} vs expected {:?}", chunk.shape(), shape)));
    }
    Ok(())
}

/// Linear-β DDPM noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The parameters a schedule is rebuilt from; this is what run configs store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { beta_start, beta_end, betas, alphas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig { steps: self.steps(), beta_start: self.beta_start, beta_end: self.beta_end }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        self.alpha_bars
            .get(tau)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {tau} outside schedule of {}", self.steps())))
    }

    /// `(sqrt(ᾱ_τ), sqrt(1 − ᾱ_τ))`.
    pub fn coefficients(&self, tau: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(tau)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// The first `steps` timesteps of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedRange {
    pub rho: f64,
    pub steps: usize,
}

impl TruncatedRange {
    /// `S_tr = max{1, round(ρ·S)}`.
    pub fn new(rho: f64, total_steps: usize) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("truncation ratio must lie in (0, 1], got {rho}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        let steps = ((rho * total_steps as f64).round() as usize).max(1).min(total_steps);
        Ok(Self { rho, steps })
    }

    /// A range with an explicit step count (used for denoising budgets).
    pub fn from_steps(steps: usize, total_steps: usize) -> Result<Self> {
        if steps == 0 || steps > total_steps {
            return Err(Error::Config(format!("step budget {steps} outside 1..={total_steps}")));
        }
        Ok(Self { rho: steps as f64 / total_steps as f64, steps })
    }

    pub fn tau_start(&self) -> usize {
        self.steps - 1
    }

    /// τ ~ U{0, …, S_tr − 1}.
    pub fn sample_timestep(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.steps)
    }
}

/// `sqrt(ᾱ_τ)·anchor + sqrt(1 − ᾱ_τ)·eps`.
pub fn anchored_forward(
    anchor: &ActionChunk,
    eps: &ActionChunk,
    tau: usize,
    sched: &DiffusionSchedule,
) -> Result<ActionChunk> {
    check_shape(eps, anchor.shape())?;
    let (a, s) = sched.coefficients(tau)?;
    let v = anchor.values().iter().zip(eps.values()).map(|(x, e)| a * x + s * e).collect();
    ActionChunk::new(anchor.horizon(), anchor.dim(), v)
}

/// x0 inversion without the clamp.
pub fn invert_x0_unclamped(
    noisy: &ActionChunk,
    eps_hat: &ActionChunk,
    tau: usize,
    sched: &DiffusionSchedule,
) -> Result<ActionChunk> {
    check_shape(eps_hat, noisy.shape())?;
    let (a, s) = sched.coefficients(tau)?;
    let v = noisy.values().iter().zip(eps_hat.values()).map(|(x, e)| (x - s * e) / a).collect();
    ActionChunk::new(noisy.horizon(), noisy.dim(), v)
}

/// `(noisy − sqrt(1 − ᾱ_τ)·ε̂) / sqrt(ᾱ_τ)`, clamped per entry to ±[`X0_CLAMP`].
pub fn invert_x0(
    noisy: &ActionChunk,
    eps_hat: &ActionChunk,
    tau: usize,
    sched: &DiffusionSchedule,
) -> Result<ActionChunk> {
    let mut x0 = invert_x0_unclamped(noisy, eps_hat, tau, sched)?;
    x0.values_mut().iter_mut().for_each(|v| *v = v.clamp(-X0_CLAMP, X0_CLAMP));
    Ok(x0)
}

/// Deterministic (η = 0) reverse chain over a batch of chunks that share a
/// timestep at every stage. At each τ = τ_start … 0 the clean chunk is
/// estimated by [`invert_x0`]; for τ > 0 it is re-projected to τ − 1 with
/// the predicted noise and no fresh noise. Returns the final clean estimates.
pub fn reverse_chain_batch<F>(
    inits: Vec<ActionChunk>,
    mut denoiser: F,
    range: &TruncatedRange,
    sched: &DiffusionSchedule,
) -> Result<Vec<ActionChunk>>
where
    F: FnMut(&[ActionChunk], usize) -> Result<Vec<ActionChunk>>,
{
    if range.steps > sched.steps() {
        return Err(Error::Config(format!(
            "truncated range of {} steps exceeds schedule of {}",
            range.steps,
            sched.steps()
        )));
    }
    let mut current = inits;
    let mut x0 = Vec::new();
    for tau in (0..=range.tau_start()).rev() {
        let eps_hat = denoiser(&current, tau)?;
        if eps_hat.len() != current.len() {
            return Err(Error::Shape("denoiser returned a different batch size".into()));
        }
        if let Some(i) = eps_hat.iter().position(|e| !e.values().iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("denoiser output non-finite for chunk {i} at timestep {tau}")));
        }
        x0 = current
            .iter()
            .zip(&eps_hat)
            .map(|(x, e)| invert_x0(x, e, tau, sched))
            .collect::<Result<Vec<_>>>()?;
        if tau > 0 {
            current = x0
                .iter()
                .zip(&eps_hat)
                .map(|(c, e)| anchored_forward(c, e, tau - 1, sched))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok(x0)
}

/// Single-chunk form of [`reverse_chain_batch`].
pub fn reverse_chain<F>(
    init: &ActionChunk,
    mut denoiser: F,
    range: &TruncatedRange,
    sched: &DiffusionSchedule,
) -> Result<ActionChunk>
where
    F: FnMut(&ActionChunk, usize) -> Result<ActionChunk>,
{
    let mut out = reverse_chain_batch(
        vec![init.clone()],
        |batch, tau| Ok(vec![denoiser(&batch[0], tau)?]),
        range,
        sched,
    )?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng_from_seed, standard_normals};

    fn random_chunk(rng: &mut Rng, h: usize, d: usize, scale: f64) -> ActionChunk {
        let v = standard_normals(rng, h * d).into_iter().map(|x| x * scale).collect();
        ActionChunk::new(h, d, v).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_product_matches_independent_loop() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut prod = 1.0;
        for t in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t as f64) / 49.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars()[49] - prod).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars()[49] < s.alpha_bars()[0]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn truncated_range_values() {
        assert_eq!(TruncatedRange::new(0.2, 50).unwrap().steps, 10);
        assert_eq!(TruncatedRange::new(0.2, 50).unwrap().tau_start(), 9);
        assert_eq!(TruncatedRange::new(1.0, 50).unwrap().steps, 50);
        assert_eq!(TruncatedRange::new(0.001, 50).unwrap().steps, 1);
        assert!(TruncatedRange::new(0.0, 50).is_err());
        assert!(TruncatedRange::new(1.01, 50).is_err());
    }

    #[test]
    fn timestep_sampling_support() {
        let mut rng = rng_from_seed(0);
        let one = TruncatedRange::new(0.01, 50).unwrap();
        assert!((0..100).all(|_| one.sample_timestep(&mut rng) == 0));
        let r = TruncatedRange::new(0.2, 50).unwrap();
        assert!((0..10_000).all(|_| r.sample_timestep(&mut rng) < 10));
    }

    #[test]
    fn forward_limits() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = rng_from_seed(1);
        let anchor = random_chunk(&mut rng, 3, 2, 0.5);
        let zero = ActionChunk::zeros(3, 2);
        let out = anchored_forward(&anchor, &zero, 7, &s).unwrap();
        let a = s.alpha_bars()[7].sqrt();
        for (o, x) in out.values().iter().zip(anchor.values()) {
            assert_eq!(*o, a * x);
        }
        let ones = ActionChunk::new(3, 2, vec![1.0; 6]).unwrap();
        let out = anchored_forward(&zero, &ones, 7, &s).unwrap();
        let c = (1.0 - s.alpha_bars()[7]).sqrt();
        assert!(out.values().iter().all(|&v| v == c));
        assert!(matches!(anchored_forward(&anchor, &zero, 50, &s), Err(Error::Index(_))));
    }

    #[test]
    fn inversion_clamps_and_is_near_identity_at_low_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let noisy = ActionChunk::new(1, 2, vec![0.4, -0.3]).unwrap();
        let x0 = invert_x0(&noisy, &ActionChunk::zeros(1, 2), 0, &s).unwrap();
        for (a, b) in x0.values().iter().zip(noisy.values()) {
            assert!((a - b).abs() < 1e-4);
        }
        let big = ActionChunk::new(1, 2, vec![3.0 * s.alpha_bars()[0].sqrt(), -10.0]).unwrap();
        let x0 = invert_x0(&big, &ActionChunk::zeros(1, 2), 0, &s).unwrap();
        assert_eq!(x0.values(), &[1.5, -1.5]);
    }

    #[test]
    fn oracle_denoiser_chain_is_exact_for_every_start() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = rng_from_seed(2);
        for steps in 1..=50 {
            let anchor = random_chunk(&mut rng, 4, 3, 0.4);
            let eps = random_chunk(&mut rng, 4, 3, 1.0);
            let range = TruncatedRange::from_steps(steps, 50).unwrap();
            let init = anchored_forward(&anchor, &eps, range.tau_start(), &s).unwrap();
            let out = reverse_chain(&init, |_, _| Ok(eps.clone()), &range, &s).unwrap();
            for (a, b) in out.values().iter().zip(anchor.values()) {
                assert!((a - b).abs() < 1e-8, "steps {steps}");
            }
        }
    }

    #[test]
    fn one_step_chain_equals_inversion() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = rng_from_seed(3);
        let init = random_chunk(&mut rng, 2, 2, 1.0);
        let eps = random_chunk(&mut rng, 2, 2, 1.0);
        let range = TruncatedRange::from_steps(1, 50).unwrap();
        let out = reverse_chain(&init, |_, _| Ok(eps.clone()), &range, &s).unwrap();
        assert_eq!(out, invert_x0(&init, &eps, 0, &s).unwrap());
    }

    #[test]
    fn chain_reports_non_finite_denoiser_output() {
        let s = ScheduleConfig::default().build().unwrap();
        let init = ActionChunk::zeros(1, 1);
        let range = TruncatedRange::from_steps(3, 50).unwrap();
        let bad = ActionChunk(Tensor2::filled(1, 1, f64::NAN));
        let res = reverse_chain(&init, |_, _| Ok(bad.clone()), &range, &s);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
