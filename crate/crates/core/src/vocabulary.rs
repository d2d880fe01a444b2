//! Trajectory vocabulary: chunk segmentation, per-dimension normalization,
//! K-means anchors and positive-anchor assignment.

use std::path::Path;

use numkit::io::{read_container_file, write_container_file};
use numkit::Tensor2;
use rand::Rng as _;
use serde::Serialize;

use crate::schedule::ActionChunk;
use crate::seeds::Rng;
use crate::{Error, Result};

const VOCAB_MAGIC: [u8; 4] = *b"ANVC";
const CONSTANT_DIM_PAD: f64 = 1e-6;

/// Sliding windows of length `horizon` with stride 1. An episode shorter than
/// the horizon yields a single chunk padded by repeating its final action.
pub fn segment_chunks(episode: &[Vec<f64>], horizon: usize) -> Result<Vec<ActionChunk>> {
    if episode.is_empty() {
        return Err(Error::Data("cannot segment an empty episode".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("chunk horizon must be positive".into()));
    }
    if episode.len() < horizon {
        let mut rows = episode.to_vec();
        let last = episode.last().cloned().expect("non-empty");
        rows.resize(horizon, last);
        return Ok(vec![ActionChunk::from_rows(&rows)?]);
    }
    (0..=episode.len() - horizon).map(|i| ActionChunk::from_rows(&episode[i..i + horizon])).collect()
}

/// The chunk starting at `start`, padded with the final action past the end
/// of the episode. Used for training targets at every step.
pub fn chunk_at(episode: &[Vec<f64>], start: usize, horizon: usize) -> Result<ActionChunk> {
    let last = episode.last().ok_or_else(|| Error::Data("empty episode".into()))?;
    let rows: Vec<Vec<f64>> =
        (start..start + horizon).map(|i| episode.get(i).unwrap_or(last).clone()).collect();
    ActionChunk::from_rows(&rows)
}

/// Per-dimension min/max for the affine map onto [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Fit over every action row of every chunk. Constant dimensions are
    /// widened by a small symmetric pad so the map stays invertible.
    pub fn fit(chunks: &[ActionChunk]) -> Result<Self> {
        let first = chunks.first().ok_or_else(|| Error::Data("no chunks to fit normalization".into()))?;
        let d = first.dim();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for c in chunks {
            if c.dim() != d {
                return Err(Error::Shape("chunks differ in action dimension".into()));
            }
            for j in 0..c.horizon() {
                for (k, &v) in c.step(j).iter().enumerate() {
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        Self::from_bounds(min, max)
    }

    pub fn from_bounds(mut min: Vec<f64>, mut max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::Shape("normalization bounds must be non-empty and equal length".into()));
        }
        for k in 0..min.len() {
            if !(min[k].is_finite() && max[k].is_finite()) || min[k] > max[k] {
                return Err(Error::Data(format!("invalid bounds for dimension {k}")));
            }
            if min[k] == max[k] {
                min[k] -= CONSTANT_DIM_PAD;
                max[k] += CONSTANT_DIM_PAD;
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(k, &v)| 2.0 * (v - self.min[k]) / (self.max[k] - self.min[k]) - 1.0)
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(k, &v)| (v + 1.0) * 0.5 * (self.max[k] - self.min[k]) + self.min[k])
            .collect()
    }

    pub fn normalize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.map_chunk(chunk, |s, row| s.normalize_action(row))
    }

    pub fn denormalize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.map_chunk(chunk, |s, row| s.denormalize_action(row))
    }

    fn map_chunk(&self, chunk: &ActionChunk, f: impl Fn(&Self, &[f64]) -> Vec<f64>) -> Result<ActionChunk> {
        if chunk.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "chunk has {} action dims, statistics have {}",
                chunk.dim(),
                self.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..chunk.horizon()).map(|j| f(self, chunk.step(j))).collect();
        ActionChunk::from_rows(&rows)
    }
}

/// M anchor chunks in normalized units plus the statistics that define them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorVocabulary {
    anchors: Vec<ActionChunk>,
    stats: NormStats,
}

impl AnchorVocabulary {
    pub fn new(anchors: Vec<ActionChunk>, stats: NormStats) -> Result<Self> {
        let first = anchors.first().ok_or_else(|| Error::Data("vocabulary needs at least one anchor".into()))?;
        let shape = first.shape();
        if anchors.iter().any(|a| a.shape() != shape) {
            return Err(Error::Shape("anchors differ in shape".into()));
        }
        if shape.1 != stats.dim() {
            return Err(Error::Shape("anchor dimension does not match statistics".into()));
        }
        Ok(Self { anchors, stats })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.anchors[0].horizon()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].dim()
    }

    pub fn anchors(&self) -> &[ActionChunk] {
        &self.anchors
    }

    pub fn anchor(&self, m: usize) -> &ActionChunk {
        &self.anchors[m]
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// Same statistics, every anchor replaced by zeros.
    pub fn zeroed(&self) -> Self {
        let (h, d) = self.anchors[0].shape();
        Self { anchors: vec![ActionChunk::zeros(h, d); self.len()], stats: self.stats.clone() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let min = Tensor2::row_vector(&self.stats.min);
        let max = Tensor2::row_vector(&self.stats.max);
        let names: Vec<String> = (0..self.len()).map(|m| format!("anchor.{m}")).collect();
        let mut tensors: Vec<(&str, &Tensor2)> =
            names.iter().zip(&self.anchors).map(|(n, a)| (n.as_str(), a.as_tensor())).collect();
        tensors.push(("stats.min", &min));
        tensors.push(("stats.max", &max));
        let header = [self.horizon() as u32, self.dim() as u32, self.len() as u32];
        write_container_file(path, VOCAB_MAGIC, &header, &tensors)?;
        Ok(())
    }

    /// Load a vocabulary; `expected` = (H, d) from the run config, if any.
    pub fn load(path: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<Self> {
        let (header, tensors) = read_container_file(path, VOCAB_MAGIC, 3)?;
        let (h, d, m) = (header[0] as usize, header[1] as usize, header[2] as usize);
        if let Some((eh, ed)) = expected {
            if (eh, ed) != (h, d) {
                return Err(Error::Shape(format!(
                    "vocabulary chunks are {h}x{d} but the run expects {eh}x{ed}"
                )));
            }
        }
        let mut anchors = vec![None; m];
        let (mut min, mut max) = (None, None);
        for (name, t) in tensors {
            match name.as_str() {
                "stats.min" => min = Some(t.into_data()),
                "stats.max" => max = Some(t.into_data()),
                other => {
                    let idx: usize = other
                        .strip_prefix("anchor.")
                        .and_then(|s| s.parse().ok())
                        .filter(|&i| i < m)
                        .ok_or_else(|| Error::Format(format!("unexpected tensor {other:?}")))?;
                    if t.shape() != (h, d) {
                        return Err(Error::Shape(format!("{other} is {:?}, header says {h}x{d}", t.shape())));
                    }
                    anchors[idx] = Some(ActionChunk::from_tensor(t)?);
                }
            }
        }
        let anchors = anchors
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Format("vocabulary file is missing anchors".into()))?;
        let (min, max) = match (min, max) {
            (Some(a), Some(b)) if a.len() == d && b.len() == d => (a, b),
            _ => return Err(Error::Format("vocabulary file is missing normalization statistics".into())),
        };
        // Bounds were already padded when fitted; rebuild without re-padding.
        Self::new(anchors, NormStats { min, max })
    }
}

/// Index of the anchor with least L1 distance to `target` (ties → lowest
/// index) and the one-hot label vector.
pub fn assign_positive(target: &ActionChunk, vocab: &AnchorVocabulary) -> Result<(usize, Vec<f64>)> {
    if target.shape() != vocab.anchors[0].shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs anchors {:?}",
            target.shape(),
            vocab.anchors[0].shape()
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, a) in vocab.anchors.iter().enumerate() {
        let d = target.l1_distance(a);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    let mut y = vec![0.0; vocab.len()];
    y[best] = 1.0;
    Ok((best, y))
}

/// Result of Lloyd's algorithm on flat points.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = points[idx].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations under squared Euclidean
/// distance. Empty clusters are reseeded at the point farthest from its
/// centroid. Stops when assignments are stable or after `max_iters`.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("number of clusters must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Data(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut sse_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        // Reseed empty clusters at the farthest points.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .ok_or_else(|| Error::Data("cannot reseed an empty cluster".into()))?;
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            let n = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / n).collect();
        }
        let sse: f64 = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        sse_history.push(sse);
        if !changed {
            break;
        }
    }
    Ok(KMeans { centroids, assignments, sse_history })
}

/// Cluster normalized chunks into an anchor vocabulary.
pub fn kmeans_fit(
    chunks: &[ActionChunk],
    num_anchors: usize,
    stats: NormStats,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<AnchorVocabulary> {
    if chunks.len() < num_anchors {
        return Err(Error::Data(format!("{} chunks cannot form {num_anchors} anchors", chunks.len())));
    }
    let (h, d) = chunks[0].shape();
    let points: Vec<Vec<f64>> = chunks.iter().map(|c| c.values().to_vec()).collect();
    let km = kmeans(&points, num_anchors, rng, max_iters)?;
    let anchors = km
        .centroids
        .into_iter()
        .map(|c| ActionChunk::new(h, d, c))
        .collect::<Result<Vec<_>>>()?;
    AnchorVocabulary::new(anchors, stats)
}

/// Nearest-anchor L1 distance summary over a chunk set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageStats {
    pub mean: f64,
    pub median: f64,
    pub p99: f64,
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

pub fn coverage(chunks: &[ActionChunk], vocab: &AnchorVocabulary) -> Result<CoverageStats> {
    let mut d = chunks
        .iter()
        .map(|c| {
            let (m, _) = assign_positive(c, vocab)?;
            Ok(c.l1_distance(vocab.anchor(m)))
        })
        .collect::<Result<Vec<f64>>>()?;
    if d.is_empty() {
        return Err(Error::Data("no chunks".into()));
    }
    d.sort_by(f64::total_cmp);
    Ok(CoverageStats {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        median: percentile(&d, 0.5),
        p99: percentile(&d, 0.99),
    })
}
