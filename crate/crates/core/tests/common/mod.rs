#![allow(dead_code)]

pub mod gradients;

use anchor_core::seeds::{rng_from_seed, standard_normals};

/// Twelve 2-D points in two tight blobs around (−2, 0) and (2, 1).
pub fn two_blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..12)
        .map(|i| {
            let centre = if i < 6 { [-2.0, 0.0] } else { [2.0, 1.0] };
            let n = standard_normals(&mut rng, 2);
            vec![centre[0] + 0.1 * n[0], centre[1] + 0.1 * n[1]]
        })
        .collect()
}

pub fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> =
            (0..dim).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    total
}

/// Least within-cluster SSE over every assignment of the points to two
/// non-empty clusters.
pub fn brute_force_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.min(sse(points, &labels, 2));
    }
    best
}
