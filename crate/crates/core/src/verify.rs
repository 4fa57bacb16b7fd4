//! Randomized self-checks: the gradient decomposition of the sub-cluster
//! loss, the cosine/distance identity on the sphere, and the detection
//! metrics against brute-force oracles.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{auc, pauc};
use crate::geometry::{init_centers, sphere_identity_residual, normalize, UnitVector};
use crate::losses::{LabelDist, ScaleState};
use crate::net::{EmbeddingNet, NetInput, NetSpec};
use crate::train::{mixed_batch, verify_decomposition, GradientCheck};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

/// One random small network, batch and center bank, checked with
/// [`verify_decomposition`]. Sizes stay within 5 classes, 4 sub-centers, 8
/// embedding dimensions and 8 samples. Draws where every ReLU of some sample
/// is dead, leaving nothing to normalize, are redrawn.
pub fn decomposition_trial(rng: &mut ChaCha8Rng, single_center: bool, mixup: bool) -> Result<GradientCheck> {
    loop {
        match draw_trial(rng, single_center, mixup) {
            Err(Error::DegenerateEmbedding(_)) => continue,
            r => return r,
        }
    }
}

fn draw_trial(rng: &mut ChaCha8Rng, single_center: bool, mixup: bool) -> Result<GradientCheck> {
    let n = rng.random_range(2..=5);
    let m = if single_center { 1 } else { rng.random_range(1..=4) };
    let spec = NetSpec {
        spec_freq: rng.random_range(1..=4),
        spec_segments: 1,
        spectrum_len: rng.random_range(1..=4),
        spec_hidden: vec![rng.random_range(2..=6)],
        spectrum_hidden: vec![rng.random_range(2..=6)],
        embed_dim: rng.random_range(2..=8),
    };
    let batch = rng.random_range(2..=8);
    let input = NetInput {
        spec: gaussian(rng, batch, spec.spec_input()),
        spectrum: gaussian(rng, batch, spec.spectrum_len),
    };
    let labels = (0..batch)
        .map(|_| LabelDist::one_hot(n, rng.random_range(0..n)))
        .collect::<Result<Vec<_>>>()?;
    let bank = init_centers(n, m, spec.embed_dim, rng.random())?;
    let net = EmbeddingNet::init(spec, rng.random())?;
    let state = ScaleState::fixed(rng.random_range(0.5..10.0));
    if mixup {
        let (x, l) = mixed_batch(&input, &labels, rng.random())?;
        verify_decomposition(&net, &bank, &state, &x, &l)
    } else {
        verify_decomposition(&net, &bank, &state, &input, &labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionSummary {
    pub trials: usize,
    /// Worst discrepancy of the decomposition over all trials.
    pub max_decomposition: f64,
    /// Worst discrepancy of the single-center form over the one-center trials.
    pub max_single_center: f64,
}

/// `trials` general instances plus `trials` one-center instances, half of
/// each mixed.
pub fn decomposition_trials(trials: usize, seed: u64) -> Result<DecompositionSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DecompositionSummary {
        trials,
        max_decomposition: 0.0,
        max_single_center: 0.0,
    };
    for i in 0..trials {
        let general = decomposition_trial(&mut rng, false, i % 2 == 1)?;
        out.max_decomposition = out.max_decomposition.max(general.decomposition);
        let single = decomposition_trial(&mut rng, true, i % 2 == 1)?;
        out.max_decomposition = out.max_decomposition.max(single.decomposition);
        out.max_single_center = out.max_single_center.max(single.single_center.unwrap_or(f64::INFINITY));
    }
    Ok(out)
}

/// A point drawn uniformly on the sphere in `R^dim`.
pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

/// Largest cosine/distance residual over `pairs` random pairs per dimension.
pub fn sphere_identity_max_residual(pairs: usize, dims: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &d in dims {
        for _ in 0..pairs {
            let (u, v) = (random_unit(&mut rng, d), random_unit(&mut rng, d));
            worst = worst.max(sphere_identity_residual(&u, &v));
        }
    }
    worst
}

/// Fraction of (anomalous, normal) pairs ranked correctly, ties counting one
/// half.
pub fn pairwise_auc(normals: &[f64], anomalies: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in anomalies {
        for n in normals {
            if a > n {
                wins += 1.0;
            } else if a == n {
                wins += 0.5;
            }
        }
    }
    wins / (normals.len() * anomalies.len()) as f64
}

/// ROC area over `fpr in [0, p]` divided by `p`, from a sweep over every
/// distinct score used as a `>=` threshold.
pub fn sweep_pauc(normals: &[f64], anomalies: &[f64], p: f64) -> f64 {
    let mut thresholds: Vec<f64> = normals.iter().chain(anomalies).copied().collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x >= t).count() as f64 / xs.len() as f64;
    let pts: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (rate(normals, t), rate(anomalies, t)))
        .collect();
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let hi = x1.min(p);
        if hi <= x0 {
            continue;
        }
        let y_hi = y0 + (y1 - y0) * (hi - x0) / (x1 - x0);
        area += (hi - x0) * (y0 + y_hi) / 2.0;
    }
    area / p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub trials: usize,
    pub max_auc_error: f64,
    pub max_pauc_error: f64,
    /// Worst `|pauc(p = 1) - auc|`.
    pub max_full_range_gap: f64,
}

/// Random score sets of up to 200 points, with deliberate ties, checked
/// against the pairwise and sweep oracles.
pub fn metric_trials(trials: usize, p: f64, seed: u64) -> Result<MetricSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricSummary {
        trials,
        max_auc_error: 0.0,
        max_pauc_error: 0.0,
        max_full_range_gap: 0.0,
    };
    for _ in 0..trials {
        let n_neg = rng.random_range(1..=100);
        let n_pos = rng.random_range(1..=100);
        // coarse rounding on some trials produces tied scores
        let levels = if rng.random::<bool>() { 8.0 } else { 1e9 };
        let shift = rng.random_range(0.0..1.5);
        let mut draw = |n: usize, mu: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    ((z + mu) * levels).round() / levels
                })
                .collect()
        };
        let normals = draw(n_neg, 0.0);
        let anomalies = draw(n_pos, shift);
        let a = auc(&normals, &anomalies)?;
        out.max_auc_error = out.max_auc_error.max((a - pairwise_auc(&normals, &anomalies)).abs());
        let pa = pauc(&normals, &anomalies, p)?;
        out.max_pauc_error = out.max_pauc_error.max((pa - sweep_pauc(&normals, &anomalies, p)).abs());
        out.max_full_range_gap = out.max_full_range_gap.max((pauc(&normals, &anomalies, 1.0)? - a).abs());
    }
    Ok(out)
}
