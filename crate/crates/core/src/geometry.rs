//! Arithmetic on the unit hypersphere.
//!
//! Every embedding and every class center lives on the sphere of radius one in
//! `R^D`. On that sphere cosine similarity and squared Euclidean distance carry
//! the same information:
//!
//! ```text
//! cos(u, v) = 1 - |u - v|^2 / 2
//! ```
//!
//! which is what lets a cosine-softmax loss be rewritten in terms of
//! compactness losses (see [`crate::losses::decomposed_grad`]).

use std::f64::consts::{FRAC_PI_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vectors with a norm at or below this are rejected by [`normalize`].
pub const MIN_NORM: f64 = 1e-30;

/// A `D`-dimensional vector of unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Wraps coordinates that are already unit-norm, checking the norm to 1e-9.
    pub fn from_unit(coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "vector has norm {n}, expected 1"
            )));
        }
        Ok(UnitVector(coords))
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Projects `v` onto the unit sphere.
///
/// A (near) zero vector is an error: with bias-free layers it is exactly what a
/// network with all-zero weights produces.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("embedding norm".into()));
    }
    if n <= MIN_NORM {
        return Err(Error::DegenerateEmbedding(n));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &UnitVector, v: &UnitVector) -> f64 {
    dot(&u.0, &v.0).clamp(-1.0, 1.0)
}

/// Squared Euclidean distance `|u - v|^2`.
pub fn sq_dist(u: &UnitVector, v: &UnitVector) -> f64 {
    u.0.iter().zip(&v.0).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `|cos(u, v) - (1 - |u - v|^2 / 2)|`, which vanishes on the unit sphere up
/// to rounding.
pub fn sphere_identity_residual(u: &UnitVector, v: &UnitVector) -> f64 {
    (dot(&u.0, &v.0) - (1.0 - sq_dist(u, v) / 2.0)).abs()
}

/// Margin-shifted cosine `cos(arccos(cos(u, c)) + m)`.
///
/// The shifted angle is clamped to `[0, pi]`.
pub fn cos_margin(u: &UnitVector, c: &UnitVector, m: f64) -> Result<f64> {
    check_margin(m)?;
    Ok(cos_margin_of(cosine(u, c), m))
}

pub(crate) fn check_margin(m: f64) -> Result<()> {
    if !(0.0..=FRAC_PI_2).contains(&m) {
        return Err(Error::InvalidParameter(format!(
            "margin {m} outside [0, pi/2]"
        )));
    }
    Ok(())
}

pub(crate) fn cos_margin_of(cos: f64, m: f64) -> f64 {
    if m == 0.0 {
        return cos;
    }
    let theta = cos.clamp(-1.0, 1.0).acos();
    (theta + m).clamp(0.0, PI).cos()
}

/// Fixed, non-trainable class centers: `n_classes` classes with
/// `n_sub` sub-cluster centers each.
///
/// The bank is fully determined by `(n_classes, n_sub, dim, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    n_classes: usize,
    n_sub: usize,
    dim: usize,
    seed: u64,
    centers: Vec<UnitVector>,
}

/// Serializable identity of a [`CenterBank`]; centers are regenerated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterBankParams {
    pub n_classes: usize,
    pub n_sub: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Draws `n_classes * n_sub` centers uniformly on the sphere in `R^dim`.
///
/// Each center is a normalized vector of i.i.d. standard Gaussians.
pub fn init_centers(n_classes: usize, n_sub: usize, dim: usize, seed: u64) -> Result<CenterBank> {
    if n_classes == 0 || n_sub == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "center bank dimensions must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n_classes * n_sub);
    while centers.len() < n_classes * n_sub {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        // A Gaussian draw of norm zero has probability zero; redraw anyway.
        if let Ok(u) = normalize(&v) {
            centers.push(u);
        }
    }
    Ok(CenterBank {
        n_classes,
        n_sub,
        dim,
        seed,
        centers,
    })
}

impl CenterBank {
    pub fn from_params(p: CenterBankParams) -> Result<Self> {
        init_centers(p.n_classes, p.n_sub, p.dim, p.seed)
    }

    /// Builds a bank from explicit centers, laid out class-major.
    ///
    /// Used for constructed test geometries; the seed is recorded as 0.
    pub fn from_centers(n_classes: usize, n_sub: usize, centers: Vec<UnitVector>) -> Result<Self> {
        if n_classes == 0 || n_sub == 0 || centers.len() != n_classes * n_sub {
            return Err(Error::Shape(format!(
                "{} centers for {n_classes} classes x {n_sub} sub-clusters",
                centers.len()
            )));
        }
        let dim = centers[0].dim();
        if centers.iter().any(|c| c.dim() != dim) {
            return Err(Error::Shape("centers of differing dimension".into()));
        }
        Ok(CenterBank {
            n_classes,
            n_sub,
            dim,
            seed: 0,
            centers,
        })
    }

    pub fn params(&self) -> CenterBankParams {
        CenterBankParams {
            n_classes: self.n_classes,
            n_sub: self.n_sub,
            dim: self.dim,
            seed: self.seed,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Center `sub` of class `class`.
    pub fn center(&self, class: usize, sub: usize) -> &UnitVector {
        &self.centers[class * self.n_sub + sub]
    }

    /// All sub-cluster centers of one class.
    pub fn class_centers(&self, class: usize) -> &[UnitVector] {
        &self.centers[class * self.n_sub..(class + 1) * self.n_sub]
    }

    /// Every center, class-major.
    pub fn all(&self) -> &[UnitVector] {
        &self.centers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_3;

    fn uv(v: &[f64]) -> UnitVector {
        normalize(v).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-15);
        let again = normalize(u.as_slice()).unwrap();
        assert!(again
            .as_slice()
            .iter()
            .zip(u.as_slice())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            normalize(&[0.0, 0.0, 0.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn cosine_and_distance_basics() {
        let e1 = uv(&[1.0, 0.0]);
        let e2 = uv(&[0.0, 1.0]);
        let m1 = uv(&[-1.0, 0.0]);
        assert_eq!(cosine(&e1, &e1), 1.0);
        assert_eq!(cosine(&e1, &e2), 0.0);
        assert_eq!(cosine(&e1, &m1), -1.0);
        assert_eq!(sq_dist(&e1, &e1), 0.0);
        assert_eq!(sq_dist(&e1, &e2), 2.0);
        assert_eq!(sq_dist(&e1, &m1), 4.0);
        assert_eq!(sphere_identity_residual(&e1, &e2), 0.0);
    }

    #[test]
    fn margin_cases() {
        let u = uv(&[1.0, 0.0]);
        let c = uv(&[0.5, 3f64.sqrt() / 2.0]);
        assert_eq!(cos_margin(&u, &c, 0.0).unwrap(), cosine(&u, &c));
        assert!(cos_margin(&u, &u, FRAC_PI_2).unwrap().abs() < 1e-15);
        // theta = pi/3, m = pi/6
        assert!(cos_margin(&u, &c, FRAC_PI_3 / 2.0).unwrap().abs() < 1e-12);
        assert!(cos_margin(&u, &c, -0.1).is_err());
        assert!(cos_margin(&u, &c, 2.0).is_err());
        // theta + m beyond pi clamps to cos(pi)
        let far = uv(&[-1.0, 0.01]);
        assert_eq!(cos_margin(&u, &far, FRAC_PI_2).unwrap(), -1.0);
    }

    #[test]
    fn centers_are_unit_and_deterministic() {
        let a = init_centers(5, 3, 16, 11).unwrap();
        let b = init_centers(5, 3, 16, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_centers(5, 3, 16, 12).unwrap());
        for c in a.all() {
            assert!((norm(c.as_slice()) - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.class_centers(4).len(), 3);
        assert!(init_centers(0, 1, 1, 0).is_err());
    }

    #[test]
    fn high_dimensional_centers_are_nearly_orthogonal() {
        let bank = init_centers(342, 16, 256, 5).unwrap();
        let all = bank.all();
        // Monte-Carlo over 20000 random pairs of distinct centers.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let i = rand::Rng::random_range(&mut rng, 0..all.len());
            let mut j = rand::Rng::random_range(&mut rng, 0..all.len());
            while j == i {
                j = rand::Rng::random_range(&mut rng, 0..all.len());
            }
            total += cosine(&all[i], &all[j]).abs();
        }
        let mean = total / n as f64;
        // E|cos| ~ sqrt(2 / (pi D)) = 0.0499 for D = 256.
        assert!(mean <= 0.1, "mean |cos| = {mean}");
    }

    fn unit_pair(dim: usize) -> impl Strategy<Value = (UnitVector, UnitVector)> {
        (
            prop::collection::vec(-1.0f64..1.0, dim),
            prop::collection::vec(-1.0f64..1.0, dim),
        )
            .prop_filter_map("nonzero", |(a, b)| {
                Some((normalize(&a).ok()?, normalize(&b).ok()?))
            })
    }

    proptest! {
        #[test]
        fn sphere_identity_holds(pair in unit_pair(32)) {
            let (u, v) = pair;
            prop_assert!(sphere_identity_residual(&u, &v) <= 1e-12);
            prop_assert!((sq_dist(&u, &v) - 2.0 * (1.0 - cosine(&u, &v))).abs() <= 1e-12);
        }

        #[test]
        fn margin_is_monotone(pair in unit_pair(6), m1 in 0.0f64..FRAC_PI_2, m2 in 0.0f64..FRAC_PI_2) {
            let (u, c) = pair;
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            prop_assert!(cos_margin(&u, &c, hi).unwrap() <= cos_margin(&u, &c, lo).unwrap() + 1e-15);
        }
    }
}
