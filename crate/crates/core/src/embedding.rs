//! Vector primitives on the unit sphere.
//!
//! Embeddings are normalized once at ingestion. After that every geometric
//! quantity in the crate (cohesion, the convergence statistic, cosine
//! similarity) is plain Euclidean arithmetic on unit vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector contains non-finite components")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty set")]
    EmptySet,
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit L2 norm.
    pub fn normalize(v: impl Into<Vec<f64>>) -> Result<Self, EmbeddingError> {
        let mut v = v.into();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&v);
        if norm <= ZERO_NORM_EPS {
            return Err(EmbeddingError::ZeroVector);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Arithmetic mean of a member set. Deliberately not renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Centroid(Vec<f64>);

impl Centroid {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }
}

impl AsRef<[f64]> for Centroid {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

/// Checks that every vector in `set` has the same dimension and returns it.
pub fn uniform_dim<V: AsRef<[f64]>>(set: &[V]) -> Result<usize, EmbeddingError> {
    let first = set.first().ok_or(EmbeddingError::EmptySet)?.as_ref().len();
    for v in set {
        let found = v.as_ref().len();
        if found != first {
            return Err(EmbeddingError::DimensionMismatch {
                expected: first,
                found,
            });
        }
    }
    Ok(first)
}

fn mean_vector<V: AsRef<[f64]>>(set: &[V]) -> Result<Vec<f64>, EmbeddingError> {
    let dim = uniform_dim(set)?;
    let mut mean = vec![0.0; dim];
    for v in set {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    let n = set.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn centroid<V: AsRef<[f64]>>(members: &[V]) -> Result<Centroid, EmbeddingError> {
    mean_vector(members).map(Centroid)
}

/// Mean squared Euclidean distance over all ordered pairs of `set`,
/// self-pairs included, divided by `|set|^2`.
///
/// Computed through the identity `2 * (mean ||s||^2 - ||mean s||^2)`, so it
/// runs in `O(N * D)`.
pub fn mean_pairwise_sq_dist<V: AsRef<[f64]>>(set: &[V]) -> Result<f64, EmbeddingError> {
    let mean = mean_vector(set)?;
    let mean_norm_sq = set.iter().map(|v| dot(v.as_ref(), v.as_ref())).sum::<f64>() / set.len() as f64;
    Ok((2.0 * (mean_norm_sq - dot(&mean, &mean))).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Embedding::normalize(v).unwrap()
    }

    fn brute_force_pairwise<V: AsRef<[f64]>>(set: &[V]) -> f64 {
        let mut total = 0.0;
        for a in set {
            for b in set {
                total += sq_dist(a.as_ref(), b.as_ref());
            }
        }
        total / (set.len() * set.len()) as f64
    }

    #[test]
    fn normalize_examples() {
        let e = Embedding::normalize(vec![3.0, 4.0]).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-12);
        assert!((e.values()[1] - 0.8).abs() < 1e-12);
        assert_eq!(Embedding::normalize(vec![1.0, 0.0, 0.0]).unwrap().values(), &[1.0, 0.0, 0.0]);
        assert_eq!(Embedding::normalize(vec![0.0, 0.0]), Err(EmbeddingError::ZeroVector));
        assert_eq!(Embedding::normalize(vec![f64::NAN, 1.0]), Err(EmbeddingError::NonFinite));
    }

    #[test]
    fn cosine_examples() {
        let x = Embedding::normalize(vec![1.0, 0.0]).unwrap();
        let y = Embedding::normalize(vec![0.0, 1.0]).unwrap();
        let nx = Embedding::normalize(vec![-1.0, 0.0]).unwrap();
        assert_eq!(cosine_similarity(&x, &x).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&x, &nx).unwrap(), -1.0);
        let z = Embedding::normalize(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_similarity(&x, &z),
            Err(EmbeddingError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn pairwise_examples() {
        let e = Embedding::normalize(vec![0.3, 0.4]).unwrap();
        assert_eq!(mean_pairwise_sq_dist(&[e.clone(), e]).unwrap(), 0.0);
        let s = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((mean_pairwise_sq_dist(&s).unwrap() - 1.0).abs() < 1e-12);
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(mean_pairwise_sq_dist(&empty), Err(EmbeddingError::EmptySet));
    }

    #[test]
    fn pairwise_closed_form_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let set: Vec<Embedding> = (0..64).map(|_| random_unit(&mut rng, 16)).collect();
        let fast = mean_pairwise_sq_dist(&set).unwrap();
        assert!((fast - brute_force_pairwise(&set)).abs() < 1e-9);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[vec![1.0, 0.0]]).unwrap().values(), &[1.0, 0.0]);
        assert_eq!(centroid(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(centroid(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().values(), &[0.5, 0.5]);
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(centroid(&empty), Err(EmbeddingError::EmptySet));
        assert!(matches!(
            centroid(&[vec![1.0], vec![1.0, 2.0]]),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> nalgebra::DMatrix<f64> {
        let m = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        m.qr().q()
    }

    proptest! {
        #[test]
        fn unit_sets_satisfy_sphere_identity(seed in any::<u64>(), n in 1usize..40, dim in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
            let mu = centroid(&set).unwrap();
            let stat = mean_pairwise_sq_dist(&set).unwrap();
            prop_assert!((stat - 2.0 * (1.0 - mu.norm_sq())).abs() < 1e-9);
            prop_assert!(mu.norm_sq().sqrt() <= 1.0 + 1e-9);
        }

        #[test]
        fn pairwise_invariant_under_rotation_and_permutation(seed in any::<u64>(), n in 2usize..30, dim in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
            let q = random_rotation(&mut rng, dim);
            let rotated: Vec<Vec<f64>> = set
                .iter()
                .map(|e| (&q * nalgebra::DVector::from_column_slice(e.values())).as_slice().to_vec())
                .collect();
            let base = mean_pairwise_sq_dist(&set).unwrap();
            prop_assert!((base - mean_pairwise_sq_dist(&rotated).unwrap()).abs() < 1e-7);
            let mut permuted = set.clone();
            permuted.reverse();
            permuted.rotate_left(n / 3);
            prop_assert!((base - mean_pairwise_sq_dist(&permuted).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn cosine_matches_chord_length(seed in any::<u64>(), dim in 2usize..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_unit(&mut rng, dim);
            let b = random_unit(&mut rng, dim);
            let cos = cosine_similarity(&a, &b).unwrap();
            prop_assert!((cos - (1.0 - sq_dist(a.values(), b.values()) / 2.0)).abs() < 1e-9);
            prop_assert_eq!(cos, cosine_similarity(&b, &a).unwrap());
            prop_assert!((l2_norm(a.values()) - 1.0).abs() < 1e-9);
        }
    }
}
