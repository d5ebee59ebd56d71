//! Deterministic rank-2 PCA used for cluster inspection views.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::{self, EmbeddingError};

/// Loadings smaller than this are skipped when fixing component signs.
const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2d {
    pub mean: Vec<f64>,
    /// Two unit-norm principal axes; an axis is all zeros when the data has
    /// fewer than two directions of variance.
    pub components: [Vec<f64>; 2],
    /// Variance along each axis, with `N - 1` normalization.
    pub explained_variance: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

impl Projection2d {
    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        [
            embedding::dot(&centered, &self.components[0]),
            embedding::dot(&centered, &self.components[1]),
        ]
    }
}

/// Projects `set` onto its top two principal axes.
///
/// Axes come from the SVD of the centered data matrix. Each axis is
/// sign-normalized so its first non-negligible loading is positive.
pub fn pca_2d<V: AsRef<[f64]>>(set: &[V]) -> Result<Projection2d, EmbeddingError> {
    let dim = embedding::uniform_dim(set)?;
    let n = set.len();
    let mean = embedding::centroid(set)?.values().to_vec();
    let centered = DMatrix::from_fn(n, dim, |r, c| set[r].as_ref()[c] - mean[c]);

    let mut components = [vec![0.0; dim], vec![0.0; dim]];
    let mut explained_variance = [0.0; 2];
    if n >= 2 {
        let svd = centered.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        for (slot, &idx) in order.iter().take(2).enumerate() {
            let s = svd.singular_values[idx];
            if s <= SIGN_EPS {
                continue;
            }
            let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
            if let Some(first) = axis.iter().find(|x| x.abs() > SIGN_EPS) {
                if *first < 0.0 {
                    axis.iter_mut().for_each(|x| *x = -*x);
                }
            }
            components[slot] = axis;
            explained_variance[slot] = s * s / (n - 1) as f64;
        }
    }

    let mut projection = Projection2d {
        mean,
        components,
        explained_variance,
        coords: Vec::with_capacity(n),
    };
    projection.coords = set.iter().map(|p| projection.project(p.as_ref())).collect();
    Ok(projection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{sq_dist, Embedding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn planar_data_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dim = 10;
        let u: Vec<f64> = Embedding::normalize((0..dim).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>())
            .unwrap()
            .into_inner();
        let mut w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let proj = embedding::dot(&w, &u);
        w.iter_mut().zip(&u).for_each(|(x, ui)| *x -= proj * ui);
        let w = Embedding::normalize(w).unwrap().into_inner();
        let pts: Vec<Vec<f64>> = (0..25)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (0..dim).map(|i| 0.3 + a * u[i] + b * w[i]).collect()
            })
            .collect();
        let p = pca_2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let hi = sq_dist(&pts[i], &pts[j]).sqrt();
                let lo = sq_dist(&p.coords[i], &p.coords[j]).sqrt();
                assert!((hi - lo).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let p = pca_2d(&pts).unwrap();
        for axis in &p.components {
            let first = axis.iter().find(|x| x.abs() > SIGN_EPS).unwrap();
            assert!(*first > 0.0);
        }
        let flipped: Vec<Vec<f64>> = pts.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let q = pca_2d(&flipped).unwrap();
        for (a, b) in p.explained_variance.iter().zip(&q.explained_variance) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let one = pca_2d(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(one.coords, vec![[0.0, 0.0]]);
        let line = pca_2d(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(line.components[1], vec![0.0, 0.0]);
        assert!((line.explained_variance[0] - 1.0).abs() < 1e-12);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(pca_2d(&empty).is_err());
    }
}
