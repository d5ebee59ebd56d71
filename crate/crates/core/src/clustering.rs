//! K-means++ over unit-norm embeddings, small-cluster filtering and
//! cohesion-based selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{self, sq_dist, Centroid, EmbeddingError};

/// Lloyd rounds are capped here even if assignments keep changing.
pub const MAX_LLOYD_ROUNDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("invalid k = {k} for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("empty set")]
    EmptySet,
    #[error("no cluster survived filtering")]
    NoEligibleCluster,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Indices into the clustered set.
    pub members: Vec<usize>,
    pub centroid: Centroid,
    pub cohesion: f64,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub k_requested: usize,
    pub rng_seed: u64,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_trace: Vec<f64>,
}

impl ClusterSet {
    pub fn get(&self, id: usize) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster id of every point, in input order.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut labels = vec![usize::MAX; n];
        for c in &self.clusters {
            for &m in &c.members {
                labels[m] = c.id;
            }
        }
        labels
    }
}

/// Mean squared distance of `members` of `set` to `centroid`.
pub fn cohesion<V: AsRef<[f64]>>(set: &[V], members: &[usize], centroid: &Centroid) -> f64 {
    members
        .iter()
        .map(|&i| sq_dist(set[i].as_ref(), centroid.values()))
        .sum::<f64>()
        / members.len() as f64
}

fn nearest(point: &[f64], centers: &[(usize, Vec<f64>)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (slot, (_, c)) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        // strict `<` keeps the lowest index on ties
        if d < best.1 {
            best = (slot, d);
        }
    }
    best
}

fn seed_centers<V: AsRef<[f64]>>(set: &[V], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = set.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = set
        .iter()
        .map(|p| sq_dist(p.as_ref(), set[chosen[0]].as_ref()))
        .collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (w, p) in d2.iter_mut().zip(set) {
            *w = w.min(sq_dist(p.as_ref(), set[next].as_ref()));
        }
    }
    chosen
}

/// K-means++ seeding followed by Lloyd iterations.
///
/// Stops when assignments reach a fixpoint or after [`MAX_LLOYD_ROUNDS`].
/// Clusters that become empty are dropped, so the result may hold fewer
/// than `k` clusters. Cluster ids are the seeding slot `0..k`.
pub fn kmeans_pp<V: AsRef<[f64]>>(set: &[V], k: usize, rng_seed: u64) -> Result<ClusterSet, ClusterError> {
    if set.is_empty() {
        return Err(ClusterError::EmptySet);
    }
    embedding::uniform_dim(set)?;
    let n = set.len();
    if k < 1 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centers: Vec<(usize, Vec<f64>)> = seed_centers(set, k, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(id, i)| (id, set[i].as_ref().to_vec()))
        .collect();

    let mut assignment: Vec<usize> = Vec::new();
    let mut inertia_trace = Vec::new();
    for _ in 0..MAX_LLOYD_ROUNDS {
        let mut inertia = 0.0;
        let next: Vec<usize> = set
            .iter()
            .map(|p| {
                let (slot, d) = nearest(p.as_ref(), &centers);
                inertia += d;
                centers[slot].0
            })
            .collect();
        inertia_trace.push(inertia);
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }

        let mut updated = Vec::with_capacity(centers.len());
        for (id, _) in &centers {
            let members: Vec<&[f64]> = set
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == *id)
                .map(|(p, _)| p.as_ref())
                .collect();
            if members.is_empty() {
                continue;
            }
            updated.push((*id, embedding::centroid(&members)?.values().to_vec()));
        }
        centers = updated;
    }

    let mut clusters = Vec::new();
    for (id, _) in &centers {
        let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == *id).collect();
        if members.is_empty() {
            continue;
        }
        let points: Vec<&[f64]> = members.iter().map(|&i| set[i].as_ref()).collect();
        let centroid = embedding::centroid(&points)?;
        let cohesion = cohesion(set, &members, &centroid);
        clusters.push(Cluster {
            id: *id,
            members,
            centroid,
            cohesion,
        });
    }

    Ok(ClusterSet {
        clusters,
        k_requested: k,
        rng_seed,
        inertia_trace,
    })
}

/// Keeps clusters with strictly more than `min_size` members.
pub fn filter_small(set: &ClusterSet, min_size: usize) -> ClusterSet {
    ClusterSet {
        clusters: set
            .clusters
            .iter()
            .filter(|c| c.size() > min_size)
            .cloned()
            .collect(),
        ..set.clone()
    }
}

/// The cluster with minimal cohesion; ties go to the lowest id.
pub fn select_most_cohesive(set: &ClusterSet) -> Result<&Cluster, ClusterError> {
    set.clusters
        .iter()
        .min_by(|a, b| a.cohesion.total_cmp(&b.cohesion).then(a.id.cmp(&b.id)))
        .ok_or(ClusterError::NoEligibleCluster)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max = (sum_rows + sum_cols) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
