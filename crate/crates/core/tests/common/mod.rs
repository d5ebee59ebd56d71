//! Oracles and fixtures shared by the integration tests. Every oracle here is
//! a direct loop over the definition, written without the library's helpers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Duration;

use charfunnel::embedding::Embedding;
use charfunnel::evaluation::EvalSample;
use charfunnel::pipeline::RunLog;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit_set(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| unit(gaussian(rng, dim))).collect()
}

/// `(1/N^2) * sum over ordered pairs of ||a - b||^2`.
pub fn brute_mean_pairwise_sq_dist(set: &[Vec<f64>]) -> f64 {
    let n = set.len() as f64;
    let mut total = 0.0;
    for a in set {
        for b in set {
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    total / (n * n)
}

pub fn brute_centroid(members: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; members[0].len()];
    for m in members {
        for (ci, x) in c.iter_mut().zip(m) {
            *ci += x;
        }
    }
    c.iter().map(|x| x / members.len() as f64).collect()
}

/// Mean squared distance from each member to the arithmetic centroid.
pub fn brute_cohesion(members: &[Vec<f64>]) -> f64 {
    let c = brute_centroid(members);
    members
        .iter()
        .map(|m| m.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum::<f64>()
        / members.len() as f64
}

pub fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub fn brute_prompt_similarity(samples: &[EvalSample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        total += brute_cos(s.image_embedding.values(), s.prompt_embedding.values());
    }
    total / samples.len() as f64
}

/// Per character: mean cosine over ordered pairs drawn from different
/// contexts; then the plain mean over characters.
pub fn brute_identity_consistency(samples: &[EvalSample]) -> f64 {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for a in samples {
        for b in samples {
            if a.character_id == b.character_id && a.context_prompt != b.context_prompt {
                let e = sums.entry(&a.character_id).or_default();
                e.0 += brute_cos(a.image_embedding.values(), b.image_embedding.values());
                e.1 += 1;
            }
        }
    }
    sums.values().map(|(t, n)| t / *n as f64).sum::<f64>() / sums.len() as f64
}

/// A random evaluation grid: every character appears in every context.
pub fn random_grid(rng: &mut impl Rng) -> Vec<EvalSample> {
    let dim = rng.random_range(2..=64);
    let characters = rng.random_range(1..=4);
    let contexts = rng.random_range(2..=5);
    let per = rng.random_range(1..=4);
    let mut out = Vec::new();
    for c in 0..characters {
        let identity = gaussian(rng, dim);
        for x in 0..contexts {
            let prompt = Embedding::normalize(gaussian(rng, dim)).unwrap();
            for _ in 0..per {
                let noise = gaussian(rng, dim);
                let image: Vec<f64> = identity.iter().zip(&noise).map(|(a, b)| a + 0.7 * b).collect();
                out.push(EvalSample {
                    character_id: format!("char-{c}"),
                    context_prompt: format!("context-{x}"),
                    image_embedding: Embedding::normalize(image).unwrap(),
                    prompt_embedding: prompt.clone(),
                });
            }
        }
    }
    out
}

/// Haar-ish random rotation: Q from the QR factorization of a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

pub fn rotate(q: &DMatrix<f64>, v: &Embedding) -> Embedding {
    let x = q * nalgebra::DVector::from_column_slice(v.values());
    Embedding::normalize(x.as_slice().to_vec()).unwrap()
}

/// Two caps around orthogonal axes, `per` points each; returns points and labels.
pub fn two_caps(seed: u64, dim: usize, per: usize, sigma: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for label in 0..2 {
        for _ in 0..per {
            let mut v: Vec<f64> = gaussian(&mut r, dim).into_iter().map(|x| sigma * x).collect();
            v[label] += 1.0;
            points.push(unit(v));
            labels.push(label);
        }
    }
    (points, labels)
}

/// Run log JSON with run id and timestamps blanked.
pub fn stable_json(log: &RunLog) -> String {
    log.without_volatile().to_json_pretty()
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .unwrap()
}

/// Polls `GET /api/runs/{id}` until `done` accepts the body.
pub fn poll_run(
    base: &str,
    run_id: &str,
    timeout: Duration,
    mut done: impl FnMut(&serde_json::Value) -> bool,
) -> serde_json::Value {
    let client = client();
    let deadline = std::time::Instant::now() + timeout;
    loop {
        let body: serde_json::Value = client
            .get(format!("{base}/api/runs/{run_id}"))
            .send()
            .unwrap()
            .json()
            .unwrap();
        if done(&body) {
            return body;
        }
        assert!(std::time::Instant::now() < deadline, "timed out polling {run_id}: {body}");
        std::thread::sleep(Duration::from_millis(20));
    }
}
