//! A desk-scale stand-in for a text-to-image model plus feature extractor.
//!
//! The generator is a weighted mixture of modes on the unit sphere with
//! isotropic noise. Each "image" is its own latent, and the embedder is the
//! identity. Extraction pulls every mode toward the normalized centroid of
//! the chosen payloads, shrinks the noise and reweights the mixture in
//! favor of modes aligned with that centroid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    derive_seed, BackendError, Embedder, ExtractionOptions, Generator, IdentityExtractor, ImagePayload,
    PayloadData, Representation,
};
use crate::embedding::{self, Embedding};

const BASE_HANDLE: &str = "sim-base";

/// Construction options, as accepted in `backend_options`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatedOptions {
    pub dim: usize,
    /// Number of random orthonormal modes, ignored when `modes` is given.
    pub n_modes: usize,
    pub modes: Option<Vec<Vec<f64>>>,
    /// Uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub sigma: f64,
    pub eta: f64,
    pub rho: f64,
    /// How much of the chosen set's spread survives extraction.
    pub kappa: f64,
    /// Seeds the random orthonormal mode directions.
    pub world_seed: u64,
}

impl Default for SimulatedOptions {
    fn default() -> Self {
        Self {
            dim: 64,
            n_modes: 3,
            modes: None,
            weights: None,
            sigma: 0.3,
            eta: 0.5,
            rho: 0.5,
            kappa: 0.6,
            world_seed: 0,
        }
    }
}

impl SimulatedOptions {
    pub fn validate(&self) -> Result<(), String> {
        self.params().and_then(|p| p.validate()).map(|_| ())
    }

    pub fn params(&self) -> Result<SimulatedGeneratorParams, String> {
        let modes = match &self.modes {
            Some(modes) => modes
                .iter()
                .map(|m| Embedding::normalize(m.clone()).map_err(|e| format!("modes: {e}")))
                .collect::<Result<Vec<_>, _>>()?,
            None => {
                if self.n_modes == 0 || self.n_modes > self.dim {
                    return Err(format!("n_modes must be in 1..={}, got {}", self.dim, self.n_modes));
                }
                orthonormal_modes(self.dim, self.n_modes, self.world_seed)
            }
        };
        let weights = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / modes.len() as f64; modes.len()],
        };
        let params = SimulatedGeneratorParams {
            modes,
            weights,
            dispersion: self.sigma,
            eta: self.eta,
            rho: self.rho,
            kappa: self.kappa,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Random orthonormal directions via Gram-Schmidt on Gaussian draws.
pub fn orthonormal_modes(dim: usize, count: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Embedding> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = embedding::dot(&v, b.values());
            v.iter_mut().zip(b.values()).for_each(|(x, bi)| *x -= p * bi);
        }
        if embedding::l2_norm(&v) > 1e-6 {
            basis.push(Embedding::normalize(v).expect("non-zero after check"));
        }
    }
    basis
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedGeneratorParams {
    pub modes: Vec<Embedding>,
    pub weights: Vec<f64>,
    /// Noise scale sigma.
    pub dispersion: f64,
    /// Contraction rate toward the chosen centroid.
    pub eta: f64,
    /// Per-extraction dispersion decay.
    pub rho: f64,
    /// Dispersion kept in proportion to the training set's cohesion.
    pub kappa: f64,
}

impl SimulatedGeneratorParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.modes.is_empty() {
            return Err("at least one mode is required".into());
        }
        embedding::uniform_dim(&self.modes).map_err(|e| format!("modes: {e}"))?;
        if self.weights.len() != self.modes.len() {
            return Err(format!(
                "weights: expected {} entries, got {}",
                self.modes.len(),
                self.weights.len()
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("weights must be finite and non-negative".into());
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("weights must sum to 1".into());
        }
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err("sigma must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err("eta must be in (0, 1]".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err("rho must be in (0, 1)".into());
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err("kappa must be non-negative".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.modes[0].dim()
    }

    /// Weighted mean of the mode directions, normalized.
    pub fn mode_center(&self) -> Embedding {
        let mut acc = vec![0.0; self.dim()];
        for (m, w) in self.modes.iter().zip(&self.weights) {
            acc.iter_mut().zip(m.values()).for_each(|(a, x)| *a += w * x);
        }
        Embedding::normalize(acc).unwrap_or_else(|_| self.modes[0].clone())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Embedding {
        let index = WeightedIndex::new(&self.weights).expect("validated weights");
        let mode = &self.modes[index.sample(rng)];
        let v: Vec<f64> = mode
            .values()
            .iter()
            .map(|m| m + self.dispersion * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // a zero draw has probability zero; fall back to the mode itself
        Embedding::normalize(v).unwrap_or_else(|_| mode.clone())
    }

    /// The extraction update with an explicit contraction rate.
    ///
    /// `spread` is the cohesion `1 - ||c||^2` of the training set; an
    /// incoherent set leaves more of the dispersion in place.
    pub fn contracted_toward(&self, target: &Embedding, eta: f64, spread: f64) -> Self {
        let modes: Vec<Embedding> = self
            .modes
            .iter()
            .map(|m| {
                let v: Vec<f64> = m
                    .values()
                    .iter()
                    .zip(target.values())
                    .map(|(mi, ti)| (1.0 - eta) * mi + eta * ti)
                    .collect();
                Embedding::normalize(v).unwrap_or_else(|_| target.clone())
            })
            .collect();
        let raw: Vec<f64> = modes
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w * embedding::dot(m.values(), target.values()).clamp(-1.0, 1.0).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            modes,
            weights: raw.iter().map(|w| w / total).collect(),
            dispersion: self.dispersion * (self.rho + self.kappa * spread.clamp(0.0, 1.0)),
            eta: self.eta,
            rho: self.rho,
            kappa: self.kappa,
        }
    }
}

/// Simulated generator, embedder and extractor in one.
///
/// Parameters live in a copy-on-extract store keyed by representation
/// handle; nothing is mutated in place, so concurrent runs are safe.
#[derive(Debug)]
pub struct SimulatedBackend {
    store: Mutex<HashMap<String, Arc<SimulatedGeneratorParams>>>,
}

impl SimulatedBackend {
    pub fn new(options: &SimulatedOptions) -> Result<Self, String> {
        Ok(Self::from_params(options.params()?))
    }

    pub fn from_params(params: SimulatedGeneratorParams) -> Self {
        let mut store = HashMap::new();
        store.insert(BASE_HANDLE.to_string(), Arc::new(params));
        Self {
            store: Mutex::new(store),
        }
    }

    pub fn params(&self, handle: &str) -> Option<Arc<SimulatedGeneratorParams>> {
        self.store.lock().expect("store lock").get(handle).cloned()
    }

    fn lookup(&self, rep: &Representation) -> Result<Arc<SimulatedGeneratorParams>, BackendError> {
        self.params(&rep.handle)
            .ok_or_else(|| BackendError::UnknownRepresentation(rep.handle.clone()))
    }

    pub fn dim(&self) -> usize {
        self.params(BASE_HANDLE).expect("base params").dim()
    }

    /// Deterministic pseudo text embedding in the latent space, used as the
    /// prompt side of evaluation grids.
    pub fn embed_text(&self, text: &str) -> Embedding {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Embedding::normalize(v).expect("gaussian draw is non-zero")
    }
}

impl Generator for SimulatedBackend {
    fn initial_representation(&self) -> Representation {
        Representation::root(BASE_HANDLE)
    }

    fn generate(
        &self,
        rep: &Representation,
        prompt: &str,
        count: usize,
        seed: u64,
    ) -> Result<Vec<ImagePayload>, BackendError> {
        if count == 0 {
            return Err(BackendError::InvalidRequest("count must be positive".into()));
        }
        let params = self.lookup(rep)?;
        Ok((0..count as u64)
            .map(|i| {
                let sample_seed = derive_seed(seed, i);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                ImagePayload {
                    id: format!("{sample_seed:016x}"),
                    data_ref: PayloadData::Latent(params.sample(&mut rng).into_inner()),
                    seed: sample_seed,
                    prompt: prompt.to_string(),
                }
            })
            .collect())
    }
}

impl Embedder for SimulatedBackend {
    fn embed(&self, payloads: &[ImagePayload]) -> Result<Vec<Embedding>, BackendError> {
        if payloads.is_empty() {
            return Err(BackendError::InvalidRequest("empty embedding batch".into()));
        }
        let mut out: Vec<Embedding> = Vec::with_capacity(payloads.len());
        for p in payloads {
            let PayloadData::Latent(latent) = &p.data_ref else {
                return Err(BackendError::PayloadUnreadable(p.id.clone()));
            };
            let e = Embedding::normalize(latent.clone()).map_err(|_| BackendError::PayloadUnreadable(p.id.clone()))?;
            if let Some(first) = out.first() {
                if first.dim() != e.dim() {
                    return Err(BackendError::DimensionMismatch {
                        expected: first.dim(),
                        found: e.dim(),
                    });
                }
            }
            out.push(e);
        }
        Ok(out)
    }
}

impl IdentityExtractor for SimulatedBackend {
    fn extract_identity(
        &self,
        rep: &Representation,
        prompt: &str,
        chosen: &[ImagePayload],
        options: &ExtractionOptions,
    ) -> Result<Representation, BackendError> {
        if chosen.is_empty() {
            return Err(BackendError::EmptyCluster);
        }
        let params = self.lookup(rep)?;
        let latents = self.embed(chosen)?;
        let center = embedding::centroid(&latents).map_err(|e| BackendError::TrainingFailed(e.to_string()))?;
        let spread = 1.0 - center.norm_sq();
        let target = Embedding::normalize(center.values().to_vec())
            .map_err(|_| BackendError::TrainingFailed("chosen payloads cancel out".into()))?;
        // without LoRA only the text tokens adapt: model that as a weaker pull
        let eta = if options.use_lora { params.eta } else { params.eta / 2.0 };
        let next = params.contracted_toward(&target, eta, spread);

        let mut hasher = Sha256::new();
        hasher.update(rep.handle.as_bytes());
        hasher.update([0]);
        hasher.update(prompt.as_bytes());
        for p in chosen {
            hasher.update([0]);
            hasher.update(p.id.as_bytes());
        }
        hasher.update(options.steps.to_le_bytes());
        hasher.update([options.use_lora as u8]);
        let digest = hasher.finalize();
        let tag = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        let child = rep.child(format!("sim-{}-{tag:016x}", rep.iteration + 1));

        self.store
            .lock()
            .expect("store lock")
            .insert(child.handle.clone(), Arc::new(next));
        Ok(child)
    }
}
