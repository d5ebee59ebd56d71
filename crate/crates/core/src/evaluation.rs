//! Prompt-similarity and identity-consistency metrics and the method
//! comparison table built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, Generator, Representation};
use crate::embedding::{cosine_similarity, Embedding, EmbeddingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("empty sample set")]
    EmptySet,
    #[error("character `{0}` needs at least two samples from two distinct contexts")]
    InsufficientSamples(String),
    #[error("method `{method}` covers a different (character, context) grid than `{reference}`")]
    GridMismatch { method: String, reference: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub character_id: String,
    pub context_prompt: String,
    pub image_embedding: Embedding,
    pub prompt_embedding: Embedding,
}

/// One JSON line of an evaluation file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub character: String,
    pub context: String,
    pub image_emb: Vec<f64>,
    pub prompt_emb: Vec<f64>,
}

impl SampleLine {
    pub fn into_sample(self) -> Result<EvalSample, EmbeddingError> {
        let image_embedding = Embedding::normalize(self.image_emb)?;
        let prompt_embedding = Embedding::normalize(self.prompt_emb)?;
        if image_embedding.dim() != prompt_embedding.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: image_embedding.dim(),
                found: prompt_embedding.dim(),
            });
        }
        Ok(EvalSample {
            character_id: self.character,
            context_prompt: self.context,
            image_embedding,
            prompt_embedding,
        })
    }
}

impl From<&EvalSample> for SampleLine {
    fn from(s: &EvalSample) -> Self {
        Self {
            character: s.character_id.clone(),
            context: s.context_prompt.clone(),
            image_emb: s.image_embedding.values().to_vec(),
            prompt_emb: s.prompt_embedding.values().to_vec(),
        }
    }
}

/// Reads JSON-lines samples; blank lines are skipped, line numbers are 1-based.
pub fn read_samples(reader: impl BufRead) -> Result<Vec<EvalSample>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(parsed.into_sample().map_err(|e| EvalError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn check_dims(samples: &[EvalSample]) -> Result<(), EvalError> {
    let dim = samples[0].image_embedding.dim();
    for s in samples {
        for e in [&s.image_embedding, &s.prompt_embedding] {
            if e.dim() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    found: e.dim(),
                }
                .into());
            }
        }
    }
    Ok(())
}

/// Mean cosine between each image embedding and its prompt embedding.
pub fn prompt_similarity(samples: &[EvalSample]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySet);
    }
    check_dims(samples)?;
    let total = samples
        .iter()
        .map(|s| cosine_similarity(&s.image_embedding, &s.prompt_embedding))
        .sum::<Result<f64, _>>()?;
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityConsistency {
    /// Per character, mean cosine over unordered cross-context pairs.
    pub per_character: BTreeMap<String, f64>,
    /// Unweighted mean of `per_character`.
    pub mean: f64,
}

/// Mean pairwise image-embedding cosine across different contexts, per
/// character. Same-context pairs are excluded.
pub fn identity_consistency(samples: &[EvalSample]) -> Result<IdentityConsistency, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySet);
    }
    check_dims(samples)?;
    let mut groups: BTreeMap<&str, Vec<&EvalSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.character_id).or_default().push(s);
    }
    let mut per_character = BTreeMap::new();
    for (character, group) in groups {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if a.context_prompt != b.context_prompt {
                    total += cosine_similarity(&a.image_embedding, &b.image_embedding)?;
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            return Err(EvalError::InsufficientSamples(character.to_string()));
        }
        per_character.insert(character.to_string(), total / pairs as f64);
    }
    let mean = per_character.values().sum::<f64>() / per_character.len() as f64;
    Ok(IdentityConsistency { per_character, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub prompt_similarity: f64,
    pub identity_consistency: f64,
    pub identity_consistency_per_character: BTreeMap<String, f64>,
}

fn grid(samples: &[EvalSample]) -> BTreeSet<(&str, &str)> {
    samples
        .iter()
        .map(|s| (s.character_id.as_str(), s.context_prompt.as_str()))
        .collect()
}

/// One row per method, in input order. All methods must cover the same
/// (character, context) grid.
pub fn comparison_table(methods: &[(String, Vec<EvalSample>)]) -> Result<Vec<ComparisonRow>, EvalError> {
    let Some((reference, first)) = methods.first() else {
        return Err(EvalError::EmptySet);
    };
    let expected = grid(first);
    methods
        .iter()
        .map(|(method, samples)| {
            if grid(samples) != expected {
                return Err(EvalError::GridMismatch {
                    method: method.clone(),
                    reference: reference.clone(),
                });
            }
            let consistency = identity_consistency(samples)?;
            Ok(ComparisonRow {
                method: method.clone(),
                prompt_similarity: prompt_similarity(samples)?,
                identity_consistency: consistency.mean,
                identity_consistency_per_character: consistency.per_character,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "method,prompt_similarity,identity_consistency";

pub fn table_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let method = if r.method.contains([',', '"', '\n']) {
            format!("\"{}\"", r.method.replace('"', "\"\""))
        } else {
            r.method.clone()
        };
        out.push_str(&format!("{method},{},{}\n", r.prompt_similarity, r.identity_consistency));
    }
    out
}

pub fn table_json(rows: &[ComparisonRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

/// Generates `per_context` samples for each context from `rep` and embeds
/// them; `embed_prompt` supplies the text side of each sample.
#[allow(clippy::too_many_arguments)]
pub fn collect_samples(
    generator: &dyn Generator,
    embedder: &dyn Embedder,
    rep: &Representation,
    character_id: &str,
    base_prompt: &str,
    contexts: &[&str],
    per_context: usize,
    seed: u64,
    embed_prompt: impl Fn(&str) -> Embedding,
) -> Result<Vec<EvalSample>, EvalError> {
    let mut out = Vec::with_capacity(contexts.len() * per_context);
    for (ci, context) in contexts.iter().enumerate() {
        let prompt = format!("{base_prompt} {context}");
        let payloads = generator.generate(rep, &prompt, per_context, crate::backends::derive_seed(seed, ci as u64))?;
        let prompt_embedding = embed_prompt(context);
        for image_embedding in embedder.embed(&payloads)? {
            out.push(EvalSample {
                character_id: character_id.to_string(),
                context_prompt: context.to_string(),
                image_embedding,
                prompt_embedding: prompt_embedding.clone(),
            });
        }
    }
    Ok(out)
}
