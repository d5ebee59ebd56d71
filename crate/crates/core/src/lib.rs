//! Iterative identity distillation over generated-sample embeddings.
//!
//! A generator is asked for many samples of one prompt; the samples are
//! embedded, clustered with k-means++, and the most cohesive sufficiently
//! large cluster is used to refine the generator. Repeating this funnels
//! the output toward a single consistent identity, and the loop stops once
//! the mean pairwise squared distance of a fresh batch drops below a
//! threshold.
//!
//! The modules map onto the stages:
//!
//! - [`embedding`]: unit-sphere vector primitives and the convergence statistic
//! - [`clustering`]: k-means++, size filtering and cohesion selection
//! - [`projection`]: deterministic 2D PCA for cluster inspection
//! - [`backends`]: generator/embedder/extractor traits, a simulated world and an HTTP client
//! - [`pipeline`]: the iteration coordinator, run logs and selection hooks
//! - [`evaluation`]: prompt similarity, identity consistency and comparison tables
//! - [`service`]: REST facade with manual cluster selection
//! - [`cli`]: the `charfunnel` command line

pub mod backends;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod embedding;
pub mod evaluation;
pub mod pipeline;
pub mod projection;
pub mod service;

pub use backends::{Backend, BackendConfig, Backends, SimulatedBackend, SimulatedOptions};
pub use embedding::{Centroid, Embedding};
pub use pipeline::{Coordinator, RunConfig, RunLog, RunStatus};
