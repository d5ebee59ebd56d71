//! A full run on the simulated backend: the statistic shrinks each iteration
//! until it falls under 80% of its first value.
//!
//!     cargo run --release --example simulated_run -- [seed]

use charfunnel::backends::{Backends, SimulatedBackend, SimulatedOptions};
use charfunnel::pipeline::{self, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let backend = SimulatedBackend::new(&SimulatedOptions::default())?;
    let mut config = RunConfig::new("a ginger cat");
    config.rng_seed = Some(seed);

    let log = pipeline::run(config, Backends::from_backend(&backend))?;
    for r in &log.iterations {
        let chosen = r.chosen_cluster.map(|c| c.to_string()).unwrap_or_default();
        println!(
            "iteration {}: stat {:.4}  threshold {:.4}  chosen cluster {chosen:>2} ({} payloads)",
            r.index,
            r.convergence_stat,
            r.threshold_in_effect,
            r.chosen_payload_ids.len()
        );
    }
    println!("status {:?}, final representation {:?}", log.status, log.final_representation);
    if let Some(handle) = &log.final_representation {
        let params = backend.params(handle).expect("handle came from this backend");
        println!("generator dispersion {:.4}, mode weights {:.3?}", params.dispersion, params.weights);
    }
    Ok(())
}
