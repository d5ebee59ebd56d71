//! The four ablations side by side, scored on identity consistency over a
//! four-context grid.
//!
//!     cargo run --release --example ablations

use charfunnel::backends::{Backends, Representation, SimulatedBackend, SimulatedOptions};
use charfunnel::evaluation::{collect_samples, identity_consistency};
use charfunnel::pipeline::{self, Ablations, RunConfig};

const CONTEXTS: [&str; 4] = ["in a park", "at the beach", "in a library", "on a rooftop at night"];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let variants: [(&str, Ablations); 5] = [
        ("full", Ablations::default()),
        ("no_clustering", Ablations { no_clustering: true, ..Default::default() }),
        ("single_iteration", Ablations { single_iteration: true, ..Default::default() }),
        ("reinit", Ablations { reinit: true, ..Default::default() }),
        ("no_lora", Ablations { no_lora: true, ..Default::default() }),
    ];
    println!("{:<18}{:>12}{:>22}", "variant", "iterations", "identity consistency");
    for (name, ablations) in variants {
        let mut scores = Vec::new();
        let mut iterations = 0;
        for seed in 0..5 {
            let backend = SimulatedBackend::new(&SimulatedOptions::default())?;
            let mut config = RunConfig::new("a ginger cat");
            config.rng_seed = Some(seed);
            config.ablations = ablations.clone();
            let log = pipeline::run(config, Backends::from_backend(&backend))?;
            iterations += log.iterations.len();
            let Some(handle) = log.final_representation else { continue };
            let rep = Representation::root(handle);
            let samples = collect_samples(&backend, &backend, &rep, "c", "a ginger cat", &CONTEXTS, 8, 1000 + seed, |t| {
                backend.embed_text(t)
            })?;
            scores.push(identity_consistency(&samples)?.mean);
        }
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        println!("{name:<18}{:>12.1}{mean:>22.4}", iterations as f64 / 5.0);
    }
    Ok(())
}
