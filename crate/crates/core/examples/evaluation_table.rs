//! Prompt similarity and identity consistency for two methods, written as
//! the comparison CSV and JSON.
//!
//!     cargo run --release --example evaluation_table

use charfunnel::backends::{Backends, Generator, Representation, SimulatedBackend, SimulatedOptions};
use charfunnel::evaluation::{collect_samples, comparison_table, table_csv, table_json, EvalSample};
use charfunnel::pipeline::{self, RunConfig};

const CONTEXTS: [&str; 4] = ["in a park", "at the beach", "in a library", "on a rooftop at night"];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = SimulatedBackend::new(&SimulatedOptions::default())?;
    let mut methods: Vec<(String, Vec<EvalSample>)> = Vec::new();

    // baseline: the untouched generator
    let base = backend.initial_representation();
    let mut baseline = Vec::new();
    for (i, character) in ["cat", "robot"].iter().enumerate() {
        baseline.extend(collect_samples(&backend, &backend, &base, character, character, &CONTEXTS, 6, i as u64, |t| {
            backend.embed_text(t)
        })?);
    }
    methods.push(("baseline".into(), baseline));

    let mut ours = Vec::new();
    for (i, character) in ["cat", "robot"].iter().enumerate() {
        let mut config = RunConfig::new(*character);
        config.rng_seed = Some(i as u64);
        let log = pipeline::run(config, Backends::from_backend(&backend))?;
        let rep = Representation::root(log.final_representation.ok_or("run failed")?);
        ours.extend(collect_samples(&backend, &backend, &rep, character, character, &CONTEXTS, 6, i as u64, |t| {
            backend.embed_text(t)
        })?);
    }
    methods.push(("ours".into(), ours));

    let rows = comparison_table(&methods)?;
    print!("{}", table_csv(&rows));
    println!("{}", table_json(&rows));
    Ok(())
}
