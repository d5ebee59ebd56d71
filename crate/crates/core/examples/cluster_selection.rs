//! k-means++ over a batch of embeddings, the minimum-size filter, and
//! selection of the most cohesive surviving cluster.
//!
//!     cargo run --example cluster_selection

use charfunnel::backends::{Embedder, Generator, SimulatedBackend, SimulatedOptions};
use charfunnel::clustering::{filter_small, kmeans_pp, select_most_cohesive};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = SimulatedBackend::new(&SimulatedOptions::default())?;
    let rep = backend.initial_representation();
    let batch = backend.generate(&rep, "a ginger cat", 128, 7)?;
    let set = backend.embed(&batch)?;

    let k = 128 / 5;
    let clusters = kmeans_pp(&set, k, 7)?;
    println!("k = {k}, {} non-empty clusters", clusters.clusters.len());
    let eligible = filter_small(&clusters, 5);
    println!("{} clusters with more than 5 members", eligible.clusters.len());

    let mut by_cohesion: Vec<_> = eligible.clusters.iter().collect();
    by_cohesion.sort_by(|a, b| a.cohesion.total_cmp(&b.cohesion));
    for c in by_cohesion.iter().take(5) {
        println!("  cluster {:>2}: size {:>2}, cohesion {:.4}", c.id, c.size(), c.cohesion);
    }
    let best = select_most_cohesive(&eligible)?;
    let ids: Vec<&str> = best.members.iter().map(|&m| batch[m].id.as_str()).collect();
    println!("selected cluster {} -> payloads {ids:?}", best.id);
    Ok(())
}
