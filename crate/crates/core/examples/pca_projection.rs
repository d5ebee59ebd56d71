//! Rank-2 PCA of one iteration's embeddings, as served to the cluster view.
//!
//!     cargo run --example pca_projection

use charfunnel::backends::{Embedder, Generator, SimulatedBackend, SimulatedOptions};
use charfunnel::clustering::kmeans_pp;
use charfunnel::projection::pca_2d;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = SimulatedBackend::new(&SimulatedOptions::default())?;
    let rep = backend.initial_representation();
    let set = backend.embed(&backend.generate(&rep, "a ginger cat", 96, 1)?)?;
    let projection = pca_2d(&set)?;
    println!(
        "explained variance: {:.4}, {:.4}",
        projection.explained_variance[0], projection.explained_variance[1]
    );

    let clusters = kmeans_pp(&set, 3, 1)?;
    for c in &clusters.clusters {
        let n = c.members.len() as f64;
        let (x, y) = c.members.iter().fold((0.0, 0.0), |(x, y), &m| {
            (x + projection.coords[m][0] / n, y + projection.coords[m][1] / n)
        });
        println!("cluster {} ({} points) centred at ({x:+.3}, {y:+.3})", c.id, c.size());
    }

    // a rough ASCII scatter, one digit per cluster
    let (w, h) = (60usize, 20usize);
    let mut grid = vec![vec![' '; w]; h];
    let bound = projection
        .coords
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(1e-9, f64::max);
    for c in &clusters.clusters {
        for &m in &c.members {
            let [x, y] = projection.coords[m];
            let col = (((x / bound) + 1.0) / 2.0 * (w - 1) as f64).round() as usize;
            let row = (((1.0 - y / bound)) / 2.0 * (h - 1) as f64).round() as usize;
            grid[row][col] = char::from_digit(c.id as u32 % 10, 10).unwrap_or('*');
        }
    }
    for row in grid {
        println!("|{}|", row.into_iter().collect::<String>());
    }
    Ok(())
}
