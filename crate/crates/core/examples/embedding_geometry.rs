//! Unit-sphere geometry: normalization, cosine vs. squared distance, and the
//! closed-form mean pairwise statistic.
//!
//!     cargo run --example embedding_geometry

use charfunnel::embedding::{self, cosine_similarity, mean_pairwise_sq_dist, Embedding};

fn main() -> Result<(), embedding::EmbeddingError> {
    let a = Embedding::normalize(vec![3.0, 4.0, 0.0])?;
    let b = Embedding::normalize(vec![0.0, 4.0, 3.0])?;
    let cos = cosine_similarity(&a, &b)?;
    let d2 = embedding::sq_dist(a.values(), b.values());
    println!("a = {:?}", a.values());
    println!("b = {:?}", b.values());
    // on the sphere ||a - b||^2 = 2 - 2 cos
    println!("cos = {cos:.4}, ||a-b||^2 = {d2:.4}, 2 - 2cos = {:.4}", 2.0 - 2.0 * cos);

    let tight: Vec<Embedding> = (0..8)
        .map(|i| Embedding::normalize(vec![1.0, 0.05 * i as f64, 0.0]))
        .collect::<Result<_, _>>()?;
    let spread: Vec<Embedding> = (0..8)
        .map(|i| {
            let t = i as f64 * std::f64::consts::FRAC_PI_4;
            Embedding::normalize(vec![t.cos(), t.sin(), 0.0])
        })
        .collect::<Result<_, _>>()?;
    println!("mean pairwise sq dist, tight set:  {:.5}", mean_pairwise_sq_dist(&tight)?);
    println!("mean pairwise sq dist, spread set: {:.5}", mean_pairwise_sq_dist(&spread)?);
    Ok(())
}
