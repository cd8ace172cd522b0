//! Fit the DIM, NTP and PO steering vectors on a trained toy model and
//! compare what each does to both prompt classes.
//!
//! `cargo run --release --example steering_vectors -- [run-dir]`
//!
//! Artifacts already in the run directory (model, vectors) are reused.

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;

fn main() -> steerscope::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out".into());
    let mut ws = Workspace::open(RunConfig {
        out_dir: dir.into(),
        ..RunConfig::default()
    })?;
    let vectors = ws.vectors()?;
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.values.data().iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for (v, n) in vectors.iter().zip(&norms) {
        println!("{:3}  layer {}  |s| {n:.3}  alpha {}", v.method, v.layer, v.alpha);
    }
    // pairwise cosine similarity
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot: f64 = vectors[i].values.data().iter().zip(vectors[j].values.data()).map(|(a, b)| a * b).sum();
            println!("cos({}, {}) = {:.3}", vectors[i].method, vectors[j].method, dot / (norms[i] * norms[j]));
        }
    }
    // vector, class, coef, asr
    println!("\nASR-analog (fraction of completions without a refusal):");
    for row in ws.behaviour()?.rows {
        println!("  {:5} {:9} coef {:>3}  {}", row[0], row[1], row[2], row[3]);
    }
    Ok(())
}
