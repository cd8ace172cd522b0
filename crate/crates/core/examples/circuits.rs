//! Minimum-faithful circuits of the three vectors, their overlap, and
//! how well each vector steers through the others' circuits.
//!
//! `cargo run --release --example circuits -- [run-dir]`

use std::collections::BTreeMap;

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;

fn main() -> steerscope::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out".into());
    let mut ws = Workspace::open(RunConfig {
        out_dir: dir.into(),
        ..RunConfig::default()
    })?;
    for out in ws.faithfulness()? {
        let Some(c) = &out.circuit else {
            println!("{}: no faithful circuit", out.vector);
            continue;
        };
        println!("{}: {} of {} steered edges", out.vector, c.len(), out.steered_edges);
        for e in &c.edges {
            println!("    {e}");
        }
        for r in &out.reports {
            println!(
                "    {:8} F = {:?}, complement F = {:?}",
                r.label.as_str(),
                r.faithfulness,
                r.complement
            );
        }
    }
    for row in ws.overlap()?.rows.iter().filter(|r| r[0] == "min-faithful") {
        println!("overlap {}-{}: {}", row[1], row[2], row[3]);
    }

    // class-averaged faithfulness, circuit against its random baselines
    let mut acc: BTreeMap<(String, String, bool), Vec<f64>> = BTreeMap::new();
    for r in ws.interchange()? {
        if let Some(f) = r.faithfulness {
            let key = (r.circuit.to_string(), r.vector.to_string(), r.random_seed.is_some());
            acc.entry(key).or_default().push(f);
        }
    }
    for ((circuit, vector, random), v) in &acc {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let kind = if *random { "random" } else { "circuit" };
        println!("{vector} through {circuit}'s {kind:7}: {mean:.3}");
    }
    Ok(())
}
