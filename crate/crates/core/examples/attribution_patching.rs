//! EAP-IG edge scores for one steering vector, checked against exact
//! single-edge patching.
//!
//! `cargo run --release --example attribution_patching -- [run-dir] [dim|ntp|po]`

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;
use steerscope::steering::Method;

fn main() -> steerscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "out".into());
    let method: Method = args.next().as_deref().unwrap_or("dim").parse()?;
    let mut ws = Workspace::open(RunConfig {
        out_dir: dir.into(),
        ..RunConfig::default()
    })?;
    let store = ws.store(method)?;
    println!(
        "{method}: {} samples, {} positions, {} steered edges",
        store.samples,
        store.positions_evaluated,
        store.edges.len()
    );
    let mut ranked: Vec<_> = store.edges.iter().collect();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    for (e, s) in ranked.iter().take(10) {
        println!("  {:>10.4}  {e}", s);
    }
    println!("steering node score {:.4} (sum of per-dimension scores)", store.steer_node_score());

    for o in ws.oracle(method, 8)? {
        println!(
            "oracle {}: pearson {:.3}, top-20 sign agreement {:.2} over {} edges",
            o.orientation, o.pearson, o.top20_sign_agreement, o.edges
        );
    }
    Ok(())
}
