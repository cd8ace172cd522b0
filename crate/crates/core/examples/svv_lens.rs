//! Steering value vectors: split one head's attention output into its
//! input-dependent and steering terms, then read the top heads' svvs
//! through the logit lens.
//!
//! `cargo run --release --example svv_lens -- [run-dir] [dim|ntp|po]`

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;
use steerscope::steering::{residual_at, Method};
use steerscope::svv::{decompose, svv_share, verify_decomposition};
use steerscope::task::{Label, Split};
use steerscope::tensor::Tensor;

fn main() -> steerscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "out".into());
    let method: Method = args.next().as_deref().unwrap_or("dim").parse()?;
    let mut ws = Workspace::open(RunConfig {
        out_dir: dir.into(),
        ..RunConfig::default()
    })?;
    let v = ws.vector(method)?;
    let corpus = ws.corpus()?.clone();
    let prompt = corpus.prompts(Split::Test, Label::Harmful).remove(0);
    let model = ws.model()?;

    // unsteered residual entering the steering layer, one row per token
    let n = prompt.len() as isize;
    let mut rows = Vec::new();
    for pos in -n..0 {
        rows.extend(residual_at(model, std::slice::from_ref(&prompt), v.layer, pos)?.remove(0));
    }
    let h = Tensor::matrix(prompt.len(), model.config.d_model, rows)?;
    let coef = -v.alpha;
    let dec = decompose(model, v.layer, &h, v.values.data(), coef)?;
    println!(
        "layer {}: reassembly error {:.2e}, svv share of the attention output {:.3}",
        v.layer,
        verify_decomposition(model, v.layer, &h, v.values.data(), coef)?,
        svv_share(&dec)
    );

    // vector, source, rank, token, logit
    let table = ws.svv(method)?;
    let mut source = String::new();
    for row in &table.rows {
        if row[1] != source {
            source = row[1].clone();
            print!("\n{source:>16}:");
        }
        print!("  {} {:.2}", row[3], row[4].parse::<f64>().unwrap_or(f64::NAN));
    }
    println!();
    Ok(())
}
