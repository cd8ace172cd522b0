//! Sparsify the three vectors by their per-dimension attribution and
//! compare against IE ranking, smallest-magnitude pruning and random
//! dropout; then test whether their supports overlap more than chance.
//!
//! `cargo run --release --example sparsify_vectors -- [run-dir]`

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;
use steerscope::sparsify::{hypergeom_pvalue, mean_asr, mean_sparsity, SparseMethod};
use steerscope::task::Label;

fn main() -> steerscope::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out".into());
    let mut ws = Workspace::open(RunConfig {
        out_dir: dir.into(),
        ..RunConfig::default()
    })?;
    let res = ws.sparsify()?;
    println!("bypass ASR-analog on harmful prompts, mean over vectors:");
    print!("{:>5} {:>9}", "tau", "sparsity");
    for m in SparseMethod::ALL {
        print!(" {m:>9}");
    }
    println!();
    for &tau in &ws.cfg.taus {
        let Some(sp) = mean_sparsity(&res.rows, tau) else { continue };
        print!("{tau:>5} {sp:>8.1}%");
        for m in SparseMethod::ALL {
            print!(" {:>9.3}", mean_asr(&res.rows, m, tau, Label::Harmful).unwrap_or(f64::NAN));
        }
        println!();
    }
    println!("\nsupport overlap of the gradient-sparsified vectors:");
    for r in &res.iou {
        println!(
            "  tau {:<4} {}-{}: |A| {:2} |B| {:2} overlap {:2}  IoU {:.3}  p {:.2e}",
            r.tau,
            r.pair.0,
            r.pair.1,
            r.support_a,
            r.support_b,
            r.overlap,
            r.iou.unwrap_or(f64::NAN),
            r.pvalue.unwrap_or(f64::NAN)
        );
    }
    // a worked tail: 64 dimensions, two halves sharing 24
    println!("\nP(overlap >= 24 | d=64, a=b=32) = {:.3e}", hypergeom_pvalue(64, 32, 32, 24)?);
    Ok(())
}
