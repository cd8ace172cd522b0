//! Every stage from corpus to figures in one run directory; what
//! `steerscope report` does, with an optional config file.
//!
//! `cargo run --release --example full_report -- [run-dir] [config.toml]`

use std::time::Instant;

use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "out".into());
    let mut cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    cfg.out_dir = dir.into();
    let start = Instant::now();
    let mut ws = Workspace::open(cfg)?;
    ws.run_all()?;
    println!("report in {} after {:.0}s", ws.dir.display(), start.elapsed().as_secs_f64());
    for w in &ws.warnings {
        println!("warning: {w}");
    }
    let mut files: Vec<String> = std::fs::read_dir(&ws.dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    println!("{}", files.join("  "));
    Ok(())
}
