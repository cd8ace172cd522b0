//! Freeze the attention pattern, the value pathway or the MLP input at
//! their unsteered values and see how much steering survives.
//!
//! `cargo run --release --example attention_ablation -- [run-dir] [dim|ntp|po]`

use steerscope::ablation::AblationKind;
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
    println!("{:13} {:>8} {:>9} {:>9}", "ablation", "harmful", "harmless", "avg drop");
    for r in ws.ablation(method)? {
        println!(
            "{:13} {:>8.3} {:>9.3} {:>8}%",
            r.kind.as_str(),
            r.harmful_asr,
            r.harmless_asr,
            r.avg_drop_pct.map_or("-".into(), |d| format!("{d:.1}"))
        );
    }
    print!("{}", ws.transcripts(method, AblationKind::QkFreeze, 2)?);
    Ok(())
}
