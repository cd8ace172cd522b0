//! Command-line front end: every stage of the workbench over one run
//! directory. Errors print one JSON line on stderr and exit with 2 (usage),
//! 3 (configuration), 4 (numeric failure) or 1 (anything else).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use steerscope::ablation::AblationKind;
use steerscope::config::RunConfig;
use steerscope::pipeline::Workspace;
use steerscope::steering::Method;
use steerscope::Error;

#[derive(Parser)]
#[command(name = "steerscope", version, about = "Circuits, svvs and sparsity of steered generation")]
struct Cli {
    /// Run configuration (flat `key = value` file); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overriding `threads` (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VectorArg {
    Dim,
    Ntp,
    Po,
    All,
}

impl VectorArg {
    fn methods(self) -> Vec<Method> {
        match self {
            VectorArg::Dim => vec![Method::Dim],
            VectorArg::Ntp => vec![Method::Ntp],
            VectorArg::Po => vec![Method::Po],
            VectorArg::All => Method::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FitArg {
    Dim,
    Ntp,
    Po,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Generate the synthetic corpus.
    GenData,
    /// Train the toy transformer.
    Train,
    /// Build a steering vector.
    FitSteer {
        #[arg(value_enum)]
        method: FitArg,
    },
    /// Steered generations, optionally with a frozen pathway.
    Generate {
        #[arg(long, value_enum, default_value = "dim")]
        vector: VectorArg,
        /// Ablation kind, or `all` for the full ablation table.
        #[arg(long, default_value = "none")]
        ablate: String,
        /// Prompts per class in the transcript.
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// EAP-IG scores; `--oracle` adds exhaustive single-edge patching.
    Patch {
        #[arg(long, value_enum, default_value = "all")]
        vector: VectorArg,
        #[arg(long)]
        oracle: bool,
        /// Samples per class for the oracle.
        #[arg(long, default_value_t = 16)]
        oracle_samples: usize,
    },
    /// Circuit construction and analysis.
    Circuit {
        #[command(subcommand)]
        action: CircuitAction,
    },
    /// Logit lens of steering value vectors.
    Svv {
        #[arg(long, value_enum, default_value = "all")]
        vector: VectorArg,
    },
    /// Sparsity sweep with IoU and hypergeometric tests.
    Sparsify,
    /// Every stage.
    Report,
}

#[derive(Subcommand)]
enum CircuitAction {
    Build {
        #[arg(long, value_enum, default_value = "all")]
        vector: VectorArg,
    },
    Faith {
        /// Also report the whole steered graph's faithfulness.
        #[arg(long)]
        full: bool,
        #[arg(long, value_enum, default_value = "all")]
        vector: VectorArg,
    },
    Overlap,
    Interchange,
    Dist,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Numeric(_) | Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn error_line(kind: &str, code: u8, message: &str) {
    let line = serde_json::json!({ "error": kind, "exit": code, "message": message });
    eprintln!("{line}");
}

fn load_config(cli: &Cli) -> steerscope::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> steerscope::Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_text()?);
        return Ok(());
    }
    // Only the first call in a process can size the pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    let mut ws = Workspace::open(cfg)?;
    match cli.command {
        Command::Config => {}
        Command::GenData => {
            let c = ws.corpus()?;
            println!("corpus: {} records, vocab {}", c.records.len(), c.vocab.len());
        }
        Command::Train => {
            let m = ws.model()?;
            println!("model: {} parameters, checksum {:08x}", m.param_count(), m.checksum());
        }
        Command::FitSteer { method } => {
            let m = match method {
                FitArg::Dim => Method::Dim,
                FitArg::Ntp => Method::Ntp,
                FitArg::Po => Method::Po,
            };
            let v = ws.vector(m)?;
            let norm = v.values.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("{m}: layer {}, |s| = {norm:.4}, alpha {}", v.layer, v.alpha);
        }
        Command::Generate { vector, ablate, n } => {
            if ablate == "all" {
                let t = ws.ablation_table()?;
                println!("ablation table: {} rows", t.rows.len());
            } else {
                let kind: AblationKind = ablate.parse()?;
                for m in vector.methods() {
                    print!("{}", ws.transcripts(m, kind, n)?);
                }
            }
        }
        Command::Patch {
            vector,
            oracle,
            oracle_samples,
        } => {
            for m in vector.methods() {
                let s = ws.store(m)?;
                println!(
                    "{m}: {} samples, {} positions, steering node IE {:.6}",
                    s.samples,
                    s.positions_evaluated,
                    s.steer_node_score()
                );
                if oracle {
                    for o in ws.oracle(m, oracle_samples)? {
                        println!(
                            "  oracle {}: {} edges, pearson {:.4}, top-20 sign agreement {:.2}",
                            o.orientation, o.edges, o.pearson, o.top20_sign_agreement
                        );
                    }
                }
            }
        }
        Command::Circuit { action } => match action {
            CircuitAction::Build { vector } => {
                for m in vector.methods() {
                    let c = ws.circuit(m)?;
                    match &c.circuit {
                        Some(circ) => println!("{m}: {} of {} steered edges", circ.len(), c.steered_edges),
                        None => println!("{m}: no faithful circuit on the size grid"),
                    }
                }
            }
            CircuitAction::Faith { full, vector } => {
                for o in ws.faithfulness()? {
                    for r in &o.reports {
                        println!(
                            "{} {}: size {} faithfulness {:?} complement {:?}",
                            o.vector,
                            r.label.as_str(),
                            r.size,
                            r.faithfulness,
                            r.complement
                        );
                    }
                }
                if full {
                    for m in vector.methods() {
                        for (label, f) in ws.full_graph_faithfulness(m)? {
                            println!("{m} {} full graph: {f:?}", label.as_str());
                        }
                    }
                }
            }
            CircuitAction::Overlap => {
                let t = ws.overlap()?;
                println!("overlap: {} rows", t.rows.len());
            }
            CircuitAction::Interchange => {
                let rows = ws.interchange()?;
                println!("interchange: {} rows", rows.len());
            }
            CircuitAction::Dist => {
                let t = ws.edge_distributions()?;
                println!("edge distributions: {} rows", t.rows.len());
            }
        },
        Command::Svv { vector } => {
            for m in vector.methods() {
                let t = ws.svv(m)?;
                println!("{m}: {} lens entries", t.rows.len());
            }
        }
        Command::Sparsify => {
            let r = ws.sparsify()?;
            println!("sweep: {} rows, {} IoU rows", r.rows.len(), r.iou.len());
        }
        Command::Report => {
            ws.run_all()?;
            println!("report written to {}", ws.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            error_line("usage", 2, &e.kind().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            error_line(e.kind(), code, &e.to_string());
            ExitCode::from(code)
        }
    }
}
