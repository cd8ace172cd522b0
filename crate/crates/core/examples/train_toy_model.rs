//! Train the default toy transformer on the synthetic refusal task and
//! report its behaviour on held-out prompts.
//!
//! `cargo run --release --example train_toy_model -- [steps] [seed] [out.ckpt]`

use std::time::Instant;

use steerscope::checkpoint;
use steerscope::model::{Interventions, ModelConfig};
use steerscope::task::{self, Label, Split, SplitCounts, TrainConfig};

fn main() -> steerscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let out_path = args.next();

    let config = ModelConfig::default();
    let corpus = task::generate_corpus(seed, SplitCounts::default(), config.vocab)?;
    let hyper = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = task::train_model(&config, &corpus, &hyper, seed)?;
    println!(
        "trained {} params for {steps} steps in {:.1}s",
        out.model.param_count(),
        start.elapsed().as_secs_f64()
    );
    for (i, l) in out.smoothed.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("  step {i:5}  loss {l:.4}");
    }

    let test = task::labelled(&corpus, Split::Test);
    let report = task::evaluate_behavior(&out.model, &test, &Interventions::none())?;
    for label in Label::BOTH {
        println!(
            "{:8} behaviour success {:.3}",
            label.as_str(),
            report.success(label).unwrap_or(f64::NAN)
        );
    }
    let sample = &corpus.select(Split::Test, Label::Harmless)[0].prompt;
    let gen = out
        .model
        .generate_greedy(sample, &Interventions::none(), task::RESPONSE_LEN, Some(task::END))?;
    println!("prompt:   {}", corpus.vocab.render(sample));
    println!("response: {}", corpus.vocab.render(&gen[sample.len()..]));
    if let Some(path) = out_path {
        checkpoint::model_checkpoint(&out.model)?.save(path.as_ref())?;
        println!("saved {path}");
    }
    Ok(())
}
