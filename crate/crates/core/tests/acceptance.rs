//! Acceptance suite: one line per criterion with its runtime.
//!
//! Criteria 4 to 7 and 10 to 12 share two fresh full pipeline runs under
//! the target directory; criterion 8 adds cached runs for seeds 1 and 2.
//! Failures are reported but only change the exit status under
//! `--strict`, so the workspace test run stays green while the record
//! stays honest.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use steerscope::ablation::AblationKind;
use steerscope::attribution::{
    direct_patch_ie, eap_ig_scores, MetricSpec, Orientation, PatchConfig, PatchSample,
};
use steerscope::circuits::FaithfulnessSet;
use steerscope::config::RunConfig;
use steerscope::model::{Arch, Model, ModelConfig, ParamVars, Pass, SteerVar};
use steerscope::pipeline::{compare_csvs, Workspace};
use steerscope::rng::substream;
use steerscope::sparsify::{hypergeom_pvalue, mean_asr, mean_sparsity, SparseMethod, SweepResult};
use steerscope::steering::{Method, SteeringVector};
use steerscope::svv::verify_decomposition;
use steerscope::task::Label;
use steerscope::tensor::{grad_error, Tape, Tensor};

type Outcome = Result<(bool, String), String>;

struct Suite {
    only: Option<Vec<usize>>,
    passed: Vec<usize>,
    failed: Vec<usize>,
    total: Duration,
}

impl Suite {
    fn wants(&self, id: usize) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }

    fn run(&mut self, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        if !self.wants(id) {
            return;
        }
        let t = Instant::now();
        let res = f();
        let elapsed = t.elapsed();
        let (mut pass, mut detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
        if elapsed > limit {
            detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
            pass = false;
        }
        println!(
            "criterion {id:>2} {:<4} {:>8.1}s  {name}: {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if pass { &mut self.passed } else { &mut self.failed }.push(id);
        self.total += elapsed;
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn small_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 12,
        vocab: 10,
        max_seq: 12,
        ..ModelConfig::default()
    }
}

fn scaled(config: &ModelConfig, seed: u64, scale: f64) -> Model {
    let mut m = Model::init(config, &mut substream(seed, "acceptance-init")).expect("valid config");
    for t in m.tensors_mut() {
        *t = t.scale(scale);
    }
    m
}

fn uniform_vec(rng: &mut impl Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n).map(|_| half_width * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

/// Every parameter tensor of a freshly drawn model, checked against
/// central differences of a next-token loss with steering switched on.
/// Relative error is `‖analytic − numeric‖₂ / ‖numeric‖₂` over all
/// parameters of a draw. Single tensors whose partials sit near
/// central-difference round-off (saturated attention) are reported
/// alongside, as is the elementwise worst case.
fn gradients() -> Outcome {
    let config = small_config(Arch::Transformer);
    let (mut worst, mut worst_tensor, mut worst_elem): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    for draw in 0..50u64 {
        let mut rng = substream(draw, "acceptance-grad");
        let scale = 2.0 + 6.0 * rng.random::<f64>();
        let m = scaled(&config, draw, scale);
        let len = rng.random_range(3..=8);
        let toks: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab)).collect();
        let targets: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab)).collect();
        let layer = rng.random_range(0..config.n_layers);
        let s = Tensor::vector(uniform_vec(&mut rng, config.d_model, 1.0));
        let coef = rng.random::<f64>() * 4.0 - 2.0;
        // odd draws take the per-edge graph path of the forward pass
        let graph = draw % 2 == 1;
        let mut w = Tensor::zeros(&[len, config.vocab]);
        for (i, &t) in targets.iter().enumerate() {
            w.data_mut()[i * config.vocab + t] = -1.0 / len as f64;
        }
        let named = m.named_tensors();
        let (mut diff_sq, mut num_sq) = (0.0, 0.0);
        for idx in 0..named.len() {
            let x0 = named[idx].1.clone();
            let err = grad_error(
                |tape: &mut Tape, x| {
                    let pv = ParamVars::load(&m, tape, false)?;
                    let mut leaves = pv.leaves().to_vec();
                    leaves[idx] = x;
                    let pv = ParamVars::from_leaves(&m, tape, &leaves)?;
                    let pass = Pass {
                        steer: Some(SteerVar {
                            layer,
                            vector: tape.constant(s.clone()),
                            coefs: vec![coef],
                        }),
                        graph,
                        ..Pass::default()
                    };
                    let trace = m.run(tape, &pv, &toks, 1, &pass)?;
                    tape.log_softmax_dot(trace.logits, w.clone())
                },
                &x0,
                1e-5,
            )
            .map_err(e2s)?;
            diff_sq += err.diff_norm.powi(2);
            num_sq += err.numeric_norm.powi(2);
            worst_tensor = worst_tensor.max(err.normwise());
            worst_elem = worst_elem.max(err.elementwise);
            checked += x0.len();
        }
        worst = worst.max((diff_sq / num_sq).sqrt());
    }
    Ok((
        worst < 1e-4,
        format!(
            "50 draws, {checked} partials, worst relative error {worst:.2e} \
             (single tensor {worst_tensor:.2e}, elementwise {worst_elem:.2e})"
        ),
    ))
}

fn decomposition() -> Outcome {
    let config = ModelConfig::default();
    let mut worst: f64 = 0.0;
    for layer in 0..config.n_layers {
        for draw in 0..100u64 {
            let mut rng = substream(draw, &format!("acceptance-svv-{layer}"));
            let m = scaled(&config, draw % 5, 1.0 + rng.random::<f64>());
            let seq = rng.random_range(1..=config.max_seq);
            let h = Tensor::matrix(seq, config.d_model, uniform_vec(&mut rng, seq * config.d_model, 2.0))
                .map_err(e2s)?;
            let s = uniform_vec(&mut rng, config.d_model, 1.0);
            let alpha = rng.random::<f64>() * 16.0 - 8.0;
            worst = worst.max(verify_decomposition(&m, layer, &h, &s, alpha).map_err(e2s)?);
        }
    }
    Ok((
        worst < 1e-6,
        format!("{} layers x 100 draws, worst residual {worst:.2e}", config.n_layers),
    ))
}

/// On a network linear in its residual inputs the integrated gradient
/// is exact for any step count.
fn linear_exactness() -> Outcome {
    let config = small_config(Arch::Linear);
    let m = scaled(&config, 3, 6.0);
    let mut rng = substream(3, "acceptance-linear");
    let mut worst: f64 = 0.0;
    let (mut compared, mut positions) = (0, 0);
    for layer in 0..config.n_layers {
        let v = SteeringVector {
            values: Tensor::vector(uniform_vec(&mut rng, config.d_model, 1.0)),
            layer,
            position: None,
            alpha: 3.0,
            method: Method::Dim,
        };
        let samples: Vec<PatchSample> = (0..6)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Harmful } else { Label::Harmless };
                let tok = |rng: &mut rand_chacha::ChaCha8Rng, n| -> Vec<usize> {
                    (0..n).map(|_| rng.random_range(0..config.vocab)).collect()
                };
                PatchSample {
                    prompt: tok(&mut rng, 3),
                    steered: tok(&mut rng, 3),
                    base: tok(&mut rng, 3),
                    label,
                    coef: SteeringVector::flip_sign(label) * 3.0,
                }
            })
            .collect();
        for steps in [1, 5, 10] {
            let cfg = PatchConfig {
                steps,
                metric: MetricSpec::LogitDiff,
                normalize: false,
                batch: 4,
            };
            for o in Orientation::BOTH {
                let eap = eap_ig_scores(&m, &v, &samples, o, &cfg).map_err(e2s)?;
                positions += eap.positions_evaluated;
                let edges: Vec<_> = eap.edges.keys().copied().collect();
                let direct = direct_patch_ie(&m, &v, &samples, o, &edges, &cfg).map_err(e2s)?;
                for e in &edges {
                    worst = worst.max((eap.edges[e] - direct[e]).abs());
                    compared += 1;
                }
            }
        }
    }
    Ok((
        worst < 1e-8 && positions > 0,
        format!("{compared} edge scores over T in {{1,5,10}}, {positions} positions, worst gap {worst:.2e}"),
    ))
}

fn oracle(ws: &mut Workspace) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        for o in ws.oracle(m, 16).map_err(e2s)? {
            ok &= o.pearson >= 0.8 && o.top20_sign_agreement >= 0.9;
            parts.push(format!(
                "{m}/{} r={:.3} sign={:.2} ({} edges)",
                o.orientation, o.pearson, o.top20_sign_agreement, o.edges
            ));
        }
    }
    Ok((ok, parts.join(", ")))
}

fn endpoints(ws: &mut Workspace) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let outs = ws.faithfulness().map_err(e2s)?;
    for (m, out) in Method::ALL.iter().zip(&outs) {
        let v = ws.vector(*m).map_err(e2s)?;
        let samples = ws.samples(*m).map_err(e2s)?;
        let (metric, batch) = (ws.cfg.metric().map_err(e2s)?, ws.cfg.patch_batch);
        let model = ws.model().map_err(e2s)?;
        let (mut full_gap, mut empty_gap): (f64, f64) = (0.0, 0.0);
        for label in Label::BOTH {
            let class: Vec<PatchSample> = samples.iter().filter(|s| s.label == label).cloned().collect();
            let set = FaithfulnessSet::new(model, &v, &class, metric, batch).map_err(e2s)?;
            if let Some(f) = set.evaluate(model, set.steered_edges()).map_err(e2s)? {
                full_gap = full_gap.max((f - 1.0).abs());
            }
            if let Some(f) = set.evaluate(model, &Default::default()).map_err(e2s)? {
                empty_gap = empty_gap.max(f.abs());
            }
        }
        let complement = out
            .reports
            .iter()
            .filter_map(|r| r.complement)
            .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c.abs(), |a| a.max(c.abs()))));
        ok &= full_gap <= 1e-8 && empty_gap <= 1e-8 && complement.is_some_and(|c| c <= 0.1);
        parts.push(format!(
            "{m}: |F(M)-1|={full_gap:.1e} |F(0)|={empty_gap:.1e} max|F(complement)|={}",
            complement.map_or("n/a".into(), |c| format!("{c:.3}"))
        ));
    }
    Ok((ok, parts.join(", ")))
}

fn localization(ws: &mut Workspace) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for out in ws.faithfulness().map_err(e2s)? {
        let faith: Vec<f64> = out.reports.iter().filter_map(|r| r.faithfulness).collect();
        let good = out.circuit.as_ref().is_some_and(|c| c.len() < out.steered_edges)
            && !faith.is_empty()
            && faith.iter().all(|f| *f >= 0.85);
        ok &= good;
        let size = out.circuit.as_ref().map_or(0, |c| c.len());
        let shown: Vec<String> = faith.iter().map(|f| format!("{f:.3}")).collect();
        parts.push(format!(
            "{}: {size}/{} edges, F=[{}]",
            out.vector,
            out.steered_edges,
            shown.join(" ")
        ));
    }
    Ok((ok, parts.join(", ")))
}

fn class_mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn interchange(ws: &mut Workspace) -> Outcome {
    let rows = ws.interchange().map_err(e2s)?;
    let seeds = ws.cfg.random_circuit_seeds;
    let mut ok = true;
    let mut parts = Vec::new();
    for a in Method::ALL {
        for b in Method::ALL {
            if a == b {
                continue;
            }
            let pair: Vec<_> = rows.iter().filter(|r| r.circuit == a && r.vector == b).collect();
            let circ = class_mean(pair.iter().filter(|r| r.random_seed.is_none()).map(|r| r.faithfulness));
            let mut random_seeds: Vec<u64> = pair.iter().filter_map(|r| r.random_seed).collect();
            random_seeds.sort_unstable();
            random_seeds.dedup();
            let randoms: Vec<Option<f64>> = random_seeds
                .iter()
                .map(|s| class_mean(pair.iter().filter(|r| r.random_seed == Some(*s)).map(|r| r.faithfulness)))
                .collect();
            let best_random = randoms.iter().flatten().fold(f64::NEG_INFINITY, |x, y| x.max(*y));
            let good = match circ {
                Some(c) => randoms.len() >= seeds && randoms.iter().all(|r| r.is_some_and(|r| c > r)),
                None => false,
            };
            ok &= good;
            parts.push(format!(
                "{b} via {a}: {} vs random max {best_random:.3}",
                circ.map_or("n/a".into(), |c| format!("{c:.3}"))
            ));
        }
    }
    Ok((ok, parts.join(", ")))
}

fn drops(ws: &mut Workspace) -> Result<(Option<f64>, Option<f64>, Option<f64>), String> {
    let rows = ws.ablation(Method::Dim).map_err(e2s)?;
    let get = |k| rows.iter().find(|r| r.kind == k).and_then(|r| r.avg_drop_pct);
    Ok((
        get(AblationKind::QkFreeze),
        get(AblationKind::OvFreeze),
        get(AblationKind::MlpSubtract),
    ))
}

/// `extra` holds the seed 1 and 2 runs, already trained.
fn ablation_ordering(ws: &mut Workspace, extra: &mut [Workspace]) -> Outcome {
    let mut votes = 0;
    let mut parts = Vec::new();
    let mut all: Vec<&mut Workspace> = vec![ws];
    all.extend(extra.iter_mut());
    for w in all {
        let seed = w.cfg.seed;
        let d = drops(w)?;
        let good = match d {
            (Some(qk), Some(ov), Some(mlp)) => qk < ov && qk < mlp,
            _ => false,
        };
        votes += usize::from(good);
        let f = |x: Option<f64>| x.map_or("n/a".into(), |x| format!("{x:.2}"));
        parts.push(format!(
            "seed {seed}: qk {} ov {} mlp {} ({})",
            f(d.0),
            f(d.1),
            f(d.2),
            if good { "yes" } else { "no" }
        ));
    }
    Ok((votes >= 2, format!("{votes}/3 seeds; DIM avg drop %: {}", parts.join(", "))))
}

/// A trained model and DIM vector for another seed, kept between suite
/// runs since only the ablation itself is under test.
fn seed_run(root: &Path, seed: u64) -> Result<Workspace, String> {
    let cfg = RunConfig {
        seed,
        out_dir: root.join(format!("seed{seed}")),
        ..RunConfig::default()
    };
    let mut ws = Workspace::open(cfg).map_err(e2s)?;
    ws.vector(Method::Dim).map_err(e2s)?;
    Ok(ws)
}

/// Tail counts by brute force over every `b`-subset of `d` items.
fn hypergeometric() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut tuples = 0;
    for d in 0..=12usize {
        // counts[b][x]: b-subsets meeting a fixed a-subset in x items
        for a in 0..=d {
            let fixed: u32 = (1u32 << a) - 1;
            let mut counts = vec![vec![0u64; d + 1]; d + 1];
            for mask in 0u32..(1u32 << d) {
                counts[mask.count_ones() as usize][(mask & fixed).count_ones() as usize] += 1;
            }
            for b in 0..=d {
                let total: u64 = counts[b].iter().sum();
                for overlap in 0..=a.min(b) {
                    let tail: u64 = counts[b][overlap..].iter().sum();
                    let exact = tail as f64 / total as f64;
                    let p = hypergeom_pvalue(d, a, b, overlap).map_err(e2s)?;
                    worst = worst.max((p - exact).abs());
                    tuples += 1;
                }
            }
        }
    }
    Ok((worst <= 1e-12, format!("{tuples} tuples with d <= 12, worst gap {worst:.2e}")))
}

fn dominance(res: &SweepResult, taus: &[f64]) -> Outcome {
    let Some(&tau) = taus
        .iter()
        .find(|&&t| mean_sparsity(&res.rows, t).is_some_and(|s| s >= 80.0))
    else {
        return Ok((false, "no tau reaches 80% sparsity".into()));
    };
    let at = |m| mean_asr(&res.rows, m, tau, Label::Harmful);
    let (g, ie, drop) = (at(SparseMethod::Gradient), at(SparseMethod::Ie), at(SparseMethod::Dropout));
    let (Some(g), Some(ie), Some(drop)) = (g, ie, drop) else {
        return Ok((false, format!("missing sweep rows at tau {tau}")));
    };
    let mut detail = format!(
        "tau {tau} ({:.1}% sparse), bypass ASR gradient {g:.3} ie {ie:.3} dropout {drop:.3}",
        mean_sparsity(&res.rows, tau).unwrap_or(0.0)
    );
    if g == 0.0 && drop == 0.0 {
        detail.push_str("; gradient and dropout both at 0, so that comparison is a tie");
    }
    Ok((g >= drop && ie >= drop, detail))
}

fn iou_significance(res: &SweepResult) -> Outcome {
    println!("    tau   pair      |A|  |B|  overlap  iou      p-value");
    let mut taus: Vec<f64> = res.iou.iter().map(|r| r.tau).collect();
    taus.dedup();
    let mut ok = true;
    let mut tested = 0;
    let mut failed = Vec::new();
    for tau in taus {
        let rows: Vec<_> = res.iou.iter().filter(|r| r.tau == tau).collect();
        for r in &rows {
            println!(
                "    {:<5} {:<9} {:>4} {:>4} {:>8}  {:<8} {}",
                tau,
                format!("{}-{}", r.pair.0, r.pair.1),
                r.support_a,
                r.support_b,
                r.overlap,
                r.iou.map_or("-".into(), |x| format!("{x:.3}")),
                r.pvalue.map_or("-".into(), |p| format!("{p:.3e}"))
            );
        }
        let nonempty = rows.iter().all(|r| r.support_a > 0 && r.support_b > 0);
        if tau > 0.0 && nonempty {
            for r in rows {
                tested += 1;
                if !r.pvalue.is_some_and(|p| p < 0.05) {
                    ok = false;
                    failed.push(format!("{}-{}@{tau}", r.pair.0, r.pair.1));
                }
            }
        }
    }
    let detail = if ok {
        format!("{tested} pairwise tests, all p < 0.05")
    } else {
        format!("{tested} pairwise tests, p >= 0.05 for {} (full table above)", failed.join(" "))
    };
    Ok((ok, detail))
}

fn fresh(dir: &Path) -> Result<Workspace, String> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(e2s)?;
    }
    let cfg = RunConfig {
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    Workspace::open(cfg).map_err(e2s)
}

fn determinism(root: &Path, run_a: &Path) -> Outcome {
    let dir = root.join("run-b");
    let t = Instant::now();
    fresh(&dir)?.run_all().map_err(e2s)?;
    let took = t.elapsed();
    // names come from the second run: earlier criteria add oracle tables
    // to the first run's directory that no pipeline stage writes
    let same = compare_csvs(&dir, run_a).map_err(e2s)?;
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| n.as_str()).collect();
    let ok = !same.is_empty() && differing.is_empty() && took < mins(45);
    Ok((
        ok,
        format!(
            "{} CSVs compared, {} differ{}; second pipeline took {:.0}s",
            same.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) },
            took.as_secs_f64()
        ),
    ))
}

/// `--strict` exits nonzero on any failure; `--only 1,2,9` runs a subset.
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strict = args.iter().any(|a| a == "--strict");
    let only = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .map(|list| list.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut suite = Suite {
        only,
        passed: Vec::new(),
        failed: Vec::new(),
        total: Duration::ZERO,
    };
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");

    suite.run(1, "gradient check", mins(2), gradients);
    suite.run(2, "svv decomposition", mins(1), decomposition);
    suite.run(3, "linear EAP-IG exactness", mins(1), linear_exactness);

    let run_a = root.join("run-a");
    let mut ws = None;
    if [4, 5, 6, 7, 8, 10, 11, 12].iter().any(|&i| suite.wants(i)) {
        let t = Instant::now();
        match fresh(&run_a).and_then(|mut w| w.run_all().map(|_| w).map_err(e2s)) {
            Ok(w) => ws = Some(w),
            Err(e) => println!("pipeline run-a failed: {e}"),
        }
        println!("pipeline run-a finished in {:.0}s", t.elapsed().as_secs_f64());
    }
    let mut extra = Vec::new();
    if suite.wants(8) {
        let t = Instant::now();
        for seed in [1, 2] {
            match seed_run(&root, seed) {
                Ok(w) => extra.push(w),
                Err(e) => println!("seed {seed} setup failed: {e}"),
            }
        }
        println!("seed 1 and 2 models ready in {:.0}s", t.elapsed().as_secs_f64());
    }
    let missing = || Err::<(bool, String), String>("pipeline run-a unavailable".into());

    match ws.as_mut() {
        Some(ws) => {
            suite.run(4, "EAP-IG against patching oracle", mins(10), || oracle(ws));
            suite.run(5, "faithfulness endpoints and complement", mins(5), || endpoints(ws));
            suite.run(6, "localization", mins(10), || localization(ws));
            suite.run(7, "interchangeability", mins(15), || interchange(ws));
            suite.run(8, "ablation ordering", mins(10), || ablation_ordering(ws, &mut extra));
        }
        None => {
            for (id, name) in [(4, "oracle"), (5, "endpoints"), (6, "localization"), (7, "interchange"), (8, "ablation")] {
                suite.run(id, name, mins(1), missing);
            }
        }
    }
    suite.run(9, "hypergeometric exactness", mins(1), hypergeometric);
    match ws.as_mut() {
        Some(ws) => {
            let taus = ws.cfg.taus.clone();
            // run_all wrote the sweep tables but keeps no result; this
            // reruns the sweep from the cached vectors and stores
            let mut sweep = None;
            suite.run(10, "sparsification dominance", mins(10), || {
                let res = sweep.insert(ws.sparsify().map_err(e2s)?);
                dominance(res, &taus)
            });
            suite.run(11, "IoU significance", mins(10), || match &sweep {
                Some(res) => iou_significance(res),
                None => Err("no sweep result".into()),
            });
        }
        None => {
            suite.run(10, "sparsification dominance", mins(1), missing);
            suite.run(11, "IoU significance", mins(1), missing);
        }
    }
    suite.run(12, "determinism", mins(45), || determinism(&root, &run_a));

    let failed: Vec<String> = suite.failed.iter().map(|i| i.to_string()).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s{}",
        suite.passed.len(),
        suite.passed.len() + failed.len(),
        suite.total.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
