//! The whole workbench run as resumable stages over one output directory.
//!
//! Each stage loads its artifact from the directory when present and
//! otherwise computes it, saves it and writes its tables. Tables are only
//! written by the stage that computes them, so a fresh directory always
//! receives the full set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{ablation_report, generate_ablated_batch, AblationKind, AblationRow};
use crate::attribution::{
    build_samples, direct_patch_ie, eap_ig_scores, four_way_scores, IEStore, Orientation,
    PatchSample,
};
use crate::checkpoint::{self, Checkpoint};
use crate::circuits::{
    build_circuit, edge_distribution, faithfulness_report, interchange_faithfulness,
    min_faithful_size, overlap, random_circuit, size_grid, Circuit, CurvePoint, DownstreamKind,
    FaithfulnessReport, FaithfulnessSet, UpstreamKind,
};
use crate::config::RunConfig;
use crate::model::{Interventions, Model};
use crate::report::svg::{self, Series};
use crate::report::{num, opt, schema, Table};
use crate::rng::substream;
use crate::sparsify::{mean_asr, mean_sparsity, sparsity_sweep, SparseMethod, SweepInput, SweepResult};
use crate::steering::{
    candidate_grid, select_with_fallback, steering_examples, train_ntp, train_po, Method,
    SelectionData, SelectionMode, SteeringVector,
};
use crate::svv::{svv_report, top_heads};
use crate::task::{self, Corpus, Label, Split};
use crate::{Error, Result};

/// Minimum-faithful circuit of one vector with the curves it came from.
#[derive(Clone, Debug)]
pub struct CircuitOutcome {
    pub vector: Method,
    /// Steered edges in the graph at the vector's layer.
    pub steered_edges: usize,
    pub curves: Vec<(Label, Vec<CurvePoint>)>,
    /// Smallest grid size faithful on every class.
    pub circuit: Option<Circuit>,
    pub reports: Vec<FaithfulnessReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterchangeRow {
    pub circuit: Method,
    pub vector: Method,
    pub class: Label,
    pub size: usize,
    /// `None` for the circuit itself, the seed for a random baseline.
    pub random_seed: Option<u64>,
    pub faithfulness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub vector: Method,
    pub orientation: Orientation,
    pub edges: usize,
    pub pearson: f64,
    pub top20_sign_agreement: f64,
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    corpus: Option<Corpus>,
    model: Option<Model>,
    vectors: BTreeMap<Method, SteeringVector>,
    stores: BTreeMap<Method, IEStore>,
    samples: BTreeMap<Method, Vec<PatchSample>>,
    sets: BTreeMap<(Method, Label), FaithfulnessSet>,
    circuits: BTreeMap<Method, CircuitOutcome>,
    pub warnings: Vec<String>,
}

impl Workspace {
    /// Opens `cfg.out_dir`, creating it, and records the configuration.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
        Ok(Self {
            cfg,
            dir,
            corpus: None,
            model: None,
            vectors: BTreeMap::new(),
            stores: BTreeMap::new(),
            samples: BTreeMap::new(),
            sets: BTreeMap::new(),
            circuits: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    }

    pub fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            let (rec, voc) = (self.path("corpus.jsonl"), self.path("vocab.json"));
            let corpus = if rec.exists() && voc.exists() {
                Corpus::load(&rec, &voc, self.cfg.seed)?
            } else {
                let c = task::generate_corpus(self.cfg.seed, self.cfg.split_counts(), self.cfg.vocab)?;
                c.save(&rec, &voc)?;
                c
            };
            self.corpus = Some(corpus);
        }
        Ok(self.corpus.as_ref().expect("set above"))
    }

    pub fn model(&mut self) -> Result<&Model> {
        if self.model.is_none() {
            let p = self.path("model.ckpt");
            let model = if p.exists() {
                checkpoint::model_from_checkpoint(&Checkpoint::load(&p)?)?
            } else {
                let cfg = self.cfg.clone();
                let out = task::train_model(&cfg.model_config(), self.corpus()?, &cfg.train_config(), cfg.seed)?;
                let mut t = Table::new(schema::TRAIN_LOSS);
                for (i, (l, s)) in out.losses.iter().zip(&out.smoothed).enumerate() {
                    t.push(vec![i.to_string(), num(*l), num(*s)]);
                }
                t.write(&self.path("train-loss.csv"))?;
                checkpoint::model_checkpoint(&out.model)?.save(&p)?;
                out.model
            };
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("set above"))
    }

    /// Model and corpus together, for stages that need both.
    fn model_corpus(&mut self) -> Result<(&Model, &Corpus)> {
        self.corpus()?;
        self.model()?;
        Ok((self.model.as_ref().expect("loaded"), self.corpus.as_ref().expect("loaded")))
    }

    pub fn vector(&mut self, method: Method) -> Result<SteeringVector> {
        if let Some(v) = self.vectors.get(&method) {
            return Ok(v.clone());
        }
        let p = self.path(&format!("vector-{method}.ckpt"));
        let v = if p.exists() {
            checkpoint::vector_from_checkpoint(&Checkpoint::load(&p)?)?
        } else {
            let v = match method {
                Method::Dim => self.fit_dim()?,
                Method::Ntp | Method::Po => self.fit_learned(method)?,
            };
            checkpoint::vector_checkpoint(&v)?.save(&p)?;
            v
        };
        self.vectors.insert(method, v.clone());
        Ok(v)
    }

    fn fit_dim(&mut self) -> Result<SteeringVector> {
        let alpha = self.cfg.alpha;
        let (model, corpus) = self.model_corpus()?;
        let p = |s, l| corpus.prompts(s, l);
        let (ht, st) = (p(Split::Train, Label::Harmful), p(Split::Train, Label::Harmless));
        let (hv, sv) = (p(Split::Val, Label::Harmful), p(Split::Val, Label::Harmless));
        let data = SelectionData {
            harmful_train: &ht,
            harmless_train: &st,
            harmful_val: &hv,
            harmless_val: &sv,
            refusal_set: &[task::REFUSE],
        };
        let (mut v, table, mode) = select_with_fallback(model, &candidate_grid(model.config.n_layers), &data)?;
        v.alpha = alpha;
        let mut t = Table::new(schema::SELECTION);
        for c in &table {
            t.push(vec![
                c.layer.to_string(),
                c.position.to_string(),
                num(c.bypass),
                num(c.induce),
                num(c.kl),
                num(c.objective),
                c.admissible.to_string(),
            ]);
        }
        t.write(&self.path("selection.csv"))?;
        let mode = match mode {
            SelectionMode::Strict => "strict",
            SelectionMode::RelaxedKl => "relaxed-kl",
        };
        self.write_text(
            "selection.txt",
            &format!("mode={mode}\nlayer={}\nposition={}\n", v.layer, v.position.unwrap_or(0)),
        )?;
        if mode != "strict" {
            self.warn(format!("no DIM candidate met every constraint; chose layer {} by lowest KL", v.layer));
        }
        Ok(v)
    }

    fn fit_learned(&mut self, method: Method) -> Result<SteeringVector> {
        let layer = match self.cfg.fit_layer {
            Some(l) => l,
            None => self.vector(Method::Dim)?.layer,
        };
        let (alpha, hyper) = (self.cfg.alpha, self.cfg.fit_config());
        let (model, corpus) = self.model_corpus()?;
        let sel = |s| {
            let mut r = corpus.select(s, Label::Harmful);
            r.extend(corpus.select(s, Label::Harmless));
            steering_examples(&r)
        };
        let (train, val) = (sel(Split::Train), sel(Split::Val));
        let out = match method {
            Method::Ntp => train_ntp(model, &train, &val, layer, &hyper)?,
            _ => train_po(model, &train, &val, layer, &hyper)?,
        };
        let mut t = Table::new(schema::FIT_LOSS);
        for (e, l) in out.val_losses.iter().enumerate() {
            t.push(vec![method.to_string(), e.to_string(), num(*l)]);
        }
        t.write(&self.path(&format!("fit-{method}.csv")))?;
        Ok(SteeringVector {
            alpha,
            ..out.vector
        })
    }

    pub fn vectors(&mut self) -> Result<Vec<SteeringVector>> {
        Method::ALL.iter().map(|m| self.vector(*m)).collect()
    }

    fn test_prompts(&mut self) -> Result<Vec<(Vec<usize>, Label)>> {
        Ok(task::labelled(self.corpus()?, Split::Test))
    }

    fn class_prompts(&mut self, label: Label) -> Result<Vec<Vec<usize>>> {
        Ok(self.corpus()?.prompts(Split::Test, label))
    }

    /// ASR-analog of every vector on both classes in its flip direction,
    /// plus the unsteered baseline.
    pub fn behaviour(&mut self) -> Result<Table> {
        let vectors = self.vectors()?;
        let test = self.test_prompts()?;
        let model = self.model()?;
        let mut t = Table::new(schema::BEHAVIOUR);
        let base = task::evaluate_behavior(model, &test, &Interventions::none())?;
        for label in Label::BOTH {
            let asr = base.class(label).map(|c| c.asr());
            t.push(vec!["none".into(), label.as_str().into(), "0".into(), opt(asr)]);
        }
        for v in &vectors {
            for label in Label::BOTH {
                let class: Vec<(Vec<usize>, Label)> = test.iter().filter(|p| p.1 == label).cloned().collect();
                let coef = SteeringVector::flip_sign(label);
                let r = task::evaluate_behavior(model, &class, &v.interventions(coef))?;
                let asr = r.class(label).map(|c| c.asr());
                t.push(vec![v.method.to_string(), label.as_str().into(), num(coef), opt(asr)]);
            }
        }
        t.write(&self.path("behaviour.csv"))?;
        Ok(t)
    }

    /// Steered/base flip pairs on the test split.
    pub fn samples(&mut self, method: Method) -> Result<Vec<PatchSample>> {
        if let Some(s) = self.samples.get(&method) {
            return Ok(s.clone());
        }
        let v = self.vector(method)?;
        let test = self.test_prompts()?;
        let (s, dropped) = build_samples(self.model()?, &v, &test, task::RESPONSE_LEN)?;
        if dropped > 0 {
            eprintln!("{method}: {dropped} prompts without a behaviour flip left out of patching");
        }
        self.samples.insert(method, s.clone());
        Ok(s)
    }

    /// Averaged four-way EAP-IG scores.
    pub fn store(&mut self, method: Method) -> Result<IEStore> {
        if let Some(s) = self.stores.get(&method) {
            return Ok(s.clone());
        }
        let p = self.path(&format!("iestore-{method}.ckpt"));
        let store = if p.exists() {
            checkpoint::iestore_from_checkpoint(&Checkpoint::load(&p)?)?
        } else {
            let v = self.vector(method)?;
            let samples = self.samples(method)?;
            let cfg = self.cfg.patch_config()?;
            let (parts, mean) = four_way_scores(self.model()?, &v, &samples, &cfg)?;
            let mut t = Table::new(schema::PATCH_PARTS);
            for (label, o, s) in &parts {
                t.push(vec![
                    method.to_string(),
                    label.as_str().into(),
                    o.to_string(),
                    s.samples.to_string(),
                    s.positions_evaluated.to_string(),
                    s.skipped.to_string(),
                    num(s.steer_node_score()),
                ]);
            }
            t.write(&self.path(&format!("patch-{method}.csv")))?;
            self.write_scores(method, &v, &mean)?;
            checkpoint::iestore_checkpoint(&mean)?.save(&p)?;
            mean
        };
        self.stores.insert(method, store.clone());
        Ok(store)
    }

    fn write_scores(&self, method: Method, v: &SteeringVector, s: &IEStore) -> Result<()> {
        let mut t = Table::new(schema::EDGES);
        for (e, x) in &s.edges {
            t.push(vec![
                method.to_string(),
                e.upstream.to_string(),
                e.downstream.to_string(),
                e.channel.to_string(),
                num(*x),
            ]);
        }
        t.write(&self.path(&format!("edges-{method}.csv")))?;
        let mut t = Table::new(schema::NODES);
        for (n, x) in &s.nodes {
            t.push(vec![method.to_string(), n.to_string(), num(*x)]);
        }
        t.write(&self.path(&format!("nodes-{method}.csv")))?;
        let mut t = Table::new(schema::DIMS);
        for (i, (sv, ie)) in v.values.data().iter().zip(&s.dims).enumerate() {
            let r = if *sv != 0.0 { num(ie / sv) } else { String::new() };
            t.push(vec![method.to_string(), i.to_string(), num(*sv), num(*ie), r]);
        }
        t.write(&self.path(&format!("dims-{method}.csv")))
    }

    /// EAP-IG against exhaustive single-edge patching on up to `n`
    /// samples per class, both orientations.
    pub fn oracle(&mut self, method: Method, n: usize) -> Result<Vec<OracleSummary>> {
        let v = self.vector(method)?;
        let samples = self.samples(method)?;
        let cfg = self.cfg.patch_config()?;
        let model = self.model()?;
        let mut subset = Vec::new();
        for label in Label::BOTH {
            subset.extend(samples.iter().filter(|s| s.label == label).take(n).cloned());
        }
        let mut t = Table::new(schema::ORACLE);
        let mut out = Vec::new();
        for o in Orientation::BOTH {
            let eap = eap_ig_scores(model, &v, &subset, o, &cfg)?;
            let edges: Vec<_> = eap.edges.keys().copied().collect();
            let direct = direct_patch_ie(model, &v, &subset, o, &edges, &cfg)?;
            let a: Vec<f64> = edges.iter().map(|e| eap.edges[e]).collect();
            let b: Vec<f64> = edges.iter().map(|e| direct[e]).collect();
            for (e, (x, y)) in edges.iter().zip(a.iter().zip(&b)) {
                t.push(vec![method.to_string(), o.to_string(), e.to_string(), num(*x), num(*y)]);
            }
            out.push(OracleSummary {
                vector: method,
                orientation: o,
                edges: edges.len(),
                pearson: pearson(&a, &b),
                top20_sign_agreement: top_sign_agreement(&a, &b, 20),
            });
        }
        t.write(&self.path(&format!("oracle-{method}.csv")))?;
        Ok(out)
    }

    fn faith_set(&mut self, method: Method, label: Label) -> Result<&FaithfulnessSet> {
        if !self.sets.contains_key(&(method, label)) {
            let v = self.vector(method)?;
            let samples: Vec<PatchSample> =
                self.samples(method)?.into_iter().filter(|s| s.label == label).collect();
            let metric = self.cfg.metric()?;
            let batch = self.cfg.patch_batch;
            let set = FaithfulnessSet::new(self.model()?, &v, &samples, metric, batch)?;
            self.sets.insert((method, label), set);
        }
        Ok(&self.sets[&(method, label)])
    }

    /// Faithfulness of the whole steered graph per class; 1 by
    /// construction wherever any position is unmasked.
    pub fn full_graph_faithfulness(&mut self, method: Method) -> Result<Vec<(Label, Option<f64>)>> {
        let mut out = Vec::new();
        for label in Label::BOTH {
            self.model()?;
            self.faith_set(method, label)?;
            let set = &self.sets[&(method, label)];
            let model = self.model.as_ref().expect("loaded");
            out.push((label, set.evaluate(model, &set.steered_edges().clone())?));
        }
        Ok(out)
    }

    pub fn circuit(&mut self, method: Method) -> Result<CircuitOutcome> {
        if let Some(c) = self.circuits.get(&method) {
            return Ok(c.clone());
        }
        let store = self.store(method)?;
        let v = self.vector(method)?;
        let (threshold, ranking) = (self.cfg.faith_threshold, self.cfg.ranking()?);
        let fractions = self.cfg.circuit_fractions.clone();
        let source = format!("{method}/{}", self.cfg.metric_tag());
        self.model()?;
        let mut curves = Vec::new();
        let mut steered = 0;
        for label in Label::BOTH {
            self.faith_set(method, label)?;
            let set = &self.sets[&(method, label)];
            steered = set.steered_edges().len();
            let mut sizes = size_grid(steered, &fractions);
            sizes.retain(|&n| n > 0);
            let model = self.model.as_ref().expect("loaded");
            let (_, curve) = min_faithful_size(model, &store.edges, set, threshold, &sizes, ranking)?;
            curves.push((label, curve));
        }
        // Joint size: the first grid point where every class with any
        // evaluable position is faithful.
        let sizes: Vec<usize> = curves[0].1.iter().map(|p| p.size).collect();
        let joint = sizes.iter().copied().find(|&n| {
            let vals: Vec<Option<f64>> = curves
                .iter()
                .map(|(_, c)| c.iter().find(|p| p.size == n).and_then(|p| p.faithfulness))
                .collect();
            vals.iter().any(Option::is_some) && vals.iter().flatten().all(|f| *f >= threshold)
        });
        let mut reports = Vec::new();
        let circuit = match joint {
            Some(n) => {
                let c = build_circuit(&store.edges, n, v.layer, ranking, &source)?;
                for label in Label::BOTH {
                    let set = &self.sets[&(method, label)];
                    let model = self.model.as_ref().expect("loaded");
                    reports.push(faithfulness_report(model, &c, set, label)?);
                }
                Some(c)
            }
            None => {
                self.warn(format!("{method}: no grid size reached faithfulness {threshold} on every class"));
                None
            }
        };
        let out = CircuitOutcome {
            vector: method,
            steered_edges: steered,
            curves,
            circuit,
            reports,
        };
        if let Some(c) = &out.circuit {
            self.write_circuit(method, c, &store, threshold)?;
        }
        self.circuits.insert(method, out.clone());
        Ok(out)
    }

    fn write_circuit(&self, method: Method, c: &Circuit, store: &IEStore, threshold: f64) -> Result<()> {
        let mut t = Table::new(schema::CIRCUIT);
        for e in &c.edges {
            t.push(vec![
                e.upstream.to_string(),
                e.downstream.to_string(),
                e.channel.to_string(),
                num(store.edges.get(e).copied().unwrap_or(0.0)),
            ]);
        }
        t.write(&self.path(&format!("circuit-{method}.csv")))?;
        let header = serde_json::json!({
            "size": c.len(),
            "requested": c.requested,
            "steer_layer": c.steer_layer,
            "source": c.source,
            "threshold": threshold,
        });
        self.write_text(&format!("circuit-{method}.json"), &format!("{header}\n"))?;
        let mut dot = format!("digraph \"{}\" {{\n  rankdir=BT;\n", c.source);
        for e in &c.edges {
            let _ = writeln!(
                dot,
                "  \"{}\" -> \"{}\" [label=\"{}\"];",
                e.upstream, e.downstream, e.channel
            );
        }
        dot.push_str("}\n");
        self.write_text(&format!("circuit-{method}.dot"), &dot)
    }

    /// Faithfulness curves and circuit summaries for every vector.
    pub fn faithfulness(&mut self) -> Result<Vec<CircuitOutcome>> {
        let outs: Vec<CircuitOutcome> = Method::ALL.iter().map(|m| self.circuit(*m)).collect::<Result<_>>()?;
        let mut curve = Table::new(schema::FAITH_CURVE);
        let mut summary = Table::new(schema::CIRCUIT_SUMMARY);
        let mut series = Vec::new();
        for o in &outs {
            for (label, points) in &o.curves {
                for p in points {
                    curve.push(vec![
                        o.vector.to_string(),
                        label.as_str().into(),
                        p.size.to_string(),
                        num(p.fraction),
                        opt(p.faithfulness),
                    ]);
                }
                series.push(Series {
                    name: format!("{} {}", o.vector, label.as_str()),
                    points: points
                        .iter()
                        .filter_map(|p| p.faithfulness.map(|f| (100.0 * p.fraction, f)))
                        .collect(),
                    dashed: *label == Label::Harmless,
                });
            }
            for r in &o.reports {
                summary.push(vec![
                    o.vector.to_string(),
                    r.label.as_str().into(),
                    r.size.to_string(),
                    num(r.size as f64 / o.steered_edges as f64),
                    opt(r.faithfulness),
                    opt(r.complement),
                    r.positions.to_string(),
                ]);
            }
        }
        curve.write(&self.path("faithfulness.csv"))?;
        summary.write(&self.path("circuits.csv"))?;
        let fig = svg::line_chart(
            "Faithfulness by circuit size",
            "circuit size (% of steered edges)",
            "faithfulness",
            &series,
            Some((0.0, 1.0)),
            Some(self.cfg.faith_threshold),
        );
        self.write_text("faithfulness.svg", &fig)?;
        Ok(outs)
    }

    /// Pairwise overlap at every grid size and between the
    /// minimum-faithful circuits.
    pub fn overlap(&mut self) -> Result<Table> {
        let outs = self.faithfulness()?;
        let ranking = self.cfg.ranking()?;
        let stores: Vec<IEStore> = Method::ALL.iter().map(|m| self.store(*m)).collect::<Result<_>>()?;
        let layer = stores[0].steer_layer;
        let mut t = Table::new(schema::OVERLAP);
        if stores.iter().all(|s| s.steer_layer == layer) {
            let sizes = size_grid(outs[0].steered_edges, &self.cfg.circuit_fractions);
            for &n in &sizes {
                let built: Vec<Option<Circuit>> = Method::ALL
                    .iter()
                    .zip(&stores)
                    .map(|(m, s)| build_circuit(&s.edges, n, layer, ranking, m.as_str()).ok())
                    .collect();
                for a in 0..3 {
                    for b in a + 1..3 {
                        if let (Some(ca), Some(cb)) = (&built[a], &built[b]) {
                            if !ca.is_empty() && !cb.is_empty() {
                                t.push(vec![
                                    n.to_string(),
                                    Method::ALL[a].to_string(),
                                    Method::ALL[b].to_string(),
                                    num(overlap(ca, cb)?),
                                ]);
                            }
                        }
                    }
                }
            }
        } else {
            self.warn("vectors sit at different layers; size-grid overlap skipped".into());
        }
        let mut matrix = vec![vec![None; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                if let (Some(ca), Some(cb)) = (&outs[a].circuit, &outs[b].circuit) {
                    if !ca.is_empty() && !cb.is_empty() {
                        let x = overlap(ca, cb)?;
                        matrix[a][b] = Some(x);
                        if a < b {
                            t.push(vec![
                                "min-faithful".into(),
                                Method::ALL[a].to_string(),
                                Method::ALL[b].to_string(),
                                num(x),
                            ]);
                        }
                    }
                }
            }
        }
        t.write(&self.path("overlap.csv"))?;
        let labels: Vec<String> = Method::ALL.iter().map(|m| m.to_string()).collect();
        let fig = svg::heatmap("Minimum-faithful circuit overlap", &labels, &labels, &matrix, None);
        self.write_text("overlap.svg", &fig)?;
        Ok(t)
    }

    /// Faithfulness of every vector through every other vector's circuit,
    /// with size-matched random circuits as the baseline.
    pub fn interchange(&mut self) -> Result<Vec<InterchangeRow>> {
        let outs = self.faithfulness()?;
        let n_seeds = self.cfg.random_circuit_seeds as u64;
        let base_seed = self.cfg.seed;
        self.model()?;
        let mut rows = Vec::new();
        for a in &outs {
            let Some(ca) = &a.circuit else { continue };
            for b in Method::ALL {
                for label in Label::BOTH {
                    self.faith_set(b, label)?;
                    let set = &self.sets[&(b, label)];
                    let model = self.model.as_ref().expect("loaded");
                    if ca.steer_layer != set.vector.layer {
                        continue;
                    }
                    let all: Vec<_> = set.steered_edges().iter().copied().collect();
                    rows.push(InterchangeRow {
                        circuit: a.vector,
                        vector: b,
                        class: label,
                        size: ca.len(),
                        random_seed: None,
                        faithfulness: interchange_faithfulness(model, ca, set)?,
                    });
                    for s in 0..n_seeds {
                        let (seed, rc) = sized_random_circuit(&all, ca.len(), ca.steer_layer, base_seed, s)?;
                        rows.push(InterchangeRow {
                            circuit: a.vector,
                            vector: b,
                            class: label,
                            size: ca.len(),
                            random_seed: Some(seed),
                            faithfulness: set.evaluate(model, &rc.edges)?,
                        });
                    }
                }
            }
        }
        let mut t = Table::new(schema::INTERCHANGE);
        for r in &rows {
            t.push(vec![
                r.circuit.to_string(),
                r.vector.to_string(),
                r.class.as_str().into(),
                r.size.to_string(),
                if r.random_seed.is_some() { "random" } else { "circuit" }.into(),
                r.random_seed.map(|s| s.to_string()).unwrap_or_default(),
                opt(r.faithfulness),
            ]);
        }
        t.write(&self.path("interchange.csv"))?;
        Ok(rows)
    }

    /// Edge counts by upstream and downstream kind, over the whole
    /// circuit and over its 20 highest-scoring edges.
    pub fn edge_distributions(&mut self) -> Result<Table> {
        let outs = self.faithfulness()?;
        let mut t = Table::new(schema::EDGE_DIST);
        for o in &outs {
            let Some(c) = &o.circuit else { continue };
            let store = self.store(o.vector)?;
            let mut scopes = vec![("all".to_string(), None)];
            if c.len() >= 20 {
                scopes.push(("top-20".to_string(), Some(20)));
            }
            for (scope, k) in scopes {
                let d = edge_distribution(c, &store.edges, k)?;
                for u in [UpstreamKind::AttnHead, UpstreamKind::Mlp, UpstreamKind::Resid] {
                    let n = d.upstream.get(&u).copied().unwrap_or(0);
                    t.push(vec![
                        o.vector.to_string(),
                        scope.clone(),
                        "upstream".into(),
                        kind_name(&u),
                        n.to_string(),
                        num(d.upstream_pct(u)),
                    ]);
                }
                for k in [
                    DownstreamKind::Q,
                    DownstreamKind::K,
                    DownstreamKind::V,
                    DownstreamKind::MlpIn,
                    DownstreamKind::LogitsIn,
                ] {
                    let n = d.downstream.get(&k).copied().unwrap_or(0);
                    t.push(vec![
                        o.vector.to_string(),
                        scope.clone(),
                        "downstream".into(),
                        kind_name(&k),
                        n.to_string(),
                        num(d.downstream_pct(k)),
                    ]);
                }
            }
        }
        t.write(&self.path("edge-dist.csv"))?;
        Ok(t)
    }

    /// Logit lens of the raw vector, the top heads' svvs (both signs) and
    /// their sum.
    pub fn svv(&mut self, method: Method) -> Result<Table> {
        let v = self.vector(method)?;
        let store = self.store(method)?;
        let (n, k, fin) = (self.cfg.svv_heads, self.cfg.lens_top_k, self.cfg.lens_final_norm);
        let heads = top_heads(&store.nodes, v.layer, n);
        let (model, corpus) = self.model_corpus()?;
        let rows = svv_report(model, &v, &heads, k, fin)?;
        let mut t = Table::new(schema::SVV);
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut texts = Vec::new();
        for r in &rows {
            labels.push(r.source.to_string());
            values.push(r.top.iter().map(|x| Some(x.1)).collect());
            texts.push(
                r.top
                    .iter()
                    .map(|(tok, x)| format!("{} {x:.2}", corpus.vocab.name(*tok)))
                    .collect(),
            );
            for (rank, (tok, x)) in r.top.iter().enumerate() {
                t.push(vec![
                    method.to_string(),
                    r.source.to_string(),
                    (rank + 1).to_string(),
                    corpus.vocab.name(*tok).into(),
                    num(*x),
                ]);
            }
        }
        let cols: Vec<String> = (1..=k).map(|i| format!("top {i}")).collect();
        let fig = svg::heatmap(
            &format!("Logit lens of {method} steering value vectors"),
            &labels,
            &cols,
            &values,
            Some(&texts),
        );
        t.write(&self.path(&format!("svv-{method}.csv")))?;
        self.write_text(&format!("svv-{method}.svg"), &fig)?;
        Ok(t)
    }

    /// ASR-analog under each configured ablation, both classes.
    pub fn ablation(&mut self, method: Method) -> Result<Vec<AblationRow>> {
        let v = self.vector(method)?;
        let kinds = self.cfg.ablation_kinds()?;
        let (h, s) = (self.class_prompts(Label::Harmful)?, self.class_prompts(Label::Harmless)?);
        ablation_report(self.model()?, &h, &s, &v, &kinds)
    }

    pub fn ablation_table(&mut self) -> Result<Table> {
        let mut t = Table::new(schema::ABLATION);
        for m in Method::ALL {
            for r in self.ablation(m)? {
                t.push(vec![
                    m.to_string(),
                    r.kind.to_string(),
                    num(r.harmful_asr),
                    num(r.harmless_asr),
                    opt(r.harmful_drop_pct),
                    opt(r.harmless_drop_pct),
                    opt(r.avg_drop_pct),
                ]);
            }
        }
        t.write(&self.path("ablation.csv"))?;
        Ok(t)
    }

    /// Side-by-side base, steered and ablated generations for the first
    /// `n` test prompts of each class.
    pub fn transcripts(&mut self, method: Method, kind: AblationKind, n: usize) -> Result<String> {
        let v = self.vector(method)?;
        let (model, corpus) = self.model_corpus()?;
        let mut out = String::new();
        for label in Label::BOTH {
            let prompts: Vec<Vec<usize>> = corpus.prompts(Split::Test, label).into_iter().take(n).collect();
            let coef = SteeringVector::flip_sign(label);
            let base = model.generate_batch(&prompts, &Interventions::none(), task::RESPONSE_LEN, Some(task::END))?;
            let steered = model.generate_batch(&prompts, &v.interventions(coef), task::RESPONSE_LEN, Some(task::END))?;
            let ablated =
                generate_ablated_batch(model, &prompts, &v, coef, kind, task::RESPONSE_LEN, Some(task::END))?;
            for (i, p) in prompts.iter().enumerate() {
                let tail = |t: &[usize]| corpus.vocab.render(&t[p.len()..]);
                let _ = writeln!(out, "[{} {}] {}", label.as_str(), i, corpus.vocab.render(p));
                let _ = writeln!(out, "  base     : {}", tail(&base[i]));
                let _ = writeln!(out, "  steered  : {}", tail(&steered[i]));
                let _ = writeln!(out, "  {:9}: {}", kind.as_str(), tail(&ablated[i].tokens));
            }
        }
        self.write_text(&format!("transcripts-{method}-{kind}.txt"), &out)?;
        Ok(out)
    }

    /// Sparsity sweep over all three vectors with their own dimension IEs.
    pub fn sparsify(&mut self) -> Result<SweepResult> {
        let mut inputs = Vec::new();
        for m in Method::ALL {
            inputs.push(SweepInput {
                method: m,
                vector: self.vector(m)?,
                ie: self.store(m)?.dims,
            });
        }
        let seeds: Vec<u64> = (0..self.cfg.dropout_seeds as u64)
            .map(|i| substream_seed(self.cfg.seed, i))
            .collect();
        let taus = self.cfg.taus.clone();
        let (h, s) = (self.class_prompts(Label::Harmful)?, self.class_prompts(Label::Harmless)?);
        let res = sparsity_sweep(self.model()?, &inputs, &taus, &seeds, &h, &s)?;
        self.write_sweep(&res, &taus)?;
        Ok(res)
    }

    fn write_sweep(&self, res: &SweepResult, taus: &[f64]) -> Result<()> {
        let mut t = Table::new(schema::SWEEP);
        for r in &res.rows {
            t.push(vec![
                r.vector.to_string(),
                r.method.to_string(),
                num(r.tau),
                r.k.to_string(),
                num(r.sparsity_pct),
                r.class.as_str().into(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                num(r.asr),
            ]);
        }
        t.write(&self.path("sweep.csv"))?;
        let mut t = Table::new(schema::IOU);
        for r in &res.iou {
            t.push(vec![
                num(r.tau),
                format!("{}-{}", r.pair.0, r.pair.1),
                opt(r.iou),
                opt(r.pvalue),
            ]);
        }
        t.write(&self.path("iou.csv"))?;

        let mut series = Vec::new();
        for label in Label::BOTH {
            for m in SparseMethod::ALL {
                let points = taus
                    .iter()
                    .filter_map(|&tau| Some((mean_sparsity(&res.rows, tau)?, mean_asr(&res.rows, m, tau, label)?)))
                    .collect();
                series.push(Series {
                    name: format!("{m} {}", label.as_str()),
                    points,
                    dashed: label == Label::Harmless,
                });
            }
        }
        let fig = svg::line_chart(
            "ASR-analog against sparsity (mean over vectors)",
            "sparsity (%)",
            "ASR-analog",
            &series,
            Some((0.0, 1.0)),
            None,
        );
        self.write_text("sparsity.svg", &fig)?;

        let cats: Vec<String> = taus.iter().map(|t| format!("τ={t}")).collect();
        let mut pairs: Vec<String> = res.iou.iter().map(|r| format!("{}-{}", r.pair.0, r.pair.1)).collect();
        pairs.sort();
        pairs.dedup();
        let bars: Vec<(String, Vec<Option<f64>>)> = pairs
            .iter()
            .map(|p| {
                let vals = taus
                    .iter()
                    .map(|&tau| {
                        res.iou
                            .iter()
                            .find(|r| r.tau == tau && format!("{}-{}", r.pair.0, r.pair.1) == *p)
                            .and_then(|r| r.iou)
                    })
                    .collect();
                (p.clone(), vals)
            })
            .collect();
        let fig = svg::bar_chart("IoU of gradient-sparsified supports", "IoU", &cats, &bars, Some((0.0, 1.0)));
        self.write_text("iou.svg", &fig)
    }

    /// Every stage, in order.
    pub fn run_all(&mut self) -> Result<()> {
        self.corpus()?;
        self.model()?;
        self.vectors()?;
        self.behaviour()?;
        for m in Method::ALL {
            self.store(m)?;
        }
        self.faithfulness()?;
        self.overlap()?;
        self.interchange()?;
        self.edge_distributions()?;
        for m in Method::ALL {
            self.svv(m)?;
        }
        self.ablation_table()?;
        self.sparsify()?;
        let mut w = self.warnings.join("\n");
        if !w.is_empty() {
            w.push('\n');
        }
        self.write_text("warnings.txt", &w)
    }
}

/// Random circuit of exactly `n` edges. A random ranking can make the
/// exact size unreachable through pruning, so rankings are redrawn from
/// successive derived seeds; returns the seed that worked.
fn sized_random_circuit(
    all: &[crate::model::EdgeId],
    n: usize,
    layer: usize,
    base_seed: u64,
    index: u64,
) -> Result<(u64, Circuit)> {
    use rand::Rng;
    let mut rng = substream(base_seed, &format!("random-circuit-{index}"));
    for _ in 0..1000 {
        let seed: u64 = rng.random();
        match random_circuit(all, n, layer, seed) {
            Ok(c) => return Ok((seed, c)),
            Err(Error::Construction { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Construction {
        requested: n,
        attainable: 0,
    })
}

/// Dropout seeds as named substreams of the global seed.
fn substream_seed(seed: u64, i: u64) -> u64 {
    use rand::Rng;
    substream(seed, &format!("dropout-seed-{i}")).random()
}

fn kind_name<T: serde::Serialize>(k: &T) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    c / (va * vb).sqrt()
}

/// Fraction of the `k` largest-`|b|` entries where `a` and `b` share a sign.
pub fn top_sign_agreement(a: &[f64], b: &[f64], k: usize) -> f64 {
    let mut idx: Vec<usize> = (0..b.len()).collect();
    idx.sort_by(|&i, &j| b[j].abs().total_cmp(&b[i].abs()).then(i.cmp(&j)));
    let k = k.min(idx.len());
    if k == 0 {
        return f64::NAN;
    }
    idx[..k].iter().filter(|&&i| a[i].signum() == b[i].signum()).count() as f64 / k as f64
}

/// Byte comparison of every CSV in two run directories.
pub fn compare_csvs(a: &Path, b: &Path) -> Result<Vec<(String, bool)>> {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .map_err(|e| Error::io(a, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let x = std::fs::read(a.join(&n)).map_err(|e| Error::io(a.join(&n), e))?;
            let same = std::fs::read(b.join(&n)).map(|y| x == y).unwrap_or(false);
            Ok((n, same))
        })
        .collect()
}
