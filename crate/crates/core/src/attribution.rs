//! Multi-token activation patching for steered generation.
//!
//! A patching sample is a prompt with two greedy responses, one decoded
//! with steering and one without. Both runs are teacher-forced on the
//! same tokens and differ only by the steering coefficient, so the clean
//! and corrupt inputs are the two coefficients. Scores come from EAP-IG
//! (integrated gradients along the coefficient, midpoint rule) or from
//! the exhaustive direct-patching oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    enumerate_graph, Channel, EdgeId, EdgePatch, ForwardCache, Model, NodeId, ParamVars, Pass,
    SteerVar,
};
use crate::steering::SteeringVector;
use crate::task::{self, pad_batch, Label};
use crate::tensor::{argmax, kl_divergence, softmax, Tape, Tensor};

/// Which run of a pair plays the clean role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Steered run is clean; patch on the base response.
    SteeredClean,
    /// Base run is clean; patch on the steered response.
    BaseClean,
}

impl Orientation {
    pub const BOTH: [Orientation; 2] = [Orientation::SteeredClean, Orientation::BaseClean];

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::SteeredClean => "steered-clean",
            Orientation::BaseClean => "base-clean",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricSpec {
    LogitDiff,
    /// Relative KL; positions with `KL(P_steer ‖ P_base) ≤ threshold` are
    /// masked.
    DirKl { threshold: f64 },
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec::LogitDiff
    }
}

/// `logit(y) − logit(y*)`.
pub fn metric_logit_diff(logits: &[f64], y: usize, y_star: usize) -> f64 {
    logits[y] - logits[y_star]
}

/// `KL(P_corrupt ‖ P_patched) − KL(P_clean ‖ P_patched)`.
pub fn metric_dirkl(p_corrupt: &[f64], p_clean: &[f64], p_patched: &[f64]) -> f64 {
    kl_divergence(p_corrupt, p_patched) - kl_divergence(p_clean, p_patched)
}

/// A prompt with its steered and base greedy responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub prompt: Vec<usize>,
    pub steered: Vec<usize>,
    pub base: Vec<usize>,
    pub label: Label,
    /// Effective steering coefficient of the steered run.
    pub coef: f64,
}

/// Which response is teacher-forced and which run is clean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roles {
    pub force_steered: bool,
    pub clean_steered: bool,
}

impl From<Orientation> for Roles {
    fn from(o: Orientation) -> Self {
        match o {
            Orientation::SteeredClean => Roles {
                force_steered: false,
                clean_steered: true,
            },
            Orientation::BaseClean => Roles {
                force_steered: true,
                clean_steered: false,
            },
        }
    }
}

impl PatchSample {
    /// Teacher-forced tokens and (clean, corrupt) coefficients.
    fn oriented(&self, r: Roles) -> (Vec<usize>, f64, f64) {
        let resp = if r.force_steered { &self.steered } else { &self.base };
        let (clean, corrupt) = if r.clean_steered {
            (self.coef, 0.0)
        } else {
            (0.0, self.coef)
        };
        ([self.prompt.as_slice(), resp.as_slice()].concat(), clean, corrupt)
    }

    fn response_len(&self, r: Roles) -> usize {
        if r.force_steered {
            self.steered.len()
        } else {
            self.base.len()
        }
    }
}

/// Generate steered and base responses for each prompt and keep the
/// pairs where steering flips refusal. Harmful prompts are steered with
/// `−α`, harmless ones with `+α`. Returns kept samples and the number
/// dropped.
pub fn build_samples(
    model: &Model,
    vector: &SteeringVector,
    prompts: &[(Vec<usize>, Label)],
    max_new: usize,
) -> Result<(Vec<PatchSample>, usize)> {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for label in Label::BOTH {
        let class: Vec<Vec<usize>> = prompts
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(p, _)| p.clone())
            .collect();
        if class.is_empty() {
            continue;
        }
        let sign = SteeringVector::flip_sign(label);
        let base = model.generate_batch(&class, &Default::default(), max_new, Some(task::END))?;
        let steered =
            model.generate_batch(&class, &vector.interventions(sign), max_new, Some(task::END))?;
        for ((p, b), s) in class.iter().zip(base).zip(steered) {
            let (b, s) = (b[p.len()..].to_vec(), s[p.len()..].to_vec());
            if b.is_empty() || s.is_empty() || task::is_refusal(&b) == task::is_refusal(&s) {
                dropped += 1;
                continue;
            }
            kept.push(PatchSample {
                prompt: p.clone(),
                steered: s,
                base: b,
                label,
                coef: sign * vector.alpha,
            });
        }
    }
    Ok((kept, dropped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Integration steps.
    pub steps: usize,
    pub metric: MetricSpec,
    /// Divide each sample's summed score by its unmasked position count.
    pub normalize: bool,
    /// Samples per forward pass.
    pub batch: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            metric: MetricSpec::LogitDiff,
            normalize: false,
            batch: 16,
        }
    }
}

/// One unmasked position: the logits row that predicts a response token.
#[derive(Clone, Debug)]
struct Target {
    row: usize,
    y: usize,
    y_star: usize,
    weight: f64,
    p_clean: Vec<f64>,
    p_corrupt: Vec<f64>,
}

/// Samples of one chunk, padded into a batch and cached under both
/// coefficients.
pub struct Prepared {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub clean_coefs: Vec<f64>,
    pub corrupt_coefs: Vec<f64>,
    pub clean: ForwardCache,
    pub corrupt: ForwardCache,
    targets: Vec<Vec<Target>>,
}

impl Prepared {
    pub fn kept(&self) -> usize {
        self.targets.iter().filter(|t| !t.is_empty()).count()
    }

    pub fn positions(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    pub fn unmasked(&self, b: usize) -> usize {
        self.targets[b].len()
    }

    /// Weighted metric of sample `b` on `logits`.
    pub fn metric_of(&self, logits: &Tensor, metric: MetricSpec, b: usize) -> f64 {
        self.targets[b]
            .iter()
            .map(|t| t.weight * target_metric(t, logits.row(t.row), metric))
            .sum()
    }

    /// Per-position metric values of sample `b` (unweighted).
    pub fn position_metrics(&self, logits: &Tensor, metric: MetricSpec, b: usize) -> Vec<f64> {
        self.targets[b]
            .iter()
            .map(|t| target_metric(t, logits.row(t.row), metric))
            .collect()
    }
}

fn target_metric(t: &Target, row: &[f64], metric: MetricSpec) -> f64 {
    match metric {
        MetricSpec::LogitDiff => metric_logit_diff(row, t.y, t.y_star),
        MetricSpec::DirKl { .. } => metric_dirkl(&t.p_corrupt, &t.p_clean, &softmax(row)),
    }
}

/// Graph-mode forward with per-sequence steering coefficients and an
/// optional edge patch; returns the full cache.
pub fn cached_run(
    model: &Model,
    vector: &SteeringVector,
    tokens: &[usize],
    coefs: &[f64],
    patch: Option<EdgePatch<'_>>,
) -> Result<ForwardCache> {
    let mut tape = Tape::new();
    let pv = ParamVars::load(model, &mut tape, false)?;
    let s = tape.constant(vector.values.clone());
    let pass = Pass {
        steer: Some(SteerVar {
            layer: vector.layer,
            vector: s,
            coefs: coefs.to_vec(),
        }),
        patch,
        graph: true,
        ..Pass::default()
    };
    let trace = model.run(&mut tape, &pv, tokens, coefs.len(), &pass)?;
    Ok(model.collect_cache(&tape, &trace))
}

/// Logits of a patched forward.
pub fn patched_logits(
    model: &Model,
    vector: &SteeringVector,
    tokens: &[usize],
    coefs: &[f64],
    patch: EdgePatch<'_>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::load(model, &mut tape, false)?;
    let s = tape.constant(vector.values.clone());
    let pass = Pass {
        steer: Some(SteerVar {
            layer: vector.layer,
            vector: s,
            coefs: coefs.to_vec(),
        }),
        patch: Some(patch),
        ..Pass::default()
    };
    let trace = model.run(&mut tape, &pv, tokens, coefs.len(), &pass)?;
    Ok(tape.value(trace.logits).clone())
}

/// Whether a position carries steering signal.
fn keep_position(
    metric: MetricSpec,
    p_clean: &[f64],
    p_corrupt: &[f64],
    clean_is_steered: bool,
) -> bool {
    match metric {
        MetricSpec::LogitDiff => argmax(p_clean) != argmax(p_corrupt),
        MetricSpec::DirKl { threshold } => {
            let (ps, pb) = if clean_is_steered {
                (p_clean, p_corrupt)
            } else {
                (p_corrupt, p_clean)
            };
            kl_divergence(ps, pb) > threshold
        }
    }
}

pub fn prepare(
    model: &Model,
    vector: &SteeringVector,
    samples: &[&PatchSample],
    roles: Roles,
    metric: MetricSpec,
    normalize: bool,
) -> Result<Prepared> {
    if let MetricSpec::DirKl { threshold } = metric {
        if !(threshold >= 0.0) {
            return Err(Error::Contract(format!("KL threshold {threshold} must be ≥ 0")));
        }
    }
    let oriented: Vec<(Vec<usize>, f64, f64)> =
        samples.iter().map(|s| s.oriented(roles)).collect();
    let seqs: Vec<Vec<usize>> = oriented.iter().map(|o| o.0.clone()).collect();
    let (tokens, seq) = pad_batch(&seqs);
    let clean_coefs: Vec<f64> = oriented.iter().map(|o| o.1).collect();
    let corrupt_coefs: Vec<f64> = oriented.iter().map(|o| o.2).collect();
    let clean = cached_run(model, vector, &tokens, &clean_coefs, None)?;
    let corrupt = cached_run(model, vector, &tokens, &corrupt_coefs, None)?;
    let clean_is_steered = roles.clean_steered;
    let mut targets = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let start = s.prompt.len() - 1;
        let mut ts = Vec::new();
        for j in 0..s.response_len(roles) {
            let row = b * seq + start + j;
            let p_clean = softmax(clean.logits.row(row));
            let p_corrupt = softmax(corrupt.logits.row(row));
            if keep_position(metric, &p_clean, &p_corrupt, clean_is_steered) {
                ts.push(Target {
                    row,
                    y: argmax(&p_clean),
                    y_star: argmax(&p_corrupt),
                    weight: 1.0,
                    p_clean,
                    p_corrupt,
                });
            }
        }
        if normalize && !ts.is_empty() {
            let w = 1.0 / ts.len() as f64;
            ts.iter_mut().for_each(|t| t.weight = w);
        }
        targets.push(ts);
    }
    Ok(Prepared {
        tokens,
        batch: samples.len(),
        seq,
        clean_coefs,
        corrupt_coefs,
        clean,
        corrupt,
        targets,
    })
}

/// Kept/masked flags over the sample's teacher-forced response positions.
pub fn position_mask(
    model: &Model,
    vector: &SteeringVector,
    sample: &PatchSample,
    orientation: Orientation,
    metric: MetricSpec,
) -> Result<Vec<bool>> {
    let p = prepare(model, vector, &[sample], orientation.into(), metric, false)?;
    let start = sample.prompt.len() - 1;
    let mut mask = vec![false; sample.response_len(orientation.into())];
    for t in &p.targets[0] {
        mask[t.row - start] = true;
    }
    Ok(mask)
}

/// Edge, node and steering-dimension scores averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IEStore {
    pub steer_layer: usize,
    pub edges: BTreeMap<EdgeId, f64>,
    pub nodes: BTreeMap<NodeId, f64>,
    /// Per-dimension split of the steering-residual node score.
    pub dims: Vec<f64>,
    pub positions_evaluated: usize,
    pub samples: usize,
    /// Samples with every position masked.
    pub skipped: usize,
}

impl IEStore {
    pub fn zeros(model: &Model, steer_layer: usize) -> Result<Self> {
        let graph = enumerate_graph(&model.config, steer_layer)?;
        Ok(Self {
            steer_layer,
            edges: graph.steered_edges.iter().map(|e| (*e, 0.0)).collect(),
            nodes: graph
                .steered_nodes()
                .into_iter()
                .filter(|n| *n != NodeId::Logits)
                .map(|n| (n, 0.0))
                .collect(),
            dims: vec![0.0; model.config.d_model],
            positions_evaluated: 0,
            samples: 0,
            skipped: 0,
        })
    }

    fn scale(&mut self, k: f64) {
        self.edges.values_mut().for_each(|v| *v *= k);
        self.nodes.values_mut().for_each(|v| *v *= k);
        self.dims.iter_mut().for_each(|v| *v *= k);
    }

    /// Unweighted mean of several stores over the same graph; counts add.
    pub fn average(stores: &[IEStore]) -> Result<IEStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Contract("nothing to average".into()))?;
        let mut out = first.clone();
        for s in &stores[1..] {
            if s.steer_layer != out.steer_layer
                || s.edges.len() != out.edges.len()
                || s.dims.len() != out.dims.len()
            {
                return Err(Error::Contract("averaging stores over different graphs".into()));
            }
            for (k, v) in &s.edges {
                *out.edges
                    .get_mut(k)
                    .ok_or_else(|| Error::Contract(format!("edge {k} missing")))? += v;
            }
            for (k, v) in &s.nodes {
                *out.nodes
                    .get_mut(k)
                    .ok_or_else(|| Error::Contract(format!("node {k} missing")))? += v;
            }
            for (a, b) in out.dims.iter_mut().zip(&s.dims) {
                *a += b;
            }
            out.positions_evaluated += s.positions_evaluated;
            out.samples += s.samples;
            out.skipped += s.skipped;
        }
        out.scale(1.0 / stores.len() as f64);
        Ok(out)
    }

    pub fn steer_node_score(&self) -> f64 {
        self.nodes
            .get(&NodeId::SteerResid(self.steer_layer))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Σ over rows of `(a − b) · g`, restricted to rows `< rows`.
fn diff_dot(a: &Tensor, b: &Tensor, g: &Tensor) -> f64 {
    let mut acc = 0.0;
    for ((x, y), z) in a.data().iter().zip(b.data()).zip(g.data()) {
        acc += (x - y) * z;
    }
    acc
}

/// EAP-IG scores of every steered edge and node.
pub fn eap_ig_scores(
    model: &Model,
    vector: &SteeringVector,
    samples: &[PatchSample],
    orientation: Orientation,
    cfg: &PatchConfig,
) -> Result<IEStore> {
    if cfg.steps == 0 {
        return Err(Error::Contract("EAP-IG needs at least one step".into()));
    }
    let layer = vector.layer;
    let mut store = IEStore::zeros(model, layer)?;
    let edges: Vec<EdgeId> = store.edges.keys().copied().collect();
    let nodes: Vec<NodeId> = store.nodes.keys().copied().collect();
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let d = model.config.d_model;
    for chunk in refs.chunks(cfg.batch.max(1)) {
        let prep = prepare(model, vector, chunk, orientation.into(), cfg.metric, cfg.normalize)?;
        store.samples += prep.kept();
        store.skipped += chunk.len() - prep.kept();
        store.positions_evaluated += prep.positions();
        if prep.positions() == 0 {
            continue;
        }
        let (chan_grads, node_grads) = integrated_grads(model, vector, &prep, cfg)?;
        for e in &edges {
            let u = &prep.clean.node_outputs[&e.upstream];
            let u_star = &prep.corrupt.node_outputs[&e.upstream];
            let g = &chan_grads[&(e.downstream, e.channel)];
            *store.edges.get_mut(e).expect("edge listed") += diff_dot(u, u_star, g);
        }
        for n in &nodes {
            let u = &prep.clean.node_outputs[n];
            let u_star = &prep.corrupt.node_outputs[n];
            let g = &node_grads[n];
            *store.nodes.get_mut(n).expect("node listed") += diff_dot(u, u_star, g);
            if *n == NodeId::SteerResid(layer) {
                for r in 0..u.rows() {
                    let (a, b, gr) = (u.row(r), u_star.row(r), g.row(r));
                    for k in 0..d {
                        store.dims[k] += (a[k] - b[k]) * gr[k];
                    }
                }
            }
        }
    }
    if store.samples > 0 {
        store.scale(1.0 / store.samples as f64);
    }
    Ok(store)
}

type ChannelGrads = BTreeMap<(NodeId, Channel), Tensor>;
type NodeGrads = BTreeMap<NodeId, Tensor>;

/// Mean over the midpoint steps of `∂m/∂(channel input)` and
/// `∂m/∂(node output)`.
fn integrated_grads(
    model: &Model,
    vector: &SteeringVector,
    prep: &Prepared,
    cfg: &PatchConfig,
) -> Result<(ChannelGrads, NodeGrads)> {
    let layer = vector.layer;
    let t = cfg.steps;
    let v = model.config.vocab;
    let mut chan: ChannelGrads = BTreeMap::new();
    let mut node: NodeGrads = BTreeMap::new();
    let add = |acc: &mut Tensor, g: Option<&Tensor>| -> Result<()> {
        if let Some(g) = g {
            acc.add_assign(g)?;
        }
        Ok(())
    };
    for j in 1..=t {
        let frac = (j as f64 - 0.5) / t as f64;
        let coefs: Vec<f64> = prep
            .clean_coefs
            .iter()
            .zip(&prep.corrupt_coefs)
            .map(|(c, cs)| cs + frac * (c - cs))
            .collect();
        let mut tape = Tape::new();
        let pv = ParamVars::load(model, &mut tape, false)?;
        let s = tape.constant(vector.values.clone());
        let pass = Pass {
            steer: Some(SteerVar {
                layer,
                vector: s,
                coefs,
            }),
            watch: true,
            ..Pass::default()
        };
        let trace = model.run(&mut tape, &pv, &prep.tokens, prep.batch, &pass)?;
        let m = match cfg.metric {
            MetricSpec::LogitDiff => {
                let picks = prep
                    .targets
                    .iter()
                    .flatten()
                    .flat_map(|t| [(t.row * v + t.y, t.weight), (t.row * v + t.y_star, -t.weight)])
                    .collect();
                tape.pick_sum(trace.logits, picks)?
            }
            MetricSpec::DirKl { .. } => {
                let mut w = Tensor::zeros(&[prep.batch * prep.seq, v]);
                for t in prep.targets.iter().flatten() {
                    let row = &mut w.data_mut()[t.row * v..(t.row + 1) * v];
                    for ((x, a), b) in row.iter_mut().zip(&t.p_clean).zip(&t.p_corrupt) {
                        *x = t.weight * (a - b);
                    }
                }
                tape.log_softmax_dot(trace.logits, w)?
            }
        };
        tape.backward(m)?;
        for (k, &var) in &trace.channels {
            let shape = tape.value(var).shape().to_vec();
            add(chan.entry(*k).or_insert_with(|| Tensor::zeros(&shape)), tape.grad(var))?;
        }
        let mut watched = vec![(NodeId::Embed, trace.embed)];
        for l in layer..model.config.n_layers {
            watched.push((NodeId::SteerResid(l), trace.layer_inputs[l]));
            for (h, &var) in trace.heads[l].iter().enumerate() {
                watched.push((NodeId::AttnHead(l, h), var));
            }
            watched.push((NodeId::Mlp(l), trace.mlps[l]));
        }
        for (n, var) in watched {
            let shape = tape.value(var).shape().to_vec();
            add(node.entry(n).or_insert_with(|| Tensor::zeros(&shape)), tape.grad(var))?;
        }
    }
    let k = 1.0 / t as f64;
    for g in chan.values_mut().chain(node.values_mut()) {
        *g = g.scale(k);
    }
    Ok((chan, node))
}

/// Exact indirect effect of patching each listed edge alone: the
/// corrupt run with that edge's contribution replaced by the clean one,
/// minus the corrupt run, averaged over samples.
pub fn direct_patch_ie(
    model: &Model,
    vector: &SteeringVector,
    samples: &[PatchSample],
    orientation: Orientation,
    edges: &[EdgeId],
    cfg: &PatchConfig,
) -> Result<BTreeMap<EdgeId, f64>> {
    let mut out: BTreeMap<EdgeId, f64> = edges.iter().map(|e| (*e, 0.0)).collect();
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let mut kept = 0;
    for chunk in refs.chunks(cfg.batch.max(1)) {
        let prep = prepare(model, vector, chunk, orientation.into(), cfg.metric, cfg.normalize)?;
        kept += prep.kept();
        if prep.positions() == 0 {
            continue;
        }
        let base: f64 = (0..prep.batch)
            .map(|b| prep.metric_of(&prep.corrupt.logits, cfg.metric, b))
            .sum();
        for e in edges {
            let set = BTreeSet::from([*e]);
            let logits = patched_logits(
                model,
                vector,
                &prep.tokens,
                &prep.corrupt_coefs,
                EdgePatch {
                    edges: &set,
                    values: &prep.clean.node_outputs,
                },
            )?;
            let m: f64 = (0..prep.batch)
                .map(|b| prep.metric_of(&logits, cfg.metric, b))
                .sum();
            *out.get_mut(e).expect("edge listed") += m - base;
        }
    }
    if kept > 0 {
        out.values_mut().for_each(|v| *v /= kept as f64);
    }
    Ok(out)
}

/// Metric of the corrupt run with every listed edge patched to clean,
/// and of the clean run, both summed over samples.
pub fn patch_all_metric(
    model: &Model,
    vector: &SteeringVector,
    samples: &[PatchSample],
    orientation: Orientation,
    edges: &BTreeSet<EdgeId>,
    cfg: &PatchConfig,
) -> Result<(f64, f64)> {
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let (mut patched, mut clean) = (0.0, 0.0);
    for chunk in refs.chunks(cfg.batch.max(1)) {
        let prep = prepare(model, vector, chunk, orientation.into(), cfg.metric, cfg.normalize)?;
        let logits = patched_logits(
            model,
            vector,
            &prep.tokens,
            &prep.corrupt_coefs,
            EdgePatch {
                edges,
                values: &prep.clean.node_outputs,
            },
        )?;
        for b in 0..prep.batch {
            patched += prep.metric_of(&logits, cfg.metric, b);
            clean += prep.metric_of(&prep.clean.logits, cfg.metric, b);
        }
    }
    Ok((patched, clean))
}

/// Scores for all four (class, orientation) datasets and their mean.
pub fn four_way_scores(
    model: &Model,
    vector: &SteeringVector,
    samples: &[PatchSample],
    cfg: &PatchConfig,
) -> Result<(Vec<(Label, Orientation, IEStore)>, IEStore)> {
    let mut parts = Vec::new();
    for label in Label::BOTH {
        let class: Vec<PatchSample> = samples.iter().filter(|s| s.label == label).cloned().collect();
        for o in Orientation::BOTH {
            let store = eap_ig_scores(model, vector, &class, o, cfg)?;
            parts.push((label, o, store));
        }
    }
    let stores: Vec<IEStore> = parts
        .iter()
        .filter(|p| p.2.samples > 0)
        .map(|p| p.2.clone())
        .collect();
    let mean = if stores.is_empty() {
        IEStore::zeros(model, vector.layer)?
    } else {
        IEStore::average(&stores)?
    };
    Ok((parts, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_diff_examples() {
        assert_eq!(metric_logit_diff(&[2.0, 0.5], 0, 1), 1.5);
        assert_eq!(metric_logit_diff(&[2.0, 0.5], 1, 1), 0.0);
    }

    #[test]
    fn dirkl_examples() {
        let a = [0.7, 0.2, 0.1];
        let b = [0.2, 0.5, 0.3];
        let p = [0.3, 0.3, 0.4];
        assert!((metric_dirkl(&a, &b, &b) - kl_divergence(&a, &b)).abs() < 1e-15);
        assert!(metric_dirkl(&a, &b, &b) >= 0.0);
        assert!((metric_dirkl(&a, &b, &a) + kl_divergence(&b, &a)).abs() < 1e-15);
        assert_eq!(metric_dirkl(&a, &a, &p), 0.0);
    }

    #[test]
    fn masking_rules() {
        let p = [0.6, 0.4];
        let q = [0.4, 0.6];
        assert!(!keep_position(MetricSpec::LogitDiff, &p, &p, true));
        assert!(keep_position(MetricSpec::LogitDiff, &p, &q, true));
        let zero = MetricSpec::DirKl { threshold: 0.0 };
        assert!(!keep_position(zero, &p, &p, true));
        assert!(keep_position(zero, &p, &[0.59, 0.41], false));
        assert!(!keep_position(MetricSpec::DirKl { threshold: 5.0 }, &p, &q, true));
    }
}
