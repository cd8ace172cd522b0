//! Circuits: greedy construction from edge scores with reachability
//! pruning, faithfulness, overlap, interchange and edge statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{patched_logits, prepare, MetricSpec, PatchSample, Prepared, Roles};
use crate::error::{Error, Result};
use crate::model::{enumerate_graph, Channel, EdgeId, EdgePatch, Model, NodeId};
use crate::rng::substream;
use crate::steering::SteeringVector;
use crate::task::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub edges: BTreeSet<EdgeId>,
    pub requested: usize,
    pub steer_layer: usize,
    /// Where the ranking came from, e.g. `dim/logit-diff`.
    pub source: String,
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    /// By `|score|`.
    #[default]
    Absolute,
    /// By signed score, largest first.
    Signed,
}

/// Edges in descending importance; ties broken by the edge's text form.
pub fn rank_edges(scores: &BTreeMap<EdgeId, f64>, ranking: Ranking) -> Vec<EdgeId> {
    let mut v: Vec<(EdgeId, f64, String)> = scores
        .iter()
        .map(|(e, s)| {
            let key = match ranking {
                Ranking::Absolute => s.abs(),
                Ranking::Signed => *s,
            };
            (*e, key, e.to_string())
        })
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.2.cmp(&b.2)));
    v.into_iter().map(|x| x.0).collect()
}

/// Edges of `edges` lying on some path from `SteerResid(layer)` to
/// `Logits` that uses only edges of `edges`.
pub fn prune(edges: &BTreeSet<EdgeId>, steer_layer: usize) -> BTreeSet<EdgeId> {
    let source = NodeId::SteerResid(steer_layer);
    // Edges always point forward in residual order, so one pass in stage
    // order settles reachability each way.
    let mut sorted: Vec<&EdgeId> = edges.iter().collect();
    sorted.sort_by_key(|e| (e.upstream.stage(), e.downstream.stage()));
    let mut reach: BTreeSet<NodeId> = BTreeSet::from([source]);
    for e in &sorted {
        if reach.contains(&e.upstream) {
            reach.insert(e.downstream);
        }
    }
    let mut coreach: BTreeSet<NodeId> = BTreeSet::from([NodeId::Logits]);
    sorted.sort_by_key(|e| std::cmp::Reverse((e.downstream.stage(), e.upstream.stage())));
    for e in &sorted {
        if coreach.contains(&e.downstream) {
            coreach.insert(e.upstream);
        }
    }
    edges
        .iter()
        .filter(|e| reach.contains(&e.upstream) && coreach.contains(&e.downstream))
        .copied()
        .collect()
}

/// Whether every edge lies on a source-to-logits path inside the set.
pub fn is_closed(edges: &BTreeSet<EdgeId>, steer_layer: usize) -> bool {
    prune(edges, steer_layer).len() == edges.len()
}

/// Greedy top-k construction. Edges are taken in rank order; after each
/// addition the pool is pruned, and an edge whose addition would push the
/// pruned pool past `n` is passed over. Stops when the pruned pool has
/// exactly `n` edges.
pub fn build_circuit_from_ranking(
    ranking: &[EdgeId],
    n: usize,
    steer_layer: usize,
) -> Result<BTreeSet<EdgeId>> {
    if n > ranking.len() {
        return Err(Error::Construction {
            requested: n,
            attainable: ranking.len(),
        });
    }
    let mut pool: BTreeSet<EdgeId> = BTreeSet::new();
    let mut current: BTreeSet<EdgeId> = BTreeSet::new();
    if n == 0 {
        return Ok(current);
    }
    for e in ranking {
        pool.insert(*e);
        let pruned = prune(&pool, steer_layer);
        if pruned.len() > n {
            pool.remove(e);
            continue;
        }
        current = pruned;
        if current.len() == n {
            return Ok(current);
        }
    }
    Err(Error::Construction {
        requested: n,
        attainable: current.len(),
    })
}

pub fn build_circuit(
    scores: &BTreeMap<EdgeId, f64>,
    n: usize,
    steer_layer: usize,
    ranking: Ranking,
    source: &str,
) -> Result<Circuit> {
    let order = rank_edges(scores, ranking);
    Ok(Circuit {
        edges: build_circuit_from_ranking(&order, n, steer_layer)?,
        requested: n,
        steer_layer,
        source: source.to_string(),
    })
}

/// Circuit of size `n` grown from a uniformly random edge ranking.
pub fn random_circuit(
    all_edges: &[EdgeId],
    n: usize,
    steer_layer: usize,
    seed: u64,
) -> Result<Circuit> {
    let mut rng = substream(seed, "random-circuit");
    let scores: BTreeMap<EdgeId, f64> = all_edges.iter().map(|e| (*e, rng.random::<f64>())).collect();
    build_circuit(&scores, n, steer_layer, Ranking::Signed, &format!("random/{seed}"))
}

/// `|C1 ∩ C2| / min(|C1|, |C2|)`.
pub fn overlap(a: &Circuit, b: &Circuit) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("overlap of an empty circuit".into()));
    }
    let inter = a.edges.intersection(&b.edges).count();
    Ok(inter as f64 / a.len().min(b.len()) as f64)
}

/// Pre-computed runs for evaluating many circuits on one sample set: the
/// steered response is teacher-forced, the steered run is clean and the
/// base run supplies the replacement contributions.
pub struct FaithfulnessSet {
    pub vector: SteeringVector,
    pub metric: MetricSpec,
    steered_edges: BTreeSet<EdgeId>,
    preps: Vec<Prepared>,
    /// Per chunk, per sample, per position: (m(M), m(∅)).
    endpoints: Vec<Vec<Vec<(f64, f64)>>>,
}

impl FaithfulnessSet {
    pub fn new(
        model: &Model,
        vector: &SteeringVector,
        samples: &[PatchSample],
        metric: MetricSpec,
        batch: usize,
    ) -> Result<Self> {
        let graph = enumerate_graph(&model.config, vector.layer)?;
        let steered_edges: BTreeSet<EdgeId> = graph.steered_edges.iter().copied().collect();
        let roles = Roles {
            force_steered: true,
            clean_steered: true,
        };
        let refs: Vec<&PatchSample> = samples.iter().collect();
        let mut preps = Vec::new();
        let mut endpoints = Vec::new();
        for chunk in refs.chunks(batch.max(1)) {
            let prep = prepare(model, vector, chunk, roles, metric, false)?;
            let empty = patched_logits(
                model,
                vector,
                &prep.tokens,
                &prep.clean_coefs,
                EdgePatch {
                    edges: &steered_edges,
                    values: &prep.corrupt.node_outputs,
                },
            )?;
            let ends = (0..prep.batch)
                .map(|b| {
                    let full = prep.position_metrics(&prep.clean.logits, metric, b);
                    let none = prep.position_metrics(&empty, metric, b);
                    full.into_iter().zip(none).collect()
                })
                .collect();
            endpoints.push(ends);
            preps.push(prep);
        }
        Ok(Self {
            vector: vector.clone(),
            metric,
            steered_edges,
            preps,
            endpoints,
        })
    }

    pub fn positions(&self) -> usize {
        self.preps.iter().map(Prepared::positions).sum()
    }

    pub fn samples(&self) -> usize {
        self.preps.iter().map(Prepared::kept).sum()
    }

    pub fn steered_edges(&self) -> &BTreeSet<EdgeId> {
        &self.steered_edges
    }

    /// Faithfulness of the circuit: steered run with every steered edge
    /// outside it carrying its base contribution. Each position is
    /// normalised by its own `m(M) − m(∅)`, positions are averaged within
    /// a sample, then samples are averaged. `None` when every position is
    /// masked.
    pub fn evaluate(&self, model: &Model, circuit: &BTreeSet<EdgeId>) -> Result<Option<f64>> {
        if let Some(e) = circuit.iter().find(|e| !self.steered_edges.contains(e)) {
            return Err(Error::Contract(format!("edge {e} is not a steered edge")));
        }
        let outside: BTreeSet<EdgeId> = self.steered_edges.difference(circuit).copied().collect();
        let (mut total, mut count) = (0.0, 0usize);
        for (prep, ends) in self.preps.iter().zip(&self.endpoints) {
            if prep.positions() == 0 {
                continue;
            }
            let logits = patched_logits(
                model,
                &self.vector,
                &prep.tokens,
                &prep.clean_coefs,
                EdgePatch {
                    edges: &outside,
                    values: &prep.corrupt.node_outputs,
                },
            )?;
            for (b, end) in ends.iter().enumerate() {
                if end.is_empty() {
                    continue;
                }
                let mc = prep.position_metrics(&logits, self.metric, b);
                let per: f64 = mc
                    .iter()
                    .zip(end)
                    .map(|(c, (full, none))| (c - none) / (full - none))
                    .sum::<f64>()
                    / end.len() as f64;
                total += per;
                count += 1;
            }
        }
        Ok((count > 0).then(|| total / count as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub fraction: f64,
    pub faithfulness: Option<f64>,
}

/// Circuit sizes for fractions of the steered edge count, ascending and
/// deduplicated.
pub fn size_grid(n_edges: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n_edges as f64).round() as usize).clamp(1, n_edges))
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

pub const DEFAULT_FRACTIONS: [f64; 14] = [
    0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 0.85, 1.0,
];

/// Smallest grid size reaching `threshold`, and the whole curve. Sizes
/// whose construction is infeasible are recorded with no value.
pub fn min_faithful_size(
    model: &Model,
    scores: &BTreeMap<EdgeId, f64>,
    set: &FaithfulnessSet,
    threshold: f64,
    sizes: &[usize],
    ranking: Ranking,
) -> Result<(Option<usize>, Vec<CurvePoint>)> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("size grid must be ascending".into()));
    }
    let order = rank_edges(scores, ranking);
    let total = set.steered_edges().len();
    let mut best = None;
    let mut curve = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let f = match build_circuit_from_ranking(&order, n, set.vector.layer) {
            Ok(c) => set.evaluate(model, &c)?,
            Err(Error::Construction { .. }) => None,
            Err(e) => return Err(e),
        };
        if best.is_none() && f.is_some_and(|f| f >= threshold) {
            best = Some(n);
        }
        curve.push(CurvePoint {
            size: n,
            fraction: n as f64 / total as f64,
            faithfulness: f,
        });
    }
    Ok((best, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub label: Label,
    pub size: usize,
    pub faithfulness: Option<f64>,
    pub complement: Option<f64>,
    pub positions: usize,
}

/// Faithfulness of `circuit` and of its complement within the steered
/// edges.
pub fn faithfulness_report(
    model: &Model,
    circuit: &Circuit,
    set: &FaithfulnessSet,
    label: Label,
) -> Result<FaithfulnessReport> {
    let complement: BTreeSet<EdgeId> = set
        .steered_edges()
        .difference(&circuit.edges)
        .copied()
        .collect();
    Ok(FaithfulnessReport {
        label,
        size: circuit.len(),
        faithfulness: set.evaluate(model, &circuit.edges)?,
        complement: set.evaluate(model, &complement)?,
        positions: set.positions(),
    })
}

/// Faithfulness of B's steering through A's circuit on B's samples.
pub fn interchange_faithfulness(
    model: &Model,
    circuit_a: &Circuit,
    set_b: &FaithfulnessSet,
) -> Result<Option<f64>> {
    if circuit_a.steer_layer != set_b.vector.layer {
        return Err(Error::Contract(format!(
            "circuit at layer {} with a vector at layer {}",
            circuit_a.steer_layer, set_b.vector.layer
        )));
    }
    if circuit_a.is_empty() {
        return Ok(Some(0.0));
    }
    set_b.evaluate(model, &circuit_a.edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpstreamKind {
    AttnHead,
    Mlp,
    Resid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownstreamKind {
    Q,
    K,
    V,
    MlpIn,
    LogitsIn,
}

pub fn upstream_kind(n: NodeId) -> UpstreamKind {
    match n {
        NodeId::AttnHead(..) => UpstreamKind::AttnHead,
        NodeId::Mlp(_) => UpstreamKind::Mlp,
        NodeId::SteerResid(_) | NodeId::Embed | NodeId::Logits => UpstreamKind::Resid,
    }
}

pub fn downstream_kind(e: &EdgeId) -> DownstreamKind {
    match (e.downstream, e.channel) {
        (NodeId::Logits, _) => DownstreamKind::LogitsIn,
        (NodeId::Mlp(_), _) => DownstreamKind::MlpIn,
        (_, Channel::Q) => DownstreamKind::Q,
        (_, Channel::K) => DownstreamKind::K,
        _ => DownstreamKind::V,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistribution {
    pub total: usize,
    pub upstream: BTreeMap<UpstreamKind, usize>,
    pub downstream: BTreeMap<DownstreamKind, usize>,
}

impl EdgeDistribution {
    pub fn upstream_pct(&self, k: UpstreamKind) -> f64 {
        pct(self.upstream.get(&k).copied().unwrap_or(0), self.total)
    }

    pub fn downstream_pct(&self, k: DownstreamKind) -> f64 {
        pct(self.downstream.get(&k).copied().unwrap_or(0), self.total)
    }
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

/// Edge counts by upstream and downstream kind, optionally restricted to
/// the `top_k` circuit edges by `|score|`.
pub fn edge_distribution(
    circuit: &Circuit,
    scores: &BTreeMap<EdgeId, f64>,
    top_k: Option<usize>,
) -> Result<EdgeDistribution> {
    let edges: Vec<EdgeId> = match top_k {
        None => circuit.edges.iter().copied().collect(),
        Some(k) => {
            if k > circuit.len() {
                return Err(Error::Contract(format!(
                    "top {k} of a {}-edge circuit",
                    circuit.len()
                )));
            }
            let sub: BTreeMap<EdgeId, f64> = circuit
                .edges
                .iter()
                .map(|e| (*e, scores.get(e).copied().unwrap_or(0.0)))
                .collect();
            rank_edges(&sub, Ranking::Absolute).into_iter().take(k).collect()
        }
    };
    let mut d = EdgeDistribution {
        total: edges.len(),
        ..EdgeDistribution::default()
    };
    for e in &edges {
        *d.upstream.entry(upstream_kind(e.upstream)).or_default() += 1;
        *d.downstream.entry(downstream_kind(e)).or_default() += 1;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(l: usize, h: usize) -> ModelConfig {
        ModelConfig {
            n_layers: l,
            n_heads: h,
            d_model: 4 * h,
            d_head: 4,
            ..ModelConfig::default()
        }
    }

    fn e(u: NodeId, v: NodeId, c: Channel) -> EdgeId {
        EdgeId::new(u, v, c)
    }

    #[test]
    fn dangling_edge_is_passed_over() {
        // ranks: r->logits, r->m0, a0.h0->m0 (dangles: a0.h0 unreachable), m0->logits
        let r = NodeId::SteerResid(0);
        let ranking = vec![
            e(r, NodeId::Logits, Channel::In),
            e(r, NodeId::Mlp(0), Channel::In),
            e(NodeId::AttnHead(0, 0), NodeId::Mlp(0), Channel::In),
            e(NodeId::Mlp(0), NodeId::Logits, Channel::In),
        ];
        let c = build_circuit_from_ranking(&ranking, 3, 0).unwrap();
        let want: BTreeSet<EdgeId> = [ranking[0], ranking[1], ranking[3]].into();
        assert_eq!(c, want);
        assert!(is_closed(&c, 0));
        assert!(build_circuit_from_ranking(&ranking, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn full_and_infeasible_sizes() {
        let g = enumerate_graph(&cfg(2, 2), 1).unwrap();
        let scores: BTreeMap<EdgeId, f64> = g
            .steered_edges
            .iter()
            .enumerate()
            .map(|(i, e)| (*e, i as f64))
            .collect();
        let n = g.steered_edges.len();
        let c = build_circuit(&scores, n, 1, Ranking::Absolute, "t").unwrap();
        assert_eq!(c.len(), n);
        assert!(matches!(
            build_circuit(&scores, n + 1, 1, Ranking::Absolute, "t"),
            Err(Error::Construction { .. })
        ));
    }

    #[test]
    fn overlap_examples() {
        let r = NodeId::SteerResid(0);
        let mk = |hs: &[usize]| Circuit {
            edges: hs
                .iter()
                .map(|&h| e(r, NodeId::AttnHead(0, h), Channel::V))
                .collect(),
            requested: hs.len(),
            steer_layer: 0,
            source: String::new(),
        };
        let (a, b) = (mk(&[0, 1, 2]), mk(&[1, 2, 3]));
        assert!((overlap(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &mk(&[5])).unwrap(), 0.0);
        assert!(overlap(&a, &mk(&[])).is_err());
    }

    #[test]
    fn distribution_hand_tally() {
        let r = NodeId::SteerResid(0);
        let c = Circuit {
            edges: [
                e(r, NodeId::AttnHead(0, 0), Channel::Q),
                e(r, NodeId::AttnHead(0, 0), Channel::V),
                e(NodeId::AttnHead(0, 0), NodeId::Mlp(0), Channel::In),
                e(NodeId::Mlp(0), NodeId::Logits, Channel::In),
            ]
            .into(),
            requested: 4,
            steer_layer: 0,
            source: String::new(),
        };
        let d = edge_distribution(&c, &BTreeMap::new(), None).unwrap();
        assert_eq!(d.upstream[&UpstreamKind::Resid], 2);
        assert_eq!(d.upstream[&UpstreamKind::AttnHead], 1);
        assert_eq!(d.upstream[&UpstreamKind::Mlp], 1);
        assert_eq!(d.downstream[&DownstreamKind::Q], 1);
        assert_eq!(d.downstream[&DownstreamKind::LogitsIn], 1);
        let up: f64 = [UpstreamKind::AttnHead, UpstreamKind::Mlp, UpstreamKind::Resid]
            .iter()
            .map(|k| d.upstream_pct(*k))
            .sum();
        assert!((up - 100.0).abs() < 1e-12);

        let one = Circuit {
            edges: [e(r, NodeId::Logits, Channel::In)].into(),
            ..c.clone()
        };
        let d = edge_distribution(&one, &BTreeMap::new(), None).unwrap();
        assert_eq!(d.upstream_pct(UpstreamKind::Resid), 100.0);
        assert_eq!(d.downstream_pct(DownstreamKind::LogitsIn), 100.0);
    }

    #[test]
    fn size_grid_is_sorted_and_bounded() {
        let g = size_grid(479, &DEFAULT_FRACTIONS);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*g.last().unwrap(), 479);
        assert!(g[0] >= 1);
    }
}
