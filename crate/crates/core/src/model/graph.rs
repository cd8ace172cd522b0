//! Node/edge view of the transformer used for patching and circuits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// A component whose output is written into the residual stream, or the
/// logits head that reads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Embed,
    /// The whole residual stream entering layer `l`, steering included.
    /// Stands in for every source below `l`.
    SteerResid(usize),
    AttnHead(usize, usize),
    Mlp(usize),
    Logits,
}

/// Input channel of a downstream node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Q,
    K,
    V,
    In,
}

impl Channel {
    pub const QKV: [Channel; 3] = [Channel::Q, Channel::K, Channel::V];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId {
    pub upstream: NodeId,
    pub downstream: NodeId,
    pub channel: Channel,
}

impl EdgeId {
    pub fn new(upstream: NodeId, downstream: NodeId, channel: Channel) -> Self {
        Self {
            upstream,
            downstream,
            channel,
        }
    }
}

impl NodeId {
    /// Position in residual order. Heads of one layer share a stage: none
    /// of them reads another's output.
    pub fn stage(self) -> usize {
        match self {
            NodeId::Embed => 0,
            NodeId::SteerResid(l) => 3 * l + 1,
            NodeId::AttnHead(l, _) => 3 * l + 2,
            NodeId::Mlp(l) => 3 * l + 3,
            NodeId::Logits => usize::MAX,
        }
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            NodeId::SteerResid(l) | NodeId::AttnHead(l, _) | NodeId::Mlp(l) => Some(l),
            NodeId::Embed | NodeId::Logits => None,
        }
    }

    /// Input channels this node reads through.
    pub fn channels(self) -> &'static [Channel] {
        match self {
            NodeId::AttnHead(..) => &Channel::QKV,
            NodeId::Mlp(_) | NodeId::Logits => &[Channel::In],
            NodeId::Embed | NodeId::SteerResid(_) => &[],
        }
    }

    fn exists_in(self, config: &ModelConfig) -> bool {
        match self {
            NodeId::Embed | NodeId::Logits => true,
            NodeId::SteerResid(l) | NodeId::Mlp(l) => l < config.n_layers,
            NodeId::AttnHead(l, h) => l < config.n_layers && h < config.n_heads,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Embed => write!(f, "embed"),
            NodeId::SteerResid(l) => write!(f, "resid{l}"),
            NodeId::AttnHead(l, h) => write!(f, "a{l}.h{h}"),
            NodeId::Mlp(l) => write!(f, "m{l}"),
            NodeId::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("unrecognised node '{s}'"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        if s == "embed" {
            Ok(NodeId::Embed)
        } else if s == "logits" {
            Ok(NodeId::Logits)
        } else if let Some(rest) = s.strip_prefix("resid") {
            Ok(NodeId::SteerResid(num(rest)?))
        } else if let Some(rest) = s.strip_prefix('a') {
            let (l, h) = rest.split_once(".h").ok_or_else(bad)?;
            Ok(NodeId::AttnHead(num(l)?, num(h)?))
        } else if let Some(rest) = s.strip_prefix('m') {
            Ok(NodeId::Mlp(num(rest)?))
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Q => "q",
            Channel::K => "k",
            Channel::V => "v",
            Channel::In => "in",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Channel::Q),
            "k" => Ok(Channel::K),
            "v" => Ok(Channel::V),
            "in" => Ok(Channel::In),
            _ => Err(Error::Input(format!("unrecognised channel '{s}'"))),
        }
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}<{}>", self.upstream, self.downstream, self.channel)
    }
}

impl FromStr for EdgeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("unrecognised edge '{s}'"));
        let (up, rest) = s.split_once("->").ok_or_else(bad)?;
        let (down, ch) = rest
            .strip_suffix('>')
            .and_then(|r| r.split_once('<'))
            .ok_or_else(bad)?;
        Ok(EdgeId::new(up.parse()?, down.parse()?, ch.parse()?))
    }
}

/// Whether `edge` can be realised by the model described by `config`.
pub fn is_valid_edge(config: &ModelConfig, edge: &EdgeId) -> bool {
    edge.upstream.exists_in(config)
        && edge.downstream.exists_in(config)
        && edge.upstream.stage() < edge.downstream.stage()
        && edge.downstream.channels().contains(&edge.channel)
        && !matches!(edge.upstream, NodeId::Logits)
}

/// Enumerated computational graph for one steering layer.
#[derive(Clone, Debug)]
pub struct Graph {
    pub steer_layer: usize,
    /// Embed, every head and MLP, and Logits, in residual order.
    pub nodes: Vec<NodeId>,
    /// Every edge of the unrestricted graph rooted at Embed.
    pub edges: Vec<EdgeId>,
    /// Edges into layers at or above the steering layer, with all sources
    /// below it merged into `SteerResid(steer_layer)`.
    pub steered_edges: Vec<EdgeId>,
}

impl Graph {
    pub fn steered_nodes(&self) -> Vec<NodeId> {
        let mut nodes = vec![NodeId::SteerResid(self.steer_layer)];
        nodes.extend(
            self.nodes
                .iter()
                .copied()
                .filter(|n| matches!(n.layer(), Some(l) if l >= self.steer_layer)),
        );
        nodes.push(NodeId::Logits);
        nodes
    }
}

/// Writers of the residual stream from layer `from` on, in residual order.
fn writers(config: &ModelConfig, from: usize) -> Vec<NodeId> {
    let mut out = Vec::new();
    for l in from..config.n_layers {
        out.extend((0..config.n_heads).map(|h| NodeId::AttnHead(l, h)));
        out.push(NodeId::Mlp(l));
    }
    out
}

/// Edges from `root` and the writers at layers `from..` into every reader
/// at layers `from..` plus Logits.
fn edges_from(config: &ModelConfig, root: NodeId, from: usize) -> Vec<EdgeId> {
    let sources: Vec<NodeId> = std::iter::once(root)
        .chain(writers(config, from))
        .collect();
    let mut readers = writers(config, from);
    readers.push(NodeId::Logits);
    let mut edges = Vec::new();
    for v in readers {
        for &c in v.channels() {
            for &u in sources.iter().filter(|u| u.stage() < v.stage()) {
                edges.push(EdgeId::new(u, v, c));
            }
        }
    }
    edges
}

pub fn enumerate_graph(config: &ModelConfig, steer_layer: usize) -> Result<Graph> {
    config.validate()?;
    if steer_layer >= config.n_layers {
        return Err(Error::Contract(format!(
            "steering layer {steer_layer} outside 0..{}",
            config.n_layers
        )));
    }
    let mut nodes = vec![NodeId::Embed];
    nodes.extend(writers(config, 0));
    nodes.push(NodeId::Logits);
    Ok(Graph {
        steer_layer,
        nodes,
        edges: edges_from(config, NodeId::Embed, 0),
        steered_edges: edges_from(config, NodeId::SteerResid(steer_layer), steer_layer),
    })
}

/// Edge count of the unrestricted graph from its layer-by-layer structure:
/// a node at layer `l` sees Embed, the `l·(H+1)` writers below it, and for
/// the MLP also the `H` heads of its own layer.
pub fn edge_count_closed_form(n_layers: usize, n_heads: usize) -> usize {
    let below = |l: usize| 1 + l * (n_heads + 1);
    let layers: usize = (0..n_layers)
        .map(|l| 3 * n_heads * below(l) + below(l) + n_heads)
        .sum();
    layers + below(n_layers)
}
