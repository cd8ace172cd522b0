use std::collections::{BTreeMap, BTreeSet};

use super::graph::{is_valid_edge, Channel, EdgeId, NodeId};
use super::{Arch, Model, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Activation addition `h ← h + α·s` on the residual stream entering
/// `layer`, at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct Steering {
    pub layer: usize,
    pub vector: Tensor,
    pub alpha: f64,
}

/// Replacement applied to layers `from_layer..` of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleFreeze {
    pub from_layer: usize,
    pub kind: FreezeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FreezeKind {
    /// Attention probabilities per layer, `[batch, heads, seq, seq]` flat.
    AttentionProbs(Vec<Vec<f64>>),
    /// Post-`W_V` value tensors per layer, `[batch·seq, H·d_head]`.
    Values(Vec<Tensor>),
    /// Subtract `c·(u ⊙ γ)` from the normalised value-projection input,
    /// `c` being that row's RMS scale; `u` is usually `α·s`.
    ValueInputSubtract(Tensor),
    /// The same subtraction on the normalised MLP input.
    MlpInputSubtract(Tensor),
}

/// Everything a forward pass can be asked to change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Interventions {
    pub steering: Option<Steering>,
    /// Contribution of `edge.upstream` as seen by `edge.downstream`'s
    /// channel, replaced by the given `[batch·seq, d]` tensor.
    pub edge_substitutions: BTreeMap<EdgeId, Tensor>,
    pub freeze: Option<ModuleFreeze>,
    /// Project this direction out of every component output.
    pub directional_ablation: Option<Tensor>,
}

impl Interventions {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn steer(layer: usize, vector: Tensor, alpha: f64) -> Self {
        Self {
            steering: Some(Steering {
                layer,
                vector,
                alpha,
            }),
            ..Self::default()
        }
    }
}

/// Model parameters placed on a tape.
pub struct ParamVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    ln_final: Var,
    unembed: Var,
    trainable: Vec<Var>,
}

struct LayerVars {
    ln_attn: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln_mlp: Var,
    w_in: Var,
    w_out: Var,
}

impl ParamVars {
    pub fn load(model: &Model, tape: &mut Tape, trainable: bool) -> Result<Self> {
        let leaves: Vec<Var> = model
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Self::from_leaves(model, tape, &leaves)
    }

    /// Assemble from variables already on the tape, given in
    /// [`Model::named_tensors`] order.
    pub fn from_leaves(model: &Model, tape: &mut Tape, leaves: &[Var]) -> Result<Self> {
        let expected = model.named_tensors().len();
        if leaves.len() != expected {
            return Err(Error::Contract(format!(
                "{} parameter variables for {expected} tensors",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..model.layers.len())
            .map(|_| LayerVars {
                ln_attn: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln_mlp: next(),
                w_in: next(),
                w_out: next(),
            })
            .collect();
        let ln_final = next();
        let unembed = match model.unembed {
            Some(_) => next(),
            None => tape.transpose(tok_emb)?,
        };
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            ln_final,
            unembed,
            trainable: leaves.to_vec(),
        })
    }

    /// Leaf variables in [`Model::named_tensors`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.trainable
    }
}

/// Steering whose direction lives on the tape, with one coefficient per
/// sequence in the batch.
pub struct SteerVar {
    pub layer: usize,
    pub vector: Var,
    pub coefs: Vec<f64>,
}

/// Substitute every edge in `edges` with its upstream node's output from
/// another run, looked up in `values` (node id to `[batch·seq, d]`).
#[derive(Clone, Copy)]
pub struct EdgePatch<'a> {
    pub edges: &'a BTreeSet<EdgeId>,
    pub values: &'a BTreeMap<NodeId, Tensor>,
}

/// Low-level description of one forward pass on a tape.
#[derive(Default)]
pub struct Pass<'a> {
    pub steer: Option<SteerVar>,
    pub substitutions: Option<&'a BTreeMap<EdgeId, Tensor>>,
    pub patch: Option<EdgePatch<'a>>,
    pub freeze: Option<&'a ModuleFreeze>,
    pub ablate: Option<&'a Tensor>,
    /// Materialise each head output and each channel input separately.
    pub graph: bool,
    /// Make node outputs and channel inputs gradient targets (implies
    /// `graph`).
    pub watch: bool,
}

/// Tape variables produced by one forward pass.
pub struct Trace {
    pub batch: usize,
    pub seq: usize,
    pub logits: Var,
    pub embed: Var,
    /// Residual entering each layer, after any steering at that layer.
    pub layer_inputs: Vec<Var>,
    /// Per-head outputs; empty unless the pass was in graph mode.
    pub heads: Vec<Vec<Var>>,
    pub mlps: Vec<Var>,
    /// Concatenated per-head attention outputs before `W_O`.
    pub attn_mix: Vec<Var>,
    pub values: Vec<Var>,
    pub channels: BTreeMap<(NodeId, Channel), Var>,
    pub final_resid: Var,
}

impl Trace {
    pub fn node(&self, node: NodeId) -> Option<Var> {
        match node {
            NodeId::Embed => Some(self.embed),
            NodeId::SteerResid(l) => self.layer_inputs.get(l).copied(),
            NodeId::AttnHead(l, h) => self.heads.get(l).and_then(|hs| hs.get(h)).copied(),
            NodeId::Mlp(l) => self.mlps.get(l).copied(),
            NodeId::Logits => Some(self.logits),
        }
    }
}

/// Values recorded by [`Model::forward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    pub seq: usize,
    pub logits: Tensor,
    pub node_outputs: BTreeMap<NodeId, Tensor>,
    pub channel_inputs: BTreeMap<(NodeId, Channel), Tensor>,
    /// Per layer `[batch, heads, seq, seq]`.
    pub attn_probs: Vec<Vec<f64>>,
    /// Per layer post-`W_V` values `[batch·seq, H·d_head]`.
    pub values: Vec<Tensor>,
    /// Per layer, per row `1/sqrt(mean(x²)+eps)` of the residual entering
    /// the layer (the diagonal of `D_c`).
    pub norm_scales: Vec<Vec<f64>>,
    pub final_resid: Tensor,
}

impl ForwardCache {
    /// Output of the edge's upstream node: its contribution to the
    /// downstream channel input.
    pub fn edge_activation(&self, edge: &EdgeId) -> Result<&Tensor> {
        self.node_outputs
            .get(&edge.upstream)
            .ok_or_else(|| Error::Contract(format!("edge {edge} absent from cache")))
    }
}

struct State<'p> {
    trace: Trace,
    subs: BTreeMap<(NodeId, Channel), Vec<(NodeId, &'p Tensor)>>,
    watch: bool,
}

impl State<'_> {
    /// Residual as read by `node`'s `channel`, with any substituted edge
    /// contributions swapped in.
    fn channel_input(
        &mut self,
        tape: &mut Tape,
        resid: Var,
        node: NodeId,
        channel: Channel,
    ) -> Result<Var> {
        let mut x = resid;
        if let Some(list) = self.subs.get(&(node, channel)) {
            let mut repl: Option<Tensor> = None;
            for &(u, t) in list {
                let live = self.trace.node(u).ok_or_else(|| {
                    Error::Contract(format!("substitution source {u} not computed"))
                })?;
                if t.shape() != tape.value(live).shape() {
                    return Err(Error::Dimension(format!(
                        "substitution for {u}->{node}: {:?} vs {:?}",
                        t.shape(),
                        tape.value(live).shape()
                    )));
                }
                x = tape.sub(x, live)?;
                match &mut repl {
                    Some(r) => r.add_assign(t)?,
                    None => repl = Some(t.clone()),
                }
            }
            if let Some(r) = repl {
                let r = tape.constant(r);
                x = tape.add(x, r)?;
            }
        }
        if self.watch {
            x = tape.watch(x);
        }
        self.trace.channels.insert((node, channel), x);
        Ok(x)
    }
}

impl Model {
    fn norm(&self, tape: &mut Tape, x: Var, gamma: Var) -> Result<Var> {
        match self.config.arch {
            Arch::Transformer => tape.rmsnorm(x, gamma, NORM_EPS),
            Arch::Linear => tape.mul_row(x, gamma),
        }
    }

    /// Per-row scale the norm applies before `γ`.
    pub fn norm_scales(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| match self.config.arch {
                Arch::Transformer => {
                    let row = x.row(i);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                    1.0 / (ms + NORM_EPS).sqrt()
                }
                Arch::Linear => 1.0,
            })
            .collect()
    }

    /// `normed − c_i·(u ⊙ γ)` row by row, `c` taken from the raw input.
    fn subtract_normalised(
        &self,
        tape: &mut Tape,
        normed: Var,
        raw: Var,
        direction: &Tensor,
        gamma: &Tensor,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if direction.len() != d {
            return Err(Error::Dimension(format!(
                "subtraction direction of {} for width {d}",
                direction.len()
            )));
        }
        let scales = self.norm_scales(tape.value(raw));
        let dg: Vec<f64> = direction
            .data()
            .iter()
            .zip(gamma.data())
            .map(|(a, b)| a * b)
            .collect();
        let mut corr = Vec::with_capacity(scales.len() * d);
        for c in scales {
            corr.extend(dg.iter().map(|x| c * x));
        }
        let corr = tape.constant(Tensor::matrix(corr.len() / d, d, corr)?);
        tape.sub(normed, corr)
    }

    /// Forward pass over `batch` sequences of equal length laid out back
    /// to back in `tokens`.
    pub fn run(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[usize],
        batch: usize,
        pass: &Pass<'_>,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let (h_count, dh, d) = (cfg.n_heads, cfg.d_head, cfg.d_model);
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Input(format!(
                "{} tokens cannot form {batch} equal sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Input(format!("token {bad} outside vocab {}", cfg.vocab)));
        }
        let rows = batch * seq;
        let graph =
            pass.graph || pass.watch || pass.substitutions.is_some() || pass.patch.is_some();

        if let Some(s) = &pass.steer {
            if s.layer >= cfg.n_layers {
                return Err(Error::Contract(format!("steering layer {} out of range", s.layer)));
            }
            if s.coefs.len() != batch {
                return Err(Error::Dimension(format!(
                    "{} steering coefficients for {batch} sequences",
                    s.coefs.len()
                )));
            }
        }
        let mut subs: BTreeMap<(NodeId, Channel), Vec<(NodeId, &Tensor)>> = BTreeMap::new();
        if let Some(map) = pass.substitutions {
            for (e, t) in map {
                if !is_valid_edge(cfg, e) {
                    return Err(Error::Contract(format!("edge {e} is not in the graph")));
                }
                subs.entry((e.downstream, e.channel))
                    .or_default()
                    .push((e.upstream, t));
            }
        }
        if let Some(patch) = pass.patch {
            for e in patch.edges {
                if !is_valid_edge(cfg, e) {
                    return Err(Error::Contract(format!("edge {e} is not in the graph")));
                }
                let t = patch.values.get(&e.upstream).ok_or_else(|| {
                    Error::Contract(format!("no patch value for {}", e.upstream))
                })?;
                subs.entry((e.downstream, e.channel))
                    .or_default()
                    .push((e.upstream, t));
            }
        }
        let projector = match pass.ablate {
            Some(dir) => Some(tape.constant(ablation_projector(dir, d)?)),
            None => None,
        };
        let project = |tape: &mut Tape, x: Var| -> Result<Var> {
            match projector {
                Some(p) => tape.matmul(x, p),
                None => Ok(x),
            }
        };

        let tok = tape.gather(pv.tok_emb, tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.gather(pv.pos_emb, &positions)?;
        let mut embed = tape.add(tok, pos)?;
        embed = project(tape, embed)?;
        if pass.watch {
            embed = tape.watch(embed);
        }

        let mut st = State {
            trace: Trace {
                batch,
                seq,
                logits: embed,
                embed,
                layer_inputs: Vec::with_capacity(cfg.n_layers),
                heads: Vec::new(),
                mlps: Vec::new(),
                attn_mix: Vec::new(),
                values: Vec::new(),
                channels: BTreeMap::new(),
                final_resid: embed,
            },
            subs,
            watch: pass.watch,
        };

        let mut resid = embed;
        for (l, lv) in pv.layers.iter().enumerate() {
            if let Some(s) = pass.steer.as_ref().filter(|s| s.layer == l) {
                let coefs: Vec<f64> = s.coefs.iter().flat_map(|&c| vec![c; seq]).collect();
                resid = tape.add_row_scaled(resid, s.vector, coefs)?;
            }
            if pass.watch {
                resid = tape.watch(resid);
            }
            st.trace.layer_inputs.push(resid);

            let frozen = pass.freeze.filter(|f| l >= f.from_layer).map(|f| &f.kind);
            let gamma_attn = &self.layers[l].ln_attn;

            // queries, keys, values
            let (q, k, v) = if graph {
                let mut parts: [Vec<Var>; 3] = Default::default();
                for h in 0..h_count {
                    for (ci, &ch) in Channel::QKV.iter().enumerate() {
                        let node = NodeId::AttnHead(l, h);
                        let inp = st.channel_input(tape, resid, node, ch)?;
                        let mut normed = self.norm(tape, inp, lv.ln_attn)?;
                        if let (Channel::V, Some(FreezeKind::ValueInputSubtract(u))) = (ch, frozen) {
                            normed = self.subtract_normalised(tape, normed, inp, u, gamma_attn)?;
                        }
                        let w = [lv.w_q, lv.w_k, lv.w_v][ci];
                        let w_h = tape.slice_cols(w, h * dh, dh)?;
                        parts[ci].push(tape.matmul(normed, w_h)?);
                    }
                }
                let [pq, pk, pv_] = parts;
                (
                    tape.concat_cols(&pq)?,
                    tape.concat_cols(&pk)?,
                    tape.concat_cols(&pv_)?,
                )
            } else {
                let normed = self.norm(tape, resid, lv.ln_attn)?;
                let normed_v = match frozen {
                    Some(FreezeKind::ValueInputSubtract(u)) => {
                        self.subtract_normalised(tape, normed, resid, u, gamma_attn)?
                    }
                    _ => normed,
                };
                (
                    tape.matmul(normed, lv.w_q)?,
                    tape.matmul(normed, lv.w_k)?,
                    tape.matmul(normed_v, lv.w_v)?,
                )
            };
            let v = match frozen {
                Some(FreezeKind::Values(vals)) => {
                    let cached = vals.get(l).ok_or_else(|| {
                        Error::Contract(format!("no frozen values for layer {l}"))
                    })?;
                    if cached.shape() != [rows, d] {
                        return Err(Error::Dimension(format!(
                            "frozen values {:?} for {rows}x{d}",
                            cached.shape()
                        )));
                    }
                    tape.constant(cached.clone())
                }
                _ => v,
            };
            st.trace.values.push(v);

            let mix = match (cfg.arch, frozen) {
                (_, Some(FreezeKind::AttentionProbs(probs))) => {
                    let p = probs.get(l).ok_or_else(|| {
                        Error::Contract(format!("no frozen attention for layer {l}"))
                    })?;
                    tape.attention_fixed(p.clone(), v, batch, h_count)?
                }
                (Arch::Linear, _) => {
                    tape.attention_fixed(identity_probs(batch, h_count, seq), v, batch, h_count)?
                }
                (Arch::Transformer, _) => tape.attention(q, k, v, batch, h_count)?,
            };
            st.trace.attn_mix.push(mix);

            if graph {
                let mut outs = Vec::with_capacity(h_count);
                for h in 0..h_count {
                    let z_h = tape.slice_cols(mix, h * dh, dh)?;
                    let w_o = tape.slice_rows(lv.w_o, h * dh, dh)?;
                    let mut out = tape.matmul(z_h, w_o)?;
                    out = project(tape, out)?;
                    if pass.watch {
                        out = tape.watch(out);
                    }
                    outs.push(out);
                }
                st.trace.heads.push(outs.clone());
                for out in outs {
                    resid = tape.add(resid, out)?;
                }
            } else {
                let mut out = tape.matmul(mix, lv.w_o)?;
                out = project(tape, out)?;
                resid = tape.add(resid, out)?;
            }

            let inp = if graph {
                st.channel_input(tape, resid, NodeId::Mlp(l), Channel::In)?
            } else {
                resid
            };
            let mut normed = self.norm(tape, inp, lv.ln_mlp)?;
            if let Some(FreezeKind::MlpInputSubtract(u)) = frozen {
                normed = self.subtract_normalised(tape, normed, inp, u, &self.layers[l].ln_mlp)?;
            }
            let mut hidden = tape.matmul(normed, lv.w_in)?;
            if cfg.arch == Arch::Transformer {
                hidden = tape.gelu(hidden);
            }
            let mut out = tape.matmul(hidden, lv.w_out)?;
            out = project(tape, out)?;
            if pass.watch {
                out = tape.watch(out);
            }
            st.trace.mlps.push(out);
            resid = tape.add(resid, out)?;
        }
        st.trace.final_resid = resid;
        let inp = if graph {
            st.channel_input(tape, resid, NodeId::Logits, Channel::In)?
        } else {
            resid
        };
        let normed = self.norm(tape, inp, pv.ln_final)?;
        st.trace.logits = tape.matmul(normed, pv.unembed)?;
        Ok(st.trace)
    }

    fn steer_var(&self, tape: &mut Tape, s: &Steering, batch: usize) -> Result<SteerVar> {
        if s.vector.len() != self.config.d_model {
            return Err(Error::Dimension(format!(
                "steering vector of {} for d_model {}",
                s.vector.len(),
                self.config.d_model
            )));
        }
        Ok(SteerVar {
            layer: s.layer,
            vector: tape.constant(s.vector.clone()),
            coefs: vec![s.alpha; batch],
        })
    }

    /// Forward with every hook point recorded.
    pub fn forward_batch(
        &self,
        tokens: &[usize],
        batch: usize,
        iv: &Interventions,
    ) -> Result<ForwardCache> {
        let mut tape = Tape::new();
        let pv = ParamVars::load(self, &mut tape, false)?;
        let steer = match &iv.steering {
            Some(s) => Some(self.steer_var(&mut tape, s, batch)?),
            None => None,
        };
        let pass = Pass {
            steer,
            substitutions: Some(&iv.edge_substitutions),
            freeze: iv.freeze.as_ref(),
            ablate: iv.directional_ablation.as_ref(),
            graph: true,
            ..Pass::default()
        };
        let trace = self.run(&mut tape, &pv, tokens, batch, &pass)?;
        Ok(self.collect_cache(&tape, &trace))
    }

    /// Single-sequence [`Model::forward_batch`], returning logits `[N, V]`.
    pub fn forward(&self, tokens: &[usize], iv: &Interventions) -> Result<(Tensor, ForwardCache)> {
        let cache = self.forward_batch(tokens, 1, iv)?;
        Ok((cache.logits.clone(), cache))
    }

    pub fn collect_cache(&self, tape: &Tape, trace: &Trace) -> ForwardCache {
        let mut node_outputs = BTreeMap::new();
        node_outputs.insert(NodeId::Embed, tape.value(trace.embed).clone());
        for (l, &v) in trace.layer_inputs.iter().enumerate() {
            node_outputs.insert(NodeId::SteerResid(l), tape.value(v).clone());
        }
        for (l, hs) in trace.heads.iter().enumerate() {
            for (h, &v) in hs.iter().enumerate() {
                node_outputs.insert(NodeId::AttnHead(l, h), tape.value(v).clone());
            }
        }
        for (l, &v) in trace.mlps.iter().enumerate() {
            node_outputs.insert(NodeId::Mlp(l), tape.value(v).clone());
        }
        let channel_inputs = trace
            .channels
            .iter()
            .map(|(k, &v)| (*k, tape.value(v).clone()))
            .collect();
        ForwardCache {
            batch: trace.batch,
            seq: trace.seq,
            logits: tape.value(trace.logits).clone(),
            node_outputs,
            channel_inputs,
            attn_probs: trace
                .attn_mix
                .iter()
                .map(|&z| tape.attention_probs(z).map(<[f64]>::to_vec).unwrap_or_default())
                .collect(),
            values: trace.values.iter().map(|&v| tape.value(v).clone()).collect(),
            norm_scales: trace
                .layer_inputs
                .iter()
                .map(|&v| self.norm_scales(tape.value(v)))
                .collect(),
            final_resid: tape.value(trace.final_resid).clone(),
        }
    }

    /// Logits for a batch of equal-length sequences, without hook
    /// bookkeeping. Edge substitutions are not supported here.
    pub fn logits_batch(&self, tokens: &[usize], batch: usize, iv: &Interventions) -> Result<Tensor> {
        if !iv.edge_substitutions.is_empty() {
            return Err(Error::Contract(
                "edge substitutions need forward_batch".into(),
            ));
        }
        let mut tape = Tape::new();
        let pv = ParamVars::load(self, &mut tape, false)?;
        let steer = match &iv.steering {
            Some(s) => Some(self.steer_var(&mut tape, s, batch)?),
            None => None,
        };
        let pass = Pass {
            steer,
            freeze: iv.freeze.as_ref(),
            ablate: iv.directional_ablation.as_ref(),
            ..Pass::default()
        };
        let trace = self.run(&mut tape, &pv, tokens, batch, &pass)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Greedy continuation of `prompt`; returns prompt plus generated
    /// tokens, stopping after `stop` is emitted or `max_new` tokens.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        iv: &Interventions,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        Ok(self
            .generate_batch(&[prompt.to_vec()], iv, max_new, stop)?
            .remove(0))
    }

    /// [`Model::generate_greedy`] for many prompts. Prompts of equal length
    /// are decoded together; results come back in input order.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<usize>],
        iv: &Interventions,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Input("empty prompt".into()));
            }
            groups.entry(p.len()).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = prompts.to_vec();
        for (len, idx) in groups {
            let mut seqs: Vec<Vec<usize>> = idx.iter().map(|&i| prompts[i].clone()).collect();
            let mut done = vec![false; seqs.len()];
            let mut cur = len;
            for _ in 0..max_new {
                if done.iter().all(|&d| d) || cur >= self.config.max_seq {
                    break;
                }
                let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
                let logits = self.logits_batch(&flat, seqs.len(), iv)?;
                for (b, s) in seqs.iter_mut().enumerate() {
                    let next = logits.argmax_row(b * cur + cur - 1);
                    s.push(next);
                    if !done[b] && Some(next) == stop {
                        done[b] = true;
                        out[idx[b]] = s.clone();
                    }
                }
                cur += 1;
            }
            for (b, s) in seqs.into_iter().enumerate() {
                if !done[b] {
                    out[idx[b]] = s;
                }
            }
        }
        Ok(out)
    }
}

/// `I − ŝŝᵀ` for the unit vector `ŝ` along `direction`.
fn ablation_projector(direction: &Tensor, d: usize) -> Result<Tensor> {
    if direction.len() != d {
        return Err(Error::Dimension(format!(
            "ablation direction of {} for width {d}",
            direction.len()
        )));
    }
    let n = crate::tensor::norm(direction.data());
    if n == 0.0 {
        return Err(Error::Contract("ablation direction is zero".into()));
    }
    let u: Vec<f64> = direction.data().iter().map(|x| x / n).collect();
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = f64::from(u8::from(i == j)) - u[i] * u[j];
        }
    }
    Tensor::matrix(d, d, p)
}

fn identity_probs(batch: usize, heads: usize, seq: usize) -> Vec<f64> {
    let mut p = vec![0.0; batch * heads * seq * seq];
    for bh in 0..batch * heads {
        for i in 0..seq {
            p[bh * seq * seq + i * seq + i] = 1.0;
        }
    }
    p
}
