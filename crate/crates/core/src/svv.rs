//! Steering value vectors: the input-independent part of what an
//! attention head writes when a steering vector is added to its input.
//!
//! With `x = H + α·S` (every row of `S` equal to `s`), RMS scales `c`
//! taken from `x` and `γ` the head's pre-attention gain, a head's output
//! splits exactly into
//!
//! ```text
//! A · D_c · (H ⊙ γ) · W_OV  +  D_{c^h} · svv(α·s),   svv(s) = (s ⊙ γ) · W_OV
//! ```
//!
//! where `D_{c^h}` holds the row sums of `A · D_c`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, Model, NodeId, NORM_EPS};
use crate::steering::SteeringVector;
use crate::tensor::{self, Tape, Tensor};

/// `svv` of one head, possibly sign-flipped for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringValueVector {
    pub layer: usize,
    pub head: usize,
    pub values: Vec<f64>,
    pub negated: bool,
}

/// `(s ⊙ γ) · W_OV`.
pub fn compute_svv(s: &[f64], gamma: &[f64], w_ov: &Tensor) -> Result<Vec<f64>> {
    if s.len() != gamma.len() || w_ov.shape() != [s.len(), s.len()] {
        return Err(Error::Dimension(format!(
            "svv: s {} gamma {} W_OV {:?}",
            s.len(),
            gamma.len(),
            w_ov.shape()
        )));
    }
    let sg: Vec<f64> = s.iter().zip(gamma).map(|(a, b)| a * b).collect();
    let row = Tensor::matrix(1, sg.len(), sg)?;
    Ok(row.matmul(w_ov)?.into_data())
}

pub fn head_svv(model: &Model, s: &[f64], layer: usize, head: usize) -> Result<SteeringValueVector> {
    check_head(model, layer, head)?;
    let values = compute_svv(s, model.layers[layer].ln_attn.data(), &model.w_ov(layer, head))?;
    Ok(SteeringValueVector {
        layer,
        head,
        values,
        negated: false,
    })
}

fn check_head(model: &Model, layer: usize, head: usize) -> Result<()> {
    if layer >= model.config.n_layers || head >= model.config.n_heads {
        return Err(Error::Contract(format!("no head a{layer}.h{head}")));
    }
    Ok(())
}

/// One attention block evaluated on an arbitrary residual `x` of shape
/// `[seq, d]` (a single sequence).
#[derive(Clone, Debug)]
pub struct AttentionRun {
    /// Per-head outputs after `W_O`, `[seq, d]` each.
    pub heads: Vec<Tensor>,
    /// `[heads, seq, seq]`.
    pub probs: Vec<f64>,
    /// RMS scale of each row of `x`.
    pub scales: Vec<f64>,
}

/// Run layer `layer`'s attention on `x` through the same tape kernels as
/// the full forward pass.
pub fn attention_direct(model: &Model, layer: usize, x: &Tensor) -> Result<AttentionRun> {
    let cfg = &model.config;
    if cfg.arch != Arch::Transformer {
        return Err(Error::Contract("svv decomposition needs RMS normalisation".into()));
    }
    if layer >= cfg.n_layers {
        return Err(Error::Contract(format!("layer {layer} out of range")));
    }
    if x.shape().len() != 2 || x.cols() != cfg.d_model || x.rows() == 0 {
        return Err(Error::Dimension(format!("residual {:?}", x.shape())));
    }
    let mut tape = Tape::new();
    let lw = &model.layers[layer];
    let xv = tape.constant(x.clone());
    let gamma = tape.constant(lw.ln_attn.clone());
    let normed = tape.rmsnorm(xv, gamma, NORM_EPS)?;
    let wq = tape.constant(lw.w_q.clone());
    let wk = tape.constant(lw.w_k.clone());
    let wv = tape.constant(lw.w_v.clone());
    let wo = tape.constant(lw.w_o.clone());
    let q = tape.matmul(normed, wq)?;
    let k = tape.matmul(normed, wk)?;
    let v = tape.matmul(normed, wv)?;
    let mix = tape.attention(q, k, v, 1, cfg.n_heads)?;
    let dh = cfg.d_head;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let z = tape.slice_cols(mix, h * dh, dh)?;
        let o = tape.slice_rows(wo, h * dh, dh)?;
        let out = tape.matmul(z, o)?;
        heads.push(tape.value(out).clone());
    }
    let probs = tape
        .attention_probs(mix)
        .ok_or_else(|| Error::Contract("attention probabilities not recorded".into()))?
        .to_vec();
    Ok(AttentionRun {
        heads,
        probs,
        scales: model.norm_scales(x),
    })
}

/// The two terms of the decomposition, summed over heads, next to the
/// directly computed steered attention output.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub direct: Tensor,
    pub input_term: Tensor,
    pub svv_term: Tensor,
    /// Per head `D_{c^h}` diagonal.
    pub svv_weights: Vec<Vec<f64>>,
}

/// Split the attention output of `layer` on `h + α·s` into its
/// input-dependent and steering-value terms.
pub fn decompose(model: &Model, layer: usize, h: &Tensor, s: &[f64], alpha: f64) -> Result<Decomposition> {
    let d = model.config.d_model;
    if s.len() != d {
        return Err(Error::Dimension(format!("steering vector of {} for width {d}", s.len())));
    }
    let seq = h.rows();
    let mut x = h.clone();
    for i in 0..seq {
        for (xv, sv) in x.row_mut(i).iter_mut().zip(s) {
            *xv += alpha * sv;
        }
    }
    let run = attention_direct(model, layer, &x)?;
    let gamma = model.layers[layer].ln_attn.data();
    // D_c (H ⊙ γ), with c from the steered input
    let mut hn = h.clone();
    for i in 0..seq {
        let c = run.scales[i];
        for (v, g) in hn.row_mut(i).iter_mut().zip(gamma) {
            *v *= c * g;
        }
    }
    let scaled_s: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let mut direct = Tensor::zeros(&[seq, d]);
    let mut input_term = Tensor::zeros(&[seq, d]);
    let mut svv_term = Tensor::zeros(&[seq, d]);
    let mut svv_weights = Vec::with_capacity(model.config.n_heads);
    for head in 0..model.config.n_heads {
        direct.add_assign(&run.heads[head])?;
        let a = Tensor::matrix(seq, seq, run.probs[head * seq * seq..(head + 1) * seq * seq].to_vec())?;
        let w_ov = model.w_ov(layer, head);
        input_term.add_assign(&a.matmul(&hn)?.matmul(&w_ov)?)?;
        let svv = compute_svv(&scaled_s, gamma, &w_ov)?;
        let weights: Vec<f64> = (0..seq)
            .map(|i| (0..seq).map(|j| a.at(i, j) * run.scales[j]).sum())
            .collect();
        for (i, w) in weights.iter().enumerate() {
            for (o, v) in svv_term.row_mut(i).iter_mut().zip(&svv) {
                *o += w * v;
            }
        }
        svv_weights.push(weights);
    }
    Ok(Decomposition {
        direct,
        input_term,
        svv_term,
        svv_weights,
    })
}

/// Largest absolute gap between the steered attention output and its
/// two-term reassembly.
pub fn verify_decomposition(model: &Model, layer: usize, h: &Tensor, s: &[f64], alpha: f64) -> Result<f64> {
    let dec = decompose(model, layer, h, s, alpha)?;
    let sum = dec.input_term.add(&dec.svv_term)?;
    Ok(dec.direct.max_abs_diff(&sum))
}

/// What a logit-lens row was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LensSource {
    Raw,
    Svv { layer: usize, head: usize },
    NegatedSvv { layer: usize, head: usize },
    Sum,
}

impl fmt::Display for LensSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LensSource::Raw => write!(f, "raw"),
            LensSource::Svv { layer, head } => write!(f, "svv(a{layer}.h{head})"),
            LensSource::NegatedSvv { layer, head } => write!(f, "-svv(a{layer}.h{head})"),
            LensSource::Sum => write!(f, "sum"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitLensReport {
    pub source: LensSource,
    /// Full vocabulary logits.
    pub logits: Vec<f64>,
    /// `(token, logit)` by descending logit, ties by token id.
    pub top: Vec<(usize, f64)>,
}

/// Unembedding applied to `v`. Without `final_norm` this is the plain dot
/// product with every vocabulary column; with it, `v` first passes the
/// final RMS norm.
pub fn lens_logits(model: &Model, v: &[f64], final_norm: bool) -> Result<Vec<f64>> {
    let d = model.config.d_model;
    if v.len() != d {
        return Err(Error::Dimension(format!("lens input of {} for width {d}", v.len())));
    }
    let mut row = v.to_vec();
    if final_norm {
        let c = model.norm_scales(&Tensor::matrix(1, d, row.clone())?)[0];
        for (x, g) in row.iter_mut().zip(model.ln_final.data()) {
            *x *= c * g;
        }
    }
    Ok(Tensor::matrix(1, d, row)?
        .matmul(&model.unembed_matrix())?
        .into_data())
}

pub fn logit_lens(
    model: &Model,
    v: &[f64],
    top_k: usize,
    final_norm: bool,
    source: LensSource,
) -> Result<LogitLensReport> {
    if top_k == 0 {
        return Err(Error::Contract("top_k must be at least 1".into()));
    }
    let logits = lens_logits(model, v, final_norm)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let top = order
        .into_iter()
        .take(top_k)
        .map(|t| (t, logits[t]))
        .collect();
    Ok(LogitLensReport { source, logits, top })
}

/// The `n` attention heads at or above `steer_layer` with the largest
/// `|node IE|`, ties by head id.
pub fn top_heads(nodes: &BTreeMap<NodeId, f64>, steer_layer: usize, n: usize) -> Vec<(usize, usize)> {
    let mut heads: Vec<((usize, usize), f64)> = nodes
        .iter()
        .filter_map(|(node, &score)| match *node {
            NodeId::AttnHead(l, h) if l >= steer_layer => Some(((l, h), score.abs())),
            _ => None,
        })
        .collect();
    heads.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    heads.into_iter().take(n).map(|(h, _)| h).collect()
}

/// Lens rows for the raw vector, each selected head's svv and its
/// negation, and the sum of the svvs of every head the steering vector
/// reaches.
pub fn svv_report(
    model: &Model,
    vector: &SteeringVector,
    heads: &[(usize, usize)],
    top_k: usize,
    final_norm: bool,
) -> Result<Vec<LogitLensReport>> {
    if heads.is_empty() {
        return Err(Error::Contract("svv report needs at least one head".into()));
    }
    let s = vector.values.data();
    let mut rows = vec![logit_lens(model, s, top_k, final_norm, LensSource::Raw)?];
    for &(layer, head) in heads {
        if layer < vector.layer {
            return Err(Error::Contract(format!(
                "head a{layer}.h{head} sits below the steering layer {}",
                vector.layer
            )));
        }
        let svv = head_svv(model, s, layer, head)?;
        rows.push(logit_lens(model, &svv.values, top_k, final_norm, LensSource::Svv { layer, head })?);
        let neg: Vec<f64> = svv.values.iter().map(|v| -v).collect();
        rows.push(logit_lens(model, &neg, top_k, final_norm, LensSource::NegatedSvv { layer, head })?);
    }
    rows.push(logit_lens(model, &svv_sum(model, vector)?, top_k, final_norm, LensSource::Sum)?);
    Ok(rows)
}

/// Unweighted sum of the svvs of every head at or above the steering
/// layer.
pub fn svv_sum(model: &Model, vector: &SteeringVector) -> Result<Vec<f64>> {
    let s = vector.values.data();
    let mut sum = vec![0.0; model.config.d_model];
    for layer in vector.layer..model.config.n_layers {
        for head in 0..model.config.n_heads {
            for (acc, v) in sum.iter_mut().zip(head_svv(model, s, layer, head)?.values) {
                *acc += v;
            }
        }
    }
    Ok(sum)
}

/// Share of a head's value-path output that the svv term accounts for,
/// as `‖svv term‖ / (‖input term‖ + ‖svv term‖)` over all rows.
pub fn svv_share(dec: &Decomposition) -> f64 {
    let a = tensor::norm(dec.input_term.data());
    let b = tensor::norm(dec.svv_term.data());
    if a + b == 0.0 {
        0.0
    } else {
        b / (a + b)
    }
}
