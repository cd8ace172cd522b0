//! Steering vectors: difference-in-means construction with candidate
//! selection, and vectors learned by next-token prediction (NTP) or a
//! preference objective (PO) against a frozen model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Interventions, Model, ParamVars, Pass, SteerVar, Steering};
use crate::optim::Adam;
use crate::rng::substream;
use crate::task::{self, pad_batch, Label, PromptRecord};
use crate::tensor::{kl_divergence, softmax, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dim,
    Ntp,
    Po,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dim, Method::Ntp, Method::Po];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dim => "dim",
            Method::Ntp => "ntp",
            Method::Po => "po",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dim" => Ok(Method::Dim),
            "ntp" => Ok(Method::Ntp),
            "po" => Ok(Method::Po),
            _ => Err(Error::Input(format!("unknown steering method '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    pub values: Tensor,
    pub layer: usize,
    /// Source position relative to the prompt end (DIM only).
    pub position: Option<isize>,
    pub alpha: f64,
    pub method: Method,
}

impl SteeringVector {
    /// Steering at `coef · alpha`.
    pub fn at(&self, coef: f64) -> Steering {
        Steering {
            layer: self.layer,
            vector: self.values.clone(),
            alpha: coef * self.alpha,
        }
    }

    pub fn interventions(&self, coef: f64) -> Interventions {
        Interventions {
            steering: Some(self.at(coef)),
            ..Interventions::default()
        }
    }

    /// Sign of the coefficient that pushes `label` prompts away from
    /// their default behaviour: harmful prompts are steered toward
    /// compliance (−), harmless ones toward refusal (+).
    pub fn flip_sign(label: Label) -> f64 {
        match label {
            Label::Harmful => -1.0,
            Label::Harmless => 1.0,
        }
    }

    pub fn with_values(&self, values: Tensor) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Selection scores of one (layer, position) DIM candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub layer: usize,
    pub position: isize,
    pub bypass: f64,
    pub induce: f64,
    pub kl: f64,
    pub objective: f64,
    pub admissible: bool,
}

/// Mean of `a` minus mean of `b`, row vectors.
pub fn diff_in_means(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("difference in means of an empty set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged activation rows".into()));
    }
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for r in rows {
            for (acc, x) in m.iter_mut().zip(r) {
                *acc += x;
            }
        }
        m.iter().map(|x| x / rows.len() as f64).collect()
    };
    let (ma, mb) = (mean(a), mean(b));
    Ok(ma.iter().zip(&mb).map(|(x, y)| x - y).collect())
}

/// Residual entering `layer` at `position` (relative to the end; −1 is
/// the last token) for each prompt, unsteered.
pub fn residual_at(
    model: &Model,
    prompts: &[Vec<usize>],
    layer: usize,
    position: isize,
) -> Result<Vec<Vec<f64>>> {
    if layer >= model.config.n_layers {
        return Err(Error::Contract(format!("layer {layer} out of range")));
    }
    let mut out = vec![Vec::new(); prompts.len()];
    for (len, idx) in group_by_len(prompts) {
        let at = len as isize + position;
        if position >= 0 || at < 0 {
            return Err(Error::Input(format!(
                "position {position} not resolvable in a prompt of {len} tokens"
            )));
        }
        let flat: Vec<usize> = idx.iter().flat_map(|&i| prompts[i].clone()).collect();
        let mut tape = Tape::new();
        let pv = ParamVars::load(model, &mut tape, false)?;
        let trace = model.run(&mut tape, &pv, &flat, idx.len(), &Pass::default())?;
        let h = tape.value(trace.layer_inputs[layer]);
        for (b, &i) in idx.iter().enumerate() {
            out[i] = h.row(b * len + at as usize).to_vec();
        }
    }
    Ok(out)
}

fn group_by_len(prompts: &[Vec<usize>]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        groups.entry(p.len()).or_default().push(i);
    }
    groups
}

/// Next-token distribution after each prompt.
pub fn next_token_probs(
    model: &Model,
    prompts: &[Vec<usize>],
    iv: &Interventions,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); prompts.len()];
    for (len, idx) in group_by_len(prompts) {
        let flat: Vec<usize> = idx.iter().flat_map(|&i| prompts[i].clone()).collect();
        let logits = model.logits_batch(&flat, idx.len(), iv)?;
        for (b, &i) in idx.iter().enumerate() {
            out[i] = softmax(logits.row(b * len + len - 1));
        }
    }
    Ok(out)
}

/// Difference-in-means vector at `(layer, position)`.
pub fn dim_vector(
    model: &Model,
    harmful: &[Vec<usize>],
    harmless: &[Vec<usize>],
    layer: usize,
    position: isize,
) -> Result<SteeringVector> {
    if harmful.is_empty() || harmless.is_empty() {
        return Err(Error::Contract("DIM needs both prompt sets".into()));
    }
    let a = residual_at(model, harmful, layer, position)?;
    let b = residual_at(model, harmless, layer, position)?;
    Ok(SteeringVector {
        values: Tensor::vector(diff_in_means(&a, &b)?),
        layer,
        position: Some(position),
        alpha: 1.0,
        method: Method::Dim,
    })
}

/// Log-odds of the probability mass on `refusal_set`, clamped.
pub fn refusal_metric(probs: &[f64], refusal_set: &[usize]) -> f64 {
    let p: f64 = refusal_set.iter().map(|&t| probs[t]).sum();
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// `h − ŝŝᵀh`.
pub fn directional_ablation(h: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if h.len() != s.len() {
        return Err(Error::Dimension(format!("{} vs {}", h.len(), s.len())));
    }
    let n = crate::tensor::norm(s);
    if n == 0.0 {
        return Err(Error::Contract("ablation direction is zero".into()));
    }
    let proj = crate::tensor::dot(h, s) / (n * n);
    Ok(h.iter().zip(s).map(|(x, y)| x - proj * y).collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Candidate grid: every layer below `0.8·L` at the last four prompt
/// positions.
pub fn candidate_grid(n_layers: usize) -> Vec<(usize, isize)> {
    let mut grid = Vec::new();
    for l in (0..n_layers).filter(|&l| (l as f64) < 0.8 * n_layers as f64) {
        for p in [-1, -2, -3, -4] {
            grid.push((l, p));
        }
    }
    grid
}

/// Prompt sets used for DIM construction and selection.
pub struct SelectionData<'a> {
    pub harmful_train: &'a [Vec<usize>],
    pub harmless_train: &'a [Vec<usize>],
    pub harmful_val: &'a [Vec<usize>],
    pub harmless_val: &'a [Vec<usize>],
    pub refusal_set: &'a [usize],
}

/// Evaluate every DIM candidate and return the selected vector with the
/// full score table.
pub fn select_candidate(
    model: &Model,
    grid: &[(usize, isize)],
    data: &SelectionData<'_>,
) -> Result<(SteeringVector, Vec<CandidateScores>)> {
    if grid.is_empty() {
        return Err(Error::Contract("empty candidate grid".into()));
    }
    let base = next_token_probs(model, data.harmless_val, &Interventions::none())?;
    let mut table = Vec::with_capacity(grid.len());
    let mut vectors = Vec::with_capacity(grid.len());
    for &(layer, position) in grid {
        let v = dim_vector(model, data.harmful_train, data.harmless_train, layer, position)?;
        let mean_metric = |probs: Vec<Vec<f64>>| -> f64 {
            probs
                .iter()
                .map(|p| refusal_metric(p, data.refusal_set))
                .sum::<f64>()
                / probs.len() as f64
        };
        let bypass = mean_metric(next_token_probs(model, data.harmful_val, &v.interventions(-1.0))?);
        let induce = mean_metric(next_token_probs(model, data.harmless_val, &v.interventions(1.0))?);
        let kl = if crate::tensor::norm(v.values.data()) == 0.0 {
            0.0
        } else {
            let ablated = next_token_probs(
                model,
                data.harmless_val,
                &Interventions {
                    directional_ablation: Some(v.values.clone()),
                    ..Interventions::default()
                },
            )?;
            base.iter()
                .zip(&ablated)
                .map(|(p, q)| kl_divergence(p, q))
                .sum::<f64>()
                / base.len() as f64
        };
        table.push(CandidateScores {
            layer,
            position,
            bypass,
            induce,
            kl,
            objective: sigmoid(bypass) - sigmoid(induce),
            admissible: false,
        });
        vectors.push(v);
    }
    match select_index(&mut table, model.config.n_layers) {
        Some(i) => Ok((vectors.swap_remove(i), table)),
        None => Err(Error::SelectionEmpty { table }),
    }
}

/// Apply the admissibility constraints (`induce > 0`, `kl < 0.1`,
/// `layer < 0.8·L`) and return the admissible row with the smallest
/// objective; the first such row wins ties.
pub fn select_index(table: &mut [CandidateScores], n_layers: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in table.iter_mut().enumerate() {
        c.admissible = c.induce > 0.0
            && c.kl < 0.1
            && (c.layer as f64) < 0.8 * n_layers as f64
            && c.objective.is_finite();
        if c.admissible && best.is_none_or(|(_, o)| c.objective < o) {
            best = Some((i, c.objective));
        }
    }
    best.map(|(i, _)| i)
}

/// Fallback when no row is admissible: keep `induce > 0` and the layer
/// bound, drop the KL bound, and take the row with the smallest KL.
pub fn relaxed_index(table: &[CandidateScores], n_layers: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in table.iter().enumerate() {
        let ok = c.induce > 0.0 && (c.layer as f64) < 0.8 * n_layers as f64 && c.kl.is_finite();
        if ok && best.is_none_or(|(_, k)| c.kl < k) {
            best = Some((i, c.kl));
        }
    }
    best.map(|(i, _)| i)
}

/// How a DIM vector was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Strict,
    RelaxedKl,
}

/// [`select_candidate`], falling back to [`relaxed_index`] when every
/// candidate fails the constraints. Errors only when even the relaxed
/// rule finds nothing.
pub fn select_with_fallback(
    model: &Model,
    grid: &[(usize, isize)],
    data: &SelectionData<'_>,
) -> Result<(SteeringVector, Vec<CandidateScores>, SelectionMode)> {
    match select_candidate(model, grid, data) {
        Ok((v, table)) => Ok((v, table, SelectionMode::Strict)),
        Err(Error::SelectionEmpty { table }) => {
            let Some(i) = relaxed_index(&table, model.config.n_layers) else {
                return Err(Error::SelectionEmpty { table });
            };
            let c = &table[i];
            let v = dim_vector(model, data.harmful_train, data.harmless_train, c.layer, c.position)?;
            Ok((v, table, SelectionMode::RelaxedKl))
        }
        Err(e) => Err(e),
    }
}

/// One steering training example: `prompt`, the response that expresses
/// the target behaviour, the response it replaces, and the coefficient
/// sign under which it is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerExample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub opposite: Vec<usize>,
    pub coef: f64,
}

/// Both directions of the concept: harmless prompts answered with a
/// refusal under `+α`, harmful prompts answered compliantly under `−α`.
pub fn steering_examples(records: &[&PromptRecord]) -> Vec<SteerExample> {
    records
        .iter()
        .map(|r| {
            let flipped = match r.label {
                Label::Harmful => Label::Harmless,
                Label::Harmless => Label::Harmful,
            };
            SteerExample {
                prompt: r.prompt.clone(),
                target: task::response_for(&r.prompt, flipped),
                opposite: r.response.clone(),
                coef: SteeringVector::flip_sign(r.label),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Preference-objective scaling of the reference gap.
    pub phi: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 12,
            lr: 0.01,
            phi: 0.02,
            seed: 0,
        }
    }
}

/// Sum of token log-probabilities of `response` after `prompt` for every
/// sequence in the batch, as tape scalars.
fn response_logprobs(
    model: &Model,
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &[(&[usize], &[usize], f64)],
    steer: Option<(usize, Var)>,
) -> Result<Vec<Var>> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|(p, r, _)| [*p, *r].concat()).collect();
    let (flat, seq) = pad_batch(&seqs);
    let pass = Pass {
        steer: steer.map(|(layer, vector)| SteerVar {
            layer,
            vector,
            coefs: batch.iter().map(|b| b.2).collect(),
        }),
        ..Pass::default()
    };
    let trace = model.run(tape, pv, &flat, batch.len(), &pass)?;
    let v = model.config.vocab;
    let mut out = Vec::with_capacity(batch.len());
    for (b, (p, r, _)) in batch.iter().enumerate() {
        let rows = tape.slice_rows(trace.logits, b * seq, seq)?;
        let mut w = Tensor::zeros(&[seq, v]);
        for (j, &t) in r.iter().enumerate() {
            w.data_mut()[(p.len() + j - 1) * v + t] = 1.0;
        }
        out.push(tape.log_softmax_dot(rows, w)?);
    }
    Ok(out)
}

/// Next-token-prediction loss of one batch: mean over examples of
/// `−log p(target | prompt, h + coef·v)` per target token.
fn ntp_loss(
    model: &Model,
    tape: &mut Tape,
    pv: &ParamVars,
    layer: usize,
    v: Var,
    batch: &[&SteerExample],
) -> Result<Var> {
    let items: Vec<(&[usize], &[usize], f64)> = batch
        .iter()
        .map(|e| (e.prompt.as_slice(), e.target.as_slice(), e.coef))
        .collect();
    let lps = response_logprobs(model, tape, pv, &items, Some((layer, v)))?;
    let mut total: Option<Var> = None;
    for (lp, e) in lps.into_iter().zip(batch) {
        let term = tape.scale(lp, -1.0 / (e.target.len() * batch.len()) as f64);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("empty batch".into()))
}

/// `β⁺ = max((log p(y_l|x) − log p(y_w|x))·φ, 1)` from reference log-probs.
pub fn beta_plus(ref_lw: f64, ref_ll: f64, phi: f64) -> f64 {
    ((ref_ll - ref_lw) * phi).max(1.0)
}

/// `Δ = (β⁺/|y_w|)·log p(y_w) − (1/|y_l|)·log p(y_l)`.
pub fn po_delta(lw: f64, ll: f64, beta: f64, len_w: usize, len_l: usize) -> f64 {
    beta / len_w as f64 * lw - ll / len_l as f64
}

/// `−log σ(Δ)`.
pub fn po_loss(delta: f64) -> f64 {
    let x = -delta;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn po_batch_loss(
    model: &Model,
    tape: &mut Tape,
    pv: &ParamVars,
    layer: usize,
    v: Var,
    batch: &[&SteerExample],
    betas: &[f64],
) -> Result<Var> {
    let win: Vec<(&[usize], &[usize], f64)> = batch
        .iter()
        .map(|e| (e.prompt.as_slice(), e.target.as_slice(), e.coef))
        .collect();
    let lose: Vec<(&[usize], &[usize], f64)> = batch
        .iter()
        .map(|e| (e.prompt.as_slice(), e.opposite.as_slice(), e.coef))
        .collect();
    let lw = response_logprobs(model, tape, pv, &win, Some((layer, v)))?;
    let ll = response_logprobs(model, tape, pv, &lose, Some((layer, v)))?;
    let mut total: Option<Var> = None;
    for (i, e) in batch.iter().enumerate() {
        let a = tape.scale(lw[i], betas[i] / e.target.len() as f64);
        let b = tape.scale(ll[i], 1.0 / e.opposite.len() as f64);
        let delta = tape.sub(a, b)?;
        let ls = tape.log_sigmoid(delta);
        let term = tape.scale(ls, -1.0 / batch.len() as f64);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("empty batch".into()))
}

/// Reference (unsteered) `β⁺` for each example.
pub fn reference_betas(model: &Model, examples: &[SteerExample], phi: f64) -> Result<Vec<f64>> {
    if phi <= 0.0 {
        return Err(Error::Contract(format!("phi {phi} must be positive")));
    }
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let mut tape = Tape::new();
        let pv = ParamVars::load(model, &mut tape, false)?;
        let win: Vec<(&[usize], &[usize], f64)> = chunk
            .iter()
            .map(|e| (e.prompt.as_slice(), e.target.as_slice(), 0.0))
            .collect();
        let lose: Vec<(&[usize], &[usize], f64)> = chunk
            .iter()
            .map(|e| (e.prompt.as_slice(), e.opposite.as_slice(), 0.0))
            .collect();
        let lw = response_logprobs(model, &mut tape, &pv, &win, None)?;
        let ll = response_logprobs(model, &mut tape, &pv, &lose, None)?;
        for (a, b) in lw.iter().zip(&ll) {
            out.push(beta_plus(tape.value(*a).item(), tape.value(*b).item(), phi));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ntp,
    Po,
}

/// Trained vector plus per-epoch validation losses (index 0 is the
/// zero-vector starting point).
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub vector: SteeringVector,
    pub val_losses: Vec<f64>,
}

/// Learn a steering vector at `layer` with the model frozen; keeps the
/// vector with the lowest validation loss.
pub fn fit_vector(
    model: &Model,
    objective: Objective,
    train: &[SteerExample],
    val: &[SteerExample],
    layer: usize,
    hyper: &FitConfig,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("steering fit needs train and val examples".into()));
    }
    if train
        .iter()
        .chain(val)
        .any(|e| e.target.is_empty() || (objective == Objective::Po && e.opposite.is_empty()))
    {
        return Err(Error::Contract("empty response in steering data".into()));
    }
    if layer >= model.config.n_layers {
        return Err(Error::Contract(format!("layer {layer} out of range")));
    }
    let d = model.config.d_model;
    let (train_betas, val_betas) = match objective {
        Objective::Po => (
            reference_betas(model, train, hyper.phi)?,
            reference_betas(model, val, hyper.phi)?,
        ),
        Objective::Ntp => (vec![1.0; train.len()], vec![1.0; val.len()]),
    };
    let loss_of = |tape: &mut Tape,
                   pv: &ParamVars,
                   v: Var,
                   batch: &[&SteerExample],
                   betas: &[f64]|
     -> Result<Var> {
        match objective {
            Objective::Ntp => ntp_loss(model, tape, pv, layer, v, batch),
            Objective::Po => po_batch_loss(model, tape, pv, layer, v, batch, betas),
        }
    };
    let val_loss = |values: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for (chunk, betas) in val.chunks(32).zip(val_betas.chunks(32)) {
            let mut tape = Tape::new();
            let pv = ParamVars::load(model, &mut tape, false)?;
            let v = tape.constant(values.clone());
            let refs: Vec<&SteerExample> = chunk.iter().collect();
            let l = loss_of(&mut tape, &pv, v, &refs, betas)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    };

    let mut values = Tensor::zeros(&[d]);
    let mut best = (val_loss(&values)?, values.clone());
    let mut val_losses = vec![best.0];
    let mut opt = Adam::new(&[d], None);
    let mut rng = substream(hyper.seed, "steer-fit");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(hyper.batch.max(1)) {
            let batch: Vec<&SteerExample> = idx.iter().map(|&i| &train[i]).collect();
            let betas: Vec<f64> = idx.iter().map(|&i| train_betas[i]).collect();
            let mut tape = Tape::new();
            let pv = ParamVars::load(model, &mut tape, false)?;
            let v = tape.param(values.clone());
            let loss = loss_of(&mut tape, &pv, v, &batch, &betas)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: lv,
                    trace: val_losses,
                });
            }
            tape.backward(loss)?;
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&[d]));
            opt.step(&mut [&mut values], &[g], hyper.lr);
            step += 1;
        }
        let vl = val_loss(&values)?;
        val_losses.push(vl);
        if vl < best.0 {
            best = (vl, values.clone());
        }
    }
    Ok(FitOutcome {
        vector: SteeringVector {
            values: best.1,
            layer,
            position: None,
            alpha: 1.0,
            method: match objective {
                Objective::Ntp => Method::Ntp,
                Objective::Po => Method::Po,
            },
        },
        val_losses,
    })
}

pub fn train_ntp(
    model: &Model,
    train: &[SteerExample],
    val: &[SteerExample],
    layer: usize,
    hyper: &FitConfig,
) -> Result<FitOutcome> {
    fit_vector(model, Objective::Ntp, train, val, layer, hyper)
}

pub fn train_po(
    model: &Model,
    train: &[SteerExample],
    val: &[SteerExample],
    layer: usize,
    hyper: &FitConfig,
) -> Result<FitOutcome> {
    fit_vector(model, Objective::Po, train, val, layer, hyper)
}

/// Direct evaluation of the NTP objective for a fixed vector.
pub fn ntp_objective(
    model: &Model,
    examples: &[SteerExample],
    layer: usize,
    values: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = ParamVars::load(model, &mut tape, false)?;
    let v = tape.constant(values.clone());
    let refs: Vec<&SteerExample> = examples.iter().collect();
    let l = ntp_loss(model, &mut tape, &pv, layer, v, &refs)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_in_means_hand_example() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        assert_eq!(diff_in_means(&a, &b).unwrap(), vec![1.0, 2.0]);
        assert_eq!(diff_in_means(&b, &a).unwrap(), vec![-1.0, -2.0]);
        assert_eq!(diff_in_means(&a, &a).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            diff_in_means(&a[..1], &b[1..]).unwrap(),
            vec![-1.0, 0.0]
        );
        assert!(diff_in_means(&[], &b).is_err());
    }

    #[test]
    fn refusal_metric_examples() {
        assert!(refusal_metric(&[0.5, 0.5], &[0]).abs() < 1e-15);
        assert!((refusal_metric(&[0.8, 0.2], &[0]) - 4f64.ln()).abs() < 1e-12);
        let full = refusal_metric(&[0.3, 0.7], &[0, 1]);
        assert!((full - ((1.0 - 1e-12) / 1e-12f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn directional_ablation_examples() {
        assert_eq!(directional_ablation(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(directional_ablation(&[0.0, 3.0], &[2.0, 0.0]).unwrap(), vec![0.0, 3.0]);
        let z = directional_ablation(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert!(z.iter().all(|x| x.abs() < 1e-12));
        assert!(directional_ablation(&[1.0], &[0.0]).is_err());
    }

    fn row(layer: usize, induce: f64, kl: f64, objective: f64) -> CandidateScores {
        CandidateScores {
            layer,
            position: -1,
            bypass: 0.0,
            induce,
            kl,
            objective,
            admissible: false,
        }
    }

    #[test]
    fn selection_constraints_and_argmin() {
        let mut t = vec![row(0, 1.0, 0.0, 0.6), row(1, 1.0, 0.0, 0.3)];
        assert_eq!(select_index(&mut t, 4), Some(1));
        // layer 4 of 5 violates l < 0.8 L
        let mut t = vec![row(4, 1.0, 0.0, -5.0), row(1, 1.0, 0.0, 0.3)];
        assert_eq!(select_index(&mut t, 5), Some(1));
        assert!(!t[0].admissible);
        let mut t = vec![row(0, -1.0, 0.0, 0.0), row(0, 1.0, 0.2, 0.0)];
        assert_eq!(select_index(&mut t, 4), None);
    }

    #[test]
    fn grid_respects_depth_bound() {
        let g = candidate_grid(4);
        assert_eq!(g.len(), 16);
        assert!(g.iter().all(|&(l, p)| l < 4 && (-4..=-1).contains(&p)));
        assert_eq!(candidate_grid(5).iter().map(|c| c.0).max(), Some(3));
    }

    #[test]
    fn po_hand_example() {
        let beta = beta_plus(-1.0, -2.0, 0.02);
        assert_eq!(beta, 1.0);
        let delta = po_delta(-1.0, -2.0, beta, 1, 1);
        assert_eq!(delta, 1.0);
        assert!((po_loss(delta) - 0.3133).abs() < 1e-4);
        // identical responses: Δ = 0 → log 2
        let d0 = po_delta(-1.7, -1.7, 1.0, 3, 3);
        assert!((po_loss(d0) - 2f64.ln()).abs() < 1e-15);
        // large positive gap lifts β⁺ above 1
        assert!((beta_plus(-10.0, -200.0, 0.02) - 1.0).abs() < 1e-15);
        assert!((beta_plus(-200.0, -10.0, 0.02) - 3.8).abs() < 1e-12);
    }
}
