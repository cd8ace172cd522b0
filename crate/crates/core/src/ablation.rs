//! Steered generation with parts of the attention or MLP pathway held at
//! their unsteered values, and the per-class report comparing them.
//!
//! Every decode step runs the model twice on the same prefix: once
//! without steering, to cache what gets frozen, and once with steering
//! and the freeze applied from the steering layer upward.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardCache, FreezeKind, Model, ModuleFreeze, ParamVars, Pass, SteerVar};
use crate::steering::SteeringVector;
use crate::task::{self, Label};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    None,
    /// Attention probabilities taken from the unsteered run.
    QkFreeze,
    /// Post-`W_V` values taken from the unsteered run.
    OvFreeze,
    /// Remove the normalised steering term from every value input.
    SvvSubtract,
    /// Remove the normalised steering term from every MLP input.
    MlpSubtract,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::None,
        AblationKind::QkFreeze,
        AblationKind::OvFreeze,
        AblationKind::SvvSubtract,
        AblationKind::MlpSubtract,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::None => "none",
            AblationKind::QkFreeze => "qk-freeze",
            AblationKind::OvFreeze => "ov-freeze",
            AblationKind::SvvSubtract => "svv-subtract",
            AblationKind::MlpSubtract => "mlp-subtract",
        }
    }

    fn needs_base(self) -> bool {
        matches!(self, AblationKind::QkFreeze | AblationKind::OvFreeze)
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// One decode step of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationStep {
    pub prefix_len: usize,
    pub token: usize,
    /// Largest gap, over layers at or above the steering layer, between
    /// the frozen quantity in the steered pass and the unsteered pass.
    /// `None` for kinds that freeze nothing.
    pub frozen_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblatedGeneration {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub steps: Vec<AblationStep>,
}

fn run_cached(
    model: &Model,
    flat: &[usize],
    batch: usize,
    steer: Option<(&SteeringVector, f64)>,
    freeze: Option<&ModuleFreeze>,
) -> Result<ForwardCache> {
    let mut tape = Tape::new();
    let pv = ParamVars::load(model, &mut tape, false)?;
    let steer = steer.map(|(v, coef)| SteerVar {
        layer: v.layer,
        vector: tape.constant(v.values.clone()),
        coefs: vec![coef * v.alpha; batch],
    });
    let pass = Pass {
        steer,
        freeze,
        ..Pass::default()
    };
    let trace = model.run(&mut tape, &pv, flat, batch, &pass)?;
    Ok(model.collect_cache(&tape, &trace))
}

fn freeze_for(
    kind: AblationKind,
    vector: &SteeringVector,
    coef: f64,
    base: Option<&ForwardCache>,
) -> Option<ModuleFreeze> {
    let scaled = || vector.values.scale(coef * vector.alpha);
    let kind = match kind {
        AblationKind::None => return None,
        AblationKind::QkFreeze => FreezeKind::AttentionProbs(base?.attn_probs.clone()),
        AblationKind::OvFreeze => FreezeKind::Values(base?.values.clone()),
        AblationKind::SvvSubtract => FreezeKind::ValueInputSubtract(scaled()),
        AblationKind::MlpSubtract => FreezeKind::MlpInputSubtract(scaled()),
    };
    Some(ModuleFreeze {
        from_layer: vector.layer,
        kind,
    })
}

fn frozen_gap(kind: AblationKind, from: usize, base: &ForwardCache, steered: &ForwardCache) -> Option<f64> {
    let max_gap = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    match kind {
        AblationKind::QkFreeze => Some(
            (from..base.attn_probs.len())
                .map(|l| max_gap(&base.attn_probs[l], &steered.attn_probs[l]))
                .fold(0.0, f64::max),
        ),
        AblationKind::OvFreeze => Some(
            (from..base.values.len())
                .map(|l| base.values[l].max_abs_diff(&steered.values[l]))
                .fold(0.0, f64::max),
        ),
        _ => None,
    }
}

/// Greedy steered generation under `kind`, prompts of equal length
/// decoded together. `coef` multiplies the vector's own `alpha`.
pub fn generate_ablated_batch(
    model: &Model,
    prompts: &[Vec<usize>],
    vector: &SteeringVector,
    coef: f64,
    kind: AblationKind,
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<AblatedGeneration>> {
    if vector.layer >= model.config.n_layers {
        return Err(Error::Contract(format!(
            "steering layer {} exceeds depth {}",
            vector.layer, model.config.n_layers
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        groups.entry(p.len()).or_default().push(i);
    }
    let mut out: Vec<Option<AblatedGeneration>> = vec![None; prompts.len()];
    for (len, idx) in groups {
        let mut gens: Vec<AblatedGeneration> = idx
            .iter()
            .map(|&i| AblatedGeneration {
                tokens: prompts[i].clone(),
                steps: Vec::new(),
            })
            .collect();
        let mut done = vec![false; idx.len()];
        let mut cur = len;
        for _ in 0..max_new {
            if done.iter().all(|&d| d) || cur >= model.config.max_seq {
                break;
            }
            let batch = gens.len();
            let flat: Vec<usize> = gens.iter().flat_map(|g| g.tokens.iter().copied()).collect();
            let base = if kind.needs_base() {
                Some(run_cached(model, &flat, batch, None, None)?)
            } else {
                None
            };
            let freeze = freeze_for(kind, vector, coef, base.as_ref());
            let steered = run_cached(model, &flat, batch, Some((vector, coef)), freeze.as_ref())?;
            let gap = base
                .as_ref()
                .and_then(|b| frozen_gap(kind, vector.layer, b, &steered));
            for (b, g) in gens.iter_mut().enumerate() {
                if done[b] {
                    continue;
                }
                let token = steered.logits.argmax_row(b * cur + cur - 1);
                g.tokens.push(token);
                g.steps.push(AblationStep {
                    prefix_len: cur,
                    token,
                    frozen_gap: gap,
                });
                if Some(token) == stop {
                    done[b] = true;
                }
            }
            // finished rows keep decoding so the batch stays rectangular
            for (b, g) in gens.iter_mut().enumerate() {
                if done[b] && g.tokens.len() == cur {
                    g.tokens.push(g.tokens[cur - 1]);
                }
            }
            cur += 1;
        }
        for (b, mut g) in gens.into_iter().enumerate() {
            let keep = len + g.steps.len();
            g.tokens.truncate(keep);
            out[idx[b]] = Some(g);
        }
    }
    Ok(out.into_iter().map(|g| g.expect("every prompt grouped")).collect())
}

pub fn generate_ablated(
    model: &Model,
    prompt: &[usize],
    vector: &SteeringVector,
    coef: f64,
    kind: AblationKind,
    max_new: usize,
) -> Result<AblatedGeneration> {
    Ok(generate_ablated_batch(model, &[prompt.to_vec()], vector, coef, kind, max_new, Some(task::END))?
        .remove(0))
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    /// ASR-analog on harmful prompts steered to bypass refusal.
    pub harmful_asr: f64,
    /// ASR-analog on harmless prompts steered to refuse.
    pub harmless_asr: f64,
    /// Percentage drop of steering success relative to no ablation:
    /// bypass rate on harmful prompts, refusal rate on harmless ones.
    pub harmful_drop_pct: Option<f64>,
    pub harmless_drop_pct: Option<f64>,
    pub avg_drop_pct: Option<f64>,
}

fn drop_pct(reference: f64, value: f64) -> Option<f64> {
    (reference > 0.0).then(|| 100.0 * (reference - value) / reference)
}

fn asr(model: &Model, prompts: &[Vec<usize>], vector: &SteeringVector, coef: f64, kind: AblationKind) -> Result<f64> {
    let gens = generate_ablated_batch(model, prompts, vector, coef, kind, task::REFUSAL_WINDOW, Some(task::END))?;
    let bypassed = gens
        .iter()
        .zip(prompts)
        .filter(|(g, p)| !task::is_refusal(&g.tokens[p.len()..]))
        .count();
    Ok(bypassed as f64 / prompts.len() as f64)
}

/// Harmful prompts are steered with the bypass sign and harmless prompts
/// with the induce sign; every kind is compared with `AblationKind::None`.
pub fn ablation_report(
    model: &Model,
    harmful: &[Vec<usize>],
    harmless: &[Vec<usize>],
    vector: &SteeringVector,
    kinds: &[AblationKind],
) -> Result<Vec<AblationRow>> {
    if harmful.is_empty() || harmless.is_empty() {
        return Err(Error::Contract("ablation report needs prompts of both classes".into()));
    }
    let bypass = SteeringVector::flip_sign(Label::Harmful);
    let induce = SteeringVector::flip_sign(Label::Harmless);
    let measure = |kind| -> Result<(f64, f64)> {
        Ok((
            asr(model, harmful, vector, bypass, kind)?,
            asr(model, harmless, vector, induce, kind)?,
        ))
    };
    let (ref_harmful, ref_harmless) = measure(AblationKind::None)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (h, s) = if kind == AblationKind::None {
            (ref_harmful, ref_harmless)
        } else {
            measure(kind)?
        };
        let harmful_drop_pct = drop_pct(ref_harmful, h);
        let harmless_drop_pct = drop_pct(1.0 - ref_harmless, 1.0 - s);
        let avg_drop_pct = match (harmful_drop_pct, harmless_drop_pct) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            (a, b) => a.or(b),
        };
        rows.push(AblationRow {
            kind,
            harmful_asr: h,
            harmless_asr: s,
            harmful_drop_pct,
            harmless_drop_pct,
            avg_drop_pct,
        });
    }
    Ok(rows)
}

/// The freeze a kind applies for a fixed prefix, exposed so callers can
/// inspect individual passes.
pub fn ablated_pass(
    model: &Model,
    tokens: &[usize],
    vector: &SteeringVector,
    coef: f64,
    kind: AblationKind,
) -> Result<(ForwardCache, ForwardCache)> {
    let base = run_cached(model, tokens, 1, None, None)?;
    let freeze = freeze_for(kind, vector, coef, Some(&base));
    let steered = run_cached(model, tokens, 1, Some((vector, coef)), freeze.as_ref())?;
    Ok((base, steered))
}
