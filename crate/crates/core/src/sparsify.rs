//! Sparsifying steering vectors and comparing what survives.
//!
//! The gradient method keeps dimension `i` when `r_i = ie_i / s_i ≥ τ`;
//! since a dimension's IE is `s_i` times the summed gradient along it,
//! `r` is the attribution gradient itself. The other methods drop the
//! same number of dimensions by a different rule, so every τ yields a
//! size-matched comparison.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::substream;
use crate::steering::{Method, SteeringVector};
use crate::task::{self, Label};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparseMethod {
    Gradient,
    Ie,
    BottomK,
    Dropout,
}

impl SparseMethod {
    pub const ALL: [SparseMethod; 4] = [
        SparseMethod::Gradient,
        SparseMethod::Ie,
        SparseMethod::BottomK,
        SparseMethod::Dropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SparseMethod::Gradient => "gradient",
            SparseMethod::Ie => "ie",
            SparseMethod::BottomK => "bottom-k",
            SparseMethod::Dropout => "dropout",
        }
    }
}

impl fmt::Display for SparseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SparseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SparseMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sparsification method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifiedVector {
    pub values: Vec<f64>,
    pub keep: Vec<bool>,
    pub method: SparseMethod,
    /// τ for the gradient method, `k` otherwise.
    pub param: f64,
    pub seed: Option<u64>,
}

impl SparsifiedVector {
    fn from_mask(s: &[f64], keep: Vec<bool>, method: SparseMethod, param: f64, seed: Option<u64>) -> Self {
        let values = s
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Self {
            values,
            keep,
            method,
            param,
            seed,
        }
    }

    /// Dimensions with a nonzero value.
    pub fn support(&self) -> BTreeSet<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zeroed(&self) -> usize {
        self.values.len() - self.support().len()
    }

    pub fn sparsity(&self) -> f64 {
        self.zeroed() as f64 / self.values.len() as f64
    }
}

fn same_len(s: &[f64], ie: &[f64]) -> Result<()> {
    if s.len() != ie.len() {
        return Err(Error::Dimension(format!(
            "vector of {} with {} IE values",
            s.len(),
            ie.len()
        )));
    }
    Ok(())
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k > d {
        return Err(Error::Contract(format!("cannot drop {k} of {d} dimensions")));
    }
    Ok(())
}

/// Keep dimension `i` iff `s_i ≠ 0` and `ie_i / s_i ≥ tau`.
pub fn gradient_sparsify(s: &[f64], ie: &[f64], tau: f64) -> Result<SparsifiedVector> {
    same_len(s, ie)?;
    let keep = s
        .iter()
        .zip(ie)
        .map(|(&v, &e)| v != 0.0 && e / v >= tau)
        .collect();
    Ok(SparsifiedVector::from_mask(s, keep, SparseMethod::Gradient, tau, None))
}

/// Indices of the `k` smallest `key` values, ties by index.
fn bottom(key: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
    let mut keep = vec![true; key.len()];
    for &i in &order[..k] {
        keep[i] = false;
    }
    keep
}

/// Zero the `k` dimensions with the smallest `|ie|`.
pub fn ie_sparsify(s: &[f64], ie: &[f64], k: usize) -> Result<SparsifiedVector> {
    same_len(s, ie)?;
    check_k(k, s.len())?;
    let key: Vec<f64> = ie.iter().map(|v| v.abs()).collect();
    Ok(SparsifiedVector::from_mask(s, bottom(&key, k), SparseMethod::Ie, k as f64, None))
}

/// Zero the `k` dimensions with the smallest `|s|`.
pub fn bottomk_sparsify(s: &[f64], k: usize) -> Result<SparsifiedVector> {
    check_k(k, s.len())?;
    let key: Vec<f64> = s.iter().map(|v| v.abs()).collect();
    Ok(SparsifiedVector::from_mask(s, bottom(&key, k), SparseMethod::BottomK, k as f64, None))
}

/// Zero `k` dimensions drawn uniformly without replacement.
pub fn dropout_sparsify(s: &[f64], k: usize, seed: u64) -> Result<SparsifiedVector> {
    check_k(k, s.len())?;
    let mut rng = substream(seed, "dropout");
    let mut keep = vec![true; s.len()];
    for i in sample(&mut rng, s.len(), k) {
        keep[i] = false;
    }
    Ok(SparsifiedVector::from_mask(s, keep, SparseMethod::Dropout, k as f64, Some(seed)))
}

/// Dimensions the gradient method zeroes at each τ.
pub fn matched_k(s: &[f64], ie: &[f64], taus: &[f64]) -> Result<Vec<usize>> {
    if taus.is_empty() {
        return Err(Error::Contract("empty τ grid".into()));
    }
    taus.iter()
        .map(|&t| Ok(gradient_sparsify(s, ie, t)?.zeroed()))
        .collect()
}

/// Intersection over union of two supports.
pub fn iou(a: &SparsifiedVector, b: &SparsifiedVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::Dimension("IoU of vectors with different widths".into()));
    }
    let (sa, sb) = (a.support(), b.support());
    let union = sa.union(&sb).count();
    if union == 0 {
        return Err(Error::Contract("IoU of two empty supports is undefined".into()));
    }
    Ok(sa.intersection(&sb).count() as f64 / union as f64)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

fn check_hypergeom(d: usize, a: usize, b: usize, overlap: usize) -> Result<()> {
    if a > d || b > d || overlap > a.min(b) {
        return Err(Error::Contract(format!(
            "hypergeometric parameters d={d} a={a} b={b} overlap={overlap}"
        )));
    }
    Ok(())
}

/// `P(X ≥ overlap)` for the overlap `X` of a fixed `a`-subset with a
/// uniform random `b`-subset of `d` items.
pub fn hypergeom_pvalue(d: usize, a: usize, b: usize, overlap: usize) -> Result<f64> {
    check_hypergeom(d, a, b, overlap)?;
    if overlap <= (a + b).saturating_sub(d) {
        // the whole support of X
        return Ok(1.0);
    }
    let lf = ln_factorials(d);
    let ln_choose = |n: usize, k: usize| lf[n] - lf[k] - lf[n - k];
    let lo = overlap;
    let hi = a.min(b);
    let denom = ln_choose(d, b);
    // Neumaier summation of the tail terms
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in lo..=hi {
        let term = (ln_choose(a, x) + ln_choose(d - a, b - x) - denom).exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    Ok((sum + comp).min(1.0))
}

fn choose_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// The same tail as an exact ratio of integers, for `d ≤ 60`.
pub fn hypergeom_pvalue_exact(d: usize, a: usize, b: usize, overlap: usize) -> Result<(u128, u128)> {
    check_hypergeom(d, a, b, overlap)?;
    if d > 60 {
        return Err(Error::Contract("exact enumeration limited to d ≤ 60".into()));
    }
    let num = (overlap..=a.min(b))
        .filter(|&x| b >= x && d - a >= b - x)
        .map(|x| choose_u128(a, x) * choose_u128(d - a, b - x))
        .sum();
    Ok((num, choose_u128(d, b)))
}

/// The τ grid used when none is given.
pub const DEFAULT_TAUS: [f64; 8] = [0.0, 0.1, 0.3, 0.5, 1.0, 1.5, 2.0, 2.5];

/// A vector to sweep with its dimension-level IE.
#[derive(Clone, Debug)]
pub struct SweepInput {
    pub method: Method,
    pub vector: SteeringVector,
    pub ie: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vector: Method,
    pub method: SparseMethod,
    pub tau: f64,
    pub k: usize,
    pub sparsity_pct: f64,
    pub class: Label,
    pub seed: Option<u64>,
    pub asr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub tau: f64,
    pub pair: (Method, Method),
    pub support_a: usize,
    pub support_b: usize,
    pub overlap: usize,
    pub iou: Option<f64>,
    pub pvalue: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub iou: Vec<IouRow>,
}

fn class_asr(model: &Model, prompts: &[Vec<usize>], label: Label, v: &SteeringVector) -> Result<f64> {
    let labelled: Vec<(Vec<usize>, Label)> = prompts.iter().map(|p| (p.clone(), label)).collect();
    let report = task::evaluate_behavior(model, &labelled, &v.interventions(SteeringVector::flip_sign(label)))?;
    Ok(report.class(label).map_or(0.0, |c| c.asr()))
}

/// Evaluate every method at every τ on both classes, with harmful
/// prompts steered towards bypass and harmless ones towards refusal.
pub fn sparsity_sweep(
    model: &Model,
    inputs: &[SweepInput],
    taus: &[f64],
    dropout_seeds: &[u64],
    harmful: &[Vec<usize>],
    harmless: &[Vec<usize>],
) -> Result<SweepResult> {
    if inputs.is_empty() || taus.is_empty() {
        return Err(Error::Contract("sweep needs vectors and a τ grid".into()));
    }
    if inputs.iter().any(|i| i.vector.layer != inputs[0].vector.layer) {
        return Err(Error::Contract("swept vectors must share a layer".into()));
    }
    let mut out = SweepResult::default();
    let classes = [(Label::Harmful, harmful), (Label::Harmless, harmless)];
    let mut jobs = Vec::new();
    for input in inputs {
        let s = input.vector.values.data();
        for (&tau, k) in taus.iter().zip(matched_k(s, &input.ie, taus)?) {
            let mut variants = vec![
                gradient_sparsify(s, &input.ie, tau)?,
                ie_sparsify(s, &input.ie, k)?,
                bottomk_sparsify(s, k)?,
            ];
            for &seed in dropout_seeds {
                variants.push(dropout_sparsify(s, k, seed)?);
            }
            for sv in variants {
                for (label, prompts) in classes {
                    jobs.push((input, tau, k, sv.clone(), label, prompts));
                }
            }
        }
    }
    // Evaluations are independent; collecting keeps the job order.
    out.rows = jobs
        .into_par_iter()
        .map(|(input, tau, k, sv, label, prompts)| {
            let v = input.vector.with_values(Tensor::vector(sv.values.clone()));
            Ok(SweepRow {
                vector: input.method,
                method: sv.method,
                tau,
                k,
                sparsity_pct: 100.0 * k as f64 / sv.values.len() as f64,
                class: label,
                seed: sv.seed,
                asr: class_asr(model, prompts, label, &v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for &tau in taus {
        let sparse: Vec<SparsifiedVector> = inputs
            .iter()
            .map(|i| gradient_sparsify(i.vector.values.data(), &i.ie, tau))
            .collect::<Result<_>>()?;
        for a in 0..inputs.len() {
            for b in a + 1..inputs.len() {
                let (sa, sb) = (sparse[a].support(), sparse[b].support());
                let overlap = sa.intersection(&sb).count();
                let d = sparse[a].values.len();
                let defined = !(sa.is_empty() && sb.is_empty());
                out.iou.push(IouRow {
                    tau,
                    pair: (inputs[a].method, inputs[b].method),
                    support_a: sa.len(),
                    support_b: sb.len(),
                    overlap,
                    iou: if defined { Some(iou(&sparse[a], &sparse[b])?) } else { None },
                    pvalue: if defined {
                        Some(hypergeom_pvalue(d, sa.len(), sb.len(), overlap)?)
                    } else {
                        None
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Mean ASR of one method on one class at one τ, averaged over vectors
/// and dropout seeds.
pub fn mean_asr(rows: &[SweepRow], method: SparseMethod, tau: f64, class: Label) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.tau == tau && r.class == class)
        .map(|r| r.asr)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

/// Mean gradient-method sparsity (percent) at one τ, over vectors.
pub fn mean_sparsity(rows: &[SweepRow], tau: f64) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == SparseMethod::Gradient && r.tau == tau && r.class == Label::Harmful)
        .map(|r| r.sparsity_pct)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_gradient_case() {
        let s = [2.0, -1.0, 0.5];
        let ie = [4.0, 0.1, -1.0];
        let v = gradient_sparsify(&s, &ie, 0.0).unwrap();
        assert_eq!(v.values, vec![2.0, 0.0, 0.0]);
        assert_eq!(matched_k(&s, &ie, &[0.0]).unwrap(), vec![2]);
        let all = gradient_sparsify(&s, &ie, f64::NEG_INFINITY).unwrap();
        assert_eq!(all.values, s.to_vec());
        let flat = gradient_sparsify(&s, &[0.0; 3], 0.0).unwrap();
        assert_eq!(flat.zeroed(), 0);
    }

    #[test]
    fn zero_dims_always_dropped_by_gradient() {
        let v = gradient_sparsify(&[0.0, 1.0], &[5.0, 1.0], f64::NEG_INFINITY).unwrap();
        assert_eq!(v.keep, vec![false, true]);
    }

    #[test]
    fn hand_rankings() {
        assert_eq!(ie_sparsify(&[1.0; 3], &[3.0, -1.0, 2.0], 1).unwrap().values, vec![1.0, 0.0, 1.0]);
        assert_eq!(bottomk_sparsify(&[3.0, -0.1, 2.0], 1).unwrap().values, vec![3.0, 0.0, 2.0]);
        assert_eq!(ie_sparsify(&[1.0, 2.0], &[1.0, 1.0], 0).unwrap().values, vec![1.0, 2.0]);
        assert_eq!(ie_sparsify(&[1.0, 2.0], &[1.0, 1.0], 2).unwrap().values, vec![0.0, 0.0]);
        assert!(bottomk_sparsify(&[1.0], 2).is_err());
    }

    #[test]
    fn dropout_is_seeded() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        let a = dropout_sparsify(&s, 7, 11).unwrap();
        assert_eq!(a, dropout_sparsify(&s, 7, 11).unwrap());
        assert_eq!(a.zeroed(), 7);
    }

    #[test]
    fn iou_hand_counts() {
        let mk = |sup: &[usize]| {
            let keep: Vec<bool> = (0..5).map(|i| sup.contains(&i)).collect();
            SparsifiedVector::from_mask(&[1.0; 5], keep, SparseMethod::Gradient, 0.0, None)
        };
        assert_eq!(iou(&mk(&[0, 1, 2]), &mk(&[1, 2, 3])).unwrap(), 0.5);
        assert_eq!(iou(&mk(&[0, 1]), &mk(&[3, 4])).unwrap(), 0.0);
        assert_eq!(iou(&mk(&[2]), &mk(&[2])).unwrap(), 1.0);
        assert!(iou(&mk(&[]), &mk(&[])).is_err());
    }

    #[test]
    fn hypergeom_hand_value() {
        let p = hypergeom_pvalue(10, 4, 5, 3).unwrap();
        assert!((p - 66.0 / 252.0).abs() < 1e-14);
        assert_eq!(hypergeom_pvalue_exact(10, 4, 5, 3).unwrap(), (66, 252));
        assert_eq!(hypergeom_pvalue(10, 4, 5, 0).unwrap(), 1.0);
        assert!(hypergeom_pvalue(10, 4, 5, 5).is_err());
    }
}
