//! Expert attribution: exact Shapley values of the fused logit margin with
//! the E expert logit pairs as players.
//!
//! A coalition S is evaluated by giving the experts in S the explained
//! sample's logits and every other expert a background sample's logits, then
//! averaging the fused margin over the background set. With E ≤ 7 all 2^E
//! coalitions are enumerated, so the values are exact.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diff::ParamStore;
use crate::moe::{BiMoe, ExpertBundle, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("nothing to {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

const MAX_PLAYERS: usize = 16;

/// Exact Shapley values of `value` at `x` relative to `background`.
///
/// `value` maps one feature per player to a scalar. Each background row must
/// have as many features as `x`.
pub fn exact_shapley<T: Clone>(
    mut value: impl FnMut(&[T]) -> Result<f64, ExplainError>,
    x: &[T],
    background: &[Vec<T>],
) -> Result<Vec<f64>, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let e = x.len();
    if e == 0 || e > MAX_PLAYERS {
        return Err(ExplainError::Invalid(format!(
            "{e} players (expected 1..={MAX_PLAYERS})"
        )));
    }
    if let Some(b) = background.iter().find(|b| b.len() != e) {
        return Err(ExplainError::Invalid(format!(
            "background row has {} features, sample {e}",
            b.len()
        )));
    }
    let mut v = vec![0.0; 1 << e];
    let mut mixed = x.to_vec();
    for (mask, slot) in v.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in background {
            for i in 0..e {
                mixed[i] = if mask >> i & 1 == 1 { x[i].clone() } else { b[i].clone() };
            }
            acc += value(&mixed)?;
        }
        *slot = acc / background.len() as f64;
    }
    // weight[s] = s!(E−s−1)!/E!
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    let weight: Vec<f64> = (0..e).map(|s| fact(s) * fact(e - s - 1) / fact(e)).collect();
    Ok((0..e)
        .map(|i| {
            let bit = 1 << i;
            (0..1usize << e)
                .filter(|m| m & bit == 0)
                .map(|m| weight[m.count_ones() as usize] * (v[m | bit] - v[m]))
                .sum()
        })
        .collect())
}

/// Clips to the nearest-rank `fraction` and `1 − fraction` percentiles.
/// Returns the clipped values and the `(low, high)` bounds.
pub fn winsorize(values: &[f64], fraction: f64) -> Result<(Vec<f64>, (f64, f64)), ExplainError> {
    if values.is_empty() {
        return Err(ExplainError::Empty("winsorize"));
    }
    if !(0.0..0.5).contains(&fraction) || values.iter().any(|v| v.is_nan()) {
        return Err(ExplainError::Invalid(format!(
            "fraction {fraction} outside [0, 0.5) or NaN input"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = |p: f64| ((p * n as f64).ceil() as usize).clamp(1, n);
    let lo = sorted[rank(fraction) - 1];
    let hi = sorted[rank(1.0 - fraction) - 1];
    Ok((values.iter().map(|v| v.clamp(lo, hi)).collect(), (lo, hi)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub sample_id: usize,
    pub shapley: Vec<f64>,
    /// Fused margin of the sample itself.
    pub output: f64,
    /// Mean fused margin over the background set.
    pub base_value: f64,
    /// Per-expert logit margins, winsorized across samples.
    pub expert_margins: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub expert: String,
    pub mean_abs: f64,
    /// 1 = largest mean |φ|.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub experts: Vec<String>,
    pub background_size: usize,
    pub winsor_fraction: f64,
    /// Per-expert `(low, high)` clipping bounds of the exported margins.
    pub winsor_bounds: Vec<(f64, f64)>,
    pub samples: Vec<SampleAttribution>,
    pub summary: Vec<ExpertSummary>,
}

fn margin(y: [f64; 2]) -> f64 {
    y[1] - y[0]
}

/// Attributes each test bundle's fused margin to the experts.
pub fn attribute(
    model: &BiMoe,
    store: &ParamStore,
    test: &[ExpertBundle],
    background: &[ExpertBundle],
    winsor_fraction: f64,
) -> Result<AttributionReport, ExplainError> {
    if test.is_empty() {
        return Err(ExplainError::Empty("attribute"));
    }
    let bg: Vec<Vec<[f64; 2]>> = background.iter().map(|b| b.expert_logits.clone()).collect();
    let head = |l: &[[f64; 2]]| Ok(margin(model.fusion_head(store, l)?));
    let mut samples = Vec::with_capacity(test.len());
    for (sample_id, b) in test.iter().enumerate() {
        let shapley = exact_shapley(head, &b.expert_logits, &bg)?;
        let mut base = 0.0;
        for row in &bg {
            base += head(row)?;
        }
        samples.push(SampleAttribution {
            sample_id,
            shapley,
            output: head(&b.expert_logits)?,
            base_value: base / bg.len() as f64,
            expert_margins: b.expert_logits.iter().map(|&l| margin(l)).collect(),
        });
    }
    let experts: Vec<String> = model.expert_names().iter().map(|s| s.to_string()).collect();
    let mut winsor_bounds = Vec::with_capacity(experts.len());
    for k in 0..experts.len() {
        let col: Vec<f64> = samples.iter().map(|s| s.expert_margins[k]).collect();
        let (clipped, bounds) = winsorize(&col, winsor_fraction)?;
        for (s, v) in samples.iter_mut().zip(clipped) {
            s.expert_margins[k] = v;
        }
        winsor_bounds.push(bounds);
    }
    let summary = summarize(&experts, &samples);
    Ok(AttributionReport {
        experts,
        background_size: background.len(),
        winsor_fraction,
        winsor_bounds,
        samples,
        summary,
    })
}

fn summarize(experts: &[String], samples: &[SampleAttribution]) -> Vec<ExpertSummary> {
    let n = samples.len() as f64;
    let means: Vec<f64> = (0..experts.len())
        .map(|k| samples.iter().map(|s| s.shapley[k].abs()).sum::<f64>() / n)
        .collect();
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut out: Vec<ExpertSummary> = experts
        .iter()
        .zip(&means)
        .map(|(e, &m)| ExpertSummary {
            expert: e.clone(),
            mean_abs: m,
            rank: 0,
        })
        .collect();
    for (r, &k) in order.iter().enumerate() {
        out[k].rank = r + 1;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttributionRow {
    pub expert_name: String,
    pub sample_id: usize,
    pub shapley_value: f64,
    pub expert_logit_margin: f64,
}

/// One CSV row per (sample, expert), experts in model order.
pub fn summary_export<W: Write>(report: &AttributionReport, out: W) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(out);
    for s in &report.samples {
        for (k, name) in report.experts.iter().enumerate() {
            w.serialize(AttributionRow {
                expert_name: name.clone(),
                sample_id: s.sample_id,
                shapley_value: s.shapley[k],
                expert_logit_margin: s.expert_margins[k],
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
