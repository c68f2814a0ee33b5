//! Erasure-based fairness-utility trade-off evaluation: zero out the
//! top-E features of a ranking in both matrices, re-rank the frozen model
//! over each user's test candidates, and report utility (F1, NDCG) and
//! fairness (long-tail rate, KL) per cutoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{kl_at_k, long_tail_rate};
use crate::ingest::{DatasetSplit, GroupAssignment};
use crate::matrices::{erase_features, FeatureMatrices};
use crate::ranker::{evaluate_ranking, top_k, RankerModel};

/// Metrics at one cutoff, all as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffMetrics {
    pub k: usize,
    pub f1: f64,
    pub ndcg: f64,
    /// Long-tail rate, percent.
    pub ltr: f64,
    /// KL divergence between slate and catalog group distributions,
    /// percent.
    pub kl: f64,
}

/// One point of a trade-off curve: a method with its top `erased`
/// features removed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: String,
    pub erased: usize,
    pub metrics: Vec<TradeoffMetrics>,
}

/// Erase the top `erased` features of `ranking`, re-rank the test pools,
/// and measure every cutoff in `k_list`.
#[allow(clippy::too_many_arguments)]
pub fn erase_and_eval(
    model: &RankerModel,
    mats: &FeatureMatrices,
    ranking: &[usize],
    erased: usize,
    split: &DatasetSplit,
    groups: &GroupAssignment,
    k_list: &[usize],
    method: &str,
) -> Result<TradeoffPoint> {
    if erased > ranking.len() {
        return Err(Error::data(format!(
            "cannot erase {erased} features from a ranking of {}",
            ranking.len()
        )));
    }
    if k_list.is_empty() {
        return Err(Error::data("k_list must not be empty"));
    }
    let erased_mats = erase_features(mats, &ranking[..erased])?;

    let m = split.num_users();
    let users: Vec<usize> = (0..m).collect();
    let candidates: Vec<Vec<usize>> = (0..m).map(|u| split.test_candidates(u)).collect();
    let max_k = *k_list.iter().max().unwrap();
    let slate = top_k(model, &erased_mats, &users, &candidates, max_k);

    let ranking_metrics = evaluate_ranking(&slate, split, k_list)?;
    let mut metrics = Vec::with_capacity(k_list.len());
    for rm in ranking_metrics {
        let truncated = slate.truncated(rm.k);
        metrics.push(TradeoffMetrics {
            k: rm.k,
            f1: rm.f1,
            ndcg: rm.ndcg,
            ltr: 100.0 * long_tail_rate(&truncated, groups)?,
            kl: 100.0 * kl_at_k(&truncated, groups)?,
        });
    }
    Ok(TradeoffPoint {
        method: method.to_string(),
        erased,
        metrics,
    })
}

/// Evaluate cumulative prefixes of `ranking` at `E = 0, step, 2*step, ...
/// <= max_e`.
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_curve(
    model: &RankerModel,
    mats: &FeatureMatrices,
    ranking: &[usize],
    step: usize,
    max_e: usize,
    split: &DatasetSplit,
    groups: &GroupAssignment,
    k_list: &[usize],
    method: &str,
) -> Result<Vec<TradeoffPoint>> {
    if step == 0 {
        return Err(Error::data("step must be >= 1"));
    }
    let mut points = Vec::new();
    let mut e = 0;
    while e <= max_e {
        points.push(erase_and_eval(
            model, mats, ranking, e, split, groups, k_list, method,
        )?);
        e += step;
    }
    Ok(points)
}

/// Format with 4 significant figures (plain decimal notation).
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 {
        return "0.000".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// CSV serialization: `method,E,K,f1,ndcg,ltr,kl`, one row per
/// (point, cutoff).
pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("method,E,K,f1,ndcg,ltr,kl\n");
    for p in points {
        for m in &p.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.method,
                p.erased,
                m.k,
                format_sig4(m.f1),
                format_sig4(m.ndcg),
                format_sig4(m.ltr),
                format_sig4(m.kl),
            ));
        }
    }
    out
}

/// Plot data at one cutoff: `method,E,ltr,ndcg` (x = long-tail rate,
/// y = NDCG).
pub fn curve_plot_csv(points: &[TradeoffPoint], k: usize) -> Result<String> {
    let mut out = String::from("method,E,ltr,ndcg\n");
    for p in points {
        let m = p
            .metrics
            .iter()
            .find(|m| m.k == k)
            .ok_or_else(|| Error::data(format!("no metrics at K = {k}")))?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.method,
            p.erased,
            format_sig4(m.ltr),
            format_sig4(m.ndcg),
        ));
    }
    Ok(out)
}
