//! Counterfactual feature-level fairness explanations.
//!
//! For each feature, an additive intervention on that feature's column(s)
//! is optimized with Adam against the squared relaxed disparity plus an
//! L2 perturbation penalty. Slate membership is held fixed within each
//! step and recomputed between steps; gradients flow only through the
//! model scores. Each feature is then scored by validity (indicator
//! exposure-gap reduction), proximity (squared intervention norm), and
//! the explainability score `validity - beta * proximity`.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::fairness::{exposure, relaxed_disparity_from_scores, DisparitySpec};
use crate::ingest::{DatasetSplit, GroupAssignment};
use crate::matrices::{apply_delta, DeltaIntervention, FeatureMatrices};
use crate::ranker::{top_k, RankerModel, Slate};

/// Which side of the feature column the intervention may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSide {
    User,
    Item,
    Both,
}

/// Which candidate pool slates are recomputed over during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    /// Each user's held-out positives plus sampled negatives.
    TestCandidates,
    /// Every item in the catalog.
    FullCatalog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CefConfig {
    /// Weight of the perturbation penalty.
    pub lambda: f64,
    /// Weight of proximity in the explainability score.
    pub beta: f64,
    /// Slate length.
    pub k: usize,
    pub disparity: DisparitySpec,
    pub target: TargetSide,
    /// Adam learning rate.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Early exit when the relative loss change falls below this.
    pub rel_tol: f64,
    pub candidate_scope: CandidateScope,
    pub seed: u64,
}

impl Default for CefConfig {
    fn default() -> Self {
        CefConfig {
            lambda: 1.0,
            beta: 0.5,
            k: 5,
            disparity: DisparitySpec::Dp,
            target: TargetSide::Both,
            learning_rate: 0.01,
            max_iters: 500,
            rel_tol: 1e-6,
            candidate_scope: CandidateScope::TestCandidates,
            seed: 0,
        }
    }
}

impl CefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::data("lambda must be >= 0"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::data("beta must be in (0, 1)"));
        }
        if self.k == 0 || self.max_iters == 0 {
            return Err(Error::data("k and max_iters must be >= 1"));
        }
        self.disparity.validate()
    }
}

/// Everything a per-feature optimization reads (all shared, immutable).
pub struct ExplainContext<'a> {
    pub model: &'a RankerModel,
    pub mats: &'a FeatureMatrices,
    pub groups: &'a GroupAssignment,
    pub users: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

impl<'a> ExplainContext<'a> {
    pub fn new(
        model: &'a RankerModel,
        mats: &'a FeatureMatrices,
        groups: &'a GroupAssignment,
        split: &DatasetSplit,
        scope: CandidateScope,
    ) -> Self {
        let m = split.num_users();
        let users: Vec<usize> = (0..m).collect();
        let candidates: Vec<Vec<usize>> = match scope {
            CandidateScope::TestCandidates => {
                (0..m).map(|u| split.test_candidates(u)).collect()
            }
            CandidateScope::FullCatalog => {
                let all: Vec<usize> = (0..mats.num_items()).collect();
                (0..m).map(|_| all.clone()).collect()
            }
        };
        ExplainContext {
            model,
            mats,
            groups,
            users,
            candidates,
        }
    }
}

fn zero_delta(feature: usize, target: TargetSide, m: usize, n: usize) -> DeltaIntervention {
    DeltaIntervention {
        feature,
        delta_user: matches!(target, TargetSide::User | TargetSide::Both)
            .then(|| Array1::zeros(m)),
        delta_item: matches!(target, TargetSide::Item | TargetSide::Both)
            .then(|| Array1::zeros(n)),
    }
}

/// Frozen-membership objective: `psi^2 + lambda * |delta|_2` where `psi`
/// is the relaxed disparity of `mats_cf` over the fixed `slate`.
pub fn frozen_objective(
    model: &RankerModel,
    mats_cf: &FeatureMatrices,
    slate: &Slate,
    groups: &GroupAssignment,
    spec: &DisparitySpec,
    lambda: f64,
    delta: &DeltaIntervention,
) -> Result<f64> {
    let rd = crate::fairness::relaxed_disparity(model, mats_cf, slate, groups, spec)?;
    Ok(rd.value * rd.value + lambda * delta.norm())
}

/// Frozen-membership objective and its gradient with respect to the
/// intervention. The gradient of `|delta|_2` at zero is taken to be zero.
pub fn frozen_objective_grad(
    model: &RankerModel,
    mats_cf: &FeatureMatrices,
    slate: &Slate,
    groups: &GroupAssignment,
    spec: &DisparitySpec,
    lambda: f64,
    delta: &DeltaIntervention,
) -> Result<(f64, DeltaIntervention)> {
    let f = delta.feature;

    // Forward over the slate pairs, keeping activations for backprop.
    let mut caches = Vec::with_capacity(slate.users.len());
    let mut scores = Vec::with_capacity(slate.users.len());
    for (&u, list) in slate.users.iter().zip(&slate.lists) {
        let a_row = mats_cf.a.row(u).to_owned();
        let mut row_caches = Vec::with_capacity(list.len());
        let mut row_scores = Vec::with_capacity(list.len());
        for &v in list {
            let cache = model.forward(&a_row, &mats_cf.b.row(v).to_owned());
            row_scores.push(cache.score);
            row_caches.push(cache);
        }
        caches.push(row_caches);
        scores.push(row_scores);
    }

    let rd = relaxed_disparity_from_scores(slate, &scores, groups, spec)?;
    let loss = rd.value * rd.value + lambda * delta.norm();

    let mut grad = DeltaIntervention {
        feature: f,
        delta_user: delta.delta_user.as_ref().map(|d| Array1::zeros(d.len())),
        delta_item: delta.delta_item.as_ref().map(|d| Array1::zeros(d.len())),
    };

    for ((&u, list), row_caches) in slate.users.iter().zip(&slate.lists).zip(&caches) {
        for (&v, cache) in list.iter().zip(row_caches) {
            let group = self_group(groups, v)?;
            let d_score = 2.0 * rd.value * rd.score_grad(group);
            let d_logit = d_score * cache.score * (1.0 - cache.score);
            let (da, db) = model.input_grads(cache, d_logit);
            if let Some(gu) = grad.delta_user.as_mut() {
                gu[u] += da[f];
            }
            if let Some(gv) = grad.delta_item.as_mut() {
                gv[v] += db[f];
            }
        }
    }

    let norm = delta.norm();
    if norm > 0.0 {
        if let (Some(g), Some(d)) = (grad.delta_user.as_mut(), delta.delta_user.as_ref()) {
            g.scaled_add(lambda / norm, d);
        }
        if let (Some(g), Some(d)) = (grad.delta_item.as_mut(), delta.delta_item.as_ref()) {
            g.scaled_add(lambda / norm, d);
        }
    }
    Ok((loss, grad))
}

fn self_group(groups: &GroupAssignment, item: usize) -> Result<crate::ingest::Group> {
    groups
        .group(item)
        .ok_or_else(|| Error::data(format!("item {item} has no group assignment")))
}

fn flatten_delta(delta: &DeltaIntervention) -> Vec<f64> {
    let mut flat = Vec::new();
    if let Some(d) = &delta.delta_user {
        flat.extend(d.iter().copied());
    }
    if let Some(d) = &delta.delta_item {
        flat.extend(d.iter().copied());
    }
    flat
}

fn assign_delta(delta: &mut DeltaIntervention, flat: &[f64]) {
    let mut offset = 0;
    if let Some(d) = delta.delta_user.as_mut() {
        for x in d.iter_mut() {
            *x = flat[offset];
            offset += 1;
        }
    }
    if let Some(d) = delta.delta_item.as_mut() {
        for x in d.iter_mut() {
            *x = flat[offset];
            offset += 1;
        }
    }
    debug_assert_eq!(offset, flat.len());
}

/// Result of one per-feature optimization.
#[derive(Debug, Clone)]
pub struct OptimizedDelta {
    pub delta: DeltaIntervention,
    /// Loss at the zero intervention (iteration 0).
    pub initial_objective: f64,
    /// Best loss seen along the trajectory (the returned delta's loss).
    pub final_objective: f64,
    pub iters_used: usize,
}

/// Optimize the intervention for one feature. The returned delta is the
/// best-loss iterate, not necessarily the last one.
pub fn optimize_delta(
    ctx: &ExplainContext,
    feature: usize,
    cfg: &CefConfig,
) -> Result<OptimizedDelta> {
    cfg.validate()?;
    let (m, n, r) = (
        ctx.mats.num_users(),
        ctx.mats.num_items(),
        ctx.mats.num_features(),
    );
    if feature >= r {
        return Err(Error::data(format!("feature {feature} out of range")));
    }

    let mut delta = zero_delta(feature, cfg.target, m, n);
    let dim = flatten_delta(&delta).len();
    let mut adam = Adam::new(cfg.learning_rate, dim);

    let mut best_loss = f64::INFINITY;
    let mut best_delta = delta.clone();
    let mut initial = None;
    let mut prev_loss: Option<f64> = None;
    let mut iters = 0;

    for _ in 0..cfg.max_iters {
        iters += 1;
        let mats_cf = apply_delta(ctx.mats, &delta)?;
        let slate = top_k(ctx.model, &mats_cf, &ctx.users, &ctx.candidates, cfg.k);
        let (loss, grad) = frozen_objective_grad(
            ctx.model,
            &mats_cf,
            &slate,
            ctx.groups,
            &cfg.disparity,
            cfg.lambda,
            &delta,
        )?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "optimization diverged on feature {feature}"
            )));
        }
        if initial.is_none() {
            initial = Some(loss);
        }
        if loss < best_loss {
            debug_assert!(loss < best_loss);
            best_loss = loss;
            best_delta = delta.clone();
        }
        if let Some(prev) = prev_loss {
            if (loss - prev).abs() < cfg.rel_tol * prev.abs().max(1e-12) {
                break;
            }
        }
        prev_loss = Some(loss);

        let mut flat = flatten_delta(&delta);
        let flat_grad = flatten_delta(&grad);
        adam.step(&mut flat, &flat_grad);
        assign_delta(&mut delta, &flat);
    }

    Ok(OptimizedDelta {
        delta: best_delta,
        initial_objective: initial.unwrap_or(f64::INFINITY),
        final_objective: best_loss,
        iters_used: iters,
    })
}

/// Normalized reduction of the indicator exposure gap caused by the
/// intervention: `[(E0 - E1) - (E0_cf - E1_cf)] / (m * K)`.
pub fn validity(
    slate_original: &Slate,
    slate_cf: &Slate,
    groups: &GroupAssignment,
    m: usize,
    k: usize,
) -> Result<f64> {
    if slate_original.users != slate_cf.users {
        return Err(Error::data("slates cover different users"));
    }
    let before = exposure(slate_original, groups)?;
    let after = exposure(slate_cf, groups)?;
    let gap_before = before.g0 as f64 - before.g1 as f64;
    let gap_after = after.g0 as f64 - after.g1 as f64;
    Ok((gap_before - gap_after) / (m as f64 * k as f64))
}

/// Squared L2 norm of the intervention.
pub fn proximity(delta: &DeltaIntervention) -> f64 {
    delta.squared_norm()
}

/// `validity - beta * proximity`; larger is a better explanation.
pub fn explainability_score(validity: f64, proximity: f64, beta: f64) -> f64 {
    validity - beta * proximity
}

/// Scores of one feature as a fairness explanation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExplanation {
    pub feature: usize,
    pub validity: f64,
    pub proximity: f64,
    pub es: f64,
    pub final_objective: f64,
    pub iters_used: usize,
}

/// Output of [`explain_all`]: explanations sorted by explainability
/// score (descending, ties by feature index), plus any per-feature
/// optimization failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub explanations: Vec<FeatureExplanation>,
    pub failures: Vec<(usize, String)>,
    /// Beta echoed so reports are self-describing.
    pub beta: f64,
}

impl ExplainReport {
    /// Features ordered best explanation first.
    pub fn ranked_features(&self) -> Vec<usize> {
        self.explanations.iter().map(|e| e.feature).collect()
    }
}

/// Explain every feature: independent per-feature optimizations (run in
/// parallel), scored against the shared unperturbed slates.
pub fn explain_all(
    model: &RankerModel,
    mats: &FeatureMatrices,
    groups: &GroupAssignment,
    split: &DatasetSplit,
    cfg: &CefConfig,
) -> Result<ExplainReport> {
    cfg.validate()?;
    let ctx = ExplainContext::new(model, mats, groups, split, cfg.candidate_scope);
    let base_slate = top_k(model, mats, &ctx.users, &ctx.candidates, cfg.k);
    let m = ctx.users.len();

    let results: Vec<(usize, Result<FeatureExplanation>)> = (0..mats.num_features())
        .into_par_iter()
        .map(|f| {
            let result = optimize_delta(&ctx, f, cfg).and_then(|opt| {
                let mats_cf = apply_delta(ctx.mats, &opt.delta)?;
                let slate_cf = top_k(ctx.model, &mats_cf, &ctx.users, &ctx.candidates, cfg.k);
                let validity = validity(&base_slate, &slate_cf, ctx.groups, m, cfg.k)?;
                let proximity = proximity(&opt.delta);
                Ok(FeatureExplanation {
                    feature: f,
                    validity,
                    proximity,
                    es: explainability_score(validity, proximity, cfg.beta),
                    final_objective: opt.final_objective,
                    iters_used: opt.iters_used,
                })
            });
            (f, result)
        })
        .collect();

    let mut explanations = Vec::new();
    let mut failures = Vec::new();
    for (f, result) in results {
        match result {
            Ok(e) => explanations.push(e),
            Err(err) => failures.push((f, err.to_string())),
        }
    }
    explanations.sort_by(|a, b| b.es.total_cmp(&a.es).then(a.feature.cmp(&b.feature)));

    Ok(ExplainReport {
        explanations,
        failures,
        beta: cfg.beta,
    })
}
