//! Mini-batch SGD training of the ranker on implicit feedback with
//! sampled negatives and a binary cross-entropy loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::ingest::DatasetSplit;
use crate::matrices::FeatureMatrices;
use crate::ranker::{ParamGrads, RankerModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fresh uniform never-trained-on items sampled per positive per
    /// epoch.
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 256,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

/// Numerically stable binary cross-entropy evaluated at the output logit.
pub fn bce_from_logit(logit: f64, label: f64) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - label * logit
}

/// d(bce)/d(logit) = sigmoid(logit) - label.
pub fn bce_grad_logit(logit: f64, label: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp()) - label
}

/// Mean cross-entropy of the model over `(user, item, label)` samples.
pub fn batch_loss(
    model: &RankerModel,
    mats: &FeatureMatrices,
    samples: &[(usize, usize, f64)],
) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|&(u, v, y)| {
            let cache = model.forward(&mats.a.row(u).to_owned(), &mats.b.row(v).to_owned());
            bce_from_logit(cache.logit, y)
        })
        .sum();
    total / samples.len() as f64
}

fn sgd_step(model: &mut RankerModel, grads: &ParamGrads, lr: f64) {
    model.w_user.scaled_add(-lr, &grads.w_user);
    model.w_item.scaled_add(-lr, &grads.w_item);
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        layer.w.scaled_add(-lr, &g.w);
        layer.b.scaled_add(-lr, &g.b);
    }
}

/// Train the model in place. Returns the mean per-sample loss of each
/// epoch. Aborts with a numeric error if the loss stops being finite.
pub fn train(
    model: &mut RankerModel,
    mats: &FeatureMatrices,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if cfg.learning_rate <= 0.0 {
        return Err(Error::data("learning rate must be positive"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::data("epochs and batch_size must be at least 1"));
    }
    let n = mats.num_items();
    let positives: Vec<(usize, usize)> = split.train.iter().map(|&(u, v, _)| (u, v)).collect();
    if positives.is_empty() {
        return Err(Error::data("no training interactions"));
    }
    for &(u, v) in &positives {
        if u >= mats.num_users() || v >= n {
            return Err(Error::data("split and matrices use different catalogs"));
        }
    }

    let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); mats.num_users()];
    for &(u, v) in &positives {
        seen[u].insert(v);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..positives.len()).collect();
        order.shuffle(&mut rng);

        let mut samples: Vec<(usize, usize, f64)> =
            Vec::with_capacity(positives.len() * (1 + cfg.negatives_per_positive));
        for &idx in &order {
            let (u, v) = positives[idx];
            samples.push((u, v, 1.0));
            for _ in 0..cfg.negatives_per_positive {
                let neg = loop {
                    let cand = rng.gen_range(0..n);
                    if !seen[u].contains(&cand) {
                        break cand;
                    }
                };
                samples.push((u, neg, 0.0));
            }
        }

        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(model);
            for &(u, v, y) in chunk {
                let cache =
                    model.forward(&mats.a.row(u).to_owned(), &mats.b.row(v).to_owned());
                epoch_loss += bce_from_logit(cache.logit, y);
                model.accumulate_param_grads(&cache, bce_grad_logit(cache.logit, y), &mut grads);
            }
            grads.scale(1.0 / chunk.len() as f64);
            sgd_step(model, &grads, cfg.learning_rate);
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::numeric(format!(
                "loss became non-finite in epoch {epoch}"
            )));
        }
        trace.push(mean_loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::build_matrices;
    use crate::ranker::{init_model_with_hidden, MergeKind};
    use crate::synth::{synth_generate, SynthConfig};
    use ndarray::{array, Array2};

    #[test]
    fn single_pair_loss_at_half_is_ln_two() {
        assert!((bce_from_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_from_logit(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_at_logit() {
        let eps = 1e-6;
        for &(z, y) in &[(0.0, 1.0), (1.3, 0.0), (-2.4, 1.0), (5.0, 0.0), (0.37, 1.0)] {
            let numeric = (bce_from_logit(z + eps, y) - bce_from_logit(z - eps, y)) / (2.0 * eps);
            let analytic = bce_grad_logit(z, y);
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(
                (numeric - analytic).abs() / denom < 1e-6,
                "z = {z}, y = {y}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn batch_loss_on_forced_half_score() {
        // A zero item vector under product merge forces logit through the
        // bias path; with all-zero biases the logit is 0 and the score 0.5.
        let model = init_model_with_hidden(MergeKind::Product, 2, 2, &[4], 0);
        let mats = FeatureMatrices {
            a: Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap(),
            b: Array2::zeros((1, 2)),
            rating_scale: 5.0,
        };
        let loss = batch_loss(&model, &mats, &[(0, 0, 1.0)]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn tiny_dataset(seed: u64) -> (FeatureMatrices, DatasetSplit) {
        let cfg = SynthConfig::new(15, 40, 6, vec![0], 2.0, seed);
        let ds = synth_generate(&cfg).unwrap();
        let split = crate::ingest::chronological_split(&ds.interactions, &ds.catalog, 5, 20, seed)
            .unwrap();
        let mats = build_matrices(&ds.quadruples, &ds.catalog, 5.0).unwrap();
        (mats, split)
    }

    #[test]
    fn fixed_batch_loss_decreases_over_first_epoch() {
        for seed in 0..5 {
            let (mats, split) = tiny_dataset(seed);
            let mut model = init_model_with_hidden(MergeKind::Product, 6, 6, &[16, 8], seed);
            // Fixed probe batch: the train positives plus deterministic
            // negatives.
            let mut probe: Vec<(usize, usize, f64)> = Vec::new();
            for &(u, v, _) in &split.train {
                probe.push((u, v, 1.0));
                probe.push((u, (v + 17) % 40, 0.0));
            }
            let before = batch_loss(&model, &mats, &probe);
            let cfg = TrainConfig {
                learning_rate: 0.01,
                epochs: 1,
                batch_size: 32,
                negatives_per_positive: 1,
                seed,
            };
            train(&mut model, &mats, &split, &cfg).unwrap();
            let after = batch_loss(&model, &mats, &probe);
            assert!(
                after < before,
                "seed {seed}: loss {before} -> {after} did not decrease"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (mats, split) = tiny_dataset(3);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut m1 = init_model_with_hidden(MergeKind::Concat, 6, 6, &[8], 1);
        let mut m2 = m1.clone();
        let t1 = train(&mut m1, &mats, &split, &cfg).unwrap();
        let t2 = train(&mut m2, &mats, &split, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Small instance, every coordinate checked via central
        // differences of the mean batch loss.
        let c = crate::ingest::Catalog::new(
            vec!["u0".into(), "u1".into()],
            vec!["i0".into(), "i1".into(), "i2".into()],
            vec!["f0".into(), "f1".into(), "f2".into()],
        )
        .unwrap();
        let quads = vec![
            crate::ingest::SentimentQuadruple {
                user: "u0".into(),
                item: "i0".into(),
                feature: "f0".into(),
                sentiment: 1,
            },
            crate::ingest::SentimentQuadruple {
                user: "u1".into(),
                item: "i1".into(),
                feature: "f1".into(),
                sentiment: -1,
            },
            crate::ingest::SentimentQuadruple {
                user: "u0".into(),
                item: "i2".into(),
                feature: "f2".into(),
                sentiment: 1,
            },
        ];
        let mats = build_matrices(&quads, &c, 5.0).unwrap();
        let samples = vec![(0, 0, 1.0), (0, 1, 0.0), (1, 1, 1.0), (1, 2, 0.0)];

        for merge in [MergeKind::Product, MergeKind::Concat] {
            let model = init_model_with_hidden(merge, 3, 3, &[5, 3], 11);
            let mut grads = ParamGrads::zeros_like(&model);
            for &(u, v, y) in &samples {
                let cache =
                    model.forward(&mats.a.row(u).to_owned(), &mats.b.row(v).to_owned());
                model.accumulate_param_grads(&cache, bce_grad_logit(cache.logit, y), &mut grads);
            }
            grads.scale(1.0 / samples.len() as f64);
            let analytic = grads.flatten();

            let eps = 1e-5;
            let base = model.flatten_params();
            let mut numeric = vec![0.0; base.len()];
            for i in 0..base.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let mut pp = base.clone();
                pp[i] += eps;
                plus.assign_params(&pp).unwrap();
                let mut pm = base.clone();
                pm[i] -= eps;
                minus.assign_params(&pm).unwrap();
                numeric[i] =
                    (batch_loss(&plus, &mats, &samples) - batch_loss(&minus, &mats, &samples))
                        / (2.0 * eps);
            }
            for (i, (&g, &nu)) in analytic.iter().zip(&numeric).enumerate() {
                let denom = g.abs().max(nu.abs()).max(1e-8);
                assert!(
                    (g - nu).abs() / denom < 1e-4,
                    "{merge:?} param {i}: analytic {g}, numeric {nu}"
                );
            }
        }
    }
}
