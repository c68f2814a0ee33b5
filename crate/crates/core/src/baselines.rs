//! Baseline feature rankings: random, popularity (nonzero counts),
//! column averages, and Shapley attribution of the exposure disparity.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{disparity, exposure, DisparitySpec};
use crate::ingest::{DatasetSplit, GroupAssignment};
use crate::matrices::{erase_features, FeatureMatrices};
use crate::ranker::{top_k, RankerModel};

/// Which matrix a column statistic is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixSide {
    User,
    Item,
}

/// A full ordering of the feature space with the scores that produced it
/// (scores are non-increasing along the ranking).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRanking {
    pub method: String,
    pub ranked_features: Vec<usize>,
    pub scores: Vec<f64>,
}

fn ranking_from_scores(method: &str, scores: Vec<f64>) -> BaselineRanking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sorted_scores = order.iter().map(|&f| scores[f]).collect();
    BaselineRanking {
        method: method.to_string(),
        ranked_features: order,
        scores: sorted_scores,
    }
}

/// Uniform random permutation of the features; scores are descending
/// ranks so the ranking invariant holds.
pub fn random_ranking(r: usize, seed: u64) -> BaselineRanking {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..r).collect();
    order.shuffle(&mut rng);
    let scores = (0..r).map(|i| (r - 1 - i) as f64).collect();
    BaselineRanking {
        method: "random".to_string(),
        ranked_features: order,
        scores,
    }
}

/// Rank features by how many users (or items) mention them: the count of
/// nonzero entries in each column.
pub fn popularity_ranking(mats: &FeatureMatrices, side: MatrixSide) -> BaselineRanking {
    let matrix = match side {
        MatrixSide::User => &mats.a,
        MatrixSide::Item => &mats.b,
    };
    let scores: Vec<f64> = (0..matrix.ncols())
        .map(|f| matrix.column(f).iter().filter(|&&x| x != 0.0).count() as f64)
        .collect();
    let name = match side {
        MatrixSide::User => "pop-user",
        MatrixSide::Item => "pop-item",
    };
    ranking_from_scores(name, scores)
}

/// Rank features by their column mean (zeros included) on the chosen
/// side.
pub fn efm_average_ranking(mats: &FeatureMatrices, side: MatrixSide) -> BaselineRanking {
    let matrix = match side {
        MatrixSide::User => &mats.a,
        MatrixSide::Item => &mats.b,
    };
    let rows = matrix.nrows() as f64;
    let scores: Vec<f64> = (0..matrix.ncols())
        .map(|f| matrix.column(f).sum() / rows)
        .collect();
    let name = match side {
        MatrixSide::User => "efm-user",
        MatrixSide::Item => "efm-item",
    };
    ranking_from_scores(name, scores)
}

/// Maximum feature count supported by the u128 coalition masks.
pub const MAX_SHAPLEY_FEATURES: usize = 128;

/// Caching evaluator of the coalition characteristic function.
///
/// The value of a coalition `S` is `-|Ψ_DP|` of the slates produced after
/// erasing every feature NOT in `S` (higher is fairer). Coalition values
/// are memoized by bitmask, so repeated marginals are cheap.
pub struct ShapleyEvaluator<'a> {
    model: &'a RankerModel,
    mats: &'a FeatureMatrices,
    groups: &'a GroupAssignment,
    users: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    k: usize,
    r: usize,
    cache: HashMap<u128, f64>,
}

impl<'a> ShapleyEvaluator<'a> {
    pub fn new(
        model: &'a RankerModel,
        mats: &'a FeatureMatrices,
        groups: &'a GroupAssignment,
        split: &DatasetSplit,
        k: usize,
    ) -> Result<Self> {
        let r = mats.num_features();
        if r > MAX_SHAPLEY_FEATURES {
            return Err(Error::data(format!(
                "shapley attribution supports at most {MAX_SHAPLEY_FEATURES} features, got {r}"
            )));
        }
        let m = split.num_users();
        Ok(ShapleyEvaluator {
            model,
            mats,
            groups,
            users: (0..m).collect(),
            candidates: (0..m).map(|u| split.test_candidates(u)).collect(),
            k,
            r,
            cache: HashMap::new(),
        })
    }

    pub fn num_features(&self) -> usize {
        self.r
    }

    /// `v(S)` for the coalition given as a bitmask of included features.
    pub fn characteristic(&mut self, included: u128) -> Result<f64> {
        if let Some(&v) = self.cache.get(&included) {
            return Ok(v);
        }
        let erase: Vec<usize> = (0..self.r)
            .filter(|f| included & (1u128 << f) == 0)
            .collect();
        let mats_cf = erase_features(self.mats, &erase)?;
        let slate = top_k(self.model, &mats_cf, &self.users, &self.candidates, self.k);
        let e = exposure(&slate, self.groups)?;
        let value = -disparity(&e, self.groups, &DisparitySpec::Dp).abs();
        self.cache.insert(included, value);
        Ok(value)
    }

    /// The estimator core: the mean over the supplied coalitions (subsets
    /// of `F \ {feature}`) of the importance-weighted marginal
    /// `kernel(|S|) * 2^(r-1) * [v(S ∪ {feature}) - v(S)]`.
    ///
    /// Under uniform coalition draws this is an unbiased estimate of the
    /// Shapley value; enumerating all `2^(r-1)` subsets instead of
    /// sampling recovers the exact value.
    pub fn estimate_from_coalitions(&mut self, feature: usize, masks: &[u128]) -> Result<f64> {
        if masks.is_empty() {
            return Err(Error::data("at least one coalition required"));
        }
        let lf = ln_factorials(self.r);
        let scale = ((self.r - 1) as f64) * std::f64::consts::LN_2;
        let mut total = 0.0;
        for &mask in masks {
            if mask & (1u128 << feature) != 0 {
                return Err(Error::data("coalition must exclude the target feature"));
            }
            let size = mask.count_ones() as usize;
            let weight = (lf[size] + lf[self.r - 1 - size] - lf[self.r] + scale).exp();
            let with = self.characteristic(mask | (1u128 << feature))?;
            let without = self.characteristic(mask)?;
            total += weight * (with - without);
        }
        Ok(total / masks.len() as f64)
    }

    /// Exact Shapley value by full enumeration (guarded to small feature
    /// spaces).
    pub fn exact_value(&mut self, feature: usize) -> Result<f64> {
        if self.r > 12 {
            return Err(Error::data(format!(
                "exact shapley limited to 12 features, got {}",
                self.r
            )));
        }
        let factorials: Vec<f64> = {
            let mut t = vec![1.0];
            for i in 1..=self.r {
                t.push(t[i - 1] * i as f64);
            }
            t
        };
        let others: Vec<usize> = (0..self.r).filter(|&g| g != feature).collect();
        let mut value = 0.0;
        for bits in 0u64..(1 << others.len()) {
            let mut mask = 0u128;
            for (j, &g) in others.iter().enumerate() {
                if bits & (1 << j) != 0 {
                    mask |= 1u128 << g;
                }
            }
            let size = mask.count_ones() as usize;
            let weight =
                factorials[size] * factorials[self.r - 1 - size] / factorials[self.r];
            let with = self.characteristic(mask | (1u128 << feature))?;
            let without = self.characteristic(mask)?;
            value += weight * (with - without);
        }
        Ok(value)
    }

    /// Every subset of `F \ {feature}` as a mask, for enumeration
    /// substitution in tests and diagnostics.
    pub fn enumerate_coalitions(&self, feature: usize) -> Vec<u128> {
        let others: Vec<usize> = (0..self.r).filter(|&g| g != feature).collect();
        (0u64..(1 << others.len()))
            .map(|bits| {
                let mut mask = 0u128;
                for (j, &g) in others.iter().enumerate() {
                    if bits & (1 << j) != 0 {
                        mask |= 1u128 << g;
                    }
                }
                mask
            })
            .collect()
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for i in 2..=n {
        t[i] = t[i - 1] + (i as f64).ln();
    }
    t
}

/// Rank features by (estimated or exact) Shapley attribution of the
/// demographic-parity disparity over the test candidate slates.
#[allow(clippy::too_many_arguments)]
pub fn shapley_ranking(
    model: &RankerModel,
    mats: &FeatureMatrices,
    groups: &GroupAssignment,
    split: &DatasetSplit,
    k: usize,
    samples: usize,
    seed: u64,
    exact: bool,
) -> Result<BaselineRanking> {
    if samples == 0 {
        return Err(Error::data("samples must be >= 1"));
    }
    let mut eval = ShapleyEvaluator::new(model, mats, groups, split, k)?;
    let r = eval.num_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut scores = Vec::with_capacity(r);
    for f in 0..r {
        let phi = if exact {
            eval.exact_value(f)?
        } else {
            let masks: Vec<u128> = (0..samples)
                .map(|_| {
                    let mut mask = 0u128;
                    for g in 0..r {
                        if g != f && rng.gen::<bool>() {
                            mask |= 1u128 << g;
                        }
                    }
                    mask
                })
                .collect();
            eval.estimate_from_coalitions(f, &masks)?
        };
        scores.push(phi);
    }
    Ok(ranking_from_scores("shapley", scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrices::build_matrices;
    use crate::ranker::{init_model_with_hidden, MergeKind};
    use crate::synth::{synth_generate, SynthConfig};
    use ndarray::Array2;

    #[test]
    fn random_ranking_basics() {
        let single = random_ranking(1, 0);
        assert_eq!(single.ranked_features, vec![0]);
        let a = random_ranking(10, 42);
        let b = random_ranking(10, 42);
        assert_eq!(a.ranked_features, b.ranked_features);
        let c = random_ranking(10, 43);
        assert_ne!(a.ranked_features, c.ranked_features);
        let mut sorted = a.ranked_features.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn random_ranking_mean_rank_is_uniform() {
        // Over many seeds each feature's mean rank approaches (r-1)/2.
        let r = 7;
        let trials = 10_000;
        let mut rank_sums = vec![0.0f64; r];
        for seed in 0..trials {
            let ranking = random_ranking(r, seed);
            for (rank, &f) in ranking.ranked_features.iter().enumerate() {
                rank_sums[f] += rank as f64;
            }
        }
        let expected = (r - 1) as f64 / 2.0;
        let var = ((r * r - 1) as f64) / 12.0;
        let sigma = (var / trials as f64).sqrt();
        for (f, sum) in rank_sums.iter().enumerate() {
            let mean = sum / trials as f64;
            assert!(
                (mean - expected).abs() < 3.0 * sigma,
                "feature {f}: mean rank {mean}, expected {expected} ± {}",
                3.0 * sigma
            );
        }
    }

    fn fixture_mats() -> FeatureMatrices {
        // 4 users x 3 features, 3 items x 3 features.
        let a = Array2::from_shape_vec(
            (4, 3),
            vec![
                2.0, 0.0, 1.5, //
                3.0, 0.0, 0.0, //
                0.0, 0.0, 4.0, //
                1.0, 2.0, 0.0,
            ],
        )
        .unwrap();
        let b = Array2::from_shape_vec(
            (3, 3),
            vec![
                0.0, 3.0, 1.0, //
                2.0, 3.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        FeatureMatrices {
            a,
            b,
            rating_scale: 5.0,
        }
    }

    #[test]
    fn popularity_matches_nonzero_counter() {
        let mats = fixture_mats();
        let ranking = popularity_ranking(&mats, MatrixSide::User);
        // Independent nested-loop counter.
        let mut counts = vec![0usize; 3];
        for u in 0..4 {
            for f in 0..3 {
                if mats.a[[u, f]] != 0.0 {
                    counts[f] += 1;
                }
            }
        }
        assert_eq!(counts, vec![3, 1, 2]);
        assert_eq!(ranking.ranked_features, vec![0, 2, 1]);
        assert_eq!(ranking.scores, vec![3.0, 2.0, 1.0]);

        let item_side = popularity_ranking(&mats, MatrixSide::Item);
        // counts: f0 -> 1, f1 -> 2, f2 -> 1; tie between f0 and f2 breaks
        // by index.
        assert_eq!(item_side.ranked_features, vec![1, 0, 2]);
    }

    #[test]
    fn popularity_zero_column_ranks_last() {
        let mut mats = fixture_mats();
        mats.a.column_mut(1).fill(0.0);
        let ranking = popularity_ranking(&mats, MatrixSide::User);
        assert_eq!(*ranking.ranked_features.last().unwrap(), 1);
        assert_eq!(*ranking.scores.last().unwrap(), 0.0);
    }

    #[test]
    fn efm_average_matches_column_means() {
        let mats = fixture_mats();
        let ranking = efm_average_ranking(&mats, MatrixSide::User);
        // Independent column means, zeros included.
        let means = [
            (2.0 + 3.0 + 0.0 + 1.0) / 4.0,
            (0.0 + 0.0 + 0.0 + 2.0) / 4.0,
            (1.5 + 0.0 + 4.0 + 0.0) / 4.0,
        ];
        assert_eq!(ranking.ranked_features, vec![0, 2, 1]);
        assert!((ranking.scores[0] - means[0]).abs() < 1e-15);
        assert!((ranking.scores[1] - means[2]).abs() < 1e-15);
        assert!((ranking.scores[2] - means[1]).abs() < 1e-15);
    }

    #[test]
    fn efm_constant_column_scores_its_value() {
        let mut mats = fixture_mats();
        mats.b.column_mut(2).fill(2.5);
        let ranking = efm_average_ranking(&mats, MatrixSide::Item);
        let pos = ranking
            .ranked_features
            .iter()
            .position(|&f| f == 2)
            .unwrap();
        assert!((ranking.scores[pos] - 2.5).abs() < 1e-15);
    }

    fn shapley_fixture(
        r: usize,
        seed: u64,
    ) -> (
        RankerModel,
        FeatureMatrices,
        GroupAssignment,
        DatasetSplit,
    ) {
        let cfg = SynthConfig::new(6, 40, r, vec![0], 3.0, seed);
        let ds = synth_generate(&cfg).unwrap();
        let split =
            crate::ingest::chronological_split(&ds.interactions, &ds.catalog, 3, 8, seed).unwrap();
        let groups = crate::ingest::assign_groups(&split.train, &ds.catalog, 0.2).unwrap();
        let mats = build_matrices(&ds.quadruples, &ds.catalog, 5.0).unwrap();
        let model = init_model_with_hidden(MergeKind::Product, r, r, &[8, 4], seed);
        (model, mats, groups, split)
    }

    #[test]
    fn shapley_single_feature_is_grand_marginal() {
        let (model, mats, groups, split) = shapley_fixture(2, 5);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        let masks = eval.enumerate_coalitions(0);
        let phi = eval.estimate_from_coalitions(0, &masks).unwrap();
        let exact = eval.exact_value(0).unwrap();
        assert!((phi - exact).abs() < 1e-12);

        // True r = 1 case: phi_0 = v({0}) - v(empty).
        let single = crate::matrices::erase_features(&mats, &[1]).unwrap();
        let single = FeatureMatrices {
            a: single.a.slice(ndarray::s![.., ..1]).to_owned(),
            b: single.b.slice(ndarray::s![.., ..1]).to_owned(),
            rating_scale: 5.0,
        };
        let model1 = init_model_with_hidden(MergeKind::Product, 1, 1, &[4], 5);
        let mut eval1 = ShapleyEvaluator::new(&model1, &single, &groups, &split, 2).unwrap();
        let phi0 = eval1.exact_value(0).unwrap();
        let v_full = eval1.characteristic(1).unwrap();
        let v_empty = eval1.characteristic(0).unwrap();
        assert!((phi0 - (v_full - v_empty)).abs() < 1e-12);
    }

    #[test]
    fn shapley_identical_columns_get_identical_values() {
        // Symmetry needs the features to be interchangeable in the whole
        // game, so the fusion weights are cloned along with the columns.
        let (mut model, mut mats, groups, split) = shapley_fixture(4, 6);
        let a0 = mats.a.column(0).to_owned();
        let b0 = mats.b.column(0).to_owned();
        mats.a.column_mut(3).assign(&a0);
        mats.b.column_mut(3).assign(&b0);
        let wu0 = model.w_user.column(0).to_owned();
        let wv0 = model.w_item.column(0).to_owned();
        model.w_user.column_mut(3).assign(&wu0);
        model.w_item.column_mut(3).assign(&wv0);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        let phi_a = eval.exact_value(0).unwrap();
        let phi_b = eval.exact_value(3).unwrap();
        // The coalition sums accumulate in different orders, so agreement
        // is up to rounding, not bitwise.
        assert!(
            (phi_a - phi_b).abs() <= 1e-12 * phi_a.abs().max(1.0),
            "symmetric features must tie: {phi_a} vs {phi_b}"
        );
    }

    #[test]
    fn sampled_estimator_with_enumeration_equals_exact() {
        let (model, mats, groups, split) = shapley_fixture(4, 7);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        for f in 0..4 {
            let masks = eval.enumerate_coalitions(f);
            let estimated = eval.estimate_from_coalitions(f, &masks).unwrap();
            let exact = eval.exact_value(f).unwrap();
            assert!(
                (estimated - exact).abs() < 1e-9,
                "feature {f}: enumerated estimate {estimated} vs exact {exact}"
            );
        }
    }

    #[test]
    fn efficiency_axiom_holds_exactly() {
        let (model, mats, groups, split) = shapley_fixture(5, 8);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        let total: f64 = (0..5).map(|f| eval.exact_value(f).unwrap()).sum();
        let full = eval.characteristic((1u128 << 5) - 1).unwrap();
        let empty = eval.characteristic(0).unwrap();
        assert!(
            (total - (full - empty)).abs() < 1e-9,
            "sum {total} vs v(F) - v(0) = {}",
            full - empty
        );
    }

    #[test]
    fn dummy_feature_has_zero_value() {
        let (model, mut mats, groups, split) = shapley_fixture(4, 9);
        mats.a.column_mut(2).fill(0.0);
        mats.b.column_mut(2).fill(0.0);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        assert_eq!(eval.exact_value(2).unwrap(), 0.0);
    }

    #[test]
    fn shapley_ranking_is_deterministic() {
        let (model, mats, groups, split) = shapley_fixture(4, 10);
        let a = shapley_ranking(&model, &mats, &groups, &split, 2, 20, 3, false).unwrap();
        let b = shapley_ranking(&model, &mats, &groups, &split, 2, 20, 3, false).unwrap();
        assert_eq!(a.ranked_features, b.ranked_features);
        assert_eq!(a.scores, b.scores);
        for w in a.scores.windows(2) {
            assert!(w[0] >= w[1], "scores must be non-increasing");
        }
    }

    #[test]
    fn exact_mode_rejects_large_feature_spaces() {
        let (model, mats, groups, split) = shapley_fixture(13, 11);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        assert!(eval.exact_value(0).is_err());
    }

    #[test]
    fn characteristic_is_nonpositive() {
        let (model, mats, groups, split) = shapley_fixture(3, 12);
        let mut eval = ShapleyEvaluator::new(&model, &mats, &groups, &split, 2).unwrap();
        for mask in 0u128..8 {
            assert!(eval.characteristic(mask).unwrap() <= 0.0);
        }
    }
}
