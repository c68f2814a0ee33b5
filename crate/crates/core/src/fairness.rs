//! Item-exposure fairness: exposure counting, demographic-parity and
//! exact-K disparity, their differentiable relaxation, and the
//! evaluation-side KL@K and long-tail rate metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Group, GroupAssignment};
use crate::matrices::FeatureMatrices;
use crate::ranker::{RankerModel, Slate};

/// Which disparity is being measured or optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DisparitySpec {
    /// Demographic parity: equal average exposure per item across groups.
    Dp,
    /// Exact-K: the exposure ratio between groups targets `alpha`.
    Ek { alpha: f64 },
}

impl DisparitySpec {
    pub fn validate(&self) -> Result<()> {
        if let DisparitySpec::Ek { alpha } = self {
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(Error::data(format!("alpha must be in (0, 1), got {alpha}")));
            }
        }
        Ok(())
    }

    /// Weight applied to long-tail exposure in the relaxed form: `alpha`
    /// for exact-K, `|G0|/|G1|` for demographic parity.
    pub fn tail_coefficient(&self, groups: &GroupAssignment) -> f64 {
        match self {
            DisparitySpec::Dp => groups.size_ratio(),
            DisparitySpec::Ek { alpha } => *alpha,
        }
    }
}

/// Exposure totals per group over a set of slates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureCount {
    pub g0: u64,
    pub g1: u64,
}

/// Count slate slots occupied by each group.
pub fn exposure(slate: &Slate, groups: &GroupAssignment) -> Result<ExposureCount> {
    let mut g0 = 0u64;
    let mut g1 = 0u64;
    for list in &slate.lists {
        for &v in list {
            match groups.group(v) {
                Some(Group::Popular) => g0 += 1,
                Some(Group::LongTail) => g1 += 1,
                None => {
                    return Err(Error::data(format!("item {v} has no group assignment")));
                }
            }
        }
    }
    Ok(ExposureCount { g0, g1 })
}

/// Signed violation of the chosen fairness equality:
/// DP: `|G1|·Exposure(G0) − |G0|·Exposure(G1)`;
/// EK: `Exposure(G0) − α·Exposure(G1)`.
pub fn disparity(
    exposures: &ExposureCount,
    groups: &GroupAssignment,
    spec: &DisparitySpec,
) -> f64 {
    match spec {
        DisparitySpec::Dp => {
            groups.g1_size as f64 * exposures.g0 as f64
                - groups.g0_size as f64 * exposures.g1 as f64
        }
        DisparitySpec::Ek { alpha } => exposures.g0 as f64 - alpha * exposures.g1 as f64,
    }
}

/// Score-relaxed disparity over fixed slates, with the per-score gradient
/// coefficients needed to differentiate through the model inputs.
///
/// With numerator weights `w = 1` (G0) or `-c` (G1) and `D` the sum of all
/// slate scores, the value is `Σ w·s / D`, and `∂Ψ̃/∂s = (w − Ψ̃)/D` for
/// the score `s` of a slate item (slate membership held fixed).
#[derive(Debug, Clone, Copy)]
pub struct RelaxedDisparity {
    pub value: f64,
    /// Sum of all slate scores (the normalizer).
    pub denom: f64,
    /// Coefficient `c` on the long-tail side.
    pub tail_coefficient: f64,
}

impl RelaxedDisparity {
    fn numerator_weight(&self, group: Group) -> f64 {
        match group {
            Group::Popular => 1.0,
            Group::LongTail => -self.tail_coefficient,
        }
    }

    /// `∂Ψ̃/∂s` for a slate item of the given group.
    pub fn score_grad(&self, group: Group) -> f64 {
        (self.numerator_weight(group) - self.value) / self.denom
    }
}

/// Relaxed disparity from precomputed per-slate-item scores (`scores[i]`
/// aligns with `slate.lists[i]`).
pub fn relaxed_disparity_from_scores(
    slate: &Slate,
    scores: &[Vec<f64>],
    groups: &GroupAssignment,
    spec: &DisparitySpec,
) -> Result<RelaxedDisparity> {
    spec.validate()?;
    let c = spec.tail_coefficient(groups);
    let mut numer = 0.0;
    let mut denom = 0.0;
    for (list, row) in slate.lists.iter().zip(scores) {
        if list.len() != row.len() {
            return Err(Error::data("score rows must align with slate lists"));
        }
        for (&v, &s) in list.iter().zip(row) {
            let w = match groups
                .group(v)
                .ok_or_else(|| Error::data(format!("item {v} has no group assignment")))?
            {
                Group::Popular => 1.0,
                Group::LongTail => -c,
            };
            numer += w * s;
            denom += s;
        }
    }
    if denom == 0.0 {
        return Err(Error::numeric("relaxed disparity has zero denominator"));
    }
    Ok(RelaxedDisparity {
        value: numer / denom,
        denom,
        tail_coefficient: c,
    })
}

/// Relaxed disparity of the given (possibly counterfactual) matrices over
/// the given slates, scoring each slate pair with the model.
pub fn relaxed_disparity(
    model: &RankerModel,
    mats: &FeatureMatrices,
    slate: &Slate,
    groups: &GroupAssignment,
    spec: &DisparitySpec,
) -> Result<RelaxedDisparity> {
    let scores: Vec<Vec<f64>> = slate
        .users
        .iter()
        .zip(&slate.lists)
        .map(|(&u, list)| {
            let fu = model.fuse_user(&mats.a.row(u).to_owned());
            list.iter()
                .map(|&v| model.score_fused(&fu, &model.fuse_item(&mats.b.row(v).to_owned())))
                .collect()
        })
        .collect();
    relaxed_disparity_from_scores(slate, &scores, groups, spec)
}

/// KL divergence between the group distribution of slate slots and the
/// group distribution of the catalog. Both distributions are smoothed
/// with eps = 1e-12 and renormalized before taking the divergence.
pub fn kl_at_k(slate: &Slate, groups: &GroupAssignment) -> Result<f64> {
    const EPS: f64 = 1e-12;
    let exposures = exposure(slate, groups)?;
    let total = (exposures.g0 + exposures.g1) as f64;
    if total == 0.0 {
        return Err(Error::data("empty slates"));
    }
    let n = groups.group_of.len() as f64;
    let d1 = [exposures.g0 as f64 / total, exposures.g1 as f64 / total];
    let d2 = [groups.g0_size as f64 / n, groups.g1_size as f64 / n];

    let smooth = |d: [f64; 2]| {
        let z = d[0] + d[1] + 2.0 * EPS;
        [(d[0] + EPS) / z, (d[1] + EPS) / z]
    };
    let p = smooth(d1);
    let q = smooth(d2);
    Ok(p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Fraction of slate slots occupied by long-tail items, in [0, 1].
pub fn long_tail_rate(slate: &Slate, groups: &GroupAssignment) -> Result<f64> {
    let exposures = exposure(slate, groups)?;
    let total = (exposures.g0 + exposures.g1) as f64;
    if total == 0.0 {
        return Err(Error::data("empty slates"));
    }
    Ok(exposures.g1 as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Group;
    use proptest::prelude::*;

    fn groups_of(pattern: &[Group]) -> GroupAssignment {
        let g0 = pattern.iter().filter(|g| **g == Group::Popular).count();
        GroupAssignment {
            group_of: pattern.to_vec(),
            g0_size: g0,
            g1_size: pattern.len() - g0,
        }
    }

    fn slate_of(lists: Vec<Vec<usize>>) -> Slate {
        let k = lists[0].len();
        let users = (0..lists.len()).collect();
        let candidates = lists.clone();
        Slate {
            k,
            users,
            lists,
            candidates,
        }
    }

    #[test]
    fn exposure_counts_single_user() {
        let groups = groups_of(&[Group::Popular, Group::LongTail]);
        let slate = slate_of(vec![vec![0, 1]]);
        let e = exposure(&slate, &groups).unwrap();
        assert_eq!(e, ExposureCount { g0: 1, g1: 1 });
    }

    #[test]
    fn exposure_all_popular() {
        let groups = groups_of(&[Group::Popular, Group::Popular, Group::LongTail]);
        let slate = slate_of(vec![vec![0, 1], vec![0, 1], vec![1, 0]]);
        let e = exposure(&slate, &groups).unwrap();
        assert_eq!(e, ExposureCount { g0: 6, g1: 0 });
    }

    #[test]
    fn exposure_matches_brute_force_recount() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let pattern: Vec<Group> = (0..n)
            .map(|_| {
                if rng.gen::<bool>() {
                    Group::Popular
                } else {
                    Group::LongTail
                }
            })
            .collect();
        let groups = groups_of(&pattern);
        let lists: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let slate = slate_of(lists.clone());
        let e = exposure(&slate, &groups).unwrap();

        // Independent nested-loop counter.
        let mut g0 = 0u64;
        let mut g1 = 0u64;
        for list in &lists {
            for &v in list {
                match pattern[v] {
                    Group::Popular => g0 += 1,
                    Group::LongTail => g1 += 1,
                }
            }
        }
        assert_eq!(e.g0, g0);
        assert_eq!(e.g1, g1);
    }

    #[test]
    fn exposure_ungrouped_item_is_error() {
        let groups = groups_of(&[Group::Popular]);
        let slate = slate_of(vec![vec![0, 3]]);
        assert!(exposure(&slate, &groups).is_err());
    }

    #[test]
    fn parity_gives_zero_dp() {
        // Exposure per item equal across groups: E0/|G0| = E1/|G1|.
        let mut pattern = vec![Group::Popular; 2];
        pattern.extend(vec![Group::LongTail; 8]);
        let groups = groups_of(&pattern);
        let e = ExposureCount { g0: 2, g1: 8 };
        assert_eq!(disparity(&e, &groups, &DisparitySpec::Dp), 0.0);
    }

    #[test]
    fn disparity_arithmetic_example() {
        let mut pattern = vec![Group::Popular; 2];
        pattern.extend(vec![Group::LongTail; 8]);
        let groups = groups_of(&pattern);
        let e = ExposureCount { g0: 6, g1: 4 };
        let dp = disparity(&e, &groups, &DisparitySpec::Dp);
        assert_eq!(dp, 40.0); // 8*6 - 2*4
        let ek = disparity(&e, &groups, &DisparitySpec::Ek { alpha: 0.25 });
        assert_eq!(ek, 5.0); // 6 - 0.25*4
        assert_eq!(dp, groups.g1_size as f64 * ek);
    }

    #[test]
    fn equal_exposures_alpha_one_is_zero() {
        let pattern = vec![Group::Popular, Group::LongTail];
        let groups = groups_of(&pattern);
        let e = ExposureCount { g0: 7, g1: 7 };
        // alpha = 1 lies outside the validated range for optimization but
        // the arithmetic form is still defined.
        assert_eq!(disparity(&e, &groups, &DisparitySpec::Ek { alpha: 1.0 }), 0.0);
    }

    #[test]
    fn relaxed_all_popular_equal_scores_is_one() {
        let groups = groups_of(&[Group::Popular, Group::Popular, Group::LongTail]);
        let slate = slate_of(vec![vec![0, 1], vec![1, 0]]);
        let scores = vec![vec![0.4, 0.4], vec![0.4, 0.4]];
        let rd = relaxed_disparity_from_scores(&slate, &scores, &groups, &DisparitySpec::Dp)
            .unwrap();
        assert!((rd.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relaxed_balanced_groups_cancel_at_unit_coefficient() {
        let groups = groups_of(&[Group::Popular, Group::LongTail]);
        let slate = slate_of(vec![vec![0, 1], vec![0, 1]]);
        let scores = vec![vec![0.3, 0.3], vec![0.5, 0.5]];
        // c = |G0|/|G1| = 1 here, so per-user balanced slates cancel.
        let rd = relaxed_disparity_from_scores(&slate, &scores, &groups, &DisparitySpec::Dp)
            .unwrap();
        assert!(rd.value.abs() < 1e-15);
    }

    #[test]
    fn relaxed_hand_computed_fixture() {
        // 2 users, K = 2, c = alpha = 0.5.
        // user0: items (G0, s=0.8), (G1, s=0.6)
        // user1: items (G0, s=0.4), (G0, s=0.2)
        // numerator = 0.8 - 0.5*0.6 + 0.4 + 0.2 = 1.1
        // denominator = 2.0 -> value 0.55
        let groups = groups_of(&[Group::Popular, Group::LongTail, Group::Popular]);
        let slate = slate_of(vec![vec![0, 1], vec![0, 2]]);
        let scores = vec![vec![0.8, 0.6], vec![0.4, 0.2]];
        let rd = relaxed_disparity_from_scores(
            &slate,
            &scores,
            &groups,
            &DisparitySpec::Ek { alpha: 0.5 },
        )
        .unwrap();
        assert!((rd.value - 0.55).abs() < 1e-12);
        assert!((rd.denom - 2.0).abs() < 1e-12);
        // Gradient coefficients.
        assert!((rd.score_grad(Group::Popular) - (1.0 - 0.55) / 2.0).abs() < 1e-12);
        assert!((rd.score_grad(Group::LongTail) - (-0.5 - 0.55) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let mut pattern = vec![Group::Popular; 2];
        pattern.extend(vec![Group::LongTail; 8]);
        let groups = groups_of(&pattern);
        // 10 slots, 2 popular + 8 long-tail = exactly the 20/80 split.
        let slate = slate_of(vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        let kl = kl_at_k(&slate, &groups).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_half_half_against_twenty_eighty() {
        let mut pattern = vec![Group::Popular; 2];
        pattern.extend(vec![Group::LongTail; 8]);
        let groups = groups_of(&pattern);
        let slate = slate_of(vec![vec![0, 2], vec![1, 3]]);
        let kl = kl_at_k(&slate, &groups).unwrap();
        let expected = 0.5 * (0.5f64 / 0.2).ln() + 0.5 * (0.5f64 / 0.8).ln();
        assert!((kl - expected).abs() < 1e-9);
        assert!((kl - 0.223144).abs() < 1e-6);
    }

    #[test]
    fn long_tail_rate_examples() {
        let groups = groups_of(&[Group::Popular, Group::LongTail]);
        let all_tail = slate_of(vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(long_tail_rate(&all_tail, &groups).unwrap(), 1.0);

        // exposures (6, 4) over 10 slots -> 0.4.
        let mixed = slate_of(vec![
            vec![0, 0, 0, 1, 1],
            vec![0, 0, 0, 1, 1],
        ]);
        assert_eq!(long_tail_rate(&mixed, &groups).unwrap(), 0.4);
    }

    #[test]
    fn long_tail_rate_matches_recount() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let pattern: Vec<Group> = (0..10)
            .map(|_| {
                if rng.gen::<f64>() < 0.3 {
                    Group::Popular
                } else {
                    Group::LongTail
                }
            })
            .collect();
        let groups = groups_of(&pattern);
        let lists: Vec<Vec<usize>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(0..10)).collect())
            .collect();
        let slate = slate_of(lists.clone());
        let got = long_tail_rate(&slate, &groups).unwrap();
        let mut tail = 0usize;
        let mut total = 0usize;
        for list in &lists {
            for &v in list {
                total += 1;
                if pattern[v] == Group::LongTail {
                    tail += 1;
                }
            }
        }
        assert!((got - tail as f64 / total as f64).abs() < 1e-15);
    }

    proptest! {
        /// Exact-K with alpha = |G0|/|G1| is DP scaled by 1/|G1|.
        #[test]
        fn dp_ek_identity(g0 in 1usize..40, g1 in 1usize..40, e0 in 0u64..5000, e1 in 0u64..5000) {
            let mut pattern = vec![Group::Popular; g0];
            pattern.extend(vec![Group::LongTail; g1]);
            let groups = groups_of(&pattern);
            let e = ExposureCount { g0: e0, g1: e1 };
            let alpha = g0 as f64 / g1 as f64;
            let ek = disparity(&e, &groups, &DisparitySpec::Ek { alpha });
            let dp = disparity(&e, &groups, &DisparitySpec::Dp);
            prop_assert!((ek * g1 as f64 - dp).abs() < 1e-9 * dp.abs().max(1.0));
        }

        /// KL is non-negative; exposure totals add up to m*K.
        #[test]
        fn kl_nonnegative_and_exposure_total(
            lists in proptest::collection::vec(proptest::collection::vec(0usize..6, 3), 1..5)
        ) {
            let pattern = vec![
                Group::Popular, Group::LongTail, Group::LongTail,
                Group::Popular, Group::LongTail, Group::LongTail,
            ];
            let groups = groups_of(&pattern);
            let slate = slate_of(lists.clone());
            let kl = kl_at_k(&slate, &groups).unwrap();
            prop_assert!(kl >= -1e-15);
            let e = exposure(&slate, &groups).unwrap();
            prop_assert_eq!(e.g0 + e.g1, (lists.len() * 3) as u64);
            let ltr = long_tail_rate(&slate, &groups).unwrap();
            let popular_rate = e.g0 as f64 / (lists.len() * 3) as f64;
            prop_assert!((ltr + popular_rate - 1.0).abs() < 1e-12);
        }

        /// Scaling every score by a positive constant leaves the relaxed
        /// disparity unchanged.
        #[test]
        fn relaxed_is_scale_invariant(
            raw in proptest::collection::vec(0.01f64..1.0, 6),
            factor in 0.1f64..50.0
        ) {
            let groups = groups_of(&[
                Group::Popular, Group::LongTail, Group::Popular,
            ]);
            let slate = slate_of(vec![vec![0, 1, 2], vec![1, 0, 2]]);
            let scores = vec![raw[..3].to_vec(), raw[3..].to_vec()];
            let scaled: Vec<Vec<f64>> = scores
                .iter()
                .map(|row| row.iter().map(|s| s * factor).collect())
                .collect();
            let a = relaxed_disparity_from_scores(&slate, &scores, &groups, &DisparitySpec::Dp)
                .unwrap();
            let b = relaxed_disparity_from_scores(&slate, &scaled, &groups, &DisparitySpec::Dp)
                .unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-9);
        }
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences() {
        // d(psi)/d(score) from coefficients vs central differencing of the
        // frozen-membership value.
        let groups = groups_of(&[Group::Popular, Group::LongTail, Group::Popular]);
        let slate = slate_of(vec![vec![0, 1], vec![2, 1]]);
        let scores = vec![vec![0.7, 0.2], vec![0.5, 0.9]];
        let spec = DisparitySpec::Dp;
        let rd = relaxed_disparity_from_scores(&slate, &scores, &groups, &spec).unwrap();
        let eps = 1e-7;
        for i in 0..2 {
            for j in 0..2 {
                let mut plus = scores.clone();
                plus[i][j] += eps;
                let mut minus = scores.clone();
                minus[i][j] -= eps;
                let vp = relaxed_disparity_from_scores(&slate, &plus, &groups, &spec)
                    .unwrap()
                    .value;
                let vm = relaxed_disparity_from_scores(&slate, &minus, &groups, &spec)
                    .unwrap()
                    .value;
                let numeric = (vp - vm) / (2.0 * eps);
                let item = slate.lists[i][j];
                let analytic = rd.score_grad(groups.group(item).unwrap());
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "({i},{j}): analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }
}
