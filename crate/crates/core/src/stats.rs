//! Inferential machinery: blocked permutation tests, Wilcoxon signed-rank,
//! Benjamini-Hochberg FDR, percentile bootstrap and Moran's I.
//!
//! Permutation p-values use the add-one convention
//! p = (1 + #{perm >= observed}) / (1 + n_perm), so the attainable floor is
//! 1/(n_perm+1) (0.0005 at 1999 permutations).

use crate::error::{ForgeError, Result};
use crate::linalg::knn_from_distances;
use crate::metrics::midranks;
use crate::rng::stream;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

/// One-sided blocked permutation test. `stat_for_perm` receives a
/// permutation `perm` (item i takes the label of item `perm[i]`) that only
/// shuffles positions within blocks, and returns the recomputed statistic.
/// Larger statistics count as more extreme.
pub fn blocked_permutation_p<F>(
    observed: f64,
    mut stat_for_perm: F,
    blocks: &[usize],
    n_perm: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let n = blocks.len();
    if n_perm == 0 {
        return Err(ForgeError::InvalidArgument("n_perm must be >= 1".into()));
    }
    let distinct_blocks = {
        let mut b: Vec<usize> = blocks.to_vec();
        b.sort_unstable();
        b.dedup();
        b.len()
    };
    let max_block = {
        let mut counts = std::collections::HashMap::new();
        for &b in blocks {
            *counts.entry(b).or_insert(0usize) += 1;
        }
        counts.values().copied().max().unwrap_or(0)
    };
    if !(distinct_blocks >= 2 || max_block >= 2) {
        return Err(ForgeError::InvalidArgument(
            "need at least 2 blocks or a block with 2+ items".into(),
        ));
    }
    if !observed.is_finite() {
        return Err(ForgeError::NumericalError(
            "observed statistic is not finite".into(),
        ));
    }
    // group item positions by block once
    let mut by_block: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &b) in blocks.iter().enumerate() {
        by_block.entry(b).or_default().push(i);
    }
    let mut hits = 0usize;
    let mut perm: Vec<usize> = (0..n).collect();
    for rep in 0..n_perm {
        let mut rng = stream(seed, "blocked-perm", rep as u64);
        for members in by_block.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            for (slot, &src) in members.iter().zip(&shuffled) {
                perm[*slot] = src;
            }
        }
        let s = stat_for_perm(&perm)?;
        if !s.is_finite() {
            return Err(ForgeError::NumericalError(format!(
                "permutation {rep} produced a non-finite statistic"
            )));
        }
        if s >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_perm) as f64)
}

/// Wilcoxon signed-rank result.
#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    /// Sum of midranks of positive differences (W+).
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Pairs remaining after Pratt exclusion of zeros.
    pub n_used: usize,
    pub exact: bool,
}

const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired differences. Zeros are
/// dropped; midranks handle ties; the null distribution is exact (sign-flip
/// enumeration via dynamic programming) for n <= 25 and a tie-corrected
/// normal approximation with continuity correction beyond.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(ForgeError::UndefinedTest(
            "all paired differences are zero".into(),
        ));
    }
    let n = nonzero.len();
    if n < 5 {
        return Err(ForgeError::InsufficientData(format!(
            "only {n} nonzero differences; need at least 5"
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| r)
        .sum();

    if n <= WILCOXON_EXACT_MAX {
        // doubled ranks are integers even with midrank ties
        let dr: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
        let total: usize = dr.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &dr {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let denom = 2.0f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let cdf: f64 = counts[..=w2].iter().sum::<f64>() / denom;
        let sf: f64 = counts[w2..].iter().sum::<f64>() / denom;
        let p = (2.0 * cdf.min(sf)).min(1.0);
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_two_sided: p,
            n_used: n,
            exact: true,
        })
    } else {
        let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
        let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let sd = var.sqrt();
        if sd <= 0.0 {
            return Err(ForgeError::UndefinedTest("zero rank variance".into()));
        }
        // continuity correction toward the mean
        let z = if w_plus > mean {
            (w_plus - 0.5 - mean) / sd
        } else if w_plus < mean {
            (w_plus + 0.5 - mean) / sd
        } else {
            0.0
        };
        let p = libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_two_sided: p,
            n_used: n,
            exact: false,
        })
    }
}

/// Benjamini-Hochberg step-up q-values, returned in input order.
pub fn bh_fdr(pvals: &[f64]) -> Result<Vec<f64>> {
    if pvals.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ForgeError::InvalidArgument(
            "p-values must lie in [0,1]".into(),
        ));
    }
    let m = pvals.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut q_sorted = vec![0.0; m];
    let mut running = 1.0f64;
    for i in (0..m).rev() {
        let rank = i + 1;
        let raw = pvals[order[i]] * m as f64 / rank as f64;
        running = running.min(raw);
        q_sorted[i] = running.min(1.0);
    }
    let mut out = vec![0.0; m];
    for (i, &idx) in order.iter().enumerate() {
        out[idx] = q_sorted[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapCi {
    /// Statistic evaluated on the full sample.
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap. Resampling draws index multisets from a generator
/// keyed on (seed, n, n_boot) against a sorted copy of the input, so results
/// do not depend on input ordering for symmetric statistics.
pub fn bootstrap_ci<F>(
    values: &[f64],
    statistic: F,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&[f64]) -> f64,
{
    let n = values.len();
    if n < 2 {
        return Err(ForgeError::InvalidArgument(
            "bootstrap needs at least 2 values".into(),
        ));
    }
    if n_boot == 0 || !(0.0..1.0).contains(&level) {
        return Err(ForgeError::InvalidArgument(
            "n_boot must be >= 1 and level in (0,1)".into(),
        ));
    }
    let mut canonical = values.to_vec();
    canonical.sort_by(|a, b| a.total_cmp(b));
    let key = (n as u64) << 32 | n_boot as u64;
    let mut rng = stream(seed, "bootstrap", key);
    let mut stats = Vec::with_capacity(n_boot);
    let mut sample = vec![0.0; n];
    for _ in 0..n_boot {
        for slot in sample.iter_mut() {
            *slot = canonical[rng.gen_range(0..n)];
        }
        stats.push(statistic(&sample));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        mean: statistic(values),
        lo: quantile_sorted(&stats, alpha),
        hi: quantile_sorted(&stats, 1.0 - alpha),
    })
}

/// Linear-interpolation quantile of an already-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[derive(Debug, Clone, Copy)]
pub struct MoransI {
    pub i: f64,
    pub p: f64,
}

/// Moran's I with row-standardized kNN spatial weights and an ordinary
/// (unblocked) permutation p-value, one-sided for positive autocorrelation.
pub fn morans_i(
    values: &[f64],
    coords: &DMatrix<f64>,
    n_neighbors: usize,
    n_perm: usize,
    seed: u64,
) -> Result<MoransI> {
    let n = values.len();
    if coords.nrows() != n {
        return Err(ForgeError::ShapeError("coords/values length mismatch".into()));
    }
    if n < 10 {
        return Err(ForgeError::InvalidArgument(
            "Moran's I needs at least 10 points".into(),
        ));
    }
    let k = n_neighbors.clamp(1, n - 1);
    let d = crate::linalg::pairwise_distances(coords);
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| knn_from_distances(&d, i, k)).collect();
    let w = 1.0 / k as f64;
    let s0 = n as f64; // each row sums to 1

    let statistic = |v: &[f64]| -> Result<f64> {
        let mean = v.iter().sum::<f64>() / n as f64;
        let denom: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
        if denom <= 0.0 {
            return Err(ForgeError::UndefinedMetric("zero variance".into()));
        }
        let mut num = 0.0;
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                num += w * (v[i] - mean) * (v[j] - mean);
            }
        }
        Ok((n as f64 / s0) * num / denom)
    };

    let observed = statistic(values)?;
    let mut hits = 0usize;
    let mut shuffled = values.to_vec();
    for rep in 0..n_perm {
        let mut rng = stream(seed, "morans-i", rep as u64);
        shuffled.copy_from_slice(values);
        shuffled.shuffle(&mut rng);
        if statistic(&shuffled)? >= observed {
            hits += 1;
        }
    }
    Ok(MoransI {
        i: observed,
        p: (1 + hits) as f64 / (1 + n_perm) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::spearman;

    #[test]
    fn permutation_floor_matches_add_one_convention() {
        // observed beats every permuted statistic
        let n = 12;
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let blocks = vec![0usize; n];
        let observed = 1.0;
        let p = blocked_permutation_p(
            observed,
            |perm| {
                let permuted: Vec<f64> = perm.iter().map(|&j| base[j]).collect();
                spearman(&permuted, &base)
            },
            &blocks,
            1999,
            42,
        )
        .unwrap();
        assert_eq!(p, 1.0 / 2000.0);
        assert_eq!(p, 0.0005);
    }

    #[test]
    fn null_statistic_gives_uniform_p() {
        let n = 20;
        let mut mean_p = 0.0;
        for seed in 0..100u64 {
            let mut rng = stream(seed, "null-p", 0);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let blocks = vec![0usize; n];
            let observed = spearman(&a, &b).unwrap();
            let p = blocked_permutation_p(
                observed,
                |perm| {
                    let permuted: Vec<f64> = perm.iter().map(|&j| a[j]).collect();
                    spearman(&permuted, &b)
                },
                &blocks,
                99,
                seed,
            )
            .unwrap();
            mean_p += p;
        }
        mean_p /= 100.0;
        assert!((0.4..=0.6).contains(&mean_p), "mean p = {mean_p}");
    }

    #[test]
    fn singleton_blocks_cannot_shuffle() {
        let n = 8;
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let blocks: Vec<usize> = (0..n).collect();
        let p = blocked_permutation_p(
            1.0,
            |perm| {
                let permuted: Vec<f64> = perm.iter().map(|&j| a[j]).collect();
                spearman(&permuted, &a)
            },
            &blocks,
            199,
            7,
        )
        .unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn permutation_p_within_bounds() {
        for n_perm in [1usize, 9, 99] {
            let a = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
            let blocks = [0usize, 0, 0, 1, 1, 1];
            let p = blocked_permutation_p(
                0.0,
                |perm| {
                    let permuted: Vec<f64> = perm.iter().map(|&j| a[j]).collect();
                    Ok(permuted[0])
                },
                &blocks,
                n_perm,
                1,
            )
            .unwrap();
            assert!(p >= 1.0 / (n_perm as f64 + 1.0) && p <= 1.0);
        }
    }

    #[test]
    fn wilcoxon_all_negative_extreme() {
        let diffs: Vec<f64> = (1..=10).map(|i| -(i as f64)).collect();
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_two_sided - 2.0 / 1024.0).abs() < 1e-15);
        assert!(r.exact);
    }

    #[test]
    fn wilcoxon_symmetric_pairs_center_the_statistic() {
        let diffs = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn wilcoxon_matches_exhaustive_enumeration() {
        // brute-force oracle: enumerate all 2^n sign assignments
        let oracle = |diffs: &[f64]| -> (f64, f64) {
            let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
            let n = nonzero.len();
            let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
            let ranks = midranks(&abs);
            let w_obs: f64 = ranks
                .iter()
                .zip(&nonzero)
                .filter(|(_, &d)| d > 0.0)
                .map(|(r, _)| r)
                .sum();
            let mut le = 0usize;
            let mut ge = 0usize;
            for mask in 0u32..(1 << n) {
                let w: f64 = (0..n)
                    .filter(|&i| mask >> i & 1 == 1)
                    .map(|i| ranks[i])
                    .sum();
                if w <= w_obs + 1e-12 {
                    le += 1;
                }
                if w >= w_obs - 1e-12 {
                    ge += 1;
                }
            }
            let total = (1u64 << n) as f64;
            let p = (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0);
            (w_obs, p)
        };

        for seed in 0..12u64 {
            let mut rng = stream(seed, "wilcoxon-oracle", 0);
            let n = rng.gen_range(5..=12);
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    // small integer grid forces plenty of rank ties
                    let v = rng.gen_range(-4i32..=4) as f64;
                    if v == 0.0 {
                        1.0
                    } else {
                        v
                    }
                })
                .collect();
            let r = wilcoxon_signed_rank(&diffs).unwrap();
            let (w_want, p_want) = oracle(&diffs);
            assert!((r.statistic - w_want).abs() < 1e-12, "seed {seed}");
            assert!(
                (r.p_two_sided - p_want).abs() < 1e-12,
                "seed {seed}: {} vs {}",
                r.p_two_sided,
                p_want
            );
        }
    }

    #[test]
    fn wilcoxon_scale_invariance() {
        let diffs = [3.0, -1.0, 4.0, -1.0, 5.0, 9.0, -2.0, 6.0];
        let a = wilcoxon_signed_rank(&diffs).unwrap();
        let scaled: Vec<f64> = diffs.iter().map(|d| d * 137.0).collect();
        let b = wilcoxon_signed_rank(&scaled).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_two_sided, b.p_two_sided);
    }

    #[test]
    fn wilcoxon_all_zero_rejected() {
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0; 8]),
            Err(ForgeError::UndefinedTest(_))
        ));
    }

    #[test]
    fn wilcoxon_normal_approximation_branch() {
        let mut rng = stream(3, "wilcoxon-large", 0);
        let diffs: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.5)).collect();
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        assert!(!r.exact);
        assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
    }

    #[test]
    fn bh_fdr_edge_cases_and_hand_example() {
        assert_eq!(bh_fdr(&[0.37]).unwrap(), vec![0.37]);
        let equal = bh_fdr(&[0.2, 0.2, 0.2]).unwrap();
        for q in equal {
            assert!((q - 0.2).abs() < 1e-15);
        }
        let q = bh_fdr(&[0.01, 0.04, 0.03, 0.005]).unwrap();
        let want = [0.02, 0.04, 0.04, 0.02];
        for (a, b) in q.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{q:?}");
        }
    }

    #[test]
    fn bh_fdr_is_monotone() {
        for seed in 0..20u64 {
            let mut rng = stream(seed, "bh", 0);
            let m = rng.gen_range(2..30);
            let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let q = bh_fdr(&p).unwrap();
            for i in 0..m {
                for j in 0..m {
                    if p[i] <= p[j] {
                        assert!(q[i] <= q[j] + 1e-15);
                    }
                }
                assert!((0.0..=1.0).contains(&q[i]));
            }
        }
    }

    #[test]
    fn bootstrap_constant_vector() {
        let v = [2.5; 10];
        let ci = bootstrap_ci(&v, |x| x.iter().sum::<f64>() / x.len() as f64, 200, 0.95, 1).unwrap();
        assert_eq!(ci.mean, 2.5);
        assert_eq!(ci.lo, 2.5);
        assert_eq!(ci.hi, 2.5);
    }

    #[test]
    fn bootstrap_ci_width_matches_clt() {
        let mut rng = stream(5, "boot-clt", 0);
        let n = 200;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let ci = bootstrap_ci(&values, mean, 2000, 0.95, 7).unwrap();
        let sigma = (values.iter().map(|v| (v - ci.mean) * (v - ci.mean)).sum::<f64>()
            / (n - 1) as f64)
            .sqrt();
        let analytic = 2.0 * 1.96 * sigma / (n as f64).sqrt();
        let width = ci.hi - ci.lo;
        assert!(
            (width - analytic).abs() <= 0.2 * analytic,
            "width {width} vs analytic {analytic}"
        );
        assert!(ci.lo <= ci.mean && ci.mean <= ci.hi);
    }

    #[test]
    fn bootstrap_is_order_invariant() {
        let values = [5.0, 1.0, 4.0, 2.0, 3.0, 9.0, 0.5, 7.0];
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let a = bootstrap_ci(&values, mean, 500, 0.9, 3).unwrap();
        let mut rev = values;
        rev.reverse();
        let b = bootstrap_ci(&rev, mean, 500, 0.9, 3).unwrap();
        assert_eq!(a.lo, b.lo);
        assert_eq!(a.hi, b.hi);
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn morans_i_detects_planted_gradient() {
        let n = 64;
        let coords = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                (i % 8) as f64
            } else {
                (i / 8) as f64
            }
        });
        let values: Vec<f64> = (0..n).map(|i| (i % 8) as f64 + (i / 8) as f64).collect();
        let r = morans_i(&values, &coords, 4, 199, 11).unwrap();
        assert!(r.i > 0.0);
        assert!(r.p <= 0.01);
    }

    #[test]
    fn morans_i_null_mean() {
        let n = 30;
        let coords = {
            let mut rng = stream(21, "moran-coords", 0);
            DMatrix::from_fn(n, 2, |_, _| rng.gen_range(0.0..10.0))
        };
        let mut sum_i = 0.0;
        let reps = 300;
        for seed in 0..reps {
            let mut rng = stream(seed as u64, "moran-null", 1);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            sum_i += morans_i(&values, &coords, 5, 1, seed as u64).unwrap().i;
        }
        let mean_i = sum_i / reps as f64;
        let expect = -1.0 / (n as f64 - 1.0);
        assert!(
            (mean_i - expect).abs() < 0.03,
            "mean I {mean_i} vs null mean {expect}"
        );
    }

    #[test]
    fn morans_i_constant_values_undefined() {
        let coords = DMatrix::from_fn(12, 2, |i, j| (i * 2 + j) as f64);
        assert!(matches!(
            morans_i(&[1.0; 12], &coords, 3, 9, 1),
            Err(ForgeError::UndefinedMetric(_))
        ));
    }
}
