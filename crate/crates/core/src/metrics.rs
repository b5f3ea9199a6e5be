//! Representation-quality and task metrics: trustworthiness, rank
//! correlations, AUROC, balanced accuracy, macro-F1, silhouette, eta-squared
//! and orientation summaries.
//!
//! All neighbor computations use Euclidean distance with ties broken by the
//! lower index; trustworthiness is tie-sensitive, so this is part of the
//! contract.

use crate::error::{ForgeError, Result};
use crate::linalg::{knn_from_distances, pairwise_distances};
use nalgebra::DMatrix;

/// Venna-Kaski trustworthiness of a low-dimensional embedding:
/// 1 - 2/(n*K*(2n-3K-1)) * sum_i sum_{j in U_K(i)} (rank_high(i,j) - K),
/// where U_K(i) are the K low-space neighbors of i that are not among its K
/// high-space neighbors.
pub fn trustworthiness(
    x_high: &DMatrix<f64>,
    x_low: &DMatrix<f64>,
    n_neighbors: usize,
) -> Result<f64> {
    let n = x_high.nrows();
    if x_low.nrows() != n {
        return Err(ForgeError::ShapeError(format!(
            "row mismatch: {} vs {}",
            n,
            x_low.nrows()
        )));
    }
    if n_neighbors == 0 || n_neighbors > n.saturating_sub(2) {
        return Err(ForgeError::InvalidArgument(format!(
            "n_neighbors {n_neighbors} outside 1..={}",
            n.saturating_sub(2)
        )));
    }
    let k = n_neighbors;
    let d_high = pairwise_distances(x_high);
    let d_low = pairwise_distances(x_low);

    let mut penalty = 0.0f64;
    for i in 0..n {
        // rank of every j != i in high space (1 = nearest), ties by index
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d_high[(i, a)].total_cmp(&d_high[(i, b)]).then(a.cmp(&b)));
        let mut rank_high = vec![0usize; n];
        for (pos, &j) in order.iter().enumerate() {
            rank_high[j] = pos + 1;
        }
        let high_nn: std::collections::HashSet<usize> = order[..k].iter().copied().collect();
        for &j in &knn_from_distances(&d_low, i, k) {
            if !high_nn.contains(&j) {
                penalty += (rank_high[j] - k) as f64;
            }
        }
    }
    let nf = n as f64;
    let kf = k as f64;
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}

/// Average ranks (midranks for ties), 1-based.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        sa += (x - ma) * (x - ma);
        sb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    if sa <= 0.0 || sb <= 0.0 {
        return Err(ForgeError::UndefinedCorrelation);
    }
    Ok(sab / (sa.sqrt() * sb.sqrt()))
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ForgeError::ShapeError("length mismatch".into()));
    }
    if a.len() < 3 {
        return Err(ForgeError::InvalidArgument(
            "spearman needs at least 3 observations".into(),
        ));
    }
    pearson(&midranks(a), &midranks(b))
}

/// Pearson correlation, exported for the dimension audit.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(ForgeError::ShapeError("length mismatch".into()));
    }
    pearson(a, b)
}

/// Spearman correlation after regressing pair-level confound indicators
/// (same-donor flag, same-tissue flag, intercept) out of both distance
/// vectors by OLS. Rank-deficient designs are fit via pseudo-inverse and
/// reported, not failed.
pub struct ResidualizedCorr {
    pub rho: f64,
    pub rank_deficient: bool,
}

pub fn residualized_correlation(
    pred_d: &[f64],
    target_d: &[f64],
    same_donor: &[bool],
    same_tissue: &[bool],
) -> Result<ResidualizedCorr> {
    let n = pred_d.len();
    if target_d.len() != n || same_donor.len() != n || same_tissue.len() != n {
        return Err(ForgeError::ShapeError("pair vector length mismatch".into()));
    }
    if n < 3 {
        return Err(ForgeError::InsufficientData(
            "need at least 3 pairs for residualized correlation".into(),
        ));
    }
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => {
            if same_donor[i] {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            if same_tissue[i] {
                1.0
            } else {
                0.0
            }
        }
    });
    // detect deficiency from singular values of the design
    let svd = crate::linalg::sorted_svd(&design)?;
    let smax = svd.singular_values[0];
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count();
    let pinv = crate::linalg::pseudo_inverse(&design)?;
    let residual = |y: &[f64]| -> Result<Vec<f64>> {
        let yv = nalgebra::DVector::from_column_slice(y);
        let beta = &pinv * &yv;
        let fitted = &design * beta;
        let res: Vec<f64> = (0..n).map(|i| yv[i] - fitted[i]).collect();
        // a vector fully explained by the confounds leaves only roundoff
        let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= 1e-9 * yv.norm().max(1.0) {
            return Err(ForgeError::UndefinedCorrelation);
        }
        Ok(res)
    };
    let rp = residual(pred_d)?;
    let rt = residual(target_d)?;
    Ok(ResidualizedCorr {
        rho: spearman(&rp, &rt)?,
        rank_deficient: rank < 3,
    })
}

/// Mann-Whitney AUROC with ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ForgeError::ShapeError("length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ForgeError::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Orientation-independent AUROC.
pub fn auroc_abs(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let a = auroc(scores, labels)?;
    Ok(a.max(1.0 - a))
}

/// Mean per-class recall over classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(ForgeError::ShapeError("length mismatch or empty".into()));
    }
    let classes: std::collections::BTreeSet<usize> = truth.iter().copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let n_c = truth.iter().filter(|&&t| t == c).count();
        let hit = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count();
        total += hit as f64 / n_c as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Unweighted mean F1 over classes appearing in predictions or truth;
/// a class with zero precision and recall contributes F1 = 0.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(ForgeError::ShapeError("length mismatch or empty".into()));
    }
    let mut classes: std::collections::BTreeSet<usize> = truth.iter().copied().collect();
    classes.extend(pred.iter().copied());
    let mut total = 0.0;
    for &c in &classes {
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count() as f64;
        let fp = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t != c && p == c)
            .count() as f64;
        let fn_ = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == c && p != c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(total / classes.len() as f64)
}

/// Mean silhouette of the rows of `z` under `labels`; singleton clusters
/// contribute 0 by convention.
pub fn silhouette_mean(z: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(ForgeError::ShapeError("label length mismatch".into()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(ForgeError::UndefinedMetric(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let d = pairwise_distances(z);
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size < 2 {
            continue; // contributes 0
        }
        let a: f64 = (0..n)
            .filter(|&j| j != i && labels[j] == own)
            .map(|j| d[(i, j)])
            .sum::<f64>()
            / (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &c in classes.iter().filter(|&&c| c != own) {
            let size = labels.iter().filter(|&&l| l == c).count();
            let mean = (0..n)
                .filter(|&j| labels[j] == c)
                .map(|j| d[(i, j)])
                .sum::<f64>()
                / size as f64;
            if mean < b {
                b = mean;
            }
        }
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// ANOVA effect size: SS_between / SS_total.
pub fn eta_squared(values: &[f64], groups: &[usize]) -> Result<f64> {
    if values.len() != groups.len() || values.is_empty() {
        return Err(ForgeError::ShapeError("length mismatch".into()));
    }
    let classes: std::collections::BTreeSet<usize> = groups.iter().copied().collect();
    if classes.len() < 2 {
        return Err(ForgeError::InvalidArgument(
            "eta_squared needs at least two groups".into(),
        ));
    }
    let n = values.len() as f64;
    let grand = values.iter().sum::<f64>() / n;
    let ss_total: f64 = values.iter().map(|v| (v - grand) * (v - grand)).sum();
    if ss_total <= 0.0 {
        return Err(ForgeError::UndefinedMetric("zero total variance".into()));
    }
    let mut ss_between = 0.0;
    for &c in &classes {
        let members: Vec<f64> = values
            .iter()
            .zip(groups)
            .filter(|(_, &g)| g == c)
            .map(|(v, _)| *v)
            .collect();
        let m = members.iter().sum::<f64>() / members.len() as f64;
        ss_between += members.len() as f64 * (m - grand) * (m - grand);
    }
    Ok(ss_between / ss_total)
}

/// Orientation-aware summary of signed per-unit correlations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationSummary {
    pub mean_signed: f64,
    pub mean_abs: f64,
    pub positive_share: f64,
}

pub fn orientation_summary(rhos: &[f64]) -> Result<OrientationSummary> {
    if rhos.is_empty() {
        return Err(ForgeError::InvalidArgument("empty correlation list".into()));
    }
    let n = rhos.len() as f64;
    Ok(OrientationSummary {
        mean_signed: rhos.iter().sum::<f64>() / n,
        mean_abs: rhos.iter().map(|r| r.abs()).sum::<f64>() / n,
        positive_share: rhos.iter().filter(|&&r| r > 0.0).count() as f64 / n,
    })
}
