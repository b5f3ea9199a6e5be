//! LET objectives and their analytic gradients.
//!
//! The latent is z = W(x - b) with distance d(i,j) = beta * acos(cos(z_i,
//! z_j)). beta stays positive through the reparameterization beta =
//! exp(gamma); all gradients below are with respect to (W, b, gamma) and,
//! for the cell objective, the joint linear stage classifier.
//!
//! Inside the objective the arccos argument is clamped to
//! [-1+1e-12, 1-1e-12]; at a clamped pair the angle carries no gradient to
//! z (matching the true derivative of the clamped expression), while the
//! beta gradient still flows.

use crate::error::{ForgeError, Result};
use crate::linalg::{knn_from_distances, pairwise_distances};
use nalgebra::{DMatrix, DVector};

const CLAMP: f64 = 1.0 - 1e-12;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Encoder, k x D.
    pub w: DMatrix<f64>,
    /// Feature offset, D.
    pub b: DVector<f64>,
    /// log(beta).
    pub gamma: f64,
}

impl HeadParams {
    pub fn beta(&self) -> f64 {
        self.gamma.exp()
    }

    /// Row-wise latents: z_i = W (x_i - b).
    pub fn latents(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.w.ncols() {
            return Err(ForgeError::ShapeError(format!(
                "input has {} features, encoder expects {}",
                x.ncols(),
                self.w.ncols()
            )));
        }
        let e = centered(x, &self.b);
        Ok(&e * self.w.transpose())
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gamma: f64,
}

impl HeadGrad {
    fn zeros(k: usize, d: usize) -> Self {
        HeadGrad {
            w: DMatrix::zeros(k, d),
            b: DVector::zeros(d),
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClsParams {
    /// C x k.
    pub w: DMatrix<f64>,
    /// C.
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ClsGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn centered(x: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut e = x.clone();
    for mut row in e.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= b[j];
        }
    }
    e
}

/// Sum over ordered pairs (both directions of each listed unordered pair)
/// of (beta*acos(c) - target)^2, scaled by `scale`. Accumulates latent
/// gradients into `dz` and returns (loss, d loss / d gamma).
fn pair_distance_term(
    z: &DMatrix<f64>,
    beta: f64,
    pairs: &[(usize, usize, f64)],
    scale: f64,
    dz: &mut DMatrix<f64>,
) -> Result<(f64, f64)> {
    let k = z.ncols();
    let norms: Vec<f64> = (0..z.nrows())
        .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut loss = 0.0;
    let mut dgamma = 0.0;
    for &(i, j, target) in pairs {
        let (ni, nj) = (norms[i], norms[j]);
        if ni < NORM_FLOOR || nj < NORM_FLOOR {
            return Err(ForgeError::DegenerateLatent);
        }
        let dot: f64 = (0..k).map(|c| z[(i, c)] * z[(j, c)]).sum();
        let c_raw = dot / (ni * nj);
        let c = c_raw.clamp(-CLAMP, CLAMP);
        let theta = c.acos();
        let diff = beta * theta - target;
        loss += 2.0 * scale * diff * diff;
        // d/dgamma = d/dbeta * beta
        dgamma += 4.0 * scale * diff * theta * beta;
        if c_raw > -CLAMP && c_raw < CLAMP {
            let dl_dc = -4.0 * scale * diff * beta / (1.0 - c * c).sqrt();
            for col in 0..k {
                let zi = z[(i, col)];
                let zj = z[(j, col)];
                dz[(i, col)] += dl_dc * (zj / (ni * nj) - c_raw * zi / (ni * ni));
                dz[(j, col)] += dl_dc * (zi / (ni * nj) - c_raw * zj / (nj * nj));
            }
        }
    }
    Ok((loss, dgamma))
}

/// Backpropagate latent gradients through z = W(x - b).
fn backprop_latents(
    e: &DMatrix<f64>,
    w: &DMatrix<f64>,
    dz: &DMatrix<f64>,
    grad: &mut HeadGrad,
) {
    grad.w += dz.transpose() * e;
    let mut col_sum = DVector::zeros(dz.ncols());
    for i in 0..dz.nrows() {
        for c in 0..dz.ncols() {
            col_sum[c] += dz[(i, c)];
        }
    }
    grad.b += -(w.transpose() * col_sum);
}

/// Reconstruction term sum_i ||(I - P)(x_i - b)||^2 where P projects onto
/// the row space of W. Requires full row rank; returns the term value and
/// adds `weight`-scaled gradients.
fn reconstruction_term(
    p: &HeadParams,
    e: &DMatrix<f64>,
    z: &DMatrix<f64>,
    weight: f64,
    grad: &mut HeadGrad,
) -> Result<f64> {
    let k = p.w.nrows();
    let m = &p.w * p.w.transpose();
    let ch = m.cholesky().ok_or_else(|| {
        ForgeError::NumericalError(
            "encoder rows are rank-deficient; reconstruction term undefined".into(),
        )
    })?;
    let mut loss = 0.0;
    for i in 0..e.nrows() {
        let zi = DVector::from_fn(k, |c, _| z[(i, c)]);
        let y = ch.solve(&zi);
        let proj = p.w.transpose() * &y;
        let r = DVector::from_fn(e.ncols(), |c, _| e[(i, c)] - proj[c]);
        loss += r.dot(&r);
        grad.w += (&y * r.transpose()) * (-2.0 * weight);
        grad.b += &r * (-2.0 * weight);
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct AnchorObjective<'a> {
    pub x: &'a DMatrix<f64>,
    pub d_target: &'a DMatrix<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AnchorLoss {
    pub total: f64,
    pub distance: f64,
    pub reconstruction: f64,
}

/// Full-batch anchor objective:
/// sum_{i!=j} (beta*acos(cos(z_i,z_j)) - t_ij)^2 + alpha * recon.
pub fn anchor_loss_grad(
    p: &HeadParams,
    obj: &AnchorObjective,
) -> Result<(AnchorLoss, HeadGrad)> {
    let n = obj.x.nrows();
    let k = p.w.nrows();
    let d = p.w.ncols();
    let e = centered(obj.x, &p.b);
    let z = &e * p.w.transpose();
    let mut grad = HeadGrad::zeros(k, d);
    let mut dz = DMatrix::zeros(n, k);
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j, obj.d_target[(i, j)]));
        }
    }
    let (dist_loss, dgamma) = pair_distance_term(&z, p.beta(), &pairs, 1.0, &mut dz)?;
    grad.gamma += dgamma;
    backprop_latents(&e, &p.w, &dz, &mut grad);
    let recon = if obj.alpha != 0.0 {
        reconstruction_term(p, &e, &z, obj.alpha, &mut grad)?
    } else {
        0.0
    };
    Ok((
        AnchorLoss {
            total: dist_loss + obj.alpha * recon,
            distance: dist_loss,
            reconstruction: recon,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeights {
    pub w_stage: f64,
    pub w_local: f64,
    pub w_recon: f64,
    pub w_cls: f64,
}

impl Default for CellWeights {
    fn default() -> Self {
        // reference configuration
        CellWeights {
            w_stage: 1.0,
            w_local: 0.1,
            w_recon: 0.08,
            w_cls: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TopoPrior<'a> {
    /// Pairwise reference distances over shared-stage slots.
    pub d_ref: &'a DMatrix<f64>,
    /// Global stage id -> shared slot.
    pub shared_slot: &'a [Option<usize>],
    pub lambda_topo: f64,
}

#[derive(Debug, Clone)]
pub struct CellObjective<'a> {
    pub x: &'a DMatrix<f64>,
    /// Global stage id per row.
    pub stage: &'a [usize],
    /// S x S stage target distances.
    pub stage_dist: &'a DMatrix<f64>,
    /// Classifier class count (all panel stages).
    pub n_stages: usize,
    pub weights: CellWeights,
    pub knn_k: usize,
    pub topo: Option<TopoPrior<'a>>,
    pub lambda_compact: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CellLoss {
    pub total: f64,
    pub stage: f64,
    pub local: f64,
    pub recon: f64,
    pub cls: f64,
    pub topo: f64,
    pub compact: f64,
}

/// Composite cell objective on one batch; also used with the full sampled
/// set as a single batch for evaluation.
pub fn cell_loss_grad(
    p: &HeadParams,
    cls: &ClsParams,
    obj: &CellObjective,
) -> Result<(CellLoss, HeadGrad, ClsGrad)> {
    let m = obj.x.nrows();
    let k = p.w.nrows();
    let d = p.w.ncols();
    if obj.stage.len() != m {
        return Err(ForgeError::ShapeError("stage labels do not match batch".into()));
    }
    let e = centered(obj.x, &p.b);
    let z = &e * p.w.transpose();
    let mut grad = HeadGrad::zeros(k, d);
    let mut cls_grad = ClsGrad {
        w: DMatrix::zeros(cls.w.nrows(), cls.w.ncols()),
        b: DVector::zeros(cls.b.len()),
    };
    let mut dz = DMatrix::zeros(m, k);
    let mut loss = CellLoss::default();

    // rows per present stage
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (row, &s) in obj.stage.iter().enumerate() {
        members.entry(s).or_default().push(row);
    }
    let present: Vec<usize> = members.keys().copied().collect();

    // stage-centroid distance fit
    if obj.weights.w_stage != 0.0 && present.len() >= 2 {
        let cents = centroids(&z, &members, &present);
        let mut pairs = Vec::new();
        for a in 0..present.len() {
            for b2 in (a + 1)..present.len() {
                pairs.push((a, b2, obj.stage_dist[(present[a], present[b2])]));
            }
        }
        let scale = obj.weights.w_stage / (present.len() * (present.len() - 1)) as f64;
        let mut dc = DMatrix::zeros(present.len(), k);
        let (l, dgamma) = pair_distance_term(&cents, p.beta(), &pairs, scale, &mut dc)?;
        grad.gamma += dgamma;
        scatter_centroid_grad(&mut dz, &dc, &members, &present);
        loss.stage = l / obj.weights.w_stage;
    }

    // local neighborhood preservation: 1 - mean kNN overlap between feature
    // and latent space. Piecewise constant in the parameters, so it carries
    // no gradient; it still steers training through best-loss selection.
    if obj.weights.w_local != 0.0 && m >= 3 {
        let kk = obj.knn_k.min(m - 1).max(1);
        let dx = pairwise_distances(obj.x);
        let dzm = pairwise_distances(&z);
        let mut overlap = 0.0;
        for i in 0..m {
            let a: std::collections::HashSet<usize> =
                knn_from_distances(&dx, i, kk).into_iter().collect();
            let b: std::collections::HashSet<usize> =
                knn_from_distances(&dzm, i, kk).into_iter().collect();
            overlap += a.intersection(&b).count() as f64 / kk as f64;
        }
        loss.local = 1.0 - overlap / m as f64;
    }

    // reconstruction, mean over batch rows
    if obj.weights.w_recon != 0.0 {
        let weight = obj.weights.w_recon / m as f64;
        let raw = reconstruction_term(p, &e, &z, weight, &mut grad)?;
        loss.recon = raw / m as f64;
    }

    // linear stage classifier, mean cross-entropy
    if obj.weights.w_cls != 0.0 {
        let weight = obj.weights.w_cls / m as f64;
        let mut ce = 0.0;
        for i in 0..m {
            let zi = DVector::from_fn(k, |c, _| z[(i, c)]);
            let logits = &cls.w * &zi + &cls.b;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let target = obj.stage[i];
            ce += -(logits[target] - max - sum.ln());
            for c in 0..obj.n_stages {
                let soft = exps[c] / sum;
                let dlogit = (soft - if c == target { 1.0 } else { 0.0 }) * weight;
                for col in 0..k {
                    cls_grad.w[(c, col)] += dlogit * zi[col];
                    dz[(i, col)] += dlogit * cls.w[(c, col)];
                }
                cls_grad.b[c] += dlogit;
            }
        }
        loss.cls = ce / m as f64;
    }

    // anchor-topology prior on shared-stage centroids
    if let Some(topo) = &obj.topo {
        if topo.lambda_topo != 0.0 {
            let shared_present: Vec<usize> = present
                .iter()
                .copied()
                .filter(|&s| topo.shared_slot.get(s).copied().flatten().is_some())
                .collect();
            if shared_present.len() >= 2 {
                let cents = centroids(&z, &members, &shared_present);
                let mut pairs = Vec::new();
                for a in 0..shared_present.len() {
                    for b2 in (a + 1)..shared_present.len() {
                        let sa = topo.shared_slot[shared_present[a]].unwrap();
                        let sb = topo.shared_slot[shared_present[b2]].unwrap();
                        pairs.push((a, b2, topo.d_ref[(sa, sb)]));
                    }
                }
                let scale = topo.lambda_topo
                    / (shared_present.len() * (shared_present.len() - 1)) as f64;
                let mut dc = DMatrix::zeros(shared_present.len(), k);
                let (l, dgamma) = pair_distance_term(&cents, p.beta(), &pairs, scale, &mut dc)?;
                grad.gamma += dgamma;
                scatter_centroid_grad(&mut dz, &dc, &members, &shared_present);
                loss.topo = l / topo.lambda_topo;
            }
        }
    }

    // within-stage compactness, mean over rows
    if obj.lambda_compact != 0.0 {
        let cents = centroids(&z, &members, &present);
        let slot: std::collections::BTreeMap<usize, usize> = present
            .iter()
            .enumerate()
            .map(|(slot, &s)| (s, slot))
            .collect();
        let mut total = 0.0;
        for i in 0..m {
            let s = slot[&obj.stage[i]];
            let mut sq = 0.0;
            for c in 0..k {
                let dcomp = z[(i, c)] - cents[(s, c)];
                sq += dcomp * dcomp;
                // centroid dependence cancels within each stage
                dz[(i, c)] += 2.0 * obj.lambda_compact * dcomp / m as f64;
            }
            total += sq;
        }
        loss.compact = total / m as f64;
    }

    backprop_latents(&e, &p.w, &dz, &mut grad);
    let topo_lambda = obj.topo.as_ref().map(|t| t.lambda_topo).unwrap_or(0.0);
    loss.total = obj.weights.w_stage * loss.stage
        + obj.weights.w_local * loss.local
        + obj.weights.w_recon * loss.recon
        + obj.weights.w_cls * loss.cls
        + topo_lambda * loss.topo
        + obj.lambda_compact * loss.compact;
    Ok((loss, grad, cls_grad))
}

fn centroids(
    z: &DMatrix<f64>,
    members: &std::collections::BTreeMap<usize, Vec<usize>>,
    stages: &[usize],
) -> DMatrix<f64> {
    let k = z.ncols();
    let mut cents = DMatrix::zeros(stages.len(), k);
    for (slot, s) in stages.iter().enumerate() {
        let rows = &members[s];
        for &r in rows {
            for c in 0..k {
                cents[(slot, c)] += z[(r, c)];
            }
        }
        for c in 0..k {
            cents[(slot, c)] /= rows.len() as f64;
        }
    }
    cents
}

fn scatter_centroid_grad(
    dz: &mut DMatrix<f64>,
    dc: &DMatrix<f64>,
    members: &std::collections::BTreeMap<usize, Vec<usize>>,
    stages: &[usize],
) {
    for (slot, s) in stages.iter().enumerate() {
        let rows = &members[s];
        let inv = 1.0 / rows.len() as f64;
        for &r in rows {
            for c in 0..dz.ncols() {
                dz[(r, c)] += dc[(slot, c)] * inv;
            }
        }
    }
}

// ---- flat parameter vector helpers (optimizer + finite differences) ----

pub fn flatten(p: &HeadParams, cls: Option<&ClsParams>) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend(p.w.iter());
    out.extend(p.b.iter());
    out.push(p.gamma);
    if let Some(c) = cls {
        out.extend(c.w.iter());
        out.extend(c.b.iter());
    }
    out
}

pub fn flatten_grad(g: &HeadGrad, cls: Option<&ClsGrad>) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend(g.w.iter());
    out.extend(g.b.iter());
    out.push(g.gamma);
    if let Some(c) = cls {
        out.extend(c.w.iter());
        out.extend(c.b.iter());
    }
    out
}

pub fn unflatten(
    flat: &[f64],
    k: usize,
    d: usize,
    n_classes: Option<usize>,
) -> (HeadParams, Option<ClsParams>) {
    let mut off = 0;
    let w = DMatrix::from_iterator(k, d, flat[..k * d].iter().copied());
    off += k * d;
    let b = DVector::from_column_slice(&flat[off..off + d]);
    off += d;
    let gamma = flat[off];
    off += 1;
    let cls = n_classes.map(|c| {
        let w = DMatrix::from_iterator(c, k, flat[off..off + c * k].iter().copied());
        let bias = DVector::from_column_slice(&flat[off + c * k..off + c * k + c]);
        ClsParams { w, b: bias }
    });
    (HeadParams { w, b, gamma }, cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fd_check<F>(loss_fn: F, theta: &[f64], analytic: &[f64], tol: f64)
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut fd = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let mut plus = theta.to_vec();
            plus[i] += h;
            let mut minus = theta.to_vec();
            minus[i] -= h;
            fd[i] = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
        }
        let dot_diff: f64 = fd
            .iter()
            .zip(analytic)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = fd
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-8);
        assert!(
            dot_diff / scale <= tol,
            "gradient mismatch: {} relative",
            dot_diff / scale
        );
    }

    fn random_problem(seed: u64, n: usize, d: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = crate::rng::stream(seed, "objective-test", 0);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut t = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.gen_range(0.2..2.0);
                t[(i, j)] = v;
                t[(j, i)] = v;
            }
        }
        let _ = k;
        (x, t)
    }

    fn random_params(seed: u64, k: usize, d: usize) -> HeadParams {
        let mut rng = crate::rng::stream(seed, "objective-params", 0);
        HeadParams {
            w: DMatrix::from_fn(k, d, |_, _| rng.gen_range(-0.5..0.5)),
            b: DVector::from_fn(d, |_, _| rng.gen_range(-0.2..0.2)),
            gamma: rng.gen_range(-0.3..0.3),
        }
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let (x, t) = random_problem(seed, 10, 6, 3);
            let p = random_params(seed + 100, 3, 6);
            let obj = AnchorObjective {
                x: &x,
                d_target: &t,
                alpha: 0.3,
            };
            let (_, grad) = anchor_loss_grad(&p, &obj).unwrap();
            let theta = flatten(&p, None);
            let analytic = flatten_grad(&grad, None);
            fd_check(
                |flat| {
                    let (pp, _) = unflatten(flat, 3, 6, None);
                    anchor_loss_grad(&pp, &obj).unwrap().0.total
                },
                &theta,
                &analytic,
                1e-5,
            );
        }
    }

    #[test]
    fn cell_gradient_matches_finite_differences_all_terms() {
        for seed in 0..4u64 {
            let (x, _) = random_problem(seed + 50, 10, 5, 3);
            let mut rng = crate::rng::stream(seed, "cell-stages", 0);
            let stage: Vec<usize> = (0..10).map(|_| rng.gen_range(0..3)).collect();
            let stage_dist = DMatrix::from_row_slice(
                3,
                3,
                &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0],
            );
            let d_ref =
                DMatrix::from_row_slice(3, 3, &[0.0, 0.8, 1.9, 0.8, 0.0, 1.1, 1.9, 1.1, 0.0]);
            let shared = vec![Some(0), Some(1), Some(2)];
            let p = random_params(seed + 150, 3, 5);
            let cls = ClsParams {
                w: DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.3..0.3)),
                b: DVector::from_fn(3, |_, _| rng.gen_range(-0.1..0.1)),
            };
            let obj = CellObjective {
                x: &x,
                stage: &stage,
                stage_dist: &stage_dist,
                n_stages: 3,
                weights: CellWeights::default(),
                knn_k: 3,
                topo: Some(TopoPrior {
                    d_ref: &d_ref,
                    shared_slot: &shared,
                    lambda_topo: 0.02,
                }),
                lambda_compact: 0.015,
            };
            let (_, grad, cls_grad) = cell_loss_grad(&p, &cls, &obj).unwrap();
            let theta = flatten(&p, Some(&cls));
            let analytic = flatten_grad(&grad, Some(&cls_grad));
            fd_check(
                |flat| {
                    let (pp, cc) = unflatten(flat, 3, 5, Some(3));
                    cell_loss_grad(&pp, &cc.unwrap(), &obj).unwrap().0.total
                },
                &theta,
                &analytic,
                1e-5,
            );
        }
    }

    #[test]
    fn compact_term_is_zero_at_centroids() {
        // all same-stage rows identical => z_i == centroid => compact = 0
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, -1.0, 0.5, -1.0, 0.5]);
        let stage = vec![0usize, 0, 1, 1];
        let stage_dist = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = random_params(9, 2, 2);
        let cls = ClsParams {
            w: DMatrix::zeros(2, 2),
            b: DVector::zeros(2),
        };
        let obj = CellObjective {
            x: &x,
            stage: &stage,
            stage_dist: &stage_dist,
            n_stages: 2,
            weights: CellWeights {
                w_stage: 0.0,
                w_local: 0.0,
                w_recon: 0.0,
                w_cls: 0.0,
            },
            knn_k: 2,
            topo: None,
            lambda_compact: 5.0,
        };
        let (loss, _, _) = cell_loss_grad(&p, &cls, &obj).unwrap();
        assert!(loss.compact.abs() < 1e-24);
        assert!(loss.total.abs() < 1e-22);
    }

    #[test]
    fn alpha_zero_skips_reconstruction_entirely() {
        // rank-deficient encoder would make the reconstruction term blow up;
        // with alpha = 0 it must never be touched
        let x = DMatrix::from_fn(6, 4, |i, j| (i + j + 1) as f64 * 0.1);
        let t = DMatrix::from_fn(6, 6, |i, j| if i == j { 0.0 } else { 1.0 });
        let mut w = DMatrix::zeros(2, 4);
        w[(0, 0)] = 1.0;
        w[(1, 0)] = 1.0; // duplicated row: WW^T singular
        let p = HeadParams {
            w,
            b: DVector::zeros(4),
            gamma: 0.0,
        };
        let ok = anchor_loss_grad(
            &p,
            &AnchorObjective {
                x: &x,
                d_target: &t,
                alpha: 0.0,
            },
        );
        assert!(ok.is_ok());
        let bad = anchor_loss_grad(
            &p,
            &AnchorObjective {
                x: &x,
                d_target: &t,
                alpha: 0.5,
            },
        );
        assert!(matches!(bad, Err(ForgeError::NumericalError(_))));
    }

    #[test]
    fn degenerate_latent_is_reported() {
        let x = DMatrix::from_fn(4, 3, |_, _| 1.0); // identical rows
        let t = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        let p = HeadParams {
            w: DMatrix::from_fn(2, 3, |_, _| 0.3),
            b: DVector::from_element(3, 1.0), // x - b = 0 for every row
            gamma: 0.0,
        };
        let r = anchor_loss_grad(
            &p,
            &AnchorObjective {
                x: &x,
                d_target: &t,
                alpha: 0.0,
            },
        );
        assert!(matches!(r, Err(ForgeError::DegenerateLatent)));
    }
}
