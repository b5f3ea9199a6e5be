//! The learned adaptor: a linear head z = W_enc(x - b) trained so that
//! beta-scaled angular latent distances match target distances, with
//! anchor-, cell- and hybrid-objective variants, quality gates, and frozen
//! zero-shot transfer.
//!
//! Training is single-threaded and fully determined by the seed. Heads are
//! frozen once gated; transfer never mutates them.

pub mod objective;

use crate::container::{self, Container};
use crate::error::{ForgeError, Result};
use crate::metrics::{midranks, spearman, trustworthiness};
use crate::panel::AnchorPanel;
use crate::rng::{normal, stream};
use crate::stats::blocked_permutation_p;
use nalgebra::{DMatrix, DVector};
use objective::{
    anchor_loss_grad, cell_loss_grad, flatten, flatten_grad, unflatten, AnchorObjective,
    CellObjective, CellWeights, ClsParams, HeadParams, TopoPrior,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

const BETA_FLOOR: f64 = 1e-12;

/// beta * acos(cos(z_i, z_j)), the latent distance of the trained manifold.
/// The cosine is clamped to [-1, 1], so identical vectors give exactly 0.
pub fn latent_distance(z_i: &[f64], z_j: &[f64], beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(ForgeError::InvalidArgument("beta must be positive".into()));
    }
    let ni = z_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nj = z_j.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni < BETA_FLOOR || nj < BETA_FLOOR {
        return Err(ForgeError::DegenerateLatent);
    }
    let dot: f64 = z_i.iter().zip(z_j).map(|(a, b)| a * b).sum();
    let c = (dot / (ni * nj)).clamp(-1.0, 1.0);
    Ok(beta * c.acos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Anchor,
    Cell,
    Hybrid,
}

/// Objective weights; unused fields stay at zero for a given variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct HeadHyper {
    pub alpha: f64,
    pub w_stage: f64,
    pub w_local: f64,
    pub w_recon: f64,
    pub w_cls: f64,
    pub lambda_topo: f64,
    pub lambda_compact: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainStats {
    pub init_loss: f64,
    pub final_loss: f64,
    /// Distance-fitting component of the final loss.
    pub final_distance_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub trustworthiness: f64,
    pub corr_random: f64,
    pub corr_donor: f64,
    pub corr_clade: f64,
    pub blocked_p: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub trust_min: f64,
    pub corr_min: f64,
    pub p_max: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            trust_min: 0.80,
            corr_min: 0.20,
            p_max: 0.001,
        }
    }
}

/// Gate split specification: random pair holdout fraction, trustworthiness
/// neighborhood size, permutation count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub random_pair_frac: f64,
    pub trust_k: usize,
    pub n_perm: usize,
    pub seed: u64,
    pub thresholds: GateThresholds,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            random_pair_frac: 0.2,
            trust_k: 10,
            n_perm: 1999,
            seed: 0,
            thresholds: GateThresholds::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LetHead {
    pub w_enc: DMatrix<f64>,
    pub b: DVector<f64>,
    pub beta: f64,
    pub k: usize,
    pub variant: HeadVariant,
    pub hyper: HeadHyper,
    pub seed: u64,
    pub train: TrainStats,
    pub gate_report: Option<GateReport>,
    frozen: bool,
}

impl LetHead {
    pub fn feature_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Record a gate report and freeze the parameters.
    pub fn freeze_with_gate(&mut self, report: GateReport) {
        self.gate_report = Some(report);
        self.frozen = true;
    }

    /// Pure application z = W_enc(x - b), row-wise.
    pub fn latents(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = HeadParams {
            w: self.w_enc.clone(),
            b: self.b.clone(),
            gamma: self.beta.ln(),
        };
        p.latents(x)
    }

    /// Decoder W_enc^+ (D x k) for mapping latents back to feature space.
    pub fn decoder(&self) -> Result<DMatrix<f64>> {
        crate::linalg::pseudo_inverse(&self.w_enc)
    }

    /// Decode latent rows: x_hat = W_enc^+ z + b.
    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.k {
            return Err(ForgeError::ShapeError(format!(
                "latent has {} dims, head has {}",
                z.ncols(),
                self.k
            )));
        }
        let dec = self.decoder()?;
        let mut out = z * dec.transpose();
        for mut row in out.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b[j];
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "variant": self.variant,
            "k": self.k,
            "d": self.feature_dim(),
            "beta": self.beta,
            "hyper": self.hyper,
            "seed": self.seed,
            "train": self.train,
            "gate": self.gate_report,
            "frozen": self.frozen,
        });
        let mut c = Container::new("let_head", meta);
        c.push_section("w_enc", container::matrix_to_rowmajor(&self.w_enc));
        c.push_section("b", self.b.iter().copied().collect());
        c
    }

    pub fn from_container(c: &Container) -> Result<LetHead> {
        if c.kind != "let_head" {
            return Err(ForgeError::FormatError(format!(
                "expected let_head container, got '{}'",
                c.kind
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            variant: HeadVariant,
            k: usize,
            d: usize,
            beta: f64,
            hyper: HeadHyper,
            seed: u64,
            train: TrainStats,
            gate: Option<GateReport>,
            frozen: bool,
        }
        let m: Meta = c.meta_typed()?;
        Ok(LetHead {
            w_enc: container::rowmajor_to_matrix(m.k, m.d, c.section("w_enc")?)?,
            b: DVector::from_column_slice(c.section("b")?),
            beta: m.beta,
            k: m.k,
            variant: m.variant,
            hyper: m.hyper,
            seed: m.seed,
            train: m.train,
            gate_report: m.gate,
            frozen: m.frozen,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            steps: 2000,
        }
    }
}

/// Adam over a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(dim: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

fn init_params(x: &DMatrix<f64>, k: usize, seed: u64) -> HeadParams {
    let d = x.ncols();
    let mut rng = stream(seed, "head-init", 0);
    let scale = 1.0 / (d as f64).sqrt();
    let w = DMatrix::from_fn(k, d, |_, _| scale * normal(&mut rng));
    let mut b = DVector::zeros(d);
    for i in 0..x.nrows() {
        for j in 0..d {
            b[j] += x[(i, j)];
        }
    }
    b /= x.nrows() as f64;
    HeadParams { w, b, gamma: 0.0 }
}

/// Train the anchor-variant head by full-batch Adam on
/// ||d_hat - d_target||^2 + alpha * reconstruction. Returns the best
/// parameters seen, so the returned loss never exceeds the initial loss.
pub fn train_anchor_head(
    panel: &AnchorPanel,
    k: usize,
    alpha: f64,
    seed: u64,
    opt: &OptimizerConfig,
) -> Result<LetHead> {
    let n = panel.n_rows();
    if k < 2 {
        return Err(ForgeError::InvalidArgument("latent dim must be >= 2".into()));
    }
    if n < k + 2 {
        return Err(ForgeError::InvalidArgument(format!(
            "need at least k+2 = {} rows, got {n}",
            k + 2
        )));
    }
    let d_target = panel.d_target_matrix();
    let obj = AnchorObjective {
        x: &panel.features,
        d_target: &d_target,
        alpha,
    };
    let d = panel.n_features();
    let p0 = init_params(&panel.features, k, seed);
    let mut theta = flatten(&p0, None);
    let mut adam = Adam::new(theta.len(), opt.learning_rate);
    let mut best_theta = theta.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_dist = f64::INFINITY;
    let mut init_loss = 0.0;
    for step in 0..=opt.steps {
        let (p, _) = unflatten(&theta, k, d, None);
        let (loss, grad) = match anchor_loss_grad(&p, &obj) {
            Ok(r) => r,
            Err(ForgeError::DegenerateLatent) => {
                return Err(ForgeError::DivergenceError { step })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(ForgeError::DivergenceError { step });
        }
        if step == 0 {
            init_loss = loss.total;
        }
        if loss.total < best_loss {
            best_loss = loss.total;
            best_dist = loss.distance;
            best_theta.copy_from_slice(&theta);
        }
        if step == opt.steps {
            break;
        }
        adam.step(&mut theta, &flatten_grad(&grad, None));
    }
    let (p, _) = unflatten(&best_theta, k, d, None);
    Ok(LetHead {
        w_enc: p.w,
        b: p.b,
        beta: p.gamma.exp(),
        k,
        variant: HeadVariant::Anchor,
        hyper: HeadHyper {
            alpha,
            ..Default::default()
        },
        seed,
        train: TrainStats {
            init_loss,
            final_loss: best_loss,
            final_distance_loss: best_dist,
            steps: opt.steps,
        },
        gate_report: None,
        frozen: false,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CellTrainConfig {
    pub weights: CellWeights,
    pub cap_per_stage: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub knn_k: usize,
}

impl Default for CellTrainConfig {
    fn default() -> Self {
        CellTrainConfig {
            weights: CellWeights::default(),
            cap_per_stage: 500,
            epochs: 120,
            batch: 896,
            learning_rate: 1e-2,
            knn_k: 10,
        }
    }
}

/// Stage-balanced subsample: at most `cap` rows per stage, seed-determined,
/// returned sorted.
fn stage_balanced_sample(panel: &AnchorPanel, cap: usize, seed: u64) -> Vec<usize> {
    let mut by_stage: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (row, &s) in panel.stage_ids().iter().enumerate() {
        by_stage.entry(s).or_default().push(row);
    }
    let mut out = Vec::new();
    for (&s, rows) in &by_stage {
        if rows.len() <= cap {
            out.extend_from_slice(rows);
        } else {
            let mut rng = stream(seed, "stage-cap", s as u64);
            let mut pool = rows.clone();
            pool.shuffle(&mut rng);
            pool.truncate(cap);
            pool.sort_unstable();
            out.extend(pool);
        }
    }
    out.sort_unstable();
    out
}

fn extract_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

/// Shared trainer for the cell and hybrid variants.
fn train_cells_core(
    panel: &AnchorPanel,
    k: usize,
    cfg: &CellTrainConfig,
    topo: Option<(&DMatrix<f64>, &[Option<usize>], f64)>,
    lambda_compact: f64,
    seed: u64,
    variant: HeadVariant,
) -> Result<LetHead> {
    let stage_dist = panel.stage_distances().clone();
    let n_stages = panel.stage_names().len();
    let sampled = stage_balanced_sample(panel, cfg.cap_per_stage, seed);
    if sampled.len() < k + 2 {
        return Err(ForgeError::InvalidArgument(format!(
            "sampled set has {} rows, need at least k+2 = {}",
            sampled.len(),
            k + 2
        )));
    }
    if cfg.batch > sampled.len() {
        return Err(ForgeError::InvalidArgument(format!(
            "batch {} larger than sampled set {}",
            cfg.batch,
            sampled.len()
        )));
    }
    let x_all = extract_rows(&panel.features, &sampled);
    let stage_all: Vec<usize> = sampled.iter().map(|&i| panel.stage_ids()[i]).collect();
    let d = panel.n_features();

    let p0 = init_params(&x_all, k, seed);
    let cls0 = ClsParams {
        w: DMatrix::zeros(n_stages, k),
        b: DVector::zeros(n_stages),
    };
    let mut theta = flatten(&p0, Some(&cls0));
    let mut adam = Adam::new(theta.len(), cfg.learning_rate);

    let make_topo = || -> Option<TopoPrior<'_>> {
        topo.and_then(|(d_ref, shared, l)| {
            if l != 0.0 {
                Some(TopoPrior {
                    d_ref,
                    shared_slot: shared,
                    lambda_topo: l,
                })
            } else {
                None
            }
        })
    };

    let eval_full = |theta: &[f64]| -> Result<(f64, f64)> {
        let (p, cls) = unflatten(theta, k, d, Some(n_stages));
        let obj = CellObjective {
            x: &x_all,
            stage: &stage_all,
            stage_dist: &stage_dist,
            n_stages,
            weights: cfg.weights,
            knn_k: cfg.knn_k,
            topo: make_topo(),
            lambda_compact,
        };
        let (loss, _, _) = cell_loss_grad(&p, &cls.unwrap(), &obj)?;
        Ok((loss.total, loss.stage))
    };

    let (init_loss, _) = eval_full(&theta).map_err(divergence_at(0))?;
    let mut best_loss = init_loss;
    let mut best_dist = f64::NAN;
    let mut best_theta = theta.clone();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = sampled.clone();
        {
            let mut rng = stream(seed, "cell-epoch", epoch as u64);
            order.shuffle(&mut rng);
        }
        let positions: Vec<usize> = order
            .iter()
            .map(|row| sampled.binary_search(row).expect("sampled row"))
            .collect();
        for chunk in positions.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            global_step += 1;
            let xb = extract_rows(&x_all, chunk);
            let sb: Vec<usize> = chunk.iter().map(|&p| stage_all[p]).collect();
            let (p, cls) = unflatten(&theta, k, d, Some(n_stages));
            let obj = CellObjective {
                x: &xb,
                stage: &sb,
                stage_dist: &stage_dist,
                n_stages,
                weights: cfg.weights,
                knn_k: cfg.knn_k,
                topo: make_topo(),
                lambda_compact,
            };
            let (loss, grad, cls_grad) =
                cell_loss_grad(&p, &cls.unwrap(), &obj).map_err(divergence_at(global_step))?;
            if !loss.total.is_finite() {
                return Err(ForgeError::DivergenceError { step: global_step });
            }
            adam.step(&mut theta, &flatten_grad(&grad, Some(&cls_grad)));
        }
        let (full, dist) = eval_full(&theta).map_err(divergence_at(global_step))?;
        if full < best_loss {
            best_loss = full;
            best_dist = dist;
            best_theta.copy_from_slice(&theta);
        }
    }

    let (p, _) = unflatten(&best_theta, k, d, Some(n_stages));
    let lambda_topo_val = topo.map(|(_, _, l)| l).unwrap_or(0.0);
    Ok(LetHead {
        w_enc: p.w,
        b: p.b,
        beta: p.gamma.exp(),
        k,
        variant,
        hyper: HeadHyper {
            alpha: 0.0,
            w_stage: cfg.weights.w_stage,
            w_local: cfg.weights.w_local,
            w_recon: cfg.weights.w_recon,
            w_cls: cfg.weights.w_cls,
            lambda_topo: lambda_topo_val,
            lambda_compact,
        },
        seed,
        train: TrainStats {
            init_loss,
            final_loss: best_loss,
            final_distance_loss: best_dist,
            steps: global_step,
        },
        gate_report: None,
        frozen: false,
    })
}

fn divergence_at(step: usize) -> impl Fn(ForgeError) -> ForgeError {
    move |e| match e {
        ForgeError::DegenerateLatent => ForgeError::DivergenceError { step },
        other => other,
    }
}

/// Cell-trained head: stage-balanced sampling plus the four-term composite
/// objective (stage-distance fit, neighborhood preservation, reconstruction,
/// stage classification). The classifier is discarded from the result.
pub fn train_cell_head(
    panel: &AnchorPanel,
    k: usize,
    cfg: &CellTrainConfig,
    seed: u64,
) -> Result<LetHead> {
    train_cells_core(panel, k, cfg, None, 0.0, seed, HeadVariant::Cell)
}

/// Hybrid head: the cell objective plus an anchor-topology prior (shared
/// stage centroid distances matched to the reference head's) and a
/// within-stage compactness term.
pub fn train_hybrid_head(
    panel: &AnchorPanel,
    ref_head: &LetHead,
    ref_panel: &AnchorPanel,
    lambda_topo: f64,
    lambda_compact: f64,
    k: usize,
    cfg: &CellTrainConfig,
    seed: u64,
) -> Result<LetHead> {
    if !ref_head.is_frozen() {
        return Err(ForgeError::InvalidArgument(
            "reference head must be gated/frozen".into(),
        ));
    }
    // shared stages by name
    let ref_present: std::collections::BTreeSet<&str> = ref_panel
        .stage
        .iter()
        .map(|s| s.as_str())
        .collect();
    let mut shared_names: Vec<&str> = panel
        .stage
        .iter()
        .map(|s| s.as_str())
        .filter(|s| ref_present.contains(s))
        .collect();
    shared_names.sort_unstable();
    shared_names.dedup();
    if shared_names.is_empty() {
        return Err(ForgeError::InvalidArgument(
            "no shared stages between panel and reference".into(),
        ));
    }
    // reference centroid distances over shared stages
    let z_ref = ref_head.latents(&ref_panel.features)?;
    let mut d_ref = DMatrix::zeros(shared_names.len(), shared_names.len());
    let mut cents = Vec::with_capacity(shared_names.len());
    for name in &shared_names {
        let rows: Vec<usize> = (0..ref_panel.n_rows())
            .filter(|&i| ref_panel.stage[i] == *name)
            .collect();
        let mut c = vec![0.0; ref_head.k];
        for &r in &rows {
            for (j, cj) in c.iter_mut().enumerate() {
                *cj += z_ref[(r, j)];
            }
        }
        for cj in c.iter_mut() {
            *cj /= rows.len() as f64;
        }
        cents.push(c);
    }
    for a in 0..cents.len() {
        for b in (a + 1)..cents.len() {
            let dist = latent_distance(&cents[a], &cents[b], ref_head.beta)?;
            d_ref[(a, b)] = dist;
            d_ref[(b, a)] = dist;
        }
    }
    let slot_of_name: std::collections::BTreeMap<&str, usize> = shared_names
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i))
        .collect();
    let shared_slot: Vec<Option<usize>> = panel
        .stage_names()
        .iter()
        .map(|n| slot_of_name.get(n.as_str()).copied())
        .collect();
    let topo = if lambda_topo != 0.0 {
        Some((&d_ref, shared_slot.as_slice(), lambda_topo))
    } else {
        None
    };
    train_cells_core(
        panel,
        k,
        cfg,
        topo,
        lambda_compact,
        seed,
        HeadVariant::Hybrid,
    )
}

/// Candidate metrics entering the hybrid selection score.
#[derive(Debug, Clone, Copy)]
pub struct SelectionMetrics {
    pub rho_resid: f64,
    pub auc_a: f64,
    pub auc_b: f64,
    pub branch_silhouette: f64,
    pub normalized_spread: f64,
}

/// rho_resid + 0.25*AUC_a + 0.25*AUC_b + 0.40*silhouette - 0.20*spread.
pub fn hybrid_selection_score(m: &SelectionMetrics) -> f64 {
    m.rho_resid + 0.25 * m.auc_a + 0.25 * m.auc_b + 0.40 * m.branch_silhouette
        - 0.20 * m.normalized_spread
}

/// Quality gates: trustworthiness, held-out distance correlations for
/// random/donor/clade splits, and a donor x tissue blocked permutation
/// p-value. Rows are canonically reordered first, so the report does not
/// depend on input row order.
pub fn gate(head: &LetHead, panel: &AnchorPanel, cfg: &GateConfig) -> Result<GateReport> {
    let order = panel.canonical_order();
    let panel = panel.select_rows(&order)?;
    let n = panel.n_rows();
    if n < 4 {
        return Err(ForgeError::InsufficientData(
            "gate needs at least 4 rows".into(),
        ));
    }
    let z = head.latents(&panel.features)?;
    let trust_k = cfg.trust_k.min(n.saturating_sub(2)).max(1);
    let trust = trustworthiness(&panel.features, &z, trust_k)?;

    // all unordered pairs
    let mut pair_idx = Vec::with_capacity(n * (n - 1) / 2);
    let mut d_hat = Vec::with_capacity(n * (n - 1) / 2);
    let mut d_tgt = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            let zj: Vec<f64> = z.row(j).iter().copied().collect();
            d_hat.push(latent_distance(&zi, &zj, head.beta)?);
            d_tgt.push(panel.d_target(i, j));
            pair_idx.push((i, j));
        }
    }
    let n_pairs = pair_idx.len();

    // random pair holdout
    let n_hold = ((n_pairs as f64 * cfg.random_pair_frac).floor() as usize).max(1);
    if n_hold < 3 {
        return Err(ForgeError::InsufficientData(
            "random holdout has fewer than 3 pairs".into(),
        ));
    }
    let mut pool: Vec<usize> = (0..n_pairs).collect();
    pool.shuffle(&mut stream(cfg.seed, "gate-random-pairs", 0));
    pool.truncate(n_hold);
    let corr_random = spearman(
        &pool.iter().map(|&p| d_hat[p]).collect::<Vec<_>>(),
        &pool.iter().map(|&p| d_tgt[p]).collect::<Vec<_>>(),
    )?;

    // leave-one-group-out folds over pairs touching the held-out group
    let fold_corr = |col: &[String]| -> Result<f64> {
        let mut groups: Vec<&str> = col.iter().map(|s| s.as_str()).collect();
        groups.sort_unstable();
        groups.dedup();
        if groups.len() < 2 {
            return Err(ForgeError::InsufficientData(
                "need at least two groups for a holdout split".into(),
            ));
        }
        let mut sum = 0.0;
        for g in &groups {
            let held: Vec<usize> = (0..n_pairs)
                .filter(|&p| {
                    let (i, j) = pair_idx[p];
                    col[i] == *g || col[j] == *g
                })
                .collect();
            if held.len() < 3 {
                return Err(ForgeError::InsufficientData(format!(
                    "holdout split '{g}' has fewer than 3 pairs"
                )));
            }
            sum += spearman(
                &held.iter().map(|&p| d_hat[p]).collect::<Vec<_>>(),
                &held.iter().map(|&p| d_tgt[p]).collect::<Vec<_>>(),
            )?;
        }
        Ok(sum / groups.len() as f64)
    };
    let corr_donor = fold_corr(&panel.donor)?;
    let corr_clade = fold_corr(&panel.branch)?;

    // blocked permutation: permute target rows within donor x tissue blocks
    let observed = spearman(&d_hat, &d_tgt)?;
    let rank_hat = midranks(&d_hat);
    let blocks = panel.donor_tissue_blocks();
    let blocked_p = blocked_permutation_p(
        observed,
        |perm| {
            let permuted: Vec<f64> = pair_idx
                .iter()
                .map(|&(i, j)| panel.d_target(perm[i], perm[j]))
                .collect();
            let rank_perm = midranks(&permuted);
            crate::metrics::pearson_corr(&rank_hat, &rank_perm)
        },
        &blocks,
        cfg.n_perm,
        cfg.seed,
    )?;

    let th = cfg.thresholds;
    let passed = trust >= th.trust_min
        && corr_random.min(corr_donor).min(corr_clade) >= th.corr_min
        && blocked_p <= th.p_max;
    Ok(GateReport {
        trustworthiness: trust,
        corr_random,
        corr_donor,
        corr_clade,
        blocked_p,
        passed,
    })
}

/// Frozen zero-shot transfer: apply the head to an external panel and gate
/// it there. The head is immutable; latents come back in the panel's
/// original row order.
pub fn transfer(
    head: &LetHead,
    external: &AnchorPanel,
    cfg: &GateConfig,
) -> Result<(DMatrix<f64>, GateReport)> {
    if !head.is_frozen() {
        return Err(ForgeError::InvalidArgument(
            "transfer requires a gated/frozen head".into(),
        ));
    }
    let z = head.latents(&external.features)?;
    let report = gate(head, external, cfg)?;
    Ok((z, report))
}
