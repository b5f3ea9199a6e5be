//! Ground-truth generator: a branching developmental manifold with
//! donors/tissues/stages, a weight tensor whose designated heads encode the
//! stage geometry, and brute-force oracles.
//!
//! Stage codes live on a sphere: the root points along axis 0 and branch b
//! walks a great circle in the (axis 0, axis b+1) plane with a fixed edge
//! angle, so same-branch hop distances are exactly realizable as scaled
//! angular distances. The planted head reads the code subspace (plus a set
//! of weak extra factors) and annihilates a dedicated high-variance
//! nuisance subspace that baselines have to cope with.

use crate::error::{ForgeError, Result};
use crate::operator::WeightTensor;
use crate::panel::AnchorPanel;
use crate::rng::{normal, stream};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_branches: usize,
    pub depth_per_branch: usize,
    pub n_donors: usize,
    pub n_tissues: usize,
    pub cells_per_stage: usize,
    /// Feature dimension G.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub planted_heads: Vec<(usize, usize)>,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Rank of each planted head: 1 + n_branches code factors plus weak
    /// extras.
    pub planted_rank: usize,
    pub signal_scale: f64,
    /// Norm of the per-donor / per-tissue additive offsets.
    pub confound_scale: f64,
    /// Structured per-cell noise subspace (orthogonal to the code reads).
    pub nuisance_dim: usize,
    pub nuisance_sigma: f64,
    /// Entry scale of distractor heads relative to 1/sqrt(G).
    pub distractor_scale: f64,
    /// Donors held out for the external panel.
    pub external_donors: usize,
    /// Angle between adjacent stages on the code sphere, radians.
    pub edge_angle: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_branches: 3,
            depth_per_branch: 3,
            n_donors: 8,
            n_tissues: 3,
            cells_per_stage: 240,
            feature_dim: 32,
            noise_sigma: 0.1,
            planted_heads: vec![(0, 0), (2, 0)],
            n_layers: 3,
            n_heads: 2,
            planted_rank: 16,
            signal_scale: 1.0,
            confound_scale: 0.25,
            nuisance_dim: 12,
            nuisance_sigma: 0.6,
            distractor_scale: 0.12,
            external_donors: 2,
            edge_angle: 0.35,
            seed: 12345,
        }
    }
}

/// Rooted stage tree: a trunk stage plus `n_branches` linear branches.
#[derive(Debug, Clone)]
pub struct StageTree {
    pub names: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub depth: Vec<u32>,
    pub branch: Vec<String>,
}

impl StageTree {
    pub fn build(n_branches: usize, depth_per_branch: usize) -> StageTree {
        let mut names = vec!["s_root".to_string()];
        let mut parent = vec![None];
        let mut depth = vec![0u32];
        let mut branch = vec!["trunk".to_string()];
        for b in 0..n_branches {
            let mut prev = 0usize;
            for j in 1..=depth_per_branch {
                names.push(format!("b{b}s{j}"));
                parent.push(Some(prev));
                depth.push(j as u32);
                branch.push(format!("b{b}"));
                prev = names.len() - 1;
            }
        }
        StageTree {
            names,
            parent,
            depth,
            branch,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ForgeError::InvalidArgument(format!("unknown stage '{name}'")))
    }

    /// Unweighted hop distance between two stages (walk to the root).
    pub fn hop_distance(&self, a: usize, b: usize) -> Result<u32> {
        if a >= self.len() || b >= self.len() {
            return Err(ForgeError::InvalidArgument("stage index out of range".into()));
        }
        let path_to_root = |mut s: usize| {
            let mut path = vec![s];
            while let Some(p) = self.parent[s] {
                path.push(p);
                s = p;
            }
            path
        };
        let pa = path_to_root(a);
        let pb = path_to_root(b);
        // deepest common ancestor
        let set: std::collections::HashSet<usize> = pa.iter().copied().collect();
        let (mut lca_pos_b, mut lca) = (0usize, 0usize);
        for (pos, &s) in pb.iter().enumerate() {
            if set.contains(&s) {
                lca_pos_b = pos;
                lca = s;
                break;
            }
        }
        let pos_a = pa.iter().position(|&s| s == lca).unwrap();
        Ok((pos_a + lca_pos_b) as u32)
    }

    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let s = self.len();
        DMatrix::from_fn(s, s, |i, j| self.hop_distance(i, j).unwrap() as f64)
    }

    /// Leaf stages (branch ends).
    pub fn terminals(&self) -> Vec<String> {
        (0..self.len())
            .filter(|&s| !self.parent.contains(&Some(s)))
            .map(|s| self.names[s].clone())
            .collect()
    }
}

/// Hop distance between two stages by name.
pub fn oracle_stage_distance(stage_a: &str, stage_b: &str, tree: &StageTree) -> Result<u32> {
    tree.hop_distance(tree.index_of(stage_a)?, tree.index_of(stage_b)?)
}

#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub tree: StageTree,
    pub planted_units: Vec<(usize, usize)>,
    /// SVD factor indices of the planted head that carry the stage code.
    pub code_factors: Vec<usize>,
    pub planted_rank: usize,
    pub stem_stage: String,
    pub terminal_stages: Vec<String>,
    pub internal_donors: Vec<String>,
    pub external_donors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub tensor: WeightTensor,
    /// Every generated cell (all donors).
    pub cells: AnchorPanel,
    /// Cells restricted to internal donors (cell/hybrid head training).
    pub internal_cells: AnchorPanel,
    pub internal_anchors: AnchorPanel,
    pub external_anchors: AnchorPanel,
    pub truth: SynthTruth,
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_branches == 0 || cfg.depth_per_branch == 0 {
        return Err(ForgeError::InvalidArgument(
            "need at least one branch of depth one".into(),
        ));
    }
    if cfg.n_donors < 2 {
        return Err(ForgeError::InvalidArgument("need at least 2 donors".into()));
    }
    if cfg.external_donors == 0 || cfg.external_donors >= cfg.n_donors {
        return Err(ForgeError::InvalidArgument(
            "external donors must leave at least one internal donor".into(),
        ));
    }
    if cfg.n_tissues < 2 {
        return Err(ForgeError::InvalidArgument("need at least 2 tissues".into()));
    }
    if cfg.feature_dim < 16 {
        return Err(ForgeError::InvalidArgument("feature_dim must be >= 16".into()));
    }
    if cfg.noise_sigma < 0.0 || cfg.nuisance_sigma < 0.0 {
        return Err(ForgeError::InvalidArgument("noise must be >= 0".into()));
    }
    if cfg.planted_heads.is_empty() {
        return Err(ForgeError::InvalidArgument(
            "planted_heads must be non-empty".into(),
        ));
    }
    let m_code = 1 + cfg.n_branches;
    if cfg.planted_rank < m_code || cfg.planted_rank > cfg.feature_dim {
        return Err(ForgeError::InvalidArgument(format!(
            "planted_rank must lie in [{m_code}, {}]",
            cfg.feature_dim
        )));
    }
    if cfg.planted_rank + cfg.nuisance_dim > cfg.feature_dim {
        return Err(ForgeError::InvalidArgument(
            "planted_rank + nuisance_dim exceeds feature_dim".into(),
        ));
    }
    for &(l, h) in &cfg.planted_heads {
        if l >= cfg.n_layers || h >= cfg.n_heads {
            return Err(ForgeError::InvalidArgument(format!(
                "planted head ({l},{h}) outside tensor"
            )));
        }
    }
    let span = cfg.edge_angle * (2 * cfg.depth_per_branch) as f64;
    if !(cfg.edge_angle > 0.0 && span < std::f64::consts::PI) {
        return Err(ForgeError::InvalidArgument(
            "edge_angle too large: tree span must stay under pi".into(),
        ));
    }
    Ok(())
}

/// Orthonormal columns from a seeded Gaussian matrix (QR).
fn orthonormal_columns(g: usize, cols: usize, seed: u64, tag: &str) -> DMatrix<f64> {
    let mut rng = stream(seed, tag, 0);
    let m = DMatrix::from_fn(g, g, |_, _| normal(&mut rng));
    let qr = m.qr();
    let q = qr.q();
    DMatrix::from_fn(g, cols, |i, j| q[(i, j)])
}

/// Spherical stage codes: root along axis 0, branch b in the (0, b+1)
/// plane, one `edge_angle` per hop.
fn stage_codes(tree: &StageTree, n_branches: usize, edge_angle: f64, scale: f64) -> DMatrix<f64> {
    let m_code = 1 + n_branches;
    let mut codes = DMatrix::zeros(tree.len(), m_code);
    for s in 0..tree.len() {
        if tree.branch[s] == "trunk" {
            codes[(s, 0)] = scale;
        } else {
            let b: usize = tree.branch[s][1..].parse().unwrap();
            let angle = tree.depth[s] as f64 * edge_angle;
            codes[(s, 0)] = scale * angle.cos();
            codes[(s, b + 1)] = scale * angle.sin();
        }
    }
    codes
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    validate(cfg)?;
    let g = cfg.feature_dim;
    let tree = StageTree::build(cfg.n_branches, cfg.depth_per_branch);
    let n_stages = tree.len();
    let m_code = 1 + cfg.n_branches;
    let stage_dist = tree.distance_matrix();

    // frames: reads (code + weak + nuisance all mutually orthogonal),
    // independent writes
    let frame_in =
        orthonormal_columns(g, cfg.planted_rank + cfg.nuisance_dim, cfg.seed, "frame-in");
    let m_in = frame_in.columns(0, cfg.planted_rank).into_owned();
    let nuis = frame_in
        .columns(cfg.planted_rank, cfg.nuisance_dim)
        .into_owned();
    let m_out = orthonormal_columns(g, cfg.planted_rank, cfg.seed, "frame-out");

    // distinct singular values: strong code factors, weak extras
    let mut sigma = Vec::with_capacity(cfg.planted_rank);
    for f in 0..m_code {
        sigma.push(2.5 - 0.2 * f as f64);
    }
    let n_weak = cfg.planted_rank - m_code;
    for f in 0..n_weak {
        sigma.push(0.45 - 0.3 * f as f64 / n_weak.max(1) as f64);
    }

    let mut planted = DMatrix::zeros(g, g);
    for (f, &s) in sigma.iter().enumerate() {
        planted += m_in.column(f) * s * m_out.column(f).transpose();
    }

    // weight tensor: planted units share the same operator, the rest are
    // Gaussian distractors
    let mut weights = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let entry_sd = cfg.distractor_scale / (g as f64).sqrt();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            if cfg.planted_heads.contains(&(l, h)) {
                weights.push(planted.clone());
            } else {
                let mut rng = stream(cfg.seed, "distractor", (l * cfg.n_heads + h) as u64);
                weights.push(DMatrix::from_fn(g, g, |_, _| entry_sd * normal(&mut rng)));
            }
        }
    }
    let tensor = WeightTensor::new(cfg.n_layers, cfg.n_heads, g, weights)?;

    // donor / tissue offsets
    let donors: Vec<String> = (0..cfg.n_donors).map(|d| format!("d{d}")).collect();
    let tissues: Vec<String> = (0..cfg.n_tissues).map(|t| format!("t{t}")).collect();
    let offset = |tag: &str, idx: u64, norm: f64| -> DVector<f64> {
        let mut rng = stream(cfg.seed, tag, idx);
        let v = DVector::from_fn(g, |_, _| normal(&mut rng));
        let n = v.norm();
        v * (norm / n)
    };
    let donor_offsets: Vec<DVector<f64>> = (0..cfg.n_donors)
        .map(|d| offset("donor-offset", d as u64, cfg.confound_scale))
        .collect();
    let tissue_offsets: Vec<DVector<f64>> = (0..cfg.n_tissues)
        .map(|t| offset("tissue-offset", t as u64, 0.6 * cfg.confound_scale))
        .collect();
    let baseline = {
        let mut rng = stream(cfg.seed, "baseline", 0);
        DVector::from_fn(g, |_, _| 6.0 + 0.3 * normal(&mut rng))
    };

    let n_internal_donors = cfg.n_donors - cfg.external_donors;
    let internal_donor_ids: Vec<usize> = (0..n_internal_donors).collect();
    let external_donor_ids: Vec<usize> = (n_internal_donors..cfg.n_donors).collect();
    // the last tissue never appears in internal rows
    let tissue_pool = |donor: usize| -> Vec<usize> {
        if donor < n_internal_donors {
            (0..cfg.n_tissues - 1).collect()
        } else {
            (0..cfg.n_tissues).collect()
        }
    };

    let codes = stage_codes(&tree, cfg.n_branches, cfg.edge_angle, cfg.signal_scale);
    let total_cells = n_stages * cfg.cells_per_stage;
    let mut x = DMatrix::zeros(total_cells, g);
    let mut donor_col = Vec::with_capacity(total_cells);
    let mut tissue_col = Vec::with_capacity(total_cells);
    let mut branch_col = Vec::with_capacity(total_cells);
    let mut stage_col = Vec::with_capacity(total_cells);
    let mut depth_col = Vec::with_capacity(total_cells);

    let mut row = 0usize;
    for s in 0..n_stages {
        let proto = {
            let mut p = baseline.clone();
            for f in 0..m_code {
                p += m_in.column(f) * codes[(s, f)];
            }
            p
        };
        let mut rng = stream(cfg.seed, "cells", s as u64);
        for c in 0..cfg.cells_per_stage {
            let donor = (s + c) % cfg.n_donors;
            let pool = tissue_pool(donor);
            let tissue = pool[(s + c / cfg.n_donors) % pool.len()];
            let mut cell = &proto + &donor_offsets[donor] + &tissue_offsets[tissue];
            for j in 0..cfg.nuisance_dim {
                let eta = cfg.nuisance_sigma * normal(&mut rng);
                cell += nuis.column(j) * eta;
            }
            if cfg.noise_sigma > 0.0 {
                for v in cell.iter_mut() {
                    *v += cfg.noise_sigma * normal(&mut rng);
                }
            } else {
                // keep the RNG stream aligned across noise settings
                for _ in 0..g {
                    let _ = normal(&mut rng);
                }
            }
            x.set_row(row, &cell.transpose());
            donor_col.push(donors[donor].clone());
            tissue_col.push(tissues[tissue].clone());
            branch_col.push(tree.branch[s].clone());
            stage_col.push(tree.names[s].clone());
            depth_col.push(tree.depth[s]);
            row += 1;
        }
    }

    let cells = AnchorPanel::new(
        x,
        donor_col,
        tissue_col,
        branch_col,
        stage_col,
        depth_col,
        tree.names.clone(),
        stage_dist.clone(),
    )?;

    let internal_rows: Vec<usize> = (0..cells.n_rows())
        .filter(|&i| {
            internal_donor_ids
                .iter()
                .any(|&d| cells.donor[i] == donors[d])
        })
        .collect();
    let internal_cells = cells.select_rows(&internal_rows)?;

    let make_anchors = |donor_ids: &[usize]| -> Result<AnchorPanel> {
        let mut groups: std::collections::BTreeMap<(String, String, String), Vec<usize>> =
            Default::default();
        for i in 0..cells.n_rows() {
            if donor_ids.iter().any(|&d| cells.donor[i] == donors[d]) {
                groups
                    .entry((
                        cells.donor[i].clone(),
                        cells.tissue[i].clone(),
                        cells.stage[i].clone(),
                    ))
                    .or_default()
                    .push(i);
            }
        }
        let n_anchors = groups.len();
        let mut feats = DMatrix::zeros(n_anchors, g);
        let mut donor_a = Vec::new();
        let mut tissue_a = Vec::new();
        let mut branch_a = Vec::new();
        let mut stage_a = Vec::new();
        let mut depth_a = Vec::new();
        for (a, ((donor, tissue, stage), rows)) in groups.iter().enumerate() {
            for &r in rows {
                for c in 0..g {
                    feats[(a, c)] += cells.features[(r, c)];
                }
            }
            for c in 0..g {
                feats[(a, c)] /= rows.len() as f64;
            }
            donor_a.push(donor.clone());
            tissue_a.push(tissue.clone());
            branch_a.push(cells.branch[rows[0]].clone());
            stage_a.push(stage.clone());
            depth_a.push(cells.stage_depth[rows[0]]);
        }
        AnchorPanel::new(
            feats,
            donor_a,
            tissue_a,
            branch_a,
            stage_a,
            depth_a,
            tree.names.clone(),
            stage_dist.clone(),
        )
    };
    let internal_anchors = make_anchors(&internal_donor_ids)?;
    let external_anchors = make_anchors(&external_donor_ids)?;

    let truth = SynthTruth {
        terminal_stages: tree.terminals(),
        stem_stage: "s_root".into(),
        code_factors: (0..m_code).collect(),
        planted_rank: cfg.planted_rank,
        planted_units: cfg.planted_heads.clone(),
        internal_donors: internal_donor_ids
            .iter()
            .map(|&d| donors[d].clone())
            .collect(),
        external_donors: external_donor_ids
            .iter()
            .map(|&d| donors[d].clone())
            .collect(),
        tree,
    };
    Ok(SynthData {
        tensor,
        cells,
        internal_cells,
        internal_anchors,
        external_anchors,
        truth,
    })
}
