//! Row panels: feature vectors with donor/tissue/branch/stage labels and a
//! target pairwise-distance structure.
//!
//! Targets are stored per stage (an S x S matrix) and rows inherit their
//! stage's entries, which keeps cell-scale panels cheap while still exposing
//! a full n x n target matrix. A panel with one private stage per row can
//! carry arbitrary pairwise targets.

use crate::error::{ForgeError, Result};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AnchorPanel {
    pub features: DMatrix<f64>,
    pub donor: Vec<String>,
    pub tissue: Vec<String>,
    pub branch: Vec<String>,
    pub stage: Vec<String>,
    pub stage_depth: Vec<u32>,
    /// Stage id per row, indexing into `stage_names` / `stage_dist`.
    stage_index: Vec<usize>,
    stage_names: Vec<String>,
    stage_dist: DMatrix<f64>,
}

impl AnchorPanel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: DMatrix<f64>,
        donor: Vec<String>,
        tissue: Vec<String>,
        branch: Vec<String>,
        stage: Vec<String>,
        stage_depth: Vec<u32>,
        stage_names: Vec<String>,
        stage_dist: DMatrix<f64>,
    ) -> Result<Self> {
        let n = features.nrows();
        if [donor.len(), tissue.len(), branch.len(), stage.len(), stage_depth.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(ForgeError::ShapeError(
                "label columns must match feature rows".into(),
            ));
        }
        for (name, col) in [
            ("donor", &donor),
            ("tissue", &tissue),
            ("branch", &branch),
            ("stage", &stage),
        ] {
            if col.iter().any(|v| v.is_empty()) {
                return Err(ForgeError::InvalidArgument(format!(
                    "column '{name}' has missing labels"
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ForgeError::InvalidArgument(
                "features contain non-finite values".into(),
            ));
        }
        let s = stage_names.len();
        if stage_dist.nrows() != s || stage_dist.ncols() != s {
            return Err(ForgeError::ShapeError(
                "stage distance matrix does not match stage list".into(),
            ));
        }
        for i in 0..s {
            if stage_dist[(i, i)] != 0.0 {
                return Err(ForgeError::InvalidArgument(
                    "target distances must have zero diagonal".into(),
                ));
            }
            for j in 0..s {
                let v = stage_dist[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(ForgeError::InvalidArgument(
                        "target distances must be finite and non-negative".into(),
                    ));
                }
                if (v - stage_dist[(j, i)]).abs() > 0.0 {
                    return Err(ForgeError::InvalidArgument(
                        "target distances must be symmetric".into(),
                    ));
                }
            }
        }
        let lookup: BTreeMap<&str, usize> = stage_names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut stage_index = Vec::with_capacity(n);
        for st in &stage {
            let idx = lookup.get(st.as_str()).ok_or_else(|| {
                ForgeError::InvalidArgument(format!("row stage '{st}' not in stage list"))
            })?;
            stage_index.push(*idx);
        }
        Ok(AnchorPanel {
            features,
            donor,
            tissue,
            branch,
            stage,
            stage_depth,
            stage_index,
            stage_names,
            stage_dist,
        })
    }

    /// Panel with an explicit per-row target matrix (one private stage per
    /// row).
    pub fn with_explicit_targets(
        features: DMatrix<f64>,
        donor: Vec<String>,
        tissue: Vec<String>,
        branch: Vec<String>,
        d_target: DMatrix<f64>,
    ) -> Result<Self> {
        let n = features.nrows();
        if d_target.nrows() != n || d_target.ncols() != n {
            return Err(ForgeError::ShapeError("d_target must be n x n".into()));
        }
        let stage: Vec<String> = (0..n).map(|i| format!("row{i}")).collect();
        let depth = vec![0u32; n];
        AnchorPanel::new(
            features,
            donor,
            tissue,
            branch,
            stage.clone(),
            depth,
            stage,
            d_target,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_target(&self, i: usize, j: usize) -> f64 {
        self.stage_dist[(self.stage_index[i], self.stage_index[j])]
    }

    pub fn d_target_matrix(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        DMatrix::from_fn(n, n, |i, j| self.d_target(i, j))
    }

    pub fn stage_ids(&self) -> &[usize] {
        &self.stage_index
    }

    pub fn stage_names(&self) -> &[String] {
        &self.stage_names
    }

    pub fn stage_distances(&self) -> &DMatrix<f64> {
        &self.stage_dist
    }

    /// Donor x tissue block id per row (for blocked permutation tests).
    pub fn donor_tissue_blocks(&self) -> Vec<usize> {
        let mut ids = BTreeMap::new();
        let mut out = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_rows() {
            let key = (self.donor[i].clone(), self.tissue[i].clone());
            let next = ids.len();
            out.push(*ids.entry(key).or_insert(next));
        }
        out
    }

    /// New panel with rows reordered/selected by `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Result<AnchorPanel> {
        if idx.iter().any(|&i| i >= self.n_rows()) {
            return Err(ForgeError::InvalidArgument("row index out of range".into()));
        }
        let take = |v: &Vec<String>| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let features = DMatrix::from_fn(idx.len(), self.n_features(), |r, c| {
            self.features[(idx[r], c)]
        });
        AnchorPanel::new(
            features,
            take(&self.donor),
            take(&self.tissue),
            take(&self.branch),
            take(&self.stage),
            idx.iter().map(|&i| self.stage_depth[i]).collect(),
            self.stage_names.clone(),
            self.stage_dist.clone(),
        )
    }

    /// New panel with stage/branch/depth labels (and hence target rows)
    /// permuted across rows; features stay put. Used for null controls.
    pub fn shuffle_labels(&self, perm: &[usize]) -> Result<AnchorPanel> {
        if perm.len() != self.n_rows() {
            return Err(ForgeError::InvalidArgument("bad permutation length".into()));
        }
        AnchorPanel::new(
            self.features.clone(),
            self.donor.clone(),
            self.tissue.clone(),
            perm.iter().map(|&i| self.branch[i].clone()).collect(),
            perm.iter().map(|&i| self.stage[i].clone()).collect(),
            perm.iter().map(|&i| self.stage_depth[i]).collect(),
            self.stage_names.clone(),
            self.stage_dist.clone(),
        )
    }

    /// Canonical row order: by labels first, feature bytes as tie-break.
    /// Gate statistics are computed in this order, making them invariant to
    /// the input row ordering.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_rows()).collect();
        idx.sort_by(|&a, &b| {
            (&self.donor[a], &self.tissue[a], &self.stage[a], &self.branch[a])
                .cmp(&(&self.donor[b], &self.tissue[b], &self.stage[b], &self.branch[b]))
                .then_with(|| {
                    for c in 0..self.n_features() {
                        let ord = self.features[(a, c)].total_cmp(&self.features[(b, c)]);
                        if ord != std::cmp::Ordering::Equal {
                            return ord;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
        });
        idx
    }

    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec![
            "row_id".to_string(),
            "donor".into(),
            "tissue".into(),
            "branch".into(),
            "stage".into(),
            "stage_depth".into(),
        ];
        for c in 0..self.n_features() {
            header.push(format!("f{c}"));
        }
        w.write_record(&header).map_err(io_err)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                format!("r{i}"),
                self.donor[i].clone(),
                self.tissue[i].clone(),
                self.branch[i].clone(),
                self.stage[i].clone(),
                self.stage_depth[i].to_string(),
            ];
            for c in 0..self.n_features() {
                rec.push(format!("{}", self.features[(i, c)]));
            }
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_stage_distances_csv(&self, path: &Path) -> Result<()> {
        write_stage_distances_csv(path, &self.stage_names, &self.stage_dist)
    }

    /// Load a panel from a rows CSV plus a stage-distance CSV.
    pub fn load_csv(rows_path: &Path, stages_path: &Path) -> Result<AnchorPanel> {
        let (names, dist) = read_stage_distances_csv(stages_path)?;
        let mut rdr = csv::Reader::from_path(rows_path).map_err(io_err)?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(io_err)?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let feature_cols: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with('f') && h[1..].chars().all(|c| c.is_ascii_digit()))
            .map(|(i, _)| i)
            .collect();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| ForgeError::FormatError(format!("missing column '{name}'")))
        };
        let (c_donor, c_tissue, c_branch, c_stage, c_depth) = (
            col("donor")?,
            col("tissue")?,
            col("branch")?,
            col("stage")?,
            col("stage_depth")?,
        );
        let mut donor = Vec::new();
        let mut tissue = Vec::new();
        let mut branch = Vec::new();
        let mut stage = Vec::new();
        let mut depth = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(io_err)?;
            donor.push(rec[c_donor].to_string());
            tissue.push(rec[c_tissue].to_string());
            branch.push(rec[c_branch].to_string());
            stage.push(rec[c_stage].to_string());
            depth.push(
                rec[c_depth]
                    .parse::<u32>()
                    .map_err(|e| ForgeError::FormatError(format!("bad stage_depth: {e}")))?,
            );
            let mut row = Vec::with_capacity(feature_cols.len());
            for &c in &feature_cols {
                row.push(
                    rec[c]
                        .parse::<f64>()
                        .map_err(|e| ForgeError::FormatError(format!("bad feature value: {e}")))?,
                );
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(ForgeError::FormatError("empty panel".into()));
        }
        let d = rows[0].len();
        let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        AnchorPanel::new(features, donor, tissue, branch, stage, depth, names, dist)
    }
}

fn io_err(e: csv::Error) -> ForgeError {
    ForgeError::FormatError(format!("csv: {e}"))
}

pub fn write_stage_distances_csv(
    path: &Path,
    names: &[String],
    dist: &DMatrix<f64>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut header = vec!["stage".to_string()];
    header.extend(names.iter().cloned());
    writeln!(f, "{}", header.join(","))?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        for j in 0..names.len() {
            row.push(format!("{}", dist[(i, j)]));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_stage_distances_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ForgeError::FormatError("empty stage distance file".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    let s = names.len();
    let mut dist = DMatrix::zeros(s, s);
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != s + 1 {
            return Err(ForgeError::FormatError(format!(
                "stage distance row {i} has {} fields, expected {}",
                parts.len(),
                s + 1
            )));
        }
        for j in 0..s {
            dist[(i, j)] = parts[j + 1]
                .parse::<f64>()
                .map_err(|e| ForgeError::FormatError(format!("bad distance: {e}")))?;
        }
    }
    Ok((names, dist))
}

/// External representation plug-in: a CSV of per-row latent coordinates
/// keyed by row id (`row_id,z0,z1,...`). Returns latents aligned to
/// `0..n_rows` assuming ids `r0..r{n-1}`.
pub fn read_external_latents_csv(path: &Path, n_rows: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(io_err)?;
    let width = rdr.headers().map_err(io_err)?.len() - 1;
    let mut out = vec![None; n_rows];
    for rec in rdr.records() {
        let rec = rec.map_err(io_err)?;
        let id = rec[0]
            .strip_prefix('r')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| ForgeError::FormatError(format!("bad row id '{}'", &rec[0])))?;
        if id >= n_rows {
            return Err(ForgeError::FormatError(format!("row id {id} out of range")));
        }
        let mut row = Vec::with_capacity(width);
        for c in 1..=width {
            row.push(
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| ForgeError::FormatError(format!("bad latent value: {e}")))?,
            );
        }
        out[id] = Some(row);
    }
    let rows: Vec<Vec<f64>> = out
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| ForgeError::FormatError(format!("missing row r{i}"))))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n_rows, width, |i, j| rows[i][j]))
}
