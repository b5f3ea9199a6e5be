//! Frozen weight tensors and the fixed feature operators built from them:
//! pooled drift maps, single heads, compact weighted sums, truncated-SVD
//! surrogates and hard-pruned sparse surrogates.
//!
//! Operators are immutable after construction and `apply` is pure, so they
//! can be shared freely across threads.

use crate::container::{self, Container};
use crate::error::{ForgeError, Result};
use crate::linalg;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Frozen source-model operators A[layer, head], each `dim x dim`.
#[derive(Debug, Clone)]
pub struct WeightTensor {
    n_layers: usize,
    n_heads: usize,
    dim: usize,
    weights: Vec<DMatrix<f64>>,
}

impl WeightTensor {
    pub fn new(n_layers: usize, n_heads: usize, dim: usize, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.len() != n_layers * n_heads {
            return Err(ForgeError::ShapeError(format!(
                "expected {} matrices, got {}",
                n_layers * n_heads,
                weights.len()
            )));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(ForgeError::ShapeError(format!(
                    "matrix {} is {}x{}, expected {}x{}",
                    i,
                    w.nrows(),
                    w.ncols(),
                    dim,
                    dim
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(ForgeError::InvalidArgument(format!(
                    "matrix {i} contains non-finite entries"
                )));
            }
        }
        Ok(WeightTensor {
            n_layers,
            n_heads,
            dim,
            weights,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit(&self, layer: usize, head: usize) -> Result<&DMatrix<f64>> {
        if layer >= self.n_layers || head >= self.n_heads {
            return Err(ForgeError::InvalidArgument(format!(
                "unit ({layer},{head}) outside {}x{} tensor",
                self.n_layers, self.n_heads
            )));
        }
        Ok(&self.weights[layer * self.n_heads + head])
    }

    /// Element-wise mean of A[l,h] over `layers x all heads`.
    fn block_mean(&self, layers: &Range<usize>) -> Result<DMatrix<f64>> {
        if layers.is_empty() || layers.end > self.n_layers {
            return Err(ForgeError::InvalidRange(format!(
                "layer range {}..{} invalid for {} layers",
                layers.start, layers.end, self.n_layers
            )));
        }
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        let mut count = 0usize;
        for l in layers.clone() {
            for h in 0..self.n_heads {
                acc += &self.weights[l * self.n_heads + h];
                count += 1;
            }
        }
        Ok(acc / count as f64)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "dim": self.dim,
        });
        let mut c = Container::new("weight_tensor", meta);
        let mut all = Vec::with_capacity(self.weights.len() * self.dim * self.dim);
        for w in &self.weights {
            all.extend(container::matrix_to_rowmajor(w));
        }
        c.push_section("weights", all);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "weight_tensor" {
            return Err(ForgeError::FormatError(format!(
                "expected weight_tensor container, got '{}'",
                c.kind
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            n_layers: usize,
            n_heads: usize,
            dim: usize,
        }
        let m: Meta = c.meta_typed()?;
        let data = c.section("weights")?;
        let per = m.dim * m.dim;
        let total = m.n_layers * m.n_heads;
        if data.len() != per * total {
            return Err(ForgeError::FormatError("weight payload size mismatch".into()));
        }
        let mut weights = Vec::with_capacity(total);
        for i in 0..total {
            weights.push(container::rowmajor_to_matrix(
                m.dim,
                m.dim,
                &data[i * per..(i + 1) * per],
            )?);
        }
        WeightTensor::new(m.n_layers, m.n_heads, m.dim, weights)
    }
}

/// One read/write-pruned rank-1 factor of a sparse operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseFactor {
    /// Index of the parent low-rank factor this was pruned from.
    pub parent: usize,
    pub read_idx: Vec<usize>,
    pub read_val: Vec<f64>,
    pub write_idx: Vec<usize>,
    pub write_val: Vec<f64>,
}

/// A fixed feature map `x -> f(x)`.
#[derive(Debug, Clone)]
pub enum FeatureOperator {
    Drift {
        early: DMatrix<f64>,
        mid: DMatrix<f64>,
        late: DMatrix<f64>,
        ranges: [Range<usize>; 3],
    },
    SingleHead {
        layer: usize,
        head: usize,
        matrix: DMatrix<f64>,
    },
    Compact {
        units: Vec<(usize, usize)>,
        alphas: Vec<f64>,
        matrix: DMatrix<f64>,
    },
    /// Truncated-SVD surrogate. Singular values are folded into `u`
    /// (u = U * diag(sigma)); `v` holds unit right singular vectors.
    LowRank {
        u: DMatrix<f64>,
        v: DMatrix<f64>,
        singular_values: Vec<f64>,
    },
    Sparse {
        dim: usize,
        k_read: usize,
        k_write: usize,
        factors: Vec<SparseFactor>,
        pruned_factors: Vec<usize>,
    },
}

impl FeatureOperator {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FeatureOperator::Drift { .. } => "drift",
            FeatureOperator::SingleHead { .. } => "single_head",
            FeatureOperator::Compact { .. } => "compact",
            FeatureOperator::LowRank { .. } => "low_rank",
            FeatureOperator::Sparse { .. } => "sparse",
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            FeatureOperator::Drift { early, .. } => early.nrows(),
            FeatureOperator::SingleHead { matrix, .. } => matrix.nrows(),
            FeatureOperator::Compact { matrix, .. } => matrix.nrows(),
            FeatureOperator::LowRank { u, .. } => u.nrows(),
            FeatureOperator::Sparse { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureOperator::Drift { early, .. } => 2 * early.nrows(),
            _ => self.in_dim(),
        }
    }

    /// Row-wise application of the operator.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(ForgeError::ShapeError(format!(
                "input has {} columns, operator expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        match self {
            FeatureOperator::Drift {
                early, mid, late, ..
            } => {
                let xe = x * early;
                let xm = x * mid;
                let xl = x * late;
                let n = x.nrows();
                let g = early.nrows();
                let mut out = DMatrix::zeros(n, 2 * g);
                for i in 0..n {
                    for j in 0..g {
                        out[(i, j)] = xe[(i, j)] - xm[(i, j)];
                        out[(i, g + j)] = xm[(i, j)] - xl[(i, j)];
                    }
                }
                Ok(out)
            }
            FeatureOperator::SingleHead { matrix, .. } => Ok(x * matrix),
            FeatureOperator::Compact { matrix, .. } => Ok(x * matrix),
            FeatureOperator::LowRank { u, v, .. } => Ok(apply_factors(x, u, v)),
            FeatureOperator::Sparse {
                dim,
                factors,
                ..
            } => {
                let n = x.nrows();
                let mut out = DMatrix::zeros(n, *dim);
                for f in factors {
                    for i in 0..n {
                        let mut s = 0.0;
                        for (pos, &g) in f.read_idx.iter().enumerate() {
                            s += x[(i, g)] * f.read_val[pos];
                        }
                        for (pos, &w) in f.write_idx.iter().enumerate() {
                            out[(i, w)] += s * f.write_val[pos];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Number of rank-1 factors (low-rank operators only).
    pub fn rank(&self) -> Option<usize> {
        match self {
            FeatureOperator::LowRank { u, .. } => Some(u.ncols()),
            _ => None,
        }
    }

    /// New low-rank operator retaining only the listed factors, in their
    /// original order. Factor indices must be valid.
    pub fn keep_factors(&self, keep: &[usize]) -> Result<FeatureOperator> {
        match self {
            FeatureOperator::LowRank {
                u,
                v,
                singular_values,
            } => {
                let r = u.ncols();
                let mut sorted: Vec<usize> = keep.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.iter().any(|&f| f >= r) {
                    return Err(ForgeError::InvalidArgument(format!(
                        "factor index out of range (rank {r})"
                    )));
                }
                let mut u2 = DMatrix::zeros(u.nrows(), sorted.len());
                let mut v2 = DMatrix::zeros(v.nrows(), sorted.len());
                let mut s2 = Vec::with_capacity(sorted.len());
                for (col, &f) in sorted.iter().enumerate() {
                    u2.set_column(col, &u.column(f).into_owned());
                    v2.set_column(col, &v.column(f).into_owned());
                    s2.push(singular_values[f]);
                }
                Ok(FeatureOperator::LowRank {
                    u: u2,
                    v: v2,
                    singular_values: s2,
                })
            }
            _ => Err(ForgeError::InvalidArgument(
                "factor selection requires a low_rank operator".into(),
            )),
        }
    }

    /// Zero a single factor at inference time: keep-only of the complement.
    pub fn zero_factor(&self, factor: usize) -> Result<FeatureOperator> {
        let r = self
            .rank()
            .ok_or_else(|| ForgeError::InvalidArgument("zero_factor requires low_rank".into()))?;
        if factor >= r {
            return Err(ForgeError::InvalidArgument(format!(
                "factor {factor} out of range (rank {r})"
            )));
        }
        let keep: Vec<usize> = (0..r).filter(|&f| f != factor).collect();
        self.keep_factors(&keep)
    }

    pub fn to_container(&self) -> Container {
        match self {
            FeatureOperator::Drift {
                early,
                mid,
                late,
                ranges,
            } => {
                let g = early.nrows();
                let meta = serde_json::json!({
                    "kind": "drift",
                    "dim": g,
                    "out_dim": 2 * g,
                    "early": [ranges[0].start, ranges[0].end],
                    "mid": [ranges[1].start, ranges[1].end],
                    "late": [ranges[2].start, ranges[2].end],
                });
                let mut c = Container::new("feature_operator", meta);
                c.push_section("early", container::matrix_to_rowmajor(early));
                c.push_section("mid", container::matrix_to_rowmajor(mid));
                c.push_section("late", container::matrix_to_rowmajor(late));
                c
            }
            FeatureOperator::SingleHead {
                layer,
                head,
                matrix,
            } => {
                let meta = serde_json::json!({
                    "kind": "single_head",
                    "dim": matrix.nrows(),
                    "out_dim": matrix.nrows(),
                    "layer": layer,
                    "head": head,
                });
                let mut c = Container::new("feature_operator", meta);
                c.push_section("matrix", container::matrix_to_rowmajor(matrix));
                c
            }
            FeatureOperator::Compact {
                units,
                alphas,
                matrix,
            } => {
                let meta = serde_json::json!({
                    "kind": "compact",
                    "dim": matrix.nrows(),
                    "out_dim": matrix.nrows(),
                    "units": units,
                    "alphas": alphas,
                });
                let mut c = Container::new("feature_operator", meta);
                c.push_section("matrix", container::matrix_to_rowmajor(matrix));
                c
            }
            FeatureOperator::LowRank {
                u,
                v,
                singular_values,
            } => {
                let meta = serde_json::json!({
                    "kind": "low_rank",
                    "dim": u.nrows(),
                    "out_dim": u.nrows(),
                    "rank": u.ncols(),
                    // singular values are folded into u: A ~ u * v^T directly
                    "uv_scaling": "singular_values_folded_into_u",
                });
                let mut c = Container::new("feature_operator", meta);
                c.push_section("u", container::matrix_to_rowmajor(u));
                c.push_section("v", container::matrix_to_rowmajor(v));
                c.push_section("singular_values", singular_values.clone());
                c
            }
            FeatureOperator::Sparse {
                dim,
                k_read,
                k_write,
                factors,
                pruned_factors,
            } => {
                let meta = serde_json::json!({
                    "kind": "sparse",
                    "dim": dim,
                    "out_dim": dim,
                    "k_read": k_read,
                    "k_write": k_write,
                    "parents": factors.iter().map(|f| f.parent).collect::<Vec<_>>(),
                    "read_idx": factors.iter().map(|f| f.read_idx.clone()).collect::<Vec<_>>(),
                    "write_idx": factors.iter().map(|f| f.write_idx.clone()).collect::<Vec<_>>(),
                    "pruned_factors": pruned_factors,
                    "active_loadings": factors.len() * (k_read + k_write),
                });
                let mut c = Container::new("feature_operator", meta);
                let mut reads = Vec::new();
                let mut writes = Vec::new();
                for f in factors {
                    reads.extend_from_slice(&f.read_val);
                    writes.extend_from_slice(&f.write_val);
                }
                c.push_section("read_values", reads);
                c.push_section("write_values", writes);
                c
            }
        }
    }

    pub fn from_container(c: &Container) -> Result<FeatureOperator> {
        if c.kind != "feature_operator" {
            return Err(ForgeError::FormatError(format!(
                "expected feature_operator container, got '{}'",
                c.kind
            )));
        }
        let kind = c
            .meta
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| ForgeError::FormatError("operator header missing kind".into()))?;
        let dim = c
            .meta
            .get("dim")
            .and_then(|d| d.as_u64())
            .ok_or_else(|| ForgeError::FormatError("operator header missing dim".into()))?
            as usize;
        match kind {
            "drift" => {
                let get_range = |name: &str| -> Result<Range<usize>> {
                    let arr = c.meta.get(name).and_then(|v| v.as_array()).ok_or_else(|| {
                        ForgeError::FormatError(format!("drift header missing range '{name}'"))
                    })?;
                    Ok(arr[0].as_u64().unwrap_or(0) as usize..arr[1].as_u64().unwrap_or(0) as usize)
                };
                Ok(FeatureOperator::Drift {
                    early: container::rowmajor_to_matrix(dim, dim, c.section("early")?)?,
                    mid: container::rowmajor_to_matrix(dim, dim, c.section("mid")?)?,
                    late: container::rowmajor_to_matrix(dim, dim, c.section("late")?)?,
                    ranges: [get_range("early")?, get_range("mid")?, get_range("late")?],
                })
            }
            "single_head" => Ok(FeatureOperator::SingleHead {
                layer: c.meta.get("layer").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
                head: c.meta.get("head").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
                matrix: container::rowmajor_to_matrix(dim, dim, c.section("matrix")?)?,
            }),
            "compact" => {
                let units: Vec<(usize, usize)> =
                    serde_json::from_value(c.meta.get("units").cloned().unwrap_or_default())
                        .map_err(|e| ForgeError::FormatError(format!("bad units: {e}")))?;
                let alphas: Vec<f64> =
                    serde_json::from_value(c.meta.get("alphas").cloned().unwrap_or_default())
                        .map_err(|e| ForgeError::FormatError(format!("bad alphas: {e}")))?;
                Ok(FeatureOperator::Compact {
                    units,
                    alphas,
                    matrix: container::rowmajor_to_matrix(dim, dim, c.section("matrix")?)?,
                })
            }
            "low_rank" => {
                let rank = c.meta.get("rank").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
                Ok(FeatureOperator::LowRank {
                    u: container::rowmajor_to_matrix(dim, rank, c.section("u")?)?,
                    v: container::rowmajor_to_matrix(dim, rank, c.section("v")?)?,
                    singular_values: c.section("singular_values")?.to_vec(),
                })
            }
            "sparse" => {
                let parents: Vec<usize> =
                    serde_json::from_value(c.meta.get("parents").cloned().unwrap_or_default())
                        .map_err(|e| ForgeError::FormatError(format!("bad parents: {e}")))?;
                let read_idx: Vec<Vec<usize>> =
                    serde_json::from_value(c.meta.get("read_idx").cloned().unwrap_or_default())
                        .map_err(|e| ForgeError::FormatError(format!("bad read_idx: {e}")))?;
                let write_idx: Vec<Vec<usize>> =
                    serde_json::from_value(c.meta.get("write_idx").cloned().unwrap_or_default())
                        .map_err(|e| ForgeError::FormatError(format!("bad write_idx: {e}")))?;
                let pruned_factors: Vec<usize> = serde_json::from_value(
                    c.meta.get("pruned_factors").cloned().unwrap_or_default(),
                )
                .map_err(|e| ForgeError::FormatError(format!("bad pruned_factors: {e}")))?;
                let k_read =
                    c.meta.get("k_read").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
                let k_write =
                    c.meta.get("k_write").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
                let reads = c.section("read_values")?;
                let writes = c.section("write_values")?;
                let mut factors = Vec::with_capacity(parents.len());
                let mut ro = 0usize;
                let mut wo = 0usize;
                for (i, &parent) in parents.iter().enumerate() {
                    let nr = read_idx[i].len();
                    let nw = write_idx[i].len();
                    factors.push(SparseFactor {
                        parent,
                        read_idx: read_idx[i].clone(),
                        read_val: reads[ro..ro + nr].to_vec(),
                        write_idx: write_idx[i].clone(),
                        write_val: writes[wo..wo + nw].to_vec(),
                    });
                    ro += nr;
                    wo += nw;
                }
                Ok(FeatureOperator::Sparse {
                    dim,
                    k_read,
                    k_write,
                    factors,
                    pruned_factors,
                })
            }
            other => Err(ForgeError::FormatError(format!(
                "unknown operator kind '{other}'"
            ))),
        }
    }
}

/// Shared factored apply: out = (x * u) * v^T with explicit accumulation
/// order so sparse variants can reproduce it bit-for-bit.
fn apply_factors(x: &DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let g = u.nrows();
    let r = u.ncols();
    let mut out = DMatrix::zeros(n, v.nrows());
    for f in 0..r {
        for i in 0..n {
            let mut s = 0.0;
            for gidx in 0..g {
                s += x[(i, gidx)] * u[(gidx, f)];
            }
            for w in 0..v.nrows() {
                out[(i, w)] += s * v[(w, f)];
            }
        }
    }
    out
}

/// Pooled drift operator from three layer-block means.
pub fn build_drift_operator(
    tensor: &WeightTensor,
    early: Range<usize>,
    mid: Range<usize>,
    late: Range<usize>,
) -> Result<FeatureOperator> {
    let e = tensor.block_mean(&early)?;
    let m = tensor.block_mean(&mid)?;
    let l = tensor.block_mean(&late)?;
    Ok(FeatureOperator::Drift {
        early: e,
        mid: m,
        late: l,
        ranges: [early, mid, late],
    })
}

/// Split `0..n_layers` into early/mid/late thirds (defaults when the caller
/// does not configure block boundaries). Blocks overlap when there are
/// fewer than three layers.
pub fn default_layer_blocks(n_layers: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    match n_layers {
        0 => (0..0, 0..0, 0..0),
        1 => (0..1, 0..1, 0..1),
        2 => (0..1, 1..2, 1..2),
        n => {
            let a = (n + 2) / 3;
            let b = (2 * n + 2) / 3;
            (0..a, a..b, b..n)
        }
    }
}

/// Single-head operator x -> x A[layer, head].
pub fn single_head_operator(tensor: &WeightTensor, layer: usize, head: usize) -> Result<FeatureOperator> {
    Ok(FeatureOperator::SingleHead {
        layer,
        head,
        matrix: tensor.unit(layer, head)?.clone(),
    })
}

/// Dense compact operator: sum of alpha_i * A[l_i, h_i].
pub fn compose_compact(
    tensor: &WeightTensor,
    units: &[(usize, usize)],
    alphas: &[f64],
) -> Result<FeatureOperator> {
    if units.is_empty() || units.len() != alphas.len() {
        return Err(ForgeError::InvalidArgument(format!(
            "units ({}) and weights ({}) must be equal-length and non-empty",
            units.len(),
            alphas.len()
        )));
    }
    let g = tensor.dim();
    let mut matrix = DMatrix::zeros(g, g);
    for (&(l, h), &a) in units.iter().zip(alphas) {
        matrix += tensor.unit(l, h)? * a;
    }
    Ok(FeatureOperator::Compact {
        units: units.to_vec(),
        alphas: alphas.to_vec(),
        matrix,
    })
}

/// Best rank-r surrogate of a dense compact/single-head operator
/// (Eckart-Young optimal in Frobenius norm). Singular values are folded
/// into `u`.
pub fn truncate_svd(op: &FeatureOperator, r: usize) -> Result<FeatureOperator> {
    let matrix = match op {
        FeatureOperator::SingleHead { matrix, .. } => matrix,
        FeatureOperator::Compact { matrix, .. } => matrix,
        _ => {
            return Err(ForgeError::InvalidArgument(
                "truncate_svd expects a compact or single_head operator".into(),
            ))
        }
    };
    let g = matrix.nrows();
    if r == 0 || r > g {
        return Err(ForgeError::InvalidArgument(format!(
            "rank {r} outside 1..={g}"
        )));
    }
    let svd = linalg::sorted_svd(matrix)?;
    let mut u = DMatrix::zeros(g, r);
    let mut v = DMatrix::zeros(g, r);
    let mut sv = Vec::with_capacity(r);
    for f in 0..r {
        let s = svd.singular_values[f];
        u.set_column(f, &(svd.u.column(f) * s));
        v.set_column(f, &svd.v.column(f).into_owned());
        sv.push(s);
    }
    Ok(FeatureOperator::LowRank {
        u,
        v,
        singular_values: sv,
    })
}

/// Frobenius distance between a dense operator and a low-rank surrogate.
pub fn reconstruction_error(dense: &FeatureOperator, low_rank: &FeatureOperator) -> Result<f64> {
    let matrix = match dense {
        FeatureOperator::SingleHead { matrix, .. } => matrix,
        FeatureOperator::Compact { matrix, .. } => matrix,
        _ => {
            return Err(ForgeError::InvalidArgument(
                "reconstruction_error expects a dense operator".into(),
            ))
        }
    };
    match low_rank {
        FeatureOperator::LowRank { u, v, .. } => Ok((matrix - u * v.transpose()).norm()),
        _ => Err(ForgeError::InvalidArgument(
            "reconstruction_error expects a low_rank surrogate".into(),
        )),
    }
}

/// Top-k indices of `values` by absolute value, ties broken by lowest index.
fn top_k_abs(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Hard sparse pruning: keep the k_read / k_write largest-|loading|
/// coordinates per retained factor, zero everything else.
pub fn prune_sparse(
    op: &FeatureOperator,
    keep_factors: &[usize],
    k_read: usize,
    k_write: usize,
) -> Result<FeatureOperator> {
    let (u, v) = match op {
        FeatureOperator::LowRank { u, v, .. } => (u, v),
        _ => {
            return Err(ForgeError::InvalidArgument(
                "prune_sparse expects a low_rank operator".into(),
            ))
        }
    };
    if k_read == 0 || k_write == 0 {
        return Err(ForgeError::InvalidArgument(
            "k_read and k_write must be at least 1".into(),
        ));
    }
    let g = u.nrows();
    let r = u.ncols();
    let k_read = k_read.min(g);
    let k_write = k_write.min(g);
    let mut keep: Vec<usize> = keep_factors.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.iter().any(|&f| f >= r) {
        return Err(ForgeError::InvalidArgument(format!(
            "retained factor index out of range (rank {r})"
        )));
    }
    let mut factors = Vec::with_capacity(keep.len());
    for &f in &keep {
        let ucol: Vec<f64> = u.column(f).iter().copied().collect();
        let vcol: Vec<f64> = v.column(f).iter().copied().collect();
        let read_idx = top_k_abs(&ucol, k_read);
        let write_idx = top_k_abs(&vcol, k_write);
        factors.push(SparseFactor {
            parent: f,
            read_val: read_idx.iter().map(|&i| ucol[i]).collect(),
            read_idx,
            write_val: write_idx.iter().map(|&i| vcol[i]).collect(),
            write_idx,
        });
    }
    let pruned_factors: Vec<usize> = (0..r).filter(|f| !keep.contains(f)).collect();
    Ok(FeatureOperator::Sparse {
        dim: g,
        k_read,
        k_write,
        factors,
        pruned_factors,
    })
}

/// Active-weight bookkeeping for a sparse operator: the number of retained
/// loadings (sum of k_read + k_write over factors) and the number of
/// nonzero entries of the materialized matrix (sum of k_read * k_write).
pub fn sparse_active_counts(op: &FeatureOperator) -> Result<(usize, usize)> {
    match op {
        FeatureOperator::Sparse { factors, .. } => {
            let loadings = factors
                .iter()
                .map(|f| f.read_idx.len() + f.write_idx.len())
                .sum();
            let products = factors
                .iter()
                .map(|f| f.read_idx.len() * f.write_idx.len())
                .sum();
            Ok((loadings, products))
        }
        _ => Err(ForgeError::InvalidArgument(
            "active counts defined for sparse operators".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(n_layers: usize, n_heads: usize, g: usize, seed: u64) -> WeightTensor {
        let mut rng = crate::rng::stream(seed, "op-test", 0);
        let weights = (0..n_layers * n_heads)
            .map(|_| DMatrix::from_fn(g, g, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        WeightTensor::new(n_layers, n_heads, g, weights).unwrap()
    }

    #[test]
    fn drift_of_identical_blocks_is_exactly_zero() {
        let g = 4;
        let base = DMatrix::from_fn(g, g, |i, j| (i * g + j) as f64 * 0.37 - 1.0);
        let weights = vec![base.clone(); 6];
        let t = WeightTensor::new(3, 2, g, weights).unwrap();
        let op = build_drift_operator(&t, 0..1, 1..2, 2..3).unwrap();
        let x = DMatrix::from_fn(5, g, |i, j| (i + j) as f64);
        let f = op.apply(&x).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_hand_example() {
        // one layer per block, one head: A_early=I, A_mid=0, A_late=-I
        let g = 3;
        let weights = vec![
            DMatrix::identity(g, g),
            DMatrix::zeros(g, g),
            -DMatrix::<f64>::identity(g, g),
        ];
        let t = WeightTensor::new(3, 1, g, weights).unwrap();
        let op = build_drift_operator(&t, 0..1, 1..2, 2..3).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let f = op.apply(&x).unwrap();
        let expect = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        for (a, b) in f.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn drift_matches_naive_oracle() {
        let g = 5;
        let t = random_tensor(2, 2, g, 42);
        let op = build_drift_operator(&t, 0..1, 0..2, 1..2).unwrap();
        let mut rng = crate::rng::stream(7, "op-test-x", 0);
        let x = DMatrix::from_fn(3, g, |_, _| rng.gen_range(-2.0..2.0));

        // independent naive oracle: triple-loop block means + mat-vec
        let mean_block = |layers: std::ops::Range<usize>| -> Vec<Vec<f64>> {
            let mut acc = vec![vec![0.0; g]; g];
            let mut c = 0.0;
            for l in layers {
                for h in 0..2 {
                    let m = t.unit(l, h).unwrap();
                    for i in 0..g {
                        for j in 0..g {
                            acc[i][j] += m[(i, j)];
                        }
                    }
                    c += 1.0;
                }
            }
            for row in acc.iter_mut() {
                for v in row.iter_mut() {
                    *v /= c;
                }
            }
            acc
        };
        let matvec = |x: &[f64], m: &[Vec<f64>]| -> Vec<f64> {
            (0..g)
                .map(|j| (0..g).map(|i| x[i] * m[i][j]).sum())
                .collect()
        };
        let (e, m, l) = (mean_block(0..1), mean_block(0..2), mean_block(1..2));
        let f = op.apply(&x).unwrap();
        for row in 0..3 {
            let xr: Vec<f64> = x.row(row).iter().copied().collect();
            let (xe, xm, xl) = (matvec(&xr, &e), matvec(&xr, &m), matvec(&xr, &l));
            for j in 0..g {
                let want_a = xe[j] - xm[j];
                let want_b = xm[j] - xl[j];
                assert!((f[(row, j)] - want_a).abs() <= 1e-10 * want_a.abs().max(1.0));
                assert!((f[(row, g + j)] - want_b).abs() <= 1e-10 * want_b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn empty_range_is_invalid() {
        let t = random_tensor(3, 1, 3, 1);
        let err = build_drift_operator(&t, 1..1, 0..1, 2..3).unwrap_err();
        assert!(matches!(err, ForgeError::InvalidRange(_)));
    }

    #[test]
    fn identity_single_head_is_identity_map() {
        let g = 4;
        let t = WeightTensor::new(1, 1, g, vec![DMatrix::identity(g, g)]).unwrap();
        let op = single_head_operator(&t, 0, 0).unwrap();
        let mut rng = crate::rng::stream(3, "id", 0);
        let x = DMatrix::from_fn(6, g, |_, _| rng.gen_range(-1.0..1.0));
        let f = op.apply(&x).unwrap();
        assert!((f - &x).norm() < 1e-14);
    }

    #[test]
    fn compact_k1_equals_single_head() {
        let t = random_tensor(2, 2, 4, 9);
        let compact = compose_compact(&t, &[(1, 0)], &[1.0]).unwrap();
        let single = single_head_operator(&t, 1, 0).unwrap();
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let a = compact.apply(&x).unwrap();
        let b = single.apply(&x).unwrap();
        assert!((a - b).norm() < 1e-14);
    }

    #[test]
    fn compact_cancels_identical_heads() {
        let g = 4;
        let base = DMatrix::from_fn(g, g, |i, j| ((i + 2 * j) as f64).sin());
        let t = WeightTensor::new(1, 2, g, vec![base.clone(), base]).unwrap();
        let op = compose_compact(&t, &[(0, 0), (0, 1)], &[1.0, -1.0]).unwrap();
        let x = DMatrix::from_fn(2, g, |_, j| j as f64 + 1.0);
        assert!(op.apply(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compact_matches_weighted_sum_oracle() {
        let t = random_tensor(2, 2, 5, 11);
        let units = [(0, 0), (0, 1), (1, 1)];
        let alphas = [0.7, -1.3, 0.25];
        let op = compose_compact(&t, &units, &alphas).unwrap();
        let mut rng = crate::rng::stream(5, "compact", 0);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let f = op.apply(&x).unwrap();
        // oracle: per-head apply then weighted sum
        let mut want = DMatrix::zeros(3, 5);
        for (&(l, h), &a) in units.iter().zip(alphas.iter()) {
            want += (&x * t.unit(l, h).unwrap()) * a;
        }
        assert!((f - want).norm() < 1e-10);
    }

    #[test]
    fn compact_length_mismatch_is_invalid() {
        let t = random_tensor(1, 2, 3, 13);
        let err = compose_compact(&t, &[(0, 0), (0, 1)], &[1.0]).unwrap_err();
        assert!(matches!(err, ForgeError::InvalidArgument(_)));
    }

    #[test]
    fn svd_of_diagonal_matrix() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0, 0.0]));
        let t = WeightTensor::new(1, 1, 4, vec![m]).unwrap();
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 2).unwrap();
        let err = reconstruction_error(&dense, &lr).unwrap();
        assert!((err - 1.0).abs() < 1e-10);
        match &lr {
            FeatureOperator::LowRank { singular_values, .. } => {
                assert!((singular_values[0] - 3.0).abs() < 1e-10);
                assert!((singular_values[1] - 2.0).abs() < 1e-10);
            }
            _ => panic!("expected low_rank"),
        }
    }

    #[test]
    fn full_rank_svd_is_lossless() {
        let t = random_tensor(1, 1, 6, 17);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 6).unwrap();
        let norm = match &dense {
            FeatureOperator::SingleHead { matrix, .. } => matrix.norm(),
            _ => unreachable!(),
        };
        assert!(reconstruction_error(&dense, &lr).unwrap() <= 1e-8 * norm);
    }

    #[test]
    fn svd_error_matches_eigen_oracle() {
        let t = random_tensor(1, 1, 8, 23);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 3).unwrap();
        let err = reconstruction_error(&dense, &lr).unwrap();
        // oracle: eigenvalues of A^T A give squared singular values
        let a = match &dense {
            FeatureOperator::SingleHead { matrix, .. } => matrix.clone(),
            _ => unreachable!(),
        };
        let eig = nalgebra::linalg::SymmetricEigen::new(a.transpose() * &a);
        let mut lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        lambdas.sort_by(|x, y| y.total_cmp(x));
        let want: f64 = lambdas[3..].iter().sum::<f64>().sqrt();
        assert!((err - want).abs() < 1e-9);
    }

    #[test]
    fn svd_error_is_monotone_in_rank() {
        let t = random_tensor(1, 1, 10, 29);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let mut last = f64::INFINITY;
        for r in 1..=10 {
            let e = reconstruction_error(&dense, &truncate_svd(&dense, r).unwrap()).unwrap();
            assert!(e <= last + 1e-12);
            last = e;
        }
    }

    #[test]
    fn unpruned_sparse_equals_low_rank_exactly() {
        let t = random_tensor(1, 1, 6, 31);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 4).unwrap();
        let sp = prune_sparse(&lr, &[0, 1, 2, 3], 6, 6).unwrap();
        let mut rng = crate::rng::stream(1, "sparse", 0);
        let x = DMatrix::from_fn(5, 6, |_, _| rng.gen_range(-1.0..1.0));
        let a = lr.apply(&x).unwrap();
        let b = sp.apply(&x).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn dominant_coordinate_survives_k1_pruning() {
        let g = 5;
        let mut u = DMatrix::zeros(g, 1);
        u[(0, 0)] = 0.1;
        u[(3, 0)] = 2.0; // dominant read coordinate
        let mut v = DMatrix::zeros(g, 1);
        v[(1, 0)] = -3.0; // dominant write coordinate
        v[(2, 0)] = 0.2;
        let lr = FeatureOperator::LowRank {
            u,
            v,
            singular_values: vec![1.0],
        };
        let sp = prune_sparse(&lr, &[0], 1, 1).unwrap();
        match &sp {
            FeatureOperator::Sparse { factors, .. } => {
                assert_eq!(factors[0].read_idx, vec![3]);
                assert_eq!(factors[0].write_idx, vec![1]);
            }
            _ => panic!("expected sparse"),
        }
    }

    #[test]
    fn sparse_active_loading_count_matches_reported_scale() {
        let t = random_tensor(1, 1, 64, 37);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 16).unwrap();
        let keep: Vec<usize> = (0..16).collect();
        let sp = prune_sparse(&lr, &keep, 60, 60).unwrap();
        let (loadings, products) = sparse_active_counts(&sp).unwrap();
        assert_eq!(loadings, 1920);
        assert_eq!(products, 16 * 60 * 60);
    }

    #[test]
    fn apply_is_linear_for_all_kinds() {
        let g = 6;
        let t = random_tensor(3, 2, g, 41);
        let drift = build_drift_operator(&t, 0..1, 1..2, 2..3).unwrap();
        let single = single_head_operator(&t, 1, 1).unwrap();
        let compact = compose_compact(&t, &[(0, 0), (2, 1)], &[0.4, -0.9]).unwrap();
        let lr = truncate_svd(&compact, 3).unwrap();
        let sp = prune_sparse(&lr, &[0, 2], 3, 4).unwrap();
        let mut rng = crate::rng::stream(2, "lin", 0);
        let x = DMatrix::from_fn(4, g, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(4, g, |_, _| rng.gen_range(-1.0..1.0));
        let (a, b) = (0.7, -1.9);
        for op in [&drift, &single, &compact, &lr, &sp] {
            let lhs = op.apply(&(&x * a + &y * b)).unwrap();
            let rhs = op.apply(&x).unwrap() * a + op.apply(&y).unwrap() * b;
            assert!((lhs - rhs).norm() < 1e-8, "kind {}", op.kind_name());
        }
    }

    #[test]
    fn serialized_size_decreases_along_compression_chain() {
        let g = 256;
        let t = random_tensor(1, 1, g, 43);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let compact = compose_compact(&t, &[(0, 0)], &[1.0]).unwrap();
        let lr = truncate_svd(&compact, 64).unwrap();
        let keep: Vec<usize> = (0..16).collect();
        let sp = prune_sparse(&lr, &keep, 60, 60).unwrap();
        let dense_len = dense.to_container().to_bytes().len();
        let lr_len = lr.to_container().to_bytes().len();
        let sp_len = sp.to_container().to_bytes().len();
        assert!(dense_len > lr_len, "{dense_len} !> {lr_len}");
        assert!(lr_len > sp_len, "{lr_len} !> {sp_len}");
    }

    #[test]
    fn operator_container_roundtrip_bitwise() {
        let t = random_tensor(2, 2, 8, 47);
        let compact = compose_compact(&t, &[(0, 1), (1, 0)], &[1.0, -0.5]).unwrap();
        let lr = truncate_svd(&compact, 5).unwrap();
        let sp = prune_sparse(&lr, &[0, 1, 4], 3, 2).unwrap();
        for op in [&compact, &lr, &sp] {
            let bytes = op.to_container().to_bytes();
            let back = FeatureOperator::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(bytes, back.to_container().to_bytes());
        }
        let tb = t.to_container().to_bytes();
        let t2 = WeightTensor::from_container(&Container::from_bytes(&tb).unwrap()).unwrap();
        assert_eq!(tb, t2.to_container().to_bytes());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let t = random_tensor(1, 1, 4, 51);
        let op = single_head_operator(&t, 0, 0).unwrap();
        let x = DMatrix::zeros(2, 5);
        assert!(matches!(op.apply(&x), Err(ForgeError::ShapeError(_))));
    }

    #[test]
    fn keep_all_factors_is_identity_and_zero_is_complement() {
        let t = random_tensor(1, 1, 6, 53);
        let dense = single_head_operator(&t, 0, 0).unwrap();
        let lr = truncate_svd(&dense, 4).unwrap();
        let mut rng = crate::rng::stream(9, "keep", 0);
        let x = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let all: Vec<usize> = (0..4).collect();
        let a = lr.apply(&x).unwrap();
        let b = lr.keep_factors(&all).unwrap().apply(&x).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        let z = lr.zero_factor(2).unwrap().apply(&x).unwrap();
        let c = lr.keep_factors(&[0, 1, 3]).unwrap().apply(&x).unwrap();
        for (p, q) in z.iter().zip(c.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}
