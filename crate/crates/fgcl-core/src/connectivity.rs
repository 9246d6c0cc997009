//! From ROI time series to functional-connectivity graphs.
//!
//! A trial recording (one subject, `n_roi` rows by `n_time` columns) is cut
//! into overlapping windows; each window becomes one graph view with Pearson
//! correlations as node features, partial correlations as edge features, and
//! the absolute partial correlation as the adjacency driving the scaled
//! normalized Laplacian used by the spectral encoder.
//!
//! All routines are pure; building graphs over a dataset is embarrassingly
//! parallel by trial. Degenerate inputs are absorbed where a batch job must
//! not die (zero-variance rows give zero correlations with a warning count,
//! near-singular covariances retry with a larger ridge) and rejected where
//! the caller broke a documented precondition.

use crate::error::{ensure, FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::spectral::power_iteration;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LABEL_WRONG: u8 = 0;
pub const LABEL_CORRECT: u8 = 1;

/// Interaction role of the recorded subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "DMT_actor")]
    DmtActor,
    #[serde(rename = "DMT_partner")]
    DmtPartner,
    #[serde(rename = "PST")]
    Pst,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::DmtActor, Role::DmtPartner, Role::Pst];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::DmtActor => "DMT_actor",
            Role::DmtPartner => "DMT_partner",
            Role::Pst => "PST",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = FgclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DMT_actor" => Ok(Role::DmtActor),
            "DMT_partner" => Ok(Role::DmtPartner),
            "PST" => Ok(Role::Pst),
            other => Err(FgclError::contract(format!("unknown role {other:?}"))),
        }
    }
}

/// One subject's ROI recording for one trial, with its feedback label.
#[derive(Debug, Clone)]
pub struct RoiTimeSeries {
    pub values: DenseMatrix,
    pub dyad_id: u32,
    pub subject_id: u32,
    pub role: Role,
    pub trial_index: u32,
    /// 1 = correct feedback, 0 = wrong feedback.
    pub label: u8,
}

impl RoiTimeSeries {
    pub fn new(
        values: DenseMatrix,
        dyad_id: u32,
        subject_id: u32,
        role: Role,
        trial_index: u32,
        label: u8,
    ) -> Result<Self> {
        ensure!(
            values.rows() >= 2,
            "RoiTimeSeries: n_roi = {} but at least 2 ROIs are required",
            values.rows()
        );
        ensure!(
            label <= 1,
            "RoiTimeSeries: label {label} is not a binary feedback label"
        );
        ensure!(
            values.is_finite(),
            "RoiTimeSeries: non-finite samples in dyad {dyad_id} subject {subject_id} trial {trial_index}"
        );
        Ok(RoiTimeSeries {
            values,
            dyad_id,
            subject_id,
            role,
            trial_index,
            label,
        })
    }

    pub fn n_roi(&self) -> usize {
        self.values.rows()
    }

    pub fn n_time(&self) -> usize {
        self.values.cols()
    }
}

/// Provenance of one graph view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphMeta {
    pub dyad_id: u32,
    pub subject_id: u32,
    pub role: Role,
    pub trial_index: u32,
    pub view_index: u32,
}

/// Functional-connectivity graph for one window of one trial.
///
/// `x` is symmetric with unit diagonal (row i is node i's feature vector),
/// `h` is symmetric with zero diagonal, `w = |h|` is the non-negative
/// adjacency the Laplacian is built from.
#[derive(Debug, Clone)]
pub struct FcGraph {
    pub n: usize,
    pub x: DenseMatrix,
    pub h: DenseMatrix,
    pub w: DenseMatrix,
    pub y: u8,
    pub meta: GraphMeta,
}

/// Warnings accumulated while building one graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConnWarnings {
    pub zero_variance_rows: u32,
    pub ridge_escalated: bool,
}

#[derive(Debug, Clone)]
pub struct PearsonResult {
    pub corr: DenseMatrix,
    pub zero_variance_rows: u32,
}

#[derive(Debug, Clone)]
pub struct PartialCorrResult {
    pub pcorr: DenseMatrix,
    /// Ridge multiplier that actually produced the inverse.
    pub ridge_used: f64,
    pub escalated: bool,
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: FcGraph,
    pub warnings: ConnWarnings,
}

/// Cut a recording into overlapping windows of `width` columns every `step`
/// columns. Windows start at 0, step, 2·step, … while they still fit, so the
/// count is `floor((n_time − width)/step) + 1`.
pub fn sliding_windows(
    series: &RoiTimeSeries,
    width: usize,
    step: usize,
) -> Result<Vec<DenseMatrix>> {
    ensure!(step >= 1, "sliding_windows: step must be at least 1");
    ensure!(width >= 1, "sliding_windows: width must be at least 1");
    let n_time = series.n_time();
    if width > n_time {
        return Err(FgclError::EmptyInput(format!(
            "sliding_windows: width {width} exceeds the {n_time} available time points"
        )));
    }
    let count = (n_time - width) / step + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * step;
        let cols: Vec<usize> = (start..start + width).collect();
        let rows: Vec<usize> = (0..series.n_roi()).collect();
        out.push(series.values.select(&rows, &cols));
    }
    Ok(out)
}

/// Row means and the centered copy of a window.
fn center_rows(window: &DenseMatrix) -> DenseMatrix {
    let mut centered = window.clone();
    let w = window.cols() as f64;
    for i in 0..window.rows() {
        let mean = window.row(i).iter().sum::<f64>() / w;
        for v in centered.row_mut(i) {
            *v -= mean;
        }
    }
    centered
}

/// A row counts as zero-variance when its centered norm is at the round-off
/// floor for its magnitude; exact-constant rows land here even when the mean
/// subtraction leaves 1-ulp residue.
fn zero_variance_mask(window: &DenseMatrix, centered: &DenseMatrix) -> Vec<bool> {
    (0..window.rows())
        .map(|i| {
            let mean_abs =
                window.row(i).iter().map(|v| v.abs()).sum::<f64>() / window.cols() as f64;
            let ss: f64 = centered.row(i).iter().map(|v| v * v).sum();
            ss.sqrt() <= 1e-10 * (1.0 + mean_abs)
        })
        .collect()
}

/// Sample Pearson correlations between all row pairs of a window.
pub fn pearson_matrix(window: &DenseMatrix) -> Result<PearsonResult> {
    ensure!(
        window.cols() >= 2,
        "pearson_matrix: window has {} samples, need at least 2",
        window.cols()
    );
    ensure!(window.rows() >= 1, "pearson_matrix: empty window");
    let n = window.rows();
    let centered = center_rows(window);
    let dead = zero_variance_mask(window, &centered);
    let zero_variance_rows = dead.iter().filter(|&&d| d).count() as u32;
    if zero_variance_rows > 0 {
        log::warn!(
            "pearson_matrix: {zero_variance_rows} zero-variance rows, correlations set to 0"
        );
    }
    let gram = centered.matmul(&centered.transpose())?;
    let mut corr = DenseMatrix::zeros(n, n);
    for i in 0..n {
        corr[(i, i)] = 1.0;
        for j in 0..i {
            let v = if dead[i] || dead[j] {
                0.0
            } else {
                let denom = (gram[(i, i)] * gram[(j, j)]).sqrt();
                (gram[(i, j)] / denom).clamp(-1.0, 1.0)
            };
            corr[(i, j)] = v;
            corr[(j, i)] = v;
        }
    }
    Ok(PearsonResult {
        corr,
        zero_variance_rows,
    })
}

/// Sample covariance of the window's rows (divisor `w − 1`).
fn sample_covariance(window: &DenseMatrix) -> Result<DenseMatrix> {
    let centered = center_rows(window);
    let gram = centered.matmul(&centered.transpose())?;
    Ok(gram.scale(1.0 / (window.cols() as f64 - 1.0)))
}

/// Partial correlations between all row pairs, from the inverse of the
/// ridge-stabilized sample covariance: entry (i,j) = −P_ij / sqrt(P_ii·P_jj)
/// off the diagonal, 0 on it.
///
/// When inversion fails at the requested ridge, progressively larger ridges
/// (1e-6, 1e-4, 1e-2 of the mean diagonal) are tried and the escalation is
/// flagged; if none succeeds the covariance is reported singular.
pub fn partial_corr_matrix(window: &DenseMatrix, ridge: f64) -> Result<PartialCorrResult> {
    ensure!(
        window.cols() >= 2,
        "partial_corr_matrix: window has {} samples, need at least 2",
        window.cols()
    );
    ensure!(ridge >= 0.0, "partial_corr_matrix: negative ridge {ridge}");
    let n = window.rows();
    let s = sample_covariance(window)?;
    let mean_diag = (0..n).map(|i| s[(i, i)]).sum::<f64>() / n as f64;

    let mut attempts = vec![ridge];
    attempts.extend([1e-6, 1e-4, 1e-2].into_iter().filter(|&r| r > ridge));
    let mut inverse = None;
    let mut ridge_used = ridge;
    let mut escalated = false;
    for (k, &r) in attempts.iter().enumerate() {
        let mut damped = s.clone();
        for i in 0..n {
            damped[(i, i)] += r * mean_diag;
        }
        match damped.spd_inverse() {
            Ok(p) => {
                inverse = Some(p);
                ridge_used = r;
                escalated = k > 0;
                break;
            }
            Err(_) => continue,
        }
    }
    let p = inverse.ok_or_else(|| {
        FgclError::Singular(format!(
            "partial_corr_matrix: covariance not invertible even at ridge 1e-2 (mean diagonal {mean_diag:e})"
        ))
    })?;
    if escalated {
        log::warn!("partial_corr_matrix: ridge escalated from {ridge:e} to {ridge_used:e}");
    }

    let mut pcorr = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let denom = (p[(i, i)] * p[(j, j)]).sqrt();
            let v = (-p[(i, j)] / denom).clamp(-1.0, 1.0);
            pcorr[(i, j)] = v;
            pcorr[(j, i)] = v;
        }
    }
    Ok(PartialCorrResult {
        pcorr,
        ridge_used,
        escalated,
    })
}

/// Build one graph view from one window.
pub fn build_graph(
    window: &DenseMatrix,
    y: u8,
    meta: GraphMeta,
    ridge: f64,
) -> Result<GraphBuild> {
    ensure!(y <= 1, "build_graph: label {y} is not binary");
    let pearson = pearson_matrix(window)?;
    let partial = partial_corr_matrix(window, ridge)?;
    let w = partial.pcorr.map(f64::abs);
    let graph = FcGraph {
        n: window.rows(),
        x: pearson.corr,
        h: partial.pcorr,
        w,
        y,
        meta,
    };
    Ok(GraphBuild {
        graph,
        warnings: ConnWarnings {
            zero_variance_rows: pearson.zero_variance_rows,
            ridge_escalated: partial.escalated,
        },
    })
}

const LAPLACIAN_POWER_ITERS: u32 = 10_000;
const LAPLACIAN_POWER_TOL: f64 = 1e-10;

/// Scaled normalized Laplacian `L̃ = (2/λmax)·L − I` with
/// `L = I − D^{−1/2}·W·D^{−1/2}`. Rows with zero degree contribute 0 to the
/// normalization (isolated nodes reduce to identity rows). When the spectrum
/// is numerically zero (`λmax < 1e-9`) the scaling is skipped: `L̃ = L − I`.
pub fn scaled_laplacian(w: &DenseMatrix) -> Result<DenseMatrix> {
    ensure!(
        w.rows() == w.cols(),
        "scaled_laplacian: adjacency is {}x{}, expected square",
        w.rows(),
        w.cols()
    );
    let n = w.rows();
    for i in 0..n {
        ensure!(
            w[(i, i)] == 0.0,
            "scaled_laplacian: nonzero diagonal entry at {i}"
        );
        for j in 0..i {
            ensure!(
                (w[(i, j)] - w[(j, i)]).abs() <= 1e-12,
                "scaled_laplacian: adjacency not symmetric at ({i},{j})"
            );
            ensure!(
                w[(i, j)] >= 0.0,
                "scaled_laplacian: negative weight at ({i},{j})"
            );
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = w.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut lap = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let norm = -w[(i, j)] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            lap[(i, j)] = if i == j { 1.0 + norm } else { norm };
        }
    }
    let power = power_iteration(&lap, LAPLACIAN_POWER_ITERS, LAPLACIAN_POWER_TOL)?;
    if !power.converged {
        log::warn!(
            "scaled_laplacian: power iteration stopped at {} iterations, lambda ~ {:.6}",
            power.iterations,
            power.lambda
        );
    }
    let lambda = power.lambda;
    let mut scaled = if lambda < 1e-9 {
        lap
    } else {
        lap.scale(2.0 / lambda)
    };
    for i in 0..n {
        scaled[(i, i)] -= 1.0;
    }
    Ok(scaled)
}

/// On-disk form of one graph view: flat row-major arrays plus provenance.
#[derive(Debug, Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    x: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
    y: u8,
    dyad_id: u32,
    subject_id: u32,
    role: Role,
    trial_index: u32,
    view_index: u32,
}

/// Serialize one graph as a JSON document. Numbers round-trip exactly
/// (shortest representation that parses back to the same bits).
pub fn write_graph_json(graph: &FcGraph, path: &Path) -> Result<()> {
    let doc = GraphJson {
        n: graph.n,
        x: graph.x.data().to_vec(),
        h: graph.h.data().to_vec(),
        w: graph.w.data().to_vec(),
        y: graph.y,
        dyad_id: graph.meta.dyad_id,
        subject_id: graph.meta.subject_id,
        role: graph.meta.role,
        trial_index: graph.meta.trial_index,
        view_index: graph.meta.view_index,
    };
    let text = serde_json::to_string(&doc).map_err(|e| FgclError::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| FgclError::io(path.display().to_string(), e))
}

pub fn read_graph_json(path: &Path) -> Result<FcGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| FgclError::io(path.display().to_string(), e))?;
    let doc: GraphJson =
        serde_json::from_str(&text).map_err(|e| FgclError::json(path.display().to_string(), e))?;
    let n = doc.n;
    for (name, arr) in [("x", &doc.x), ("h", &doc.h), ("w", &doc.w)] {
        if arr.len() != n * n {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!("field {name} has {} entries, expected {}", arr.len(), n * n),
            ));
        }
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!("field {name} contains non-finite entries"),
            ));
        }
    }
    if doc.y > 1 {
        return Err(FgclError::schema(
            path.display().to_string(),
            format!("label {} is not binary", doc.y),
        ));
    }
    Ok(FcGraph {
        n,
        x: DenseMatrix::from_vec(n, n, doc.x)?,
        h: DenseMatrix::from_vec(n, n, doc.h)?,
        w: DenseMatrix::from_vec(n, n, doc.w)?,
        y: doc.y,
        meta: GraphMeta {
            dyad_id: doc.dyad_id,
            subject_id: doc.subject_id,
            role: doc.role,
            trial_index: doc.trial_index,
            view_index: doc.view_index,
        },
    })
}
