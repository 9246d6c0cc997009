//! Transductive population-graph classifier with per-epoch nearest-neighbor
//! edge reconstruction.
//!
//! Each trial embedding becomes one node of a population graph. Every epoch
//! the directed edge set is rebuilt by cosine K-nearest-neighbors over the
//! input features, then two edge-difference aggregation layers run
//!
//! ```text
//! v_i' = Σ_{m ∈ N(i)} φ(v_i ‖ v_m − v_i)
//! ```
//!
//! with φ a two-layer affine map, followed by an affine head to two logits.
//! The focal loss −α_t·(1−p_t)^γ·log(p_t) is averaged over training nodes
//! only; validation and test nodes participate in the graph (transductive)
//! but never in the loss. Neighbor selection is frozen during
//! differentiation: gradients flow through the feature arithmetic, not
//! through which edges exist.

use crate::encoder::{read_checkpoint, write_checkpoint};
use crate::error::{ensure, FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::optim::{adam_step, multistep_lr, AdamState};
use crate::numcore::param::{seeded_rng, ParamId, ParamSet};
use crate::numcore::tape::{stable_sigmoid, NodeId, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which loss/metric partition a population node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Focal-loss shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.5,
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            "FocalConfig: alpha {} outside [0, 1]",
            self.alpha
        );
        ensure!(
            self.gamma >= 0.0,
            "FocalConfig: gamma {} must be non-negative",
            self.gamma
        );
        Ok(())
    }
}

/// Classifier training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgcConfig {
    /// Out-neighbors per node in the reconstructed graph.
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Width of both aggregation layers.
    pub hidden: usize,
    pub focal: FocalConfig,
    pub lr_milestones: Vec<u32>,
    pub lr_gamma: f64,
    pub rng_seed: u64,
}

impl Default for DgcConfig {
    fn default() -> Self {
        DgcConfig {
            k: 10,
            epochs: 100,
            lr: 0.001,
            weight_decay: 0.0,
            hidden: 64,
            focal: FocalConfig::default(),
            lr_milestones: vec![60],
            lr_gamma: 0.1,
            rng_seed: 0,
        }
    }
}

impl DgcConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, "DgcConfig: k must be at least 1");
        ensure!(self.lr > 0.0, "DgcConfig: lr must be positive");
        ensure!(self.weight_decay >= 0.0, "DgcConfig: negative weight_decay");
        ensure!(self.hidden >= 1, "DgcConfig: hidden width must be positive");
        ensure!(
            self.lr_gamma > 0.0 && self.lr_gamma <= 1.0,
            "DgcConfig: lr_gamma outside (0, 1]"
        );
        self.focal.validate()
    }
}

/// Population graph: one node per trial embedding, with labels and the
/// train/val/test partition. Edges are reconstructed from the features, not
/// stored here.
#[derive(Debug, Clone)]
pub struct PopulationGraph {
    pub features: DenseMatrix,
    pub labels: Vec<u8>,
    pub split: Vec<Split>,
}

impl PopulationGraph {
    pub fn new(features: DenseMatrix, labels: Vec<u8>, split: Vec<Split>) -> Result<Self> {
        let m = features.rows();
        ensure!(m >= 2, "PopulationGraph: need at least 2 nodes, got {m}");
        ensure!(
            labels.len() == m && split.len() == m,
            "PopulationGraph: {m} nodes but {} labels and {} split entries",
            labels.len(),
            split.len()
        );
        ensure!(
            labels.iter().all(|&y| y <= 1),
            "PopulationGraph: labels must be 0 or 1"
        );
        ensure!(
            features.is_finite(),
            "PopulationGraph: non-finite feature values"
        );
        Ok(PopulationGraph {
            features,
            labels,
            split,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == which)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Directed KNN edge lists: `neighbors[i]` holds node i's out-neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnEdges {
    pub neighbors: Vec<Vec<usize>>,
    /// Nodes whose feature row had zero norm (their similarities were all 0,
    /// so neighbors fell back to index order).
    pub zero_norm_nodes: Vec<usize>,
}

impl KnnEdges {
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Directed cosine K-nearest-neighbor edges, ties broken toward the lower
/// index, k capped at m−1. Zero-norm rows are flagged and get index-order
/// neighbors (every similarity is 0 by definition).
pub fn knn_edges(v: &DenseMatrix, k: usize) -> Result<KnnEdges> {
    let m = v.rows();
    ensure!(m >= 2, "knn_edges: need at least 2 nodes, got {m}");
    ensure!(k >= 1, "knn_edges: k must be at least 1");
    let k_eff = k.min(m - 1);
    let norms: Vec<f64> = (0..m)
        .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut zero_norm_nodes = Vec::new();
    for (i, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            zero_norm_nodes.push(i);
        }
    }
    if !zero_norm_nodes.is_empty() {
        log::warn!(
            "knn_edges: {} zero-norm nodes, their neighbors fall back to index order",
            zero_norm_nodes.len()
        );
    }
    let mut neighbors = Vec::with_capacity(m);
    for i in 0..m {
        let row_i = v.row(i);
        let mut scored: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                let sim = if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else {
                    let dot: f64 = row_i.iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                (sim, j)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("cosine similarities are finite")
                .then(a.1.cmp(&b.1))
        });
        neighbors.push(scored[..k_eff].iter().map(|&(_, j)| j).collect());
    }
    Ok(KnnEdges {
        neighbors,
        zero_norm_nodes,
    })
}

/// One aggregation layer: φ is affine → ReLU → affine, applied to the
/// concatenation of a node's feature and its neighbor difference
/// (input width 2·w_in, output width w_out).
#[derive(Debug, Clone)]
pub struct DgcLayer {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl DgcLayer {
    pub fn in_width(&self) -> usize {
        self.w1.rows() / 2
    }

    pub fn out_width(&self) -> usize {
        self.w2.cols()
    }
}

/// Flatten edge lists to parallel (source, neighbor) arrays in node order.
fn edge_arrays(edges: &KnnEdges) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(edges.edge_count());
    let mut dst = Vec::with_capacity(edges.edge_count());
    for (i, ns) in edges.neighbors.iter().enumerate() {
        for &j in ns {
            src.push(i);
            dst.push(j);
        }
    }
    (src, dst)
}

fn validate_edges(v: &DenseMatrix, edges: &KnnEdges) -> Result<()> {
    let m = v.rows();
    ensure!(
        edges.neighbors.len() == m,
        "edge_conv: {} edge lists for {} nodes",
        edges.neighbors.len(),
        m
    );
    for (i, ns) in edges.neighbors.iter().enumerate() {
        ensure!(
            ns.iter().all(|&j| j < m && j != i),
            "edge_conv: node {i} has an out-of-range or self edge"
        );
        if ns.is_empty() {
            log::warn!("edge_conv: node {i} has no out-edges, its output row is zero");
        }
    }
    Ok(())
}

/// Edge-difference aggregation: per node, sum φ(v_i ‖ v_m − v_i) over its
/// out-neighbors. A node with no out-edges yields a zero row.
pub fn edge_conv(v: &DenseMatrix, edges: &KnnEdges, layer: &DgcLayer) -> Result<DenseMatrix> {
    validate_edges(v, edges)?;
    ensure!(
        layer.w1.rows() == 2 * v.cols(),
        "edge_conv: features are {} wide, layer expects {}",
        v.cols(),
        layer.w1.rows() / 2
    );
    let (src, dst) = edge_arrays(edges);
    let self_rows = v.select_rows(&src);
    let neigh_rows = v.select_rows(&dst);
    let diff = neigh_rows.sub(&self_rows)?;
    let mut cat = DenseMatrix::zeros(src.len(), 2 * v.cols());
    for r in 0..src.len() {
        let row = cat.row_mut(r);
        row[..v.cols()].copy_from_slice(self_rows.row(r));
        row[v.cols()..].copy_from_slice(diff.row(r));
    }
    let h = cat
        .matmul(&layer.w1)?
        .add(&layer.b1.tile_rows(src.len()))?
        .map(|x| x.max(0.0));
    let phi = h.matmul(&layer.w2)?.add(&layer.b2.tile_rows(src.len()))?;
    let mut out = DenseMatrix::zeros(v.rows(), layer.out_width());
    for (r, &i) in src.iter().enumerate() {
        for (c, val) in phi.row(r).iter().enumerate() {
            out[(i, c)] += val;
        }
    }
    Ok(out)
}

/// Every trainable tensor of the classifier.
#[derive(Debug, Clone)]
pub struct DgcParams {
    pub layer1: DgcLayer,
    pub layer2: DgcLayer,
    /// Affine head to 2 logits (class 0, class 1).
    pub head_w: DenseMatrix,
    pub head_b: DenseMatrix,
    pub in_dim: usize,
    pub hidden: usize,
    /// Neighbor count used for graph reconstruction at train and inference
    /// time.
    pub k: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DgcArch {
    in_dim: usize,
    hidden: usize,
    k: usize,
}

impl DgcParams {
    pub fn init(in_dim: usize, cfg: &DgcConfig) -> Result<Self> {
        cfg.validate()?;
        ensure!(in_dim >= 1, "DgcParams: in_dim must be positive");
        let mut rng: ChaCha8Rng = seeded_rng(cfg.rng_seed);
        let h = cfg.hidden;
        let glorot = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fi: usize, fo: usize| {
            let mut set = ParamSet::new();
            let id = set.add_glorot("tmp", rows, cols, fi, fo, rng);
            set.get(id).value.clone()
        };
        let layer = |rng: &mut ChaCha8Rng, w_in: usize, w_out: usize| DgcLayer {
            w1: glorot(rng, 2 * w_in, w_out, 2 * w_in, w_out),
            b1: glorot(rng, 1, w_out, 2 * w_in, w_out),
            w2: glorot(rng, w_out, w_out, w_out, w_out),
            b2: glorot(rng, 1, w_out, w_out, w_out),
        };
        let layer1 = layer(&mut rng, in_dim, h);
        let layer2 = layer(&mut rng, h, h);
        Ok(DgcParams {
            layer1,
            layer2,
            head_w: glorot(&mut rng, h, 2, h, 2),
            head_b: glorot(&mut rng, 1, 2, h, 2),
            in_dim,
            hidden: h,
            k: cfg.k,
            rng_seed: cfg.rng_seed,
        })
    }

    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        vec![
            ("layer1.w1".to_string(), &self.layer1.w1),
            ("layer1.b1".to_string(), &self.layer1.b1),
            ("layer1.w2".to_string(), &self.layer1.w2),
            ("layer1.b2".to_string(), &self.layer1.b2),
            ("layer2.w1".to_string(), &self.layer2.w1),
            ("layer2.b1".to_string(), &self.layer2.b1),
            ("layer2.w2".to_string(), &self.layer2.w2),
            ("layer2.b2".to_string(), &self.layer2.b2),
            ("head.w".to_string(), &self.head_w),
            ("head.b".to_string(), &self.head_b),
        ]
    }

    pub fn to_param_set(&self) -> (ParamSet, DgcParamIds) {
        let mut set = ParamSet::new();
        let mut add = |name: &str, m: &DenseMatrix| set.add(name, m.clone());
        let ids = DgcParamIds {
            l1: [
                add("layer1.w1", &self.layer1.w1),
                add("layer1.b1", &self.layer1.b1),
                add("layer1.w2", &self.layer1.w2),
                add("layer1.b2", &self.layer1.b2),
            ],
            l2: [
                add("layer2.w1", &self.layer2.w1),
                add("layer2.b1", &self.layer2.b1),
                add("layer2.w2", &self.layer2.w2),
                add("layer2.b2", &self.layer2.b2),
            ],
            head_w: add("head.w", &self.head_w),
            head_b: add("head.b", &self.head_b),
        };
        (set, ids)
    }

    pub fn assign_from(&mut self, set: &ParamSet, ids: &DgcParamIds) {
        self.layer1.w1 = set.get(ids.l1[0]).value.clone();
        self.layer1.b1 = set.get(ids.l1[1]).value.clone();
        self.layer1.w2 = set.get(ids.l1[2]).value.clone();
        self.layer1.b2 = set.get(ids.l1[3]).value.clone();
        self.layer2.w1 = set.get(ids.l2[0]).value.clone();
        self.layer2.b1 = set.get(ids.l2[1]).value.clone();
        self.layer2.w2 = set.get(ids.l2[2]).value.clone();
        self.layer2.b2 = set.get(ids.l2[3]).value.clone();
        self.head_w = set.get(ids.head_w).value.clone();
        self.head_b = set.get(ids.head_b).value.clone();
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(DgcArch {
            in_dim: self.in_dim,
            hidden: self.hidden,
            k: self.k,
        })
        .expect("arch serializes");
        let named = self.named();
        let refs: Vec<(&str, &DenseMatrix)> =
            named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        write_checkpoint(path, self.rng_seed, arch, &refs)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let loaded = read_checkpoint(path)?;
        let arch: DgcArch = serde_json::from_value(loaded.arch.clone())
            .map_err(|e| FgclError::json(path.display().to_string(), e))?;
        let cfg = DgcConfig {
            k: arch.k,
            hidden: arch.hidden,
            rng_seed: loaded.rng_seed,
            ..DgcConfig::default()
        };
        let mut params = DgcParams::init(arch.in_dim, &cfg)?;
        let expected: Vec<(String, (usize, usize))> = params
            .named()
            .iter()
            .map(|(n, m)| (n.clone(), m.shape()))
            .collect();
        for (name, shape) in &expected {
            let tensor = loaded.tensors.get(name).ok_or_else(|| {
                FgclError::schema(
                    path.display().to_string(),
                    format!("missing parameter {name}"),
                )
            })?;
            if tensor.shape() != *shape {
                return Err(FgclError::schema(
                    path.display().to_string(),
                    format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        shape
                    ),
                ));
            }
        }
        if loaded.tensors.len() != expected.len() {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!(
                    "checkpoint has {} tensors, the classifier layout has {}",
                    loaded.tensors.len(),
                    expected.len()
                ),
            ));
        }
        params.layer1.w1 = loaded.tensors["layer1.w1"].clone();
        params.layer1.b1 = loaded.tensors["layer1.b1"].clone();
        params.layer1.w2 = loaded.tensors["layer1.w2"].clone();
        params.layer1.b2 = loaded.tensors["layer1.b2"].clone();
        params.layer2.w1 = loaded.tensors["layer2.w1"].clone();
        params.layer2.b1 = loaded.tensors["layer2.b1"].clone();
        params.layer2.w2 = loaded.tensors["layer2.w2"].clone();
        params.layer2.b2 = loaded.tensors["layer2.b2"].clone();
        params.head_w = loaded.tensors["head.w"].clone();
        params.head_b = loaded.tensors["head.b"].clone();
        Ok(params)
    }
}

/// Layout of classifier parameters inside a [`ParamSet`]: each layer's
/// `[w1, b1, w2, b2]` plus the head.
#[derive(Debug, Clone)]
pub struct DgcParamIds {
    pub l1: [ParamId; 4],
    pub l2: [ParamId; 4],
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Focal loss for one prediction. `p` is the predicted class-1 probability,
/// clamped to [1e-7, 1−1e-7] before use.
pub fn focal_loss(p: f64, y: u8, cfg: &FocalConfig) -> Result<f64> {
    cfg.validate()?;
    ensure!(y <= 1, "focal_loss: label {y} is not binary");
    ensure!(p.is_finite(), "focal_loss: non-finite probability {p}");
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (p_t, alpha_t) = if y == 1 {
        (p, cfg.alpha)
    } else {
        (1.0 - p, 1.0 - cfg.alpha)
    };
    Ok(-alpha_t * (1.0 - p_t).powf(cfg.gamma) * p_t.ln())
}

/// Probability clamp bound shared by the plain and tape focal paths.
pub const PROB_CLAMP: f64 = 1e-7;

/// Plain forward pass: two aggregation layers with ReLU, affine head,
/// class-1 probability per node as sigmoid(logit₁ − logit₀).
pub fn dgc_forward(
    v: &DenseMatrix,
    edges: &KnnEdges,
    params: &DgcParams,
) -> Result<Vec<f64>> {
    let h1 = edge_conv(v, edges, &params.layer1)?.map(|x| x.max(0.0));
    let h2 = edge_conv(&h1, edges, &params.layer2)?.map(|x| x.max(0.0));
    let logits = h2
        .matmul(&params.head_w)?
        .add(&params.head_b.tile_rows(v.rows()))?;
    ensure!(
        logits.is_finite(),
        "dgc_forward: non-finite logits"
    );
    Ok((0..v.rows())
        .map(|i| stable_sigmoid(logits[(i, 1)] - logits[(i, 0)]))
        .collect())
}

fn edge_conv_on_tape(
    tape: &mut Tape,
    v: NodeId,
    edges: &KnnEdges,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> NodeId {
    let n_nodes = tape.value(v).rows();
    let (src, dst) = edge_arrays(edges);
    let self_rows = tape.select_rows(v, &src);
    let neigh_rows = tape.select_rows(v, &dst);
    let diff = tape.sub(neigh_rows, self_rows);
    let cat = tape.concat_cols(self_rows, diff);
    let a1 = tape.matmul(cat, w1);
    let a1 = tape.add_row_vec(a1, b1);
    let h = tape.relu(a1);
    let a2 = tape.matmul(h, w2);
    let phi = tape.add_row_vec(a2, b2);
    tape.scatter_sum_rows(phi, &src, n_nodes)
}

/// Tape forward returning the per-node class-1 probability column (m×1).
pub fn dgc_forward_on_tape(
    tape: &mut Tape,
    features: &DenseMatrix,
    edges: &KnnEdges,
    set: &ParamSet,
    ids: &DgcParamIds,
) -> Result<NodeId> {
    validate_edges(features, edges)?;
    let v = tape.constant(features.clone());
    let l1: Vec<NodeId> = ids.l1.iter().map(|&id| tape.param(set, id)).collect();
    let l2: Vec<NodeId> = ids.l2.iter().map(|&id| tape.param(set, id)).collect();
    let head_w = tape.param(set, ids.head_w);
    let head_b = tape.param(set, ids.head_b);
    let c1 = edge_conv_on_tape(tape, v, edges, l1[0], l1[1], l1[2], l1[3]);
    let h1 = tape.relu(c1);
    let c2 = edge_conv_on_tape(tape, h1, edges, l2[0], l2[1], l2[2], l2[3]);
    let h2 = tape.relu(c2);
    let logits = tape.matmul(h2, head_w);
    let logits = tape.add_row_vec(logits, head_b);
    let pick = tape.constant(DenseMatrix::from_vec(2, 1, vec![-1.0, 1.0])?);
    let margin = tape.matmul(logits, pick);
    Ok(tape.sigmoid(margin))
}

/// Mean focal loss over the listed nodes, on the tape. `probs` is the m×1
/// class-1 probability column.
pub fn focal_loss_on_tape(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[u8],
    node_idx: &[usize],
    cfg: &FocalConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    ensure!(!node_idx.is_empty(), "focal_loss_on_tape: no nodes selected");
    let m = tape.value(probs).rows();
    ensure!(
        labels.len() == m,
        "focal_loss_on_tape: {} labels for {} probabilities",
        labels.len(),
        m
    );
    let y = DenseMatrix::from_vec(m, 1, labels.iter().map(|&v| v as f64).collect())?;
    let alpha = y.map(|v| if v == 1.0 { cfg.alpha } else { 1.0 - cfg.alpha });
    let y = tape.constant(y);
    let alpha = tape.constant(alpha);
    let ones = tape.constant(DenseMatrix::from_vec(m, 1, vec![1.0; m])?);
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    // p_t = y·p + (1−y)·(1−p)
    let yp = tape.hadamard(y, p);
    let one_minus_y = tape.sub(ones, y);
    let one_minus_p = tape.sub(ones, p);
    let rest = tape.hadamard(one_minus_y, one_minus_p);
    let p_t = tape.add(yp, rest);
    // (1−p_t)^γ = exp(γ·ln(1−p_t)); 1−p_t ≥ PROB_CLAMP after clamping.
    let one_minus_pt = tape.sub(ones, p_t);
    let ln_one_minus = tape.ln(one_minus_pt);
    let scaled = tape.scale(ln_one_minus, cfg.gamma);
    let modulator = tape.exp(scaled);
    let ln_pt = tape.ln(p_t);
    let weighted = tape.hadamard(alpha, modulator);
    let per_node = tape.hadamard(weighted, ln_pt);
    let selected = tape.select_rows(per_node, node_idx);
    let mean = tape.mean_rows(selected);
    Ok(tape.scale(mean, -1.0))
}

/// One epoch's summary in the classifier history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgcEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Result of a classifier training run.
#[derive(Debug, Clone)]
pub struct TrainedDgc {
    /// Parameters restored from the best validation-accuracy epoch.
    pub params: DgcParams,
    pub history: Vec<DgcEpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn accuracy_on(probs: &[f64], labels: &[u8], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let correct = idx
        .iter()
        .filter(|&&i| (probs[i] >= 0.5) == (labels[i] == 1))
        .count();
    correct as f64 / idx.len() as f64
}

/// Train the classifier transductively on the population graph. Every epoch
/// the edge set is reconstructed from the input features, the focal loss is
/// averaged over train nodes, and validation accuracy decides the returned
/// snapshot. Deterministic given `cfg.rng_seed`.
pub fn train_dgc(graph: &PopulationGraph, cfg: &DgcConfig) -> Result<TrainedDgc> {
    cfg.validate()?;
    let train_idx = graph.split_indices(Split::Train);
    let val_idx = graph.split_indices(Split::Val);
    ensure!(!train_idx.is_empty(), "train_dgc: empty train split");
    let has = |c: u8| train_idx.iter().any(|&i| graph.labels[i] == c);
    ensure!(
        has(0) && has(1),
        "train_dgc: train split must contain both classes"
    );
    ensure!(!val_idx.is_empty(), "train_dgc: empty validation split");

    let mut params = DgcParams::init(graph.features.cols(), cfg)?;
    let (mut set, ids) = params.to_param_set();
    let mut adam = AdamState::new(&set);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_values: Option<ParamSet> = None;

    for epoch in 0..cfg.epochs {
        let lr = multistep_lr(cfg.lr, &cfg.lr_milestones, cfg.lr_gamma, epoch as u32)?;
        let edges = knn_edges(&graph.features, cfg.k)?;
        let mut tape = Tape::new();
        let probs = dgc_forward_on_tape(&mut tape, &graph.features, &edges, &set, &ids)?;
        let loss = focal_loss_on_tape(&mut tape, probs, &graph.labels, &train_idx, &cfg.focal)?;
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(FgclError::numeric(
                "dgc",
                format!("non-finite focal loss at epoch {epoch}"),
            ));
        }
        set.zero_gradients();
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut set)?;
        adam_step(&mut set, &mut adam, lr, cfg.weight_decay)?;

        params.assign_from(&set, &ids);
        let probs = classify(graph, &params)?;
        let val_acc = accuracy_on(&probs, &graph.labels, &val_idx);
        history.push(DgcEpochStats {
            epoch,
            train_loss: loss_val,
            val_acc,
            lr,
        });
        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            let mut snapshot = ParamSet::new();
            for p in set.iter() {
                snapshot.add(p.name.clone(), p.value.clone());
            }
            best_values = Some(snapshot);
        }
    }
    if let Some(best) = best_values {
        set.copy_values_from(&best)?;
        params.assign_from(&set, &ids);
    }
    if history.is_empty() {
        best_val_acc = 0.0;
    }
    Ok(TrainedDgc {
        params,
        history,
        best_epoch,
        best_val_acc,
    })
}

/// Per-node class-1 probabilities over the whole population graph
/// (transductive: all nodes join the KNN graph; splits are irrelevant here).
pub fn classify(graph: &PopulationGraph, params: &DgcParams) -> Result<Vec<f64>> {
    ensure!(
        graph.features.cols() == params.in_dim,
        "classify: features are {} wide, classifier expects {}",
        graph.features.cols(),
        params.in_dim
    );
    let edges = knn_edges(&graph.features, params.k)?;
    dgc_forward(&graph.features, &edges, params)
}

/// One prediction row of the emitted CSV.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub node_id: usize,
    pub dyad_id: u32,
    pub subject_id: u32,
    pub role: crate::connectivity::Role,
    pub trial_index: u32,
    pub stage: String,
    pub label: u8,
    pub prob_class1: f64,
    pub split: Split,
}

/// Write predictions as CSV with a fixed header.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from(
        "node_id,dyad_id,subject_id,role,trial_index,stage,label,prob_class1,split\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.node_id,
            r.dyad_id,
            r.subject_id,
            r.role,
            r.trial_index,
            r.stage,
            r.label,
            r.prob_class1,
            r.split.as_str()
        ));
    }
    std::fs::write(path, out).map_err(|e| FgclError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::gradcheck;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_features(seed: u64, m: usize, d: usize) -> DenseMatrix {
        let mut rng = seeded_rng(seed);
        DenseMatrix::from_vec(
            m,
            d,
            (0..m * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn knn_with_k_equal_m_minus_one_is_complete() {
        let v = random_features(60, 5, 3);
        let edges = knn_edges(&v, 4).unwrap();
        for (i, ns) in edges.neighbors.iter().enumerate() {
            assert_eq!(ns.len(), 4);
            let mut sorted = ns.clone();
            sorted.sort_unstable();
            let expected: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(sorted, expected);
        }
    }

    #[test]
    fn knn_axis_example_matches_enumeration() {
        let v = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let edges = knn_edges(&v, 1).unwrap();
        assert_eq!(edges.neighbors[0], vec![1]);
        assert_eq!(edges.neighbors[1], vec![0]);
        assert_eq!(edges.neighbors[2], vec![0]);
        assert_eq!(edges.neighbors[3], vec![0]);
    }

    #[test]
    fn knn_caps_k_at_m_minus_one() {
        let v = random_features(61, 4, 3);
        let capped = knn_edges(&v, 99).unwrap();
        let exact = knn_edges(&v, 3).unwrap();
        assert_eq!(capped, exact);
    }

    #[test]
    fn knn_flags_zero_norm_nodes() {
        let mut v = random_features(62, 4, 3);
        for c in 0..3 {
            v[(2, c)] = 0.0;
        }
        let edges = knn_edges(&v, 2).unwrap();
        assert_eq!(edges.zero_norm_nodes, vec![2]);
        assert_eq!(edges.neighbors[2], vec![0, 1]);
    }

    #[test]
    fn knn_out_degree_is_exact() {
        let mut rng = seeded_rng(63);
        for _ in 0..10 {
            let m = rng.gen_range(2..8usize);
            let k = rng.gen_range(1..10usize);
            let v = random_features(rng.gen(), m, 4);
            let edges = knn_edges(&v, k).unwrap();
            for ns in &edges.neighbors {
                assert_eq!(ns.len(), k.min(m - 1));
            }
        }
    }

    fn tiny_layer(seed: u64, w_in: usize, w_out: usize) -> DgcLayer {
        let mut rng = seeded_rng(seed);
        let mut m = |r: usize, c: usize| {
            DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap()
        };
        DgcLayer {
            w1: m(2 * w_in, w_out),
            b1: m(1, w_out),
            w2: m(w_out, w_out),
            b2: m(1, w_out),
        }
    }

    /// Scalar-loop oracle for φ on a single concatenated vector.
    fn phi_oracle(layer: &DgcLayer, cat: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..layer.w1.cols())
            .map(|j| {
                let mut s = layer.b1[(0, j)];
                for (i, v) in cat.iter().enumerate() {
                    s += v * layer.w1[(i, j)];
                }
                s.max(0.0)
            })
            .collect();
        (0..layer.w2.cols())
            .map(|j| {
                let mut s = layer.b2[(0, j)];
                for (i, v) in h.iter().enumerate() {
                    s += v * layer.w2[(i, j)];
                }
                s
            })
            .collect()
    }

    #[test]
    fn identical_neighbors_reduce_to_deg_times_phi_of_self() {
        let d = 3;
        let layer = tiny_layer(64, d, 4);
        let row = vec![0.4, -0.2, 0.9];
        let v = DenseMatrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let edges = KnnEdges {
            neighbors: vec![vec![1, 2], vec![0, 2], vec![0, 1]],
            zero_norm_nodes: vec![],
        };
        let out = edge_conv(&v, &edges, &layer).unwrap();
        let mut cat = row.clone();
        cat.extend(vec![0.0; d]);
        let phi = phi_oracle(&layer, &cat);
        for i in 0..3 {
            for j in 0..4 {
                assert!(
                    (out[(i, j)] - 2.0 * phi[j]).abs() < 1e-12,
                    "node {i} col {j}"
                );
            }
        }
    }

    #[test]
    fn two_node_pair_matches_hand_arithmetic() {
        let layer = tiny_layer(65, 2, 3);
        let v = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let edges = KnnEdges {
            neighbors: vec![vec![1], vec![0]],
            zero_norm_nodes: vec![],
        };
        let out = edge_conv(&v, &edges, &layer).unwrap();
        let phi0 = phi_oracle(&layer, &[1.0, 2.0, -2.0, -1.5]);
        let phi1 = phi_oracle(&layer, &[-1.0, 0.5, 2.0, 1.5]);
        for j in 0..3 {
            assert!((out[(0, j)] - phi0[j]).abs() < 1e-12);
            assert!((out[(1, j)] - phi1[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_outputs_zero_row() {
        let layer = tiny_layer(66, 2, 3);
        let v = random_features(66, 3, 2);
        let edges = KnnEdges {
            neighbors: vec![vec![1], vec![0], vec![]],
            zero_norm_nodes: vec![],
        };
        let out = edge_conv(&v, &edges, &layer).unwrap();
        assert!(out.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn edge_conv_is_permutation_equivariant() {
        let layer = tiny_layer(67, 3, 4);
        let v = random_features(68, 5, 3);
        let edges = knn_edges(&v, 2).unwrap();
        let base = edge_conv(&v, &edges, &layer).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let mut inv = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let pv = v.select_rows(&perm);
        let p_edges = KnnEdges {
            neighbors: perm
                .iter()
                .map(|&old| edges.neighbors[old].iter().map(|&j| inv[j]).collect())
                .collect(),
            zero_norm_nodes: vec![],
        };
        let permuted = edge_conv(&pv, &p_edges, &layer).unwrap();
        let expected = base.select_rows(&perm);
        assert!(permuted.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn focal_with_gamma_zero_is_half_cross_entropy() {
        let cfg = FocalConfig {
            alpha: 0.5,
            gamma: 0.0,
        };
        for p in [1e-7, 0.01, 0.3, 0.5, 0.77, 0.999999] {
            for y in [0u8, 1] {
                let fl = focal_loss(p, y, &cfg).unwrap();
                let p_t: f64 = if y == 1 { p } else { 1.0 - p };
                let ce = -p_t.ln();
                assert!(
                    (fl - 0.5 * ce).abs() < 1e-12,
                    "p={p} y={y}: {fl} vs {}",
                    0.5 * ce
                );
            }
        }
    }

    #[test]
    fn focal_hand_example_and_limits() {
        let cfg = FocalConfig::default();
        let got = focal_loss(0.3, 1, &cfg).unwrap();
        let want = 0.5 * 0.49 * -(0.3f64.ln());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.29497).abs() < 1e-4);

        // Confident and correct: loss tends to zero.
        assert!(focal_loss(1.0 - 1e-9, 1, &cfg).unwrap() < 1e-6);
        assert!(focal_loss(1e-9, 0, &cfg).unwrap() < 1e-6);
        // Extreme inputs stay finite via the clamp.
        assert!(focal_loss(0.0, 1, &cfg).unwrap().is_finite());
        assert!(focal_loss(1.0, 0, &cfg).unwrap().is_finite());
    }

    #[test]
    fn tape_focal_matches_plain_mean() {
        let m = 6;
        let labels = [1u8, 0, 1, 1, 0, 0];
        let probs = [0.9, 0.2, 0.4, 0.65, 0.5, 0.05];
        let idx = [0usize, 2, 3, 5];
        let cfg = FocalConfig::default();
        let plain: f64 = idx
            .iter()
            .map(|&i| focal_loss(probs[i], labels[i], &cfg).unwrap())
            .sum::<f64>()
            / idx.len() as f64;
        let mut tape = Tape::new();
        let p = tape.constant(DenseMatrix::from_vec(m, 1, probs.to_vec()).unwrap());
        let loss = focal_loss_on_tape(&mut tape, p, &labels, &idx, &cfg).unwrap();
        let got = tape.scalar(loss);
        assert!((got - plain).abs() < 1e-12, "{got} vs {plain}");
    }

    /// Two Gaussian clusters with the requested split proportions.
    fn cluster_graph(
        seed: u64,
        m: usize,
        d: usize,
        separation: f64,
    ) -> PopulationGraph {
        let mut rng = seeded_rng(seed);
        let mut features = DenseMatrix::zeros(m, d);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let y = (i % 2) as u8;
            let center = if y == 1 { separation } else { -separation };
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[(i, j)] = center + noise;
            }
            labels.push(y);
        }
        let split: Vec<Split> = (0..m)
            .map(|i| match i % 10 {
                0..=6 => Split::Train,
                7 | 8 => Split::Val,
                _ => Split::Test,
            })
            .collect();
        PopulationGraph::new(features, labels, split).unwrap()
    }

    fn test_accuracy(graph: &PopulationGraph, trained: &TrainedDgc) -> f64 {
        let probs = classify(graph, &trained.params).unwrap();
        accuracy_on(&probs, &graph.labels, &graph.split_indices(Split::Test))
    }

    #[test]
    fn separable_clusters_reach_high_test_accuracy() {
        let graph = cluster_graph(70, 200, 8, 2.0);
        let cfg = DgcConfig {
            hidden: 16,
            epochs: 60,
            lr_milestones: vec![40],
            rng_seed: 5,
            ..DgcConfig::default()
        };
        let trained = train_dgc(&graph, &cfg).unwrap();
        let acc = test_accuracy(&graph, &trained);
        assert!(acc >= 0.95, "test accuracy {acc}");
    }

    #[test]
    fn permuted_labels_stay_near_chance() {
        let mut graph = cluster_graph(71, 200, 8, 2.0);
        // Deterministic shuffle of the labels breaks the feature-label link.
        let mut rng = seeded_rng(72);
        for i in (1..graph.labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            graph.labels.swap(i, j);
        }
        let cfg = DgcConfig {
            hidden: 16,
            epochs: 60,
            lr_milestones: vec![40],
            rng_seed: 5,
            ..DgcConfig::default()
        };
        let trained = train_dgc(&graph, &cfg).unwrap();
        let acc = test_accuracy(&graph, &trained);
        assert!(
            (0.35..=0.65).contains(&acc),
            "chance-level control produced {acc}"
        );
    }

    #[test]
    fn zero_epochs_returns_initialized_params() {
        let graph = cluster_graph(73, 20, 4, 1.0);
        let cfg = DgcConfig {
            hidden: 8,
            epochs: 0,
            ..DgcConfig::default()
        };
        let trained = train_dgc(&graph, &cfg).unwrap();
        assert!(trained.history.is_empty());
        let fresh = DgcParams::init(4, &cfg).unwrap();
        for ((n1, m1), (_, m2)) in trained.params.named().iter().zip(fresh.named().iter()) {
            assert_eq!(m1, m2, "{n1} should be untouched");
        }
    }

    #[test]
    fn single_class_train_split_is_rejected() {
        let mut graph = cluster_graph(74, 20, 4, 1.0);
        for (i, s) in graph.split.iter().enumerate() {
            if *s == Split::Train {
                graph.labels[i] = 1;
            }
        }
        let cfg = DgcConfig {
            hidden: 8,
            epochs: 2,
            ..DgcConfig::default()
        };
        assert!(matches!(
            train_dgc(&graph, &cfg),
            Err(FgclError::Contract(_))
        ));
    }

    #[test]
    fn classify_gives_identical_nodes_identical_probabilities() {
        let mut features = random_features(75, 6, 4);
        for c in 0..4 {
            let v = features[(1, c)];
            features[(4, c)] = v;
        }
        let labels = vec![0, 1, 0, 1, 1, 0];
        let split = vec![Split::Train; 6];
        let graph = PopulationGraph::new(features, labels, split).unwrap();
        let params = DgcParams::init(
            4,
            &DgcConfig {
                hidden: 8,
                k: 3,
                ..DgcConfig::default()
            },
        )
        .unwrap();
        let probs = classify(&graph, &params).unwrap();
        assert!(
            (probs[1] - probs[4]).abs() < 1e-12,
            "duplicate rows disagree: {} vs {}",
            probs[1],
            probs[4]
        );
        for &p in &probs {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn class_probabilities_are_complementary() {
        let graph = cluster_graph(76, 12, 4, 1.0);
        let params = DgcParams::init(
            4,
            &DgcConfig {
                hidden: 8,
                k: 3,
                ..DgcConfig::default()
            },
        )
        .unwrap();
        let edges = knn_edges(&graph.features, params.k).unwrap();
        let p1 = dgc_forward(&graph.features, &edges, &params).unwrap();
        // Swapping the logit columns gives the class-0 probability.
        let mut swapped = params.clone();
        let w = params.head_w.clone();
        for r in 0..w.rows() {
            swapped.head_w[(r, 0)] = w[(r, 1)];
            swapped.head_w[(r, 1)] = w[(r, 0)];
        }
        swapped.head_b = DenseMatrix::from_vec(
            1,
            2,
            vec![params.head_b[(0, 1)], params.head_b[(0, 0)]],
        )
        .unwrap();
        let p0 = dgc_forward(&graph.features, &edges, &swapped).unwrap();
        for (a, b) in p1.iter().zip(&p0) {
            assert!((a + b - 1.0).abs() < 1e-12, "p1 {a} + p0 {b} != 1");
        }
    }

    #[test]
    fn dgc_gradients_pass_finite_difference_check() {
        let graph = cluster_graph(77, 12, 6, 1.0);
        let cfg = DgcConfig {
            hidden: 5,
            k: 3,
            ..DgcConfig::default()
        };
        let params = DgcParams::init(6, &cfg).unwrap();
        let (mut set, ids) = params.to_param_set();
        let edges = knn_edges(&graph.features, cfg.k).unwrap();
        let train_idx = graph.split_indices(Split::Train);
        let report = gradcheck(
            &mut set,
            |p, want| {
                let mut tape = Tape::new();
                let probs = dgc_forward_on_tape(&mut tape, &graph.features, &edges, p, &ids)?;
                let loss =
                    focal_loss_on_tape(&mut tape, probs, &graph.labels, &train_idx, &cfg.focal)?;
                if want {
                    tape.backward(loss)?;
                    tape.accumulate_param_grads(p)?;
                }
                Ok(tape.scalar(loss))
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max relative error {:.3e} on {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let graph = cluster_graph(78, 40, 4, 1.5);
        let cfg = DgcConfig {
            hidden: 8,
            epochs: 5,
            k: 4,
            rng_seed: 9,
            ..DgcConfig::default()
        };
        let a = train_dgc(&graph, &cfg).unwrap();
        let b = train_dgc(&graph, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for ((n1, m1), (_, m2)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(m1, m2, "parameter {n1} differs between identical runs");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = DgcConfig {
            hidden: 8,
            k: 4,
            rng_seed: 31,
            ..DgcConfig::default()
        };
        let params = DgcParams::init(6, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.json");
        params.save_json(&path).unwrap();
        let loaded = DgcParams::load_json(&path).unwrap();
        assert_eq!(loaded.in_dim, 6);
        assert_eq!(loaded.hidden, 8);
        assert_eq!(loaded.k, 4);
        for ((n1, m1), (_, m2)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(m1, m2, "tensor {n1} changed across the roundtrip");
        }
    }

    #[test]
    fn predictions_csv_has_expected_rows() {
        let rows = vec![PredictionRow {
            node_id: 0,
            dyad_id: 2,
            subject_id: 4,
            role: crate::connectivity::Role::DmtActor,
            trial_index: 17,
            stage: "early".to_string(),
            label: 1,
            prob_class1: 0.625,
            split: Split::Test,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_predictions_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "node_id,dyad_id,subject_id,role,trial_index,stage,label,prob_class1,split"
        );
        assert_eq!(lines[1], "0,2,4,DMT_actor,17,early,1,0.625,test");
    }
}
