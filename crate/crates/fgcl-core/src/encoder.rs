//! The graph encoder: two Chebyshev-convolution + top-k pooling blocks,
//! symmetric global pooling, and a two-layer MLP head producing one
//! fixed-width embedding per graph.
//!
//! Architecture (widths are configurable, defaults in [`EncoderArch`]):
//!
//! ```text
//! X (n×n) ──ChebConv(K)──ReLU──TopK(r)──┐ Laplacian recomputed on the
//!                                       ├─ induced adjacency
//!            ┌──────────────────────────┘
//!            └─ChebConv(K)──ReLU──TopK(r)──mean‖max──MLP──z (1×d)
//! ```
//!
//! Every forward exists twice: a plain evaluation ([`encode`] and the public
//! building blocks) and a tape recording ([`encode_on_tape`]) used by the
//! training loops. Both compose the same kernels in the same order, and a
//! test pins them to identical output.
//!
//! `encode` is read-only on the parameters; any number of graphs may be
//! encoded concurrently against one frozen parameter set. Training mutates
//! parameters from a single owning loop.

use crate::connectivity::{scaled_laplacian, FcGraph, GraphMeta};
use crate::error::{ensure, FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::{ParamId, ParamSet};
use crate::numcore::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Chebyshev spectral convolution: `K` parameter matrices, one per
/// polynomial order, all `in_dim × out_dim`.
#[derive(Debug, Clone)]
pub struct ChebConvLayer {
    pub k: usize,
    pub theta: Vec<DenseMatrix>,
}

impl ChebConvLayer {
    pub fn new(theta: Vec<DenseMatrix>) -> Result<Self> {
        ensure!(!theta.is_empty(), "ChebConvLayer: at least one theta required");
        let shape = theta[0].shape();
        ensure!(
            theta.iter().all(|t| t.shape() == shape),
            "ChebConvLayer: theta shapes differ"
        );
        Ok(ChebConvLayer {
            k: theta.len(),
            theta,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.theta[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.theta[0].cols()
    }
}

/// Learnable top-k pooling: projection vector `p` (layer width × 1) and the
/// keep ratio `r` in (0, 1].
#[derive(Debug, Clone)]
pub struct TopKPool {
    pub p: DenseMatrix,
    pub ratio: f64,
}

impl TopKPool {
    pub fn new(p: DenseMatrix, ratio: f64) -> Result<Self> {
        ensure!(p.cols() == 1, "TopKPool: projection must be a column vector");
        ensure!(
            ratio > 0.0 && ratio <= 1.0,
            "TopKPool: ratio {ratio} outside (0, 1]"
        );
        Ok(TopKPool { p, ratio })
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

/// Width configuration of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    /// Input feature width = node count of the graphs (Pearson rows).
    pub in_dim: usize,
    /// Chebyshev filter size K.
    pub cheb_k: usize,
    /// Top-k keep ratio for both pooling layers.
    pub pool_ratio: f64,
    /// Output width of the first convolution block.
    pub hidden1: usize,
    /// Output width of the second convolution block.
    pub hidden2: usize,
    /// Hidden width of the MLP head.
    pub mlp_hidden: usize,
    /// Embedding width d.
    pub embedding_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            in_dim: 68,
            cheb_k: 4,
            pool_ratio: 0.5,
            hidden1: 64,
            hidden2: 64,
            mlp_hidden: 128,
            embedding_dim: 64,
        }
    }
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_dim >= 1, "EncoderArch: in_dim must be positive");
        ensure!(self.cheb_k >= 1, "EncoderArch: cheb_k must be at least 1");
        ensure!(
            self.pool_ratio > 0.0 && self.pool_ratio <= 1.0,
            "EncoderArch: pool_ratio {} outside (0, 1]",
            self.pool_ratio
        );
        ensure!(
            self.hidden1 >= 1
                && self.hidden2 >= 1
                && self.mlp_hidden >= 1
                && self.embedding_dim >= 1,
            "EncoderArch: all widths must be positive"
        );
        Ok(())
    }
}

/// Every trainable tensor of the encoder.
#[derive(Debug, Clone)]
pub struct GraphEncoderParams {
    pub arch: EncoderArch,
    pub conv1: ChebConvLayer,
    pub pool1: TopKPool,
    pub conv2: ChebConvLayer,
    pub pool2: TopKPool,
    pub mlp: MlpParams,
    pub rng_seed: u64,
}

/// One graph's embedding with its provenance.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub z: Vec<f64>,
    pub y: u8,
    pub meta: GraphMeta,
}

impl GraphEncoderParams {
    /// Seeded initialization: every tensor uniform on
    /// ±sqrt(6/(fan_in+fan_out)) for its layer's fan.
    pub fn init(arch: &EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng: ChaCha8Rng = crate::numcore::param::seeded_rng(seed);
        let glorot = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, fi: usize, fo: usize| {
            let mut set = ParamSet::new();
            let id = set.add_glorot("tmp", rows, cols, fi, fo, rng);
            set.get(id).value.clone()
        };
        let conv_layer = |rng: &mut ChaCha8Rng, k: usize, i: usize, o: usize| {
            let theta = (0..k).map(|_| glorot(rng, i, o, i, o)).collect();
            ChebConvLayer::new(theta)
        };
        let conv1 = conv_layer(&mut rng, arch.cheb_k, arch.in_dim, arch.hidden1)?;
        let pool1 = TopKPool::new(
            glorot(&mut rng, arch.hidden1, 1, arch.hidden1, 1),
            arch.pool_ratio,
        )?;
        let conv2 = conv_layer(&mut rng, arch.cheb_k, arch.hidden1, arch.hidden2)?;
        let pool2 = TopKPool::new(
            glorot(&mut rng, arch.hidden2, 1, arch.hidden2, 1),
            arch.pool_ratio,
        )?;
        let gp_width = 2 * arch.hidden2;
        let mlp = MlpParams {
            w1: glorot(&mut rng, gp_width, arch.mlp_hidden, gp_width, arch.mlp_hidden),
            b1: glorot(&mut rng, 1, arch.mlp_hidden, gp_width, arch.mlp_hidden),
            w2: glorot(
                &mut rng,
                arch.mlp_hidden,
                arch.embedding_dim,
                arch.mlp_hidden,
                arch.embedding_dim,
            ),
            b2: glorot(
                &mut rng,
                1,
                arch.embedding_dim,
                arch.mlp_hidden,
                arch.embedding_dim,
            ),
        };
        Ok(GraphEncoderParams {
            arch: *arch,
            conv1,
            pool1,
            conv2,
            pool2,
            mlp,
            rng_seed: seed,
        })
    }

    /// Named tensors in the fixed layout order shared by the optimizer and
    /// the checkpoint format.
    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = Vec::new();
        for (i, t) in self.conv1.theta.iter().enumerate() {
            out.push((format!("conv1.theta{}", i + 1), t));
        }
        out.push(("pool1.p".to_string(), &self.pool1.p));
        for (i, t) in self.conv2.theta.iter().enumerate() {
            out.push((format!("conv2.theta{}", i + 1), t));
        }
        out.push(("pool2.p".to_string(), &self.pool2.p));
        out.push(("mlp.w1".to_string(), &self.mlp.w1));
        out.push(("mlp.b1".to_string(), &self.mlp.b1));
        out.push(("mlp.w2".to_string(), &self.mlp.w2));
        out.push(("mlp.b2".to_string(), &self.mlp.b2));
        out
    }

    /// Materialize a [`ParamSet`] for training, plus the id layout.
    pub fn to_param_set(&self) -> (ParamSet, EncoderParamIds) {
        let mut set = ParamSet::new();
        let conv1_theta = self
            .conv1
            .theta
            .iter()
            .enumerate()
            .map(|(i, t)| set.add(format!("conv1.theta{}", i + 1), t.clone()))
            .collect();
        let pool1_p = set.add("pool1.p", self.pool1.p.clone());
        let conv2_theta = self
            .conv2
            .theta
            .iter()
            .enumerate()
            .map(|(i, t)| set.add(format!("conv2.theta{}", i + 1), t.clone()))
            .collect();
        let pool2_p = set.add("pool2.p", self.pool2.p.clone());
        let ids = EncoderParamIds {
            conv1_theta,
            pool1_p,
            conv2_theta,
            pool2_p,
            mlp_w1: set.add("mlp.w1", self.mlp.w1.clone()),
            mlp_b1: set.add("mlp.b1", self.mlp.b1.clone()),
            mlp_w2: set.add("mlp.w2", self.mlp.w2.clone()),
            mlp_b2: set.add("mlp.b2", self.mlp.b2.clone()),
        };
        (set, ids)
    }

    /// Copy trained values back from a [`ParamSet`] laid out by
    /// [`GraphEncoderParams::to_param_set`].
    pub fn assign_from(&mut self, set: &ParamSet, ids: &EncoderParamIds) -> Result<()> {
        for (dst, src) in self.conv1.theta.iter_mut().zip(&ids.conv1_theta) {
            *dst = set.get(*src).value.clone();
        }
        self.pool1.p = set.get(ids.pool1_p).value.clone();
        for (dst, src) in self.conv2.theta.iter_mut().zip(&ids.conv2_theta) {
            *dst = set.get(*src).value.clone();
        }
        self.pool2.p = set.get(ids.pool2_p).value.clone();
        self.mlp.w1 = set.get(ids.mlp_w1).value.clone();
        self.mlp.b1 = set.get(ids.mlp_b1).value.clone();
        self.mlp.w2 = set.get(ids.mlp_w2).value.clone();
        self.mlp.b2 = set.get(ids.mlp_b2).value.clone();
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(self.arch).expect("arch serializes");
        let named = self.named();
        let refs: Vec<(&str, &DenseMatrix)> =
            named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        write_checkpoint(path, self.rng_seed, arch, &refs)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let loaded = read_checkpoint(path)?;
        let arch: EncoderArch = serde_json::from_value(loaded.arch.clone())
            .map_err(|e| FgclError::json(path.display().to_string(), e))?;
        arch.validate()?;
        let mut params = GraphEncoderParams::init(&arch, loaded.rng_seed)?;
        let mut expected: Vec<(String, (usize, usize))> = params
            .named()
            .iter()
            .map(|(n, m)| (n.clone(), m.shape()))
            .collect();
        expected.sort();
        let mut names: Vec<&String> = loaded.tensors.keys().collect();
        names.sort();
        if names.len() != expected.len()
            || !names
                .iter()
                .zip(&expected)
                .all(|(got, (want, _))| *got == want)
        {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!(
                    "parameter names {:?} do not match the encoder layout",
                    names
                ),
            ));
        }
        for (name, shape) in &expected {
            let tensor = &loaded.tensors[name];
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
        for (i, _) in params.conv1.theta.clone().iter().enumerate() {
            params.conv1.theta[i] = loaded.tensors[&format!("conv1.theta{}", i + 1)].clone();
        }
        params.pool1.p = loaded.tensors["pool1.p"].clone();
        for (i, _) in params.conv2.theta.clone().iter().enumerate() {
            params.conv2.theta[i] = loaded.tensors[&format!("conv2.theta{}", i + 1)].clone();
        }
        params.pool2.p = loaded.tensors["pool2.p"].clone();
        params.mlp.w1 = loaded.tensors["mlp.w1"].clone();
        params.mlp.b1 = loaded.tensors["mlp.b1"].clone();
        params.mlp.w2 = loaded.tensors["mlp.w2"].clone();
        params.mlp.b2 = loaded.tensors["mlp.b2"].clone();
        Ok(params)
    }
}

/// Layout of encoder parameters inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct EncoderParamIds {
    pub conv1_theta: Vec<ParamId>,
    pub pool1_p: ParamId,
    pub conv2_theta: Vec<ParamId>,
    pub pool2_p: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

// ---------------------------------------------------------------------------
// Plain forward operations
// ---------------------------------------------------------------------------

/// Chebyshev convolution by the stable recursion
/// `Z^(1) = X`, `Z^(2) = L̃·X`, `Z^(k) = 2·L̃·Z^(k−1) − Z^(k−2)`,
/// output `Σ_k Z^(k)·θ^(k)`.
pub fn cheb_conv_forward(
    x: &DenseMatrix,
    lap: &DenseMatrix,
    layer: &ChebConvLayer,
) -> Result<DenseMatrix> {
    ensure!(
        lap.rows() == lap.cols() && lap.rows() == x.rows(),
        "cheb_conv_forward: Laplacian {}x{} does not match {} nodes",
        lap.rows(),
        lap.cols(),
        x.rows()
    );
    ensure!(
        layer.k <= layer.theta.len(),
        "cheb_conv_forward: K = {} but only {} theta matrices",
        layer.k,
        layer.theta.len()
    );
    ensure!(
        layer.in_dim() == x.cols(),
        "cheb_conv_forward: features are {} wide, theta expects {}",
        x.cols(),
        layer.in_dim()
    );
    let mut z_prev2 = x.clone();
    let mut acc = z_prev2.matmul(&layer.theta[0])?;
    if layer.k == 1 {
        return Ok(acc);
    }
    let mut z_prev1 = lap.matmul(x)?;
    acc = acc.add(&z_prev1.matmul(&layer.theta[1])?)?;
    for k in 2..layer.k {
        let z = lap.matmul(&z_prev1)?.scale(2.0).sub(&z_prev2)?;
        acc = acc.add(&z.matmul(&layer.theta[k])?)?;
        z_prev2 = z_prev1;
        z_prev1 = z;
    }
    Ok(acc)
}

/// Indices of the `k` largest scores, ties broken toward the lower index;
/// the result is in ascending index order. Shared by the plain and tape
/// pooling paths so both always select identically.
pub(crate) fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("pooling scores must not be NaN")
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone)]
pub struct PoolResult {
    /// Kept node features, gated by tanh(score).
    pub features: DenseMatrix,
    /// Adjacency restricted to the kept rows/columns.
    pub adjacency: DenseMatrix,
    /// Kept node indices, ascending.
    pub kept: Vec<usize>,
    /// True when |p| = 0 forced the index-order fallback.
    pub degenerate_projection: bool,
}

/// Learnable top-k pooling: scores `s = nodes·p / |p|`, keep the
/// `ceil(r·n)` best nodes, gate their features by `tanh(s)`, restrict the
/// adjacency. A zero projection yields all-zero scores (index-order
/// selection, zero gates) and is flagged.
pub fn topk_pool(nodes: &DenseMatrix, w_sub: &DenseMatrix, pool: &TopKPool) -> Result<PoolResult> {
    let n = nodes.rows();
    ensure!(n >= 1, "topk_pool: no nodes");
    ensure!(
        w_sub.rows() == n && w_sub.cols() == n,
        "topk_pool: adjacency {}x{} does not match {} nodes",
        w_sub.rows(),
        w_sub.cols(),
        n
    );
    ensure!(
        pool.p.rows() == nodes.cols(),
        "topk_pool: projection width {} does not match features {}",
        pool.p.rows(),
        nodes.cols()
    );
    ensure!(
        pool.ratio > 0.0 && pool.ratio <= 1.0,
        "topk_pool: ratio {} outside (0, 1]",
        pool.ratio
    );
    let norm = pool.p.frobenius_norm();
    let degenerate = norm == 0.0;
    if degenerate {
        log::warn!("topk_pool: zero projection vector, falling back to index order");
    }
    let raw = nodes.matmul(&pool.p)?;
    let scores: Vec<f64> = if degenerate {
        vec![0.0; n]
    } else {
        raw.data().iter().map(|v| v / norm).collect()
    };
    let keep = (pool.ratio * n as f64).ceil().max(1.0) as usize;
    let kept = select_top_k(&scores, keep);
    let mut features = nodes.select_rows(&kept);
    for (r, &i) in kept.iter().enumerate() {
        let gate = scores[i].tanh();
        for v in features.row_mut(r) {
            *v *= gate;
        }
    }
    let adjacency = w_sub.select(&kept, &kept);
    Ok(PoolResult {
        features,
        adjacency,
        kept,
        degenerate_projection: degenerate,
    })
}

/// Concatenated per-feature mean and max over nodes -> `2·width` vector.
pub fn global_pool(nodes: &DenseMatrix) -> Result<Vec<f64>> {
    let n = nodes.rows();
    ensure!(n >= 1, "global_pool: no nodes");
    let width = nodes.cols();
    let mut out = vec![0.0; 2 * width];
    for i in 0..n {
        for (j, v) in nodes.row(i).iter().enumerate() {
            out[j] += v;
        }
    }
    let inv = 1.0 / n as f64;
    for v in out.iter_mut().take(width) {
        *v *= inv;
    }
    for j in 0..width {
        let mut best = nodes[(0, j)];
        for i in 1..n {
            if nodes[(i, j)] > best {
                best = nodes[(i, j)];
            }
        }
        out[width + j] = best;
    }
    Ok(out)
}

fn check_finite(stage: &str, m: &DenseMatrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(FgclError::numeric(
            stage,
            "non-finite values in intermediate result",
        ))
    }
}

/// Full forward pass producing one embedding. Deterministic given
/// `(graph, params)`; any non-finite intermediate aborts with the stage name.
pub fn encode(graph: &FcGraph, params: &GraphEncoderParams) -> Result<Embedding> {
    ensure!(
        graph.n == params.arch.in_dim,
        "encode: graph has {} nodes, encoder expects {}",
        graph.n,
        params.arch.in_dim
    );
    let lap1 = scaled_laplacian(&graph.w)?;
    check_finite("laplacian1", &lap1)?;
    let c1 = cheb_conv_forward(&graph.x, &lap1, &params.conv1)?.map(|v| v.max(0.0));
    check_finite("conv1", &c1)?;
    let p1 = topk_pool(&c1, &graph.w, &params.pool1)?;
    check_finite("pool1", &p1.features)?;
    let lap2 = scaled_laplacian(&p1.adjacency)?;
    check_finite("laplacian2", &lap2)?;
    let c2 = cheb_conv_forward(&p1.features, &lap2, &params.conv2)?.map(|v| v.max(0.0));
    check_finite("conv2", &c2)?;
    let p2 = topk_pool(&c2, &p1.adjacency, &params.pool2)?;
    check_finite("pool2", &p2.features)?;
    let pooled = global_pool(&p2.features)?;
    let gp = DenseMatrix::row_vector(pooled);
    check_finite("global_pool", &gp)?;
    let h = gp
        .matmul(&params.mlp.w1)?
        .add(&params.mlp.b1)?
        .map(|v| v.max(0.0));
    let z = h.matmul(&params.mlp.w2)?.add(&params.mlp.b2)?;
    check_finite("mlp", &z)?;
    Ok(Embedding {
        z: z.into_vec(),
        y: graph.y,
        meta: graph.meta,
    })
}

// ---------------------------------------------------------------------------
// Tape forward (training path)
// ---------------------------------------------------------------------------

/// Encoder parameters bound onto a tape, one leaf per tensor.
#[derive(Debug, Clone)]
pub struct TapeEncoderBinds {
    pub conv1_theta: Vec<NodeId>,
    pub pool1_p: NodeId,
    pub conv2_theta: Vec<NodeId>,
    pub pool2_p: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Bind every encoder parameter as a tape leaf (once per tape/batch).
pub fn bind_encoder(tape: &mut Tape, set: &ParamSet, ids: &EncoderParamIds) -> TapeEncoderBinds {
    TapeEncoderBinds {
        conv1_theta: ids.conv1_theta.iter().map(|&id| tape.param(set, id)).collect(),
        pool1_p: tape.param(set, ids.pool1_p),
        conv2_theta: ids.conv2_theta.iter().map(|&id| tape.param(set, id)).collect(),
        pool2_p: tape.param(set, ids.pool2_p),
        mlp_w1: tape.param(set, ids.mlp_w1),
        mlp_b1: tape.param(set, ids.mlp_b1),
        mlp_w2: tape.param(set, ids.mlp_w2),
        mlp_b2: tape.param(set, ids.mlp_b2),
    }
}

fn cheb_on_tape(tape: &mut Tape, x: NodeId, lap: NodeId, theta: &[NodeId]) -> NodeId {
    let mut terms = Vec::with_capacity(theta.len());
    let mut z_prev2 = x;
    terms.push(tape.matmul(z_prev2, theta[0]));
    if theta.len() > 1 {
        let mut z_prev1 = tape.matmul(lap, x);
        terms.push(tape.matmul(z_prev1, theta[1]));
        for &th in &theta[2..] {
            let lz = tape.matmul(lap, z_prev1);
            let two_lz = tape.scale(lz, 2.0);
            let z = tape.sub(two_lz, z_prev2);
            terms.push(tape.matmul(z, th));
            z_prev2 = z_prev1;
            z_prev1 = z;
        }
    }
    if terms.len() == 1 {
        terms[0]
    } else {
        tape.add_n(&terms)
    }
}

/// Top-k pooling on the tape. Node selection reads the forward score values
/// and is frozen (no gradient through the index choice); the gates and kept
/// features stay differentiable. Returns the pooled feature node, the kept
/// indices, and the induced adjacency (plain matrix: the adjacency is data,
/// not a function of parameters).
fn topk_on_tape(
    tape: &mut Tape,
    nodes: NodeId,
    w_sub: &DenseMatrix,
    p: NodeId,
    ratio: f64,
) -> (NodeId, Vec<usize>, DenseMatrix) {
    let n = tape.value(nodes).rows();
    let psq = tape.hadamard(p, p);
    let ssq = tape.sum_all(psq);
    // The 1e-24 guard is below one ulp for any healthy projection norm; it
    // only prevents a zero divide if training ever drove p to exact zero.
    let guarded = tape.add_const(ssq, 1e-24);
    let norm = tape.sqrt(guarded);
    let raw = tape.matmul(nodes, p);
    let scores = tape.div_scalar(raw, norm);
    let score_vals: Vec<f64> = tape.value(scores).data().to_vec();
    let keep = (ratio * n as f64).ceil().max(1.0) as usize;
    let kept = select_top_k(&score_vals, keep);
    let gates = tape.tanh(scores);
    let kept_feats = tape.select_rows(nodes, &kept);
    let kept_gates = tape.select_rows(gates, &kept);
    let gated = tape.row_scale(kept_feats, kept_gates);
    let adjacency = w_sub.select(&kept, &kept);
    (gated, kept, adjacency)
}

/// Record the full encoder forward for one graph; returns the 1×d embedding
/// node. Mirrors [`encode`] operation for operation.
pub fn encode_on_tape(
    tape: &mut Tape,
    graph: &FcGraph,
    arch: &EncoderArch,
    binds: &TapeEncoderBinds,
) -> Result<NodeId> {
    ensure!(
        graph.n == arch.in_dim,
        "encode_on_tape: graph has {} nodes, encoder expects {}",
        graph.n,
        arch.in_dim
    );
    let lap1 = scaled_laplacian(&graph.w)?;
    let lap1 = tape.constant(lap1);
    let x = tape.constant(graph.x.clone());
    let c1 = cheb_on_tape(tape, x, lap1, &binds.conv1_theta);
    let c1 = tape.relu(c1);
    let (pooled1, _kept1, w1) = topk_on_tape(tape, c1, &graph.w, binds.pool1_p, arch.pool_ratio);
    let lap2 = scaled_laplacian(&w1)?;
    let lap2 = tape.constant(lap2);
    let c2 = cheb_on_tape(tape, pooled1, lap2, &binds.conv2_theta);
    let c2 = tape.relu(c2);
    let (pooled2, _kept2, _w2) = topk_on_tape(tape, c2, &w1, binds.pool2_p, arch.pool_ratio);
    let mean = tape.mean_rows(pooled2);
    let max = tape.max_rows(pooled2);
    let gp = tape.concat_cols(mean, max);
    let h = tape.matmul(gp, binds.mlp_w1);
    let h = tape.add_row_vec(h, binds.mlp_b1);
    let h = tape.relu(h);
    let z = tape.matmul(h, binds.mlp_w2);
    let z = tape.add_row_vec(z, binds.mlp_b2);
    Ok(z)
}

// ---------------------------------------------------------------------------
// Checkpoint format (shared with the classifier module)
// ---------------------------------------------------------------------------

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    schema_version: u32,
    rng_seed: u64,
    arch: serde_json::Value,
    shapes: BTreeMap<String, [usize; 2]>,
    values: BTreeMap<String, Vec<f64>>,
}

pub(crate) struct LoadedCheckpoint {
    pub rng_seed: u64,
    pub arch: serde_json::Value,
    pub tensors: BTreeMap<String, DenseMatrix>,
}

/// Write named tensors with their shapes, the architecture block, and the
/// originating seed as one JSON document.
pub(crate) fn write_checkpoint(
    path: &Path,
    rng_seed: u64,
    arch: serde_json::Value,
    named: &[(&str, &DenseMatrix)],
) -> Result<()> {
    let mut shapes = BTreeMap::new();
    let mut values = BTreeMap::new();
    for (name, m) in named {
        shapes.insert(name.to_string(), [m.rows(), m.cols()]);
        values.insert(name.to_string(), m.data().to_vec());
    }
    let doc = CheckpointJson {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        rng_seed,
        arch,
        shapes,
        values,
    };
    let text =
        serde_json::to_string(&doc).map_err(|e| FgclError::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| FgclError::io(path.display().to_string(), e))
}

/// Read a checkpoint, validating the schema version and that every value
/// array matches its declared shape exactly.
pub(crate) fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| FgclError::io(path.display().to_string(), e))?;
    let doc: CheckpointJson =
        serde_json::from_str(&text).map_err(|e| FgclError::json(path.display().to_string(), e))?;
    if doc.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(FgclError::schema(
            path.display().to_string(),
            format!(
                "checkpoint schema version {} unsupported, expected {}",
                doc.schema_version, CHECKPOINT_SCHEMA_VERSION
            ),
        ));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in &doc.shapes {
        let values = doc.values.get(name).ok_or_else(|| {
            FgclError::schema(
                path.display().to_string(),
                format!("parameter {name} has a shape but no values"),
            )
        })?;
        if values.len() != shape[0] * shape[1] {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!(
                    "parameter {name}: {} values for shape {}x{}",
                    values.len(),
                    shape[0],
                    shape[1]
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!("parameter {name} contains non-finite values"),
            ));
        }
        tensors.insert(
            name.clone(),
            DenseMatrix::from_vec(shape[0], shape[1], values.clone())?,
        );
    }
    if doc.values.len() != doc.shapes.len() {
        return Err(FgclError::schema(
            path.display().to_string(),
            "value arrays without declared shapes".to_string(),
        ));
    }
    Ok(LoadedCheckpoint {
        rng_seed: doc.rng_seed,
        arch: doc.arch,
        tensors,
    })
}
