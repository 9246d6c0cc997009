//! Metrics, stage-wise evaluation, the two train/test protocols, and the
//! attraction-distribution analysis.
//!
//! Classification quality is summarized by accuracy, tie-corrected
//! Mann-Whitney AUC, F1, sensitivity and specificity at a fixed threshold.
//! Degenerate cells (single-class samples, no predicted positives) carry
//! explicit `None` flags instead of silently defaulting.
//!
//! Two protocols run the full pipeline (pretrain encoder, embed basic
//! views, train the transductive classifier, score test nodes):
//! [`evaluate_fixed_split`] uses a precomputed dyad-stratified 7:2:1 trial
//! split, while [`leave_dyad_out_cv`] holds out every dyad once and carves
//! an eighth of the remaining trials for validation. Trial sequences are cut
//! into early/middle/late stages at floor(n/3) and floor(2n/3), and every
//! result cell is keyed (role, stage) with "entire" as the union row.

use crate::connectivity::{FcGraph, GraphMeta, Role};
use crate::contrastive::{cosine_sim, train_encoder, ContrastiveConfig};
use crate::dgc::{classify, train_dgc, DgcConfig, PopulationGraph, Split};
use crate::encoder::{encode, EncoderArch};
use crate::error::{ensure, FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::seeded_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Thirds of a dyad's chronological trial sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Early,
    Middle,
    Late,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Middle => "middle",
            Stage::Late => "late",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage of 0-based trial `t` in a sequence of `n` trials: early before
/// floor(n/3), late from floor(2n/3), middle between.
pub fn stage_of(t: usize, n: usize) -> Result<Stage> {
    ensure!(n >= 3, "stage_of: need at least 3 trials, got {n}");
    ensure!(t < n, "stage_of: trial {t} out of range for {n} trials");
    if t < n / 3 {
        Ok(Stage::Early)
    } else if t >= 2 * n / 3 {
        Ok(Stage::Late)
    } else {
        Ok(Stage::Middle)
    }
}

/// Stage assignment for every trial of a sequence.
pub fn stage_split(n: usize) -> Result<Vec<Stage>> {
    (0..n).map(|t| stage_of(t, n)).collect()
}

/// Classification metrics at one threshold. `None` marks a metric whose
/// denominator was empty (for example AUC and sensitivity on a single-class
/// sample); it serializes as JSON `null`, never as a fake number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
    pub n_samples: usize,
    pub positive_count: usize,
}

/// Ascending ranks (1-based) with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Confusion-matrix metrics plus rank-statistic AUC.
pub fn compute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsRecord> {
    let n = probs.len();
    ensure!(n >= 1, "compute_metrics: empty input");
    ensure!(
        labels.len() == n,
        "compute_metrics: {n} probabilities but {} labels",
        labels.len()
    );
    ensure!(
        labels.iter().all(|&y| y <= 1),
        "compute_metrics: labels must be 0 or 1"
    );
    ensure!(
        probs.iter().all(|p| p.is_finite()),
        "compute_metrics: non-finite probability"
    );
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n_pos = tp + fn_;
    let n_neg = tn + fp;
    let acc = (tp + tn) as f64 / n as f64;
    let sen = (n_pos > 0).then(|| tp as f64 / n_pos as f64);
    let spec = (n_neg > 0).then(|| tn as f64 / n_neg as f64);
    let f1_den = 2 * tp + fp + fn_;
    let f1 = (f1_den > 0).then(|| 2.0 * tp as f64 / f1_den as f64);
    let auc = if n_pos > 0 && n_neg > 0 {
        let ranks = average_ranks(probs);
        let rank_sum: f64 = ranks
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(r, _)| r)
            .sum();
        let np = n_pos as f64;
        Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
    } else {
        None
    };
    if auc.is_none() || sen.is_none() || spec.is_none() {
        log::warn!(
            "compute_metrics: single-class sample (n={n}, positives={n_pos}), \
             AUC/SEN/SPEC flagged undefined where applicable"
        );
    }
    Ok(MetricsRecord {
        acc,
        auc,
        f1,
        sen,
        spec,
        n_samples: n,
        positive_count: n_pos,
    })
}

// ---------------------------------------------------------------------------
// Trial splits
// ---------------------------------------------------------------------------

/// Dyad-stratified 7:2:1 trial split: within each dyad the (seeded) shuffled
/// trial list is apportioned by largest remainder, keeping every class count
/// within one trial of its exact share.
pub fn split_721(trials: &[(u32, u32)], seed: u64) -> Result<BTreeMap<(u32, u32), Split>> {
    ensure!(!trials.is_empty(), "split_721: no trials");
    let mut by_dyad: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(dyad, trial) in trials {
        by_dyad.entry(dyad).or_default().push(trial);
    }
    let mut out = BTreeMap::new();
    for (dyad, mut ts) in by_dyad {
        ts.sort_unstable();
        ts.dedup();
        let mut rng = seeded_rng(seed ^ u64::from(dyad));
        for i in (1..ts.len()).rev() {
            let j = rng.gen_range(0..=i);
            ts.swap(i, j);
        }
        let t = ts.len() as f64;
        let shares = [0.7, 0.2, 0.1];
        let mut counts = [0usize; 3];
        let mut fracs = [0.0f64; 3];
        for (i, s) in shares.iter().enumerate() {
            let ideal = s * t;
            counts[i] = ideal.floor() as usize;
            fracs[i] = ideal - ideal.floor();
        }
        let mut rem = ts.len() - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
        for &cls in &order {
            if rem == 0 {
                break;
            }
            counts[cls] += 1;
            rem -= 1;
        }
        let mut cursor = 0usize;
        for (cls, &count) in counts.iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][cls];
            for &trial in &ts[cursor..cursor + count] {
                out.insert((dyad, trial), split);
            }
            cursor += count;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attraction analysis
// ---------------------------------------------------------------------------

/// Bins of the attraction histograms over [−1, 1].
pub const ATTRACTION_BINS: usize = 64;

/// Cosine-similarity distributions of positive vs negative pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttractionReport {
    pub mean_pos: f64,
    pub mean_neg: f64,
    /// mean_pos − mean_neg.
    pub gap: f64,
    pub pos_count: usize,
    pub neg_count: usize,
    pub pos_hist: Vec<u64>,
    pub neg_hist: Vec<u64>,
}

fn hist_bin(s: f64) -> usize {
    let idx = ((s + 1.0) / 2.0 * ATTRACTION_BINS as f64).floor() as isize;
    idx.clamp(0, ATTRACTION_BINS as isize - 1) as usize
}

/// Similarity statistics for explicit positive and negative index pairs over
/// one feature set.
pub fn attraction_report(
    features: &[Vec<f64>],
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<AttractionReport> {
    ensure!(
        !positives.is_empty() && !negatives.is_empty(),
        "attraction_report: need at least one positive and one negative pair"
    );
    let run = |pairs: &[(usize, usize)]| -> Result<(f64, Vec<u64>)> {
        let mut hist = vec![0u64; ATTRACTION_BINS];
        let mut sum = 0.0;
        for &(a, b) in pairs {
            ensure!(
                a < features.len() && b < features.len(),
                "attraction_report: pair ({a}, {b}) out of range for {} features",
                features.len()
            );
            let s = cosine_sim(&features[a], &features[b])?;
            sum += s;
            hist[hist_bin(s)] += 1;
        }
        Ok((sum / pairs.len() as f64, hist))
    };
    let (mean_pos, pos_hist) = run(positives)?;
    let (mean_neg, neg_hist) = run(negatives)?;
    Ok(AttractionReport {
        mean_pos,
        mean_neg,
        gap: mean_pos - mean_neg,
        pos_count: positives.len(),
        neg_count: negatives.len(),
        pos_hist,
        neg_hist,
    })
}

/// All unordered index pairs, split into positives (same dyad and trial)
/// and negatives (anything else).
pub fn attraction_pairs(metas: &[GraphMeta]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..metas.len() {
        for j in (i + 1)..metas.len() {
            let same_group = metas[i].dyad_id == metas[j].dyad_id
                && metas[i].trial_index == metas[j].trial_index;
            if same_group {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

/// Row-major flattening of each graph's node-feature matrix, for the
/// raw-feature baseline.
pub fn flattened_features(graphs: &[&FcGraph]) -> Vec<Vec<f64>> {
    graphs.iter().map(|g| g.x.data().to_vec()).collect()
}

/// Write the two histograms as CSV: bin_center, pos_count, neg_count.
pub fn write_attraction_csv(path: &Path, report: &AttractionReport) -> Result<()> {
    let mut out = String::from("bin_center,pos_count,neg_count\n");
    let width = 2.0 / ATTRACTION_BINS as f64;
    for b in 0..ATTRACTION_BINS {
        let center = -1.0 + (b as f64 + 0.5) * width;
        out.push_str(&format!(
            "{},{},{}\n",
            center, report.pos_hist[b], report.neg_hist[b]
        ));
    }
    std::fs::write(path, out).map_err(|e| FgclError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Full-pipeline protocols
// ---------------------------------------------------------------------------

/// Everything one protocol run needs: encoder shape, both training configs,
/// and the decision threshold. Per-fold seeds derive from `rng_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub arch: EncoderArch,
    pub contrastive: ContrastiveConfig,
    pub dgc: DgcConfig,
    pub threshold: f64,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: EncoderArch::default(),
            contrastive: ContrastiveConfig::default(),
            dgc: DgcConfig::default(),
            threshold: 0.5,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.contrastive.validate()?;
        self.dgc.validate()?;
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            "PipelineConfig: threshold {} outside (0, 1)",
            self.threshold
        );
        Ok(())
    }
}

/// What went into one protocol run, for leakage verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    /// Held-out dyad (cross-validation only).
    pub test_dyad: Option<u32>,
    pub pretrain_train_views: usize,
    pub pretrain_val_views: usize,
    pub n_train_nodes: usize,
    pub n_val_nodes: usize,
    pub n_test_nodes: usize,
    /// True if any test graph reached a training loss; always audited, never
    /// assumed.
    pub leakage_detected: bool,
}

/// One protocol run's scored cells: role → stage ("entire"/"early"/
/// "middle"/"late") → metrics on that slice of the test nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_dyad: Option<u32>,
    pub audit: FoldAudit,
    pub results: BTreeMap<String, BTreeMap<String, MetricsRecord>>,
}

/// Mean and sample standard deviation of one metric across folds (only the
/// folds where it was defined).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggEntry {
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

/// Aggregated metrics of one (role, stage) cell.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AggMetrics {
    pub acc: Option<AggEntry>,
    pub auc: Option<AggEntry>,
    pub f1: Option<AggEntry>,
    pub sen: Option<AggEntry>,
    pub spec: Option<AggEntry>,
}

/// Full protocol output: per-fold cells plus cross-fold aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolResults {
    pub schema_version: u32,
    pub protocol: String,
    pub threshold: f64,
    pub folds: Vec<FoldResult>,
    pub aggregate: BTreeMap<String, BTreeMap<String, AggMetrics>>,
}

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

fn trial_key(meta: &GraphMeta) -> (u32, u32) {
    (meta.dyad_id, meta.trial_index)
}

/// Trials per dyad, from the basic views.
fn trials_per_dyad(basic: &[FcGraph]) -> BTreeMap<u32, usize> {
    let mut trials: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for g in basic {
        trials
            .entry(g.meta.dyad_id)
            .or_default()
            .insert(g.meta.trial_index);
    }
    trials.into_iter().map(|(d, s)| (d, s.len())).collect()
}

/// Score the test nodes of one fold, cell by cell: role x ("entire" plus
/// each session stage). Stage position is computed per dyad from every
/// trial present in `metas`, so pass the full node set, not only the test
/// rows. Empty cells are omitted rather than faked.
pub fn score_test_cells(
    metas: &[GraphMeta],
    labels: &[u8],
    probs: &[f64],
    split: &[Split],
    threshold: f64,
) -> Result<BTreeMap<String, BTreeMap<String, MetricsRecord>>> {
    let n = metas.len();
    ensure!(
        labels.len() == n && probs.len() == n && split.len() == n,
        "score_test_cells: mismatched lengths (metas {n}, labels {}, probs {}, split {})",
        labels.len(),
        probs.len(),
        split.len()
    );
    let mut per_dyad: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for m in metas {
        per_dyad.entry(m.dyad_id).or_default().insert(m.trial_index);
    }
    let per_dyad: BTreeMap<u32, usize> =
        per_dyad.into_iter().map(|(d, s)| (d, s.len())).collect();
    let test_nodes: Vec<usize> = (0..n).filter(|&i| split[i] == Split::Test).collect();
    ensure!(!test_nodes.is_empty(), "score_test_cells: no test nodes");

    let mut results: BTreeMap<String, BTreeMap<String, MetricsRecord>> = BTreeMap::new();
    let mut roles: Vec<Role> = test_nodes.iter().map(|&i| metas[i].role).collect();
    roles.sort_by_key(|r| r.as_str());
    roles.dedup();
    for role in roles {
        let role_nodes: Vec<usize> = test_nodes
            .iter()
            .copied()
            .filter(|&i| metas[i].role == role)
            .collect();
        let mut cells: Vec<(String, Vec<usize>)> =
            vec![("entire".to_string(), role_nodes.clone())];
        for stage in [Stage::Early, Stage::Middle, Stage::Late] {
            let nodes: Vec<usize> = role_nodes
                .iter()
                .copied()
                .filter(|&i| {
                    let m = &metas[i];
                    let t = per_dyad[&m.dyad_id];
                    stage_of(m.trial_index as usize, t)
                        .map(|s| s == stage)
                        .unwrap_or(false)
                })
                .collect();
            cells.push((stage.as_str().to_string(), nodes));
        }
        let mut per_stage = BTreeMap::new();
        for (name, nodes) in cells {
            if nodes.is_empty() {
                continue;
            }
            let cell_probs: Vec<f64> = nodes.iter().map(|&i| probs[i]).collect();
            let cell_labels: Vec<u8> = nodes.iter().map(|&i| labels[i]).collect();
            per_stage.insert(name, compute_metrics(&cell_probs, &cell_labels, threshold)?);
        }
        results.insert(role.as_str().to_string(), per_stage);
    }
    Ok(results)
}

/// Run pretraining, embedding, classification and scoring for one
/// assignment of trials to train/val/test.
fn run_protocol_fold(
    fold: usize,
    test_dyad: Option<u32>,
    augmented: &[FcGraph],
    basic: &[FcGraph],
    split_of: &BTreeMap<(u32, u32), Split>,
    cfg: &PipelineConfig,
    fold_seed: u64,
) -> Result<FoldResult> {
    let lookup = |meta: &GraphMeta| -> Result<Split> {
        split_of.get(&trial_key(meta)).copied().ok_or_else(|| {
            FgclError::contract(format!(
                "run_protocol_fold: dyad {} trial {} has no split assignment",
                meta.dyad_id, meta.trial_index
            ))
        })
    };

    let mut pretrain_train: Vec<FcGraph> = Vec::new();
    let mut pretrain_val: Vec<FcGraph> = Vec::new();
    for g in augmented {
        match lookup(&g.meta)? {
            Split::Train => pretrain_train.push(g.clone()),
            Split::Val => pretrain_val.push(g.clone()),
            Split::Test => {}
        }
    }
    let mut leakage = pretrain_train
        .iter()
        .chain(&pretrain_val)
        .any(|g| Some(g.meta.dyad_id) == test_dyad);

    let mut contrastive_cfg = cfg.contrastive.clone();
    contrastive_cfg.rng_seed = fold_seed;
    let trained = train_encoder(&pretrain_train, &pretrain_val, &cfg.arch, &contrastive_cfg)?;

    let mut features = DenseMatrix::zeros(basic.len(), cfg.arch.embedding_dim);
    let mut labels = Vec::with_capacity(basic.len());
    let mut split = Vec::with_capacity(basic.len());
    for (i, g) in basic.iter().enumerate() {
        let emb = encode(g, &trained.params)?;
        features.row_mut(i).copy_from_slice(&emb.z);
        labels.push(g.y);
        split.push(lookup(&g.meta)?);
    }
    let graph = PopulationGraph::new(features, labels.clone(), split.clone())?;
    let mut dgc_cfg = cfg.dgc.clone();
    dgc_cfg.rng_seed = fold_seed ^ 0xD6C0_D6C0_D6C0_D6C0;
    let trained_dgc = train_dgc(&graph, &dgc_cfg)?;
    let probs = classify(&graph, &trained_dgc.params)?;

    for (i, g) in basic.iter().enumerate() {
        if split[i] != Split::Test && Some(g.meta.dyad_id) == test_dyad {
            leakage = true;
        }
    }

    let metas: Vec<GraphMeta> = basic.iter().map(|g| g.meta).collect();
    let results = score_test_cells(&metas, &labels, &probs, &split, cfg.threshold)?;

    let count = |s: Split| split.iter().filter(|&&x| x == s).count();
    Ok(FoldResult {
        fold,
        test_dyad,
        audit: FoldAudit {
            fold,
            test_dyad,
            pretrain_train_views: pretrain_train.len(),
            pretrain_val_views: pretrain_val.len(),
            n_train_nodes: count(Split::Train),
            n_val_nodes: count(Split::Val),
            n_test_nodes: count(Split::Test),
            leakage_detected: leakage,
        },
        results,
    })
}

/// Cross-fold mean and sample std per (role, stage, metric), over the folds
/// where the metric was defined.
pub fn aggregate_folds(folds: &[FoldResult]) -> BTreeMap<String, BTreeMap<String, AggMetrics>> {
    let mut values: BTreeMap<(String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for fold in folds {
        for (role, stages) in &fold.results {
            for (stage, m) in stages {
                values
                    .entry((role.clone(), stage.clone()))
                    .or_default()
                    .push(m);
            }
        }
    }
    let agg_of = |samples: &[f64]| -> Option<AggEntry> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n >= 2 {
            (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(AggEntry {
            mean,
            std,
            n_folds: n,
        })
    };
    let mut out: BTreeMap<String, BTreeMap<String, AggMetrics>> = BTreeMap::new();
    for ((role, stage), records) in values {
        let collect = |f: fn(&MetricsRecord) -> Option<f64>| -> Option<AggEntry> {
            let defined: Vec<f64> = records.iter().filter_map(|m| f(m)).collect();
            agg_of(&defined)
        };
        let agg = AggMetrics {
            acc: collect(|m| Some(m.acc)),
            auc: collect(|m| m.auc),
            f1: collect(|m| m.f1),
            sen: collect(|m| m.sen),
            spec: collect(|m| m.spec),
        };
        out.entry(role).or_default().insert(stage, agg);
    }
    out
}

/// Evaluate once on a fixed trial split (the 7:2:1 protocol).
pub fn evaluate_fixed_split(
    augmented: &[FcGraph],
    basic: &[FcGraph],
    split_of: &BTreeMap<(u32, u32), Split>,
    cfg: &PipelineConfig,
) -> Result<ProtocolResults> {
    cfg.validate()?;
    ensure!(!basic.is_empty(), "evaluate_fixed_split: no basic views");
    let fold = run_protocol_fold(0, None, augmented, basic, split_of, cfg, cfg.rng_seed)?;
    let folds = vec![fold];
    let aggregate = aggregate_folds(&folds);
    Ok(ProtocolResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        protocol: "split_721".to_string(),
        threshold: cfg.threshold,
        folds,
        aggregate,
    })
}

/// Hold out each dyad once: its trials are the test set, the rest split
/// into pretraining material and a dyad-stratified eighth for validation.
pub fn leave_dyad_out_cv(
    augmented: &[FcGraph],
    basic: &[FcGraph],
    cfg: &PipelineConfig,
) -> Result<ProtocolResults> {
    cfg.validate()?;
    ensure!(!basic.is_empty(), "leave_dyad_out_cv: no basic views");
    let per_dyad = trials_per_dyad(basic);
    let dyads: Vec<u32> = per_dyad.keys().copied().collect();
    ensure!(
        dyads.len() >= 2,
        "leave_dyad_out_cv: need at least 2 dyads, got {}",
        dyads.len()
    );
    let mut folds = Vec::with_capacity(dyads.len());
    for (fold, &test_dyad) in dyads.iter().enumerate() {
        let fold_seed = cfg.rng_seed ^ fold as u64;
        let mut split_of: BTreeMap<(u32, u32), Split> = BTreeMap::new();
        let mut rng = seeded_rng(fold_seed ^ 0x5641_4C43_4152_5645);
        for (&dyad, &n) in &per_dyad {
            let mut trials: Vec<u32> = basic
                .iter()
                .filter(|g| g.meta.dyad_id == dyad)
                .map(|g| g.meta.trial_index)
                .collect();
            trials.sort_unstable();
            trials.dedup();
            debug_assert_eq!(trials.len(), n);
            if dyad == test_dyad {
                for t in trials {
                    split_of.insert((dyad, t), Split::Test);
                }
                continue;
            }
            for i in (1..trials.len()).rev() {
                let j = rng.gen_range(0..=i);
                trials.swap(i, j);
            }
            let n_val = (trials.len() / 8).max(1);
            for (i, t) in trials.into_iter().enumerate() {
                let split = if i < n_val { Split::Val } else { Split::Train };
                split_of.insert((dyad, t), split);
            }
        }
        folds.push(run_protocol_fold(
            fold,
            Some(test_dyad),
            augmented,
            basic,
            &split_of,
            cfg,
            fold_seed,
        )?);
    }
    let aggregate = aggregate_folds(&folds);
    Ok(ProtocolResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        protocol: "leave_dyad_out".to_string(),
        threshold: cfg.threshold,
        folds,
        aggregate,
    })
}

/// Serialize results as deterministic pretty JSON (sorted map keys, no
/// timestamps).
pub fn write_results_json(path: &Path, results: &ProtocolResults) -> Result<()> {
    let text = serde_json::to_string_pretty(results)
        .map_err(|e| FgclError::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| FgclError::io(path.display().to_string(), e))
}

/// Summary CSV: one row per (role, stage) in fixed stage order, aggregated
/// mean and standard deviation per metric (empty cells for undefined
/// metrics).
pub fn write_summary_csv(path: &Path, results: &ProtocolResults) -> Result<()> {
    let mut out = String::from(
        "role,stage,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std,\
         sen_mean,sen_std,spec_mean,spec_std,n_folds\n",
    );
    for (role, stages) in &results.aggregate {
        for stage in ["entire", "early", "middle", "late"] {
            let Some(agg) = stages.get(stage) else {
                continue;
            };
            let cell = |e: Option<AggEntry>| match e {
                Some(e) => format!("{},{}", e.mean, e.std),
                None => ",".to_string(),
            };
            let n_folds = agg.acc.map_or(0, |e| e.n_folds);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                role,
                stage,
                cell(agg.acc),
                cell(agg.auc),
                cell(agg.f1),
                cell(agg.sen),
                cell(agg.spec),
                n_folds
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| FgclError::io(path.display().to_string(), e))
}
