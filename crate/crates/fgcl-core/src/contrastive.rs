//! Positive/negative pair construction over augmented dyadic views and the
//! InfoNCE-style contrastive objective used to pretrain the graph encoder.
//!
//! Views of the same trial recorded from the two members of a dyad are
//! positives; views of other trials in the minibatch are negatives. The
//! anchor loss is
//!
//! ```text
//! −log( exp(sim(z_iA, z_iB)/τ)
//!       / [ Σ_{j≠i} exp(sim(z_iA, z_jA)/τ) + Σ_j exp(sim(z_iA, z_jB)/τ) ] )
//! ```
//!
//! evaluated with max-subtraction, and the batch loss accumulates it over
//! both members' anchors. Two pairing regimes exist: [`PairMode::TwoView`]
//! samples one view per member per trial (the loss above verbatim), while
//! [`PairMode::MultiView`] treats all views of a trial group as mutual
//! positives (a trial with 2K views contributes 2K(2K−1)/2 positive pairs)
//! and averages the anchor loss over its positives.

use crate::connectivity::FcGraph;
use crate::encoder::{
    bind_encoder, encode_on_tape, EncoderArch, GraphEncoderParams, TapeEncoderBinds,
};
use crate::error::{ensure, FgclError, Result};
use crate::numcore::optim::{adam_step, multistep_lr, AdamState};
use crate::numcore::param::{seeded_rng, ParamSet};
use crate::numcore::tape::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// How positive pairs are drawn from a trial group's augmented views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// One view per dyad member per trial; the cross-member pair is the
    /// only positive.
    TwoView,
    /// All views of a trial group are mutual positives.
    MultiView,
}

/// Hyperparameters of the contrastive pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Softmax temperature τ.
    pub tau: f64,
    /// Views per minibatch (trial groups are packed until this is reached).
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub early_stop_patience: usize,
    pub pair_mode: PairMode,
    pub rng_seed: u64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<u32>,
    pub lr_gamma: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.5,
            batch_size: 68,
            lr: 0.001,
            weight_decay: 0.02,
            max_epochs: 700,
            early_stop_patience: 50,
            pair_mode: PairMode::TwoView,
            rng_seed: 0,
            lr_milestones: vec![200, 400, 600],
            lr_gamma: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, "ContrastiveConfig: tau must be positive");
        ensure!(self.batch_size >= 2, "ContrastiveConfig: batch_size < 2");
        ensure!(self.lr > 0.0, "ContrastiveConfig: lr must be positive");
        ensure!(
            self.weight_decay >= 0.0,
            "ContrastiveConfig: negative weight_decay"
        );
        ensure!(
            self.max_epochs >= 1,
            "ContrastiveConfig: max_epochs must be at least 1"
        );
        ensure!(
            self.lr_gamma > 0.0 && self.lr_gamma <= 1.0,
            "ContrastiveConfig: lr_gamma outside (0, 1]"
        );
        Ok(())
    }
}

/// Cosine similarity, clamped to [−1, 1]. A zero-norm operand makes the
/// similarity 0 by definition (flagged in the log).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len() && !a.is_empty(),
        "cosine_sim: lengths {} and {} incompatible",
        a.len(),
        b.len()
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine_sim: zero-norm embedding, similarity defined as 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Log-sum-exp with max subtraction; `terms` must be non-empty.
fn logsumexp_slice(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Contrastive loss for anchor `i` of `side_a` against the paired batch.
/// Swap the argument order to evaluate the B-anchored terms.
pub fn anchor_loss(side_a: &[Vec<f64>], side_b: &[Vec<f64>], i: usize, tau: f64) -> Result<f64> {
    let n = side_a.len();
    ensure!(n >= 1, "anchor_loss: empty batch");
    ensure!(
        side_b.len() == n,
        "anchor_loss: sides have {} and {} embeddings",
        n,
        side_b.len()
    );
    ensure!(i < n, "anchor_loss: index {i} out of range for {n} pairs");
    ensure!(tau > 0.0, "anchor_loss: tau must be positive");
    let anchor = &side_a[i];
    let s_pos = cosine_sim(anchor, &side_b[i])? / tau;
    let mut terms = Vec::with_capacity(2 * n - 1);
    for (j, z) in side_a.iter().enumerate() {
        if j != i {
            terms.push(cosine_sim(anchor, z)? / tau);
        }
    }
    for z in side_b {
        terms.push(cosine_sim(anchor, z)? / tau);
    }
    Ok(logsumexp_slice(&terms) - s_pos)
}

/// Accumulated minibatch loss: anchor terms over side A plus the
/// symmetric terms over side B.
pub fn batch_loss(side_a: &[Vec<f64>], side_b: &[Vec<f64>], tau: f64) -> Result<f64> {
    ensure!(
        side_a.len() == side_b.len(),
        "batch_loss: sides have {} and {} embeddings",
        side_a.len(),
        side_b.len()
    );
    let mut total = 0.0;
    for i in 0..side_a.len() {
        total += anchor_loss(side_a, side_b, i, tau)?;
        total += anchor_loss(side_b, side_a, i, tau)?;
    }
    Ok(total)
}

/// All views of one (dyad, trial) group, split by member. Indices point
/// into the caller's view list.
#[derive(Debug, Clone, Default)]
pub struct ViewGroup {
    pub dyad_id: u32,
    pub trial_index: u32,
    pub member_a: Vec<usize>,
    pub member_b: Vec<usize>,
}

impl ViewGroup {
    pub fn total_views(&self) -> usize {
        self.member_a.len() + self.member_b.len()
    }
}

/// One anchor with its positive and negative partners. All values index
/// into [`PairBatch::view_ids`] slots.
#[derive(Debug, Clone)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// The enumerated pair structure of one minibatch.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// Original view indices, one per embedding slot. Only these views need
    /// to be encoded for this batch.
    pub view_ids: Vec<usize>,
    pub anchors: Vec<AnchorPairs>,
    pub tau: f64,
    /// Trial groups that contributed pairs.
    pub n_groups: usize,
    /// Unordered positive pairs across the batch.
    pub positive_pair_count: usize,
}

/// How `build_pairs` picks views in two-view mode.
pub enum ViewSelection<'a> {
    /// Always the first view of each member (deterministic; used for
    /// validation).
    First,
    /// Seeded uniform choice per member per call (used for training).
    Sampled(&'a mut ChaCha8Rng),
}

/// Enumerate anchors, positives and negatives for one batch of trial
/// groups. Groups that cannot form a positive pair are skipped with a
/// warning; an entirely unusable batch is an error.
pub fn build_pairs(
    groups: &[ViewGroup],
    mode: PairMode,
    tau: f64,
    mut selection: ViewSelection,
) -> Result<PairBatch> {
    ensure!(tau > 0.0, "build_pairs: tau must be positive");
    let mut view_ids: Vec<usize> = Vec::new();
    let mut group_slots: Vec<Vec<usize>> = Vec::new();
    for g in groups {
        match mode {
            PairMode::TwoView => {
                if g.member_a.is_empty() || g.member_b.is_empty() {
                    log::warn!(
                        "build_pairs: dyad {} trial {} lacks views for one member, skipped",
                        g.dyad_id,
                        g.trial_index
                    );
                    continue;
                }
                let (ia, ib) = match &mut selection {
                    ViewSelection::First => (g.member_a[0], g.member_b[0]),
                    ViewSelection::Sampled(rng) => (
                        g.member_a[rng.gen_range(0..g.member_a.len())],
                        g.member_b[rng.gen_range(0..g.member_b.len())],
                    ),
                };
                let slot_a = view_ids.len();
                view_ids.push(ia);
                view_ids.push(ib);
                group_slots.push(vec![slot_a, slot_a + 1]);
            }
            PairMode::MultiView => {
                if g.total_views() < 2 {
                    log::warn!(
                        "build_pairs: dyad {} trial {} has fewer than 2 views, skipped",
                        g.dyad_id,
                        g.trial_index
                    );
                    continue;
                }
                let start = view_ids.len();
                view_ids.extend(g.member_a.iter().copied());
                view_ids.extend(g.member_b.iter().copied());
                group_slots.push((start..view_ids.len()).collect());
            }
        }
    }
    if group_slots.is_empty() {
        return Err(FgclError::empty_input(
            "build_pairs: no trial group can form a positive pair",
        ));
    }
    let n_slots = view_ids.len();
    let mut slot_group = vec![0usize; n_slots];
    for (gi, slots) in group_slots.iter().enumerate() {
        for &s in slots {
            slot_group[s] = gi;
        }
    }
    let mut anchors = Vec::with_capacity(n_slots);
    for s in 0..n_slots {
        let gi = slot_group[s];
        let positives: Vec<usize> = group_slots[gi].iter().copied().filter(|&p| p != s).collect();
        let negatives: Vec<usize> = (0..n_slots)
            .filter(|&o| slot_group[o] != gi)
            .collect();
        anchors.push(AnchorPairs {
            anchor: s,
            positives,
            negatives,
        });
    }
    let positive_pair_count = group_slots
        .iter()
        .map(|slots| slots.len() * (slots.len() - 1) / 2)
        .sum();
    Ok(PairBatch {
        view_ids,
        anchors,
        tau,
        n_groups: group_slots.len(),
        positive_pair_count,
    })
}

/// Evaluate the batch objective on plain embeddings (slot-aligned with
/// `batch.view_ids`). Each anchor contributes the mean over its positives
/// of the stabilized InfoNCE term; anchors sum.
pub fn pair_batch_loss(embeddings: &[Vec<f64>], batch: &PairBatch) -> Result<f64> {
    ensure!(
        embeddings.len() == batch.view_ids.len(),
        "pair_batch_loss: {} embeddings for {} slots",
        embeddings.len(),
        batch.view_ids.len()
    );
    let mut total = 0.0;
    for a in &batch.anchors {
        if a.positives.is_empty() {
            continue;
        }
        let anchor = &embeddings[a.anchor];
        let neg_terms: Vec<f64> = a
            .negatives
            .iter()
            .map(|&n| Ok(cosine_sim(anchor, &embeddings[n])? / batch.tau))
            .collect::<Result<_>>()?;
        let mut anchor_total = 0.0;
        for &p in &a.positives {
            let s_pos = cosine_sim(anchor, &embeddings[p])? / batch.tau;
            let mut terms = Vec::with_capacity(1 + neg_terms.len());
            terms.push(s_pos);
            terms.extend_from_slice(&neg_terms);
            anchor_total += logsumexp_slice(&terms) - s_pos;
        }
        total += anchor_total / a.positives.len() as f64;
    }
    Ok(total)
}

/// Record the batch objective on the tape. `emb_nodes` are 1×d embedding
/// nodes, slot-aligned with `batch.view_ids`. Returns a 1×1 loss node.
pub fn pair_batch_loss_on_tape(
    tape: &mut Tape,
    emb_nodes: &[NodeId],
    batch: &PairBatch,
) -> Result<NodeId> {
    ensure!(
        emb_nodes.len() == batch.view_ids.len(),
        "pair_batch_loss_on_tape: {} embeddings for {} slots",
        emb_nodes.len(),
        batch.view_ids.len()
    );
    ensure!(!emb_nodes.is_empty(), "pair_batch_loss_on_tape: empty batch");
    let d = tape.value(emb_nodes[0]).cols();
    let e = tape.stack_rows(emb_nodes);
    let sq = tape.hadamard(e, e);
    let ones = tape.constant(crate::numcore::matrix::DenseMatrix::from_vec(
        d,
        1,
        vec![1.0; d],
    )?);
    let norm_sq = tape.matmul(sq, ones);
    // The additive guard only matters for an exactly-zero embedding; for any
    // norm above ~1e-4 it is below one ulp.
    let guarded = tape.add_const(norm_sq, 1e-24);
    let ln = tape.ln(guarded);
    let half_neg = tape.scale(ln, -0.5);
    let inv_norm = tape.exp(half_neg);
    let e_hat = tape.row_scale(e, inv_norm);
    let e_hat_t = tape.transpose(e_hat);
    let sims = tape.matmul(e_hat, e_hat_t);
    let scaled = tape.scale(sims, 1.0 / batch.tau);
    let mut entry_cache: HashMap<(usize, usize), NodeId> = HashMap::new();
    let mut entry = |tape: &mut Tape, r: usize, c: usize| {
        *entry_cache.entry((r, c)).or_insert_with(|| tape.get(scaled, r, c))
    };
    let mut anchor_terms: Vec<NodeId> = Vec::new();
    for a in &batch.anchors {
        if a.positives.is_empty() {
            continue;
        }
        let neg_ids: Vec<NodeId> = a
            .negatives
            .iter()
            .map(|&n| entry(tape, a.anchor, n))
            .collect();
        let mut per_positive: Vec<NodeId> = Vec::with_capacity(a.positives.len());
        for &p in &a.positives {
            let s_pos = entry(tape, a.anchor, p);
            let mut ids = Vec::with_capacity(1 + neg_ids.len());
            ids.push(s_pos);
            ids.extend_from_slice(&neg_ids);
            let lse = tape.logsumexp(&ids);
            per_positive.push(tape.sub(lse, s_pos));
        }
        let summed = if per_positive.len() == 1 {
            per_positive[0]
        } else {
            tape.add_n(&per_positive)
        };
        anchor_terms.push(tape.scale(summed, 1.0 / a.positives.len() as f64));
    }
    ensure!(
        !anchor_terms.is_empty(),
        "pair_batch_loss_on_tape: no anchor has a positive"
    );
    Ok(if anchor_terms.len() == 1 {
        anchor_terms[0]
    } else {
        tape.add_n(&anchor_terms)
    })
}

/// Group views by (dyad, trial); within a group the lower subject id is
/// member A. Views keep their slice indices and are ordered by view index.
pub fn group_views(graphs: &[FcGraph]) -> Result<Vec<ViewGroup>> {
    let mut by_key: BTreeMap<(u32, u32), BTreeMap<u32, Vec<(u32, usize)>>> = BTreeMap::new();
    for (idx, g) in graphs.iter().enumerate() {
        by_key
            .entry((g.meta.dyad_id, g.meta.trial_index))
            .or_default()
            .entry(g.meta.subject_id)
            .or_default()
            .push((g.meta.view_index, idx));
    }
    let mut groups = Vec::with_capacity(by_key.len());
    for ((dyad_id, trial_index), members) in by_key {
        ensure!(
            members.len() <= 2,
            "group_views: dyad {dyad_id} trial {trial_index} has {} subjects",
            members.len()
        );
        let mut iter = members.into_values();
        let take = |m: Option<Vec<(u32, usize)>>| {
            let mut v = m.unwrap_or_default();
            v.sort_unstable();
            v.into_iter().map(|(_, idx)| idx).collect::<Vec<_>>()
        };
        let member_a = take(iter.next());
        let member_b = take(iter.next());
        groups.push(ViewGroup {
            dyad_id,
            trial_index,
            member_a,
            member_b,
        });
    }
    Ok(groups)
}

/// One epoch's summary in the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-anchor training loss over the epoch.
    pub train_loss: f64,
    /// Mean per-anchor validation loss.
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    /// Parameters restored from the best validation epoch.
    pub params: GraphEncoderParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn encode_batch_on_tape(
    tape: &mut Tape,
    views: &[&FcGraph],
    batch: &PairBatch,
    arch: &EncoderArch,
    binds: &TapeEncoderBinds,
) -> Result<Vec<NodeId>> {
    batch
        .view_ids
        .iter()
        .map(|&v| encode_on_tape(tape, views[v], arch, binds))
        .collect()
}

fn encode_batch_plain(
    views: &[&FcGraph],
    batch: &PairBatch,
    params: &GraphEncoderParams,
) -> Result<Vec<Vec<f64>>> {
    batch
        .view_ids
        .iter()
        .map(|&v| Ok(crate::encoder::encode(views[v], params)?.z))
        .collect()
}

/// Pack trial groups into batches of roughly `batch_size` views. A trailing
/// single-group remainder is merged into the previous batch so every batch
/// can form negatives.
fn pack_batches(order: &[usize], groups: &[ViewGroup], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_views = 0usize;
    for &gi in order {
        current.push(gi);
        current_views += groups[gi].total_views().max(2);
        if current_views >= batch_size {
            batches.push(std::mem::take(&mut current));
            current_views = 0;
        }
    }
    if !current.is_empty() {
        if current.len() == 1 && !batches.is_empty() {
            batches.last_mut().unwrap().extend(current);
        } else {
            batches.push(current);
        }
    }
    batches
}

/// Validation-loss improvements below this relative threshold are treated
/// as round-off noise, not progress; without the floor, parameter drift at
/// the last digit can reset the early-stop counter forever.
const EARLY_STOP_MIN_DELTA: f64 = 1e-10;

/// Pretrain the encoder on the training views, early-stopping on the
/// validation views, and return the best-validation parameters with the
/// per-epoch history. Deterministic given `cfg.rng_seed`.
pub fn train_encoder(
    train: &[FcGraph],
    val: &[FcGraph],
    arch: &EncoderArch,
    cfg: &ContrastiveConfig,
) -> Result<TrainedEncoder> {
    cfg.validate()?;
    arch.validate()?;
    ensure!(!train.is_empty(), "train_encoder: empty training set");
    ensure!(!val.is_empty(), "train_encoder: empty validation set");
    let train_refs: Vec<&FcGraph> = train.iter().collect();
    let val_refs: Vec<&FcGraph> = val.iter().collect();
    let train_groups = group_views(train)?;
    let val_groups = group_views(val)?;
    let val_batch = build_pairs(&val_groups, cfg.pair_mode, cfg.tau, ViewSelection::First)?;
    let val_anchor_count = val_batch
        .anchors
        .iter()
        .filter(|a| !a.positives.is_empty())
        .count()
        .max(1);

    let mut params = GraphEncoderParams::init(arch, cfg.rng_seed)?;
    let (mut set, ids) = params.to_param_set();
    let mut adam = AdamState::new(&set);
    let mut rng = seeded_rng(cfg.rng_seed ^ 0x5EED_5EED_5EED_5EED);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_values: Option<ParamSet> = None;
    let mut since_improve = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = multistep_lr(cfg.lr, &cfg.lr_milestones, cfg.lr_gamma, epoch as u32)?;
        let mut order: Vec<usize> = (0..train_groups.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let batches = pack_batches(&order, &train_groups, cfg.batch_size);
        let mut epoch_loss = 0.0;
        let mut epoch_anchors = 0usize;
        for (bi, batch_groups) in batches.iter().enumerate() {
            let groups: Vec<ViewGroup> = batch_groups
                .iter()
                .map(|&gi| train_groups[gi].clone())
                .collect();
            let batch = build_pairs(
                &groups,
                cfg.pair_mode,
                cfg.tau,
                ViewSelection::Sampled(&mut rng),
            )?;
            let mut tape = Tape::new();
            let binds = bind_encoder(&mut tape, &set, &ids);
            let emb = encode_batch_on_tape(&mut tape, &train_refs, &batch, arch, &binds)?;
            let loss = pair_batch_loss_on_tape(&mut tape, &emb, &batch)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(FgclError::numeric(
                    "contrastive",
                    format!("non-finite loss {loss_val} at epoch {epoch} batch {bi}"),
                ));
            }
            set.zero_gradients();
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut set)?;
            adam_step(&mut set, &mut adam, lr, cfg.weight_decay)?;
            epoch_loss += loss_val;
            epoch_anchors += batch
                .anchors
                .iter()
                .filter(|a| !a.positives.is_empty())
                .count();
        }
        let train_loss = epoch_loss / epoch_anchors.max(1) as f64;

        params.assign_from(&set, &ids)?;
        let val_emb = encode_batch_plain(&val_refs, &val_batch, &params)?;
        let val_loss = pair_batch_loss(&val_emb, &val_batch)? / val_anchor_count as f64;
        if !val_loss.is_finite() {
            return Err(FgclError::numeric(
                "contrastive",
                format!("non-finite validation loss at epoch {epoch}"),
            ));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let improved = best_val_loss.is_infinite()
            || val_loss < best_val_loss - EARLY_STOP_MIN_DELTA * best_val_loss.abs().max(1.0);
        if improved {
            best_val_loss = val_loss;
            best_epoch = epoch;
            since_improve = 0;
            let mut snapshot = ParamSet::new();
            for p in set.iter() {
                snapshot.add(p.name.clone(), p.value.clone());
            }
            best_values = Some(snapshot);
        } else {
            since_improve += 1;
            if since_improve > cfg.early_stop_patience {
                stopped_early = true;
                log::info!(
                    "train_encoder: stopping at epoch {epoch}, best validation loss \
                     {best_val_loss:.6} at epoch {best_epoch}"
                );
                break;
            }
        }
    }
    if let Some(best) = best_values {
        set.copy_values_from(&best)?;
    }
    params.assign_from(&set, &ids)?;
    Ok(TrainedEncoder {
        params,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

/// Write the per-epoch loss history as CSV.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| FgclError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::{build_graph, GraphMeta, Role};
    use crate::numcore::gradcheck::gradcheck;
    use crate::numcore::matrix::DenseMatrix;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_embedding(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn cosine_examples() {
        let z = vec![0.3, -1.2, 0.5];
        assert!((cosine_sim(&z, &z).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((cosine_sim(&z, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_pair_anchor_loss_is_exactly_zero() {
        let a = vec![vec![0.4, -0.7, 1.1]];
        let b = vec![vec![-0.2, 0.9, 0.3]];
        assert_eq!(anchor_loss(&a, &b, 0, 0.5).unwrap(), 0.0);
        assert_eq!(batch_loss(&a, &b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn two_pair_orthogonal_case_matches_hand_evaluation() {
        // Pairs (1,0)/(1,0) and (0,1)/(0,1), τ=0.5: the anchor sees the
        // positive at similarity 1 and two negatives at 0, so the loss is
        // ln(e² + 2) − 2 for every one of the four anchors.
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = a.clone();
        let expected = (2.0_f64.exp() + 2.0).ln() - 2.0;
        let got = anchor_loss(&a, &b, 0, 0.5).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
        let total = batch_loss(&a, &b, 0.5).unwrap();
        assert!((total - 4.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn anchor_loss_is_nonnegative_and_positive_with_negatives() {
        let mut rng = seeded_rng(50);
        for _ in 0..20 {
            let n = rng.gen_range(2..6usize);
            let a: Vec<Vec<f64>> = (0..n).map(|_| rand_embedding(&mut rng, 5)).collect();
            let b: Vec<Vec<f64>> = (0..n).map(|_| rand_embedding(&mut rng, 5)).collect();
            for i in 0..n {
                let l = anchor_loss(&a, &b, i, 0.5).unwrap();
                assert!(l > 0.0, "loss {l} should be positive with negatives present");
            }
        }
    }

    #[test]
    fn anchor_loss_is_scale_invariant() {
        let mut rng = seeded_rng(51);
        let a: Vec<Vec<f64>> = (0..4).map(|_| rand_embedding(&mut rng, 6)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| rand_embedding(&mut rng, 6)).collect();
        let base = anchor_loss(&a, &b, 2, 0.5).unwrap();
        let scale = |s: f64, v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            v.iter()
                .map(|z| z.iter().map(|x| x * s).collect())
                .collect()
        };
        for s in [0.001, 0.5, 3.7, 1000.0] {
            let l = anchor_loss(&scale(s, &a), &scale(s, &b), 2, 0.5).unwrap();
            assert!((l - base).abs() < 1e-9, "scale {s}: {l} vs {base}");
        }
    }

    #[test]
    fn raising_positive_similarity_lowers_the_loss() {
        // Anchor 0's loss depends on sim(a0,b0) (positive), sim(a0,a1) and
        // sim(a0,b1). Rotating b0 toward a0 changes only the positive term.
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mk_b = |angle: f64| vec![vec![angle.cos(), angle.sin()], vec![-1.0, 1.0]];
        let far = anchor_loss(&a, &mk_b(1.2), 0, 0.5).unwrap();
        let near = anchor_loss(&a, &mk_b(0.3), 0, 0.5).unwrap();
        assert!(near < far, "loss should drop: near {near}, far {far}");
    }

    #[test]
    fn extreme_similarities_with_small_tau_stay_finite() {
        let a = vec![vec![1.0, 1e-8], vec![-1.0, 1e-8]];
        let b = vec![vec![1.0, -1e-8], vec![-1.0, -1e-8]];
        for i in 0..2 {
            let l = anchor_loss(&a, &b, i, 0.05).unwrap();
            assert!(l.is_finite(), "anchor {i}: {l}");
        }
        assert!(batch_loss(&a, &b, 0.05).unwrap().is_finite());
    }

    fn group(dyad: u32, trial: u32, a: Vec<usize>, b: Vec<usize>) -> ViewGroup {
        ViewGroup {
            dyad_id: dyad,
            trial_index: trial,
            member_a: a,
            member_b: b,
        }
    }

    #[test]
    fn two_view_pairs_have_one_positive_each() {
        let groups = vec![
            group(0, 0, vec![0, 1], vec![2, 3]),
            group(0, 1, vec![4], vec![5]),
            group(1, 0, vec![6], vec![7]),
        ];
        let batch = build_pairs(&groups, PairMode::TwoView, 0.5, ViewSelection::First).unwrap();
        assert_eq!(batch.view_ids, vec![0, 2, 4, 5, 6, 7]);
        assert_eq!(batch.n_groups, 3);
        assert_eq!(batch.positive_pair_count, 3);
        assert_eq!(batch.anchors.len(), 6);
        for a in &batch.anchors {
            assert_eq!(a.positives.len(), 1);
            assert_eq!(a.negatives.len(), 4);
            assert!(!a.positives.contains(&a.anchor));
            assert!(!a.negatives.contains(&a.anchor));
            assert!(!a.negatives.contains(&a.positives[0]));
        }
    }

    #[test]
    fn two_view_sampling_stays_within_members() {
        let groups = vec![
            group(0, 0, vec![10, 11, 12], vec![20, 21]),
            group(0, 1, vec![30], vec![40]),
        ];
        let mut rng = seeded_rng(52);
        for _ in 0..20 {
            let batch = build_pairs(
                &groups,
                PairMode::TwoView,
                0.5,
                ViewSelection::Sampled(&mut rng),
            )
            .unwrap();
            assert!([10, 11, 12].contains(&batch.view_ids[0]));
            assert!([20, 21].contains(&batch.view_ids[1]));
            assert_eq!(&batch.view_ids[2..], &[30, 40]);
        }
    }

    #[test]
    fn multiview_counts_match_the_pair_formula() {
        // K views per member -> 2K(2K-1)/2 positive pairs per group.
        for k in [1usize, 2, 10] {
            let groups = vec![group(0, 0, (0..k).collect(), (k..2 * k).collect())];
            let batch =
                build_pairs(&groups, PairMode::MultiView, 0.5, ViewSelection::First).unwrap();
            let expected = 2 * k * (2 * k - 1) / 2;
            assert_eq!(batch.positive_pair_count, expected, "K={k}");
        }
    }

    #[test]
    fn multiview_two_groups_k2_anchor_structure() {
        let groups = vec![
            group(0, 0, vec![0, 1], vec![2, 3]),
            group(0, 1, vec![4, 5], vec![6, 7]),
        ];
        let batch = build_pairs(&groups, PairMode::MultiView, 0.5, ViewSelection::First).unwrap();
        assert_eq!(batch.anchors.len(), 8);
        for a in &batch.anchors {
            assert_eq!(a.positives.len(), 3);
            assert_eq!(a.negatives.len(), 4);
            let overlap = a.positives.iter().any(|p| a.negatives.contains(p));
            assert!(!overlap);
        }
        assert_eq!(batch.positive_pair_count, 12);
    }

    #[test]
    fn unusable_groups_are_skipped_and_empty_batches_rejected() {
        let groups = vec![
            group(0, 0, vec![0], vec![]),
            group(0, 1, vec![1], vec![2]),
        ];
        let batch = build_pairs(&groups, PairMode::TwoView, 0.5, ViewSelection::First).unwrap();
        assert_eq!(batch.n_groups, 1);
        assert_eq!(batch.view_ids, vec![1, 2]);

        let empty = vec![group(0, 0, vec![0], vec![])];
        assert!(matches!(
            build_pairs(&empty, PairMode::TwoView, 0.5, ViewSelection::First),
            Err(FgclError::EmptyInput(_))
        ));

        let single = vec![group(0, 0, vec![0], vec![])];
        assert!(build_pairs(&single, PairMode::MultiView, 0.5, ViewSelection::First).is_err());
    }

    #[test]
    fn pair_batch_loss_reproduces_the_anchor_formula() {
        let mut rng = seeded_rng(53);
        let n = 4usize;
        let a: Vec<Vec<f64>> = (0..n).map(|_| rand_embedding(&mut rng, 5)).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| rand_embedding(&mut rng, 5)).collect();
        let direct = batch_loss(&a, &b, 0.5).unwrap();

        // Slot layout: group i contributes slots (2i, 2i+1) = (A_i, B_i).
        let groups: Vec<ViewGroup> = (0..n)
            .map(|i| group(0, i as u32, vec![2 * i], vec![2 * i + 1]))
            .collect();
        let batch = build_pairs(&groups, PairMode::TwoView, 0.5, ViewSelection::First).unwrap();
        let mut embeddings = Vec::new();
        for i in 0..n {
            embeddings.push(a[i].clone());
            embeddings.push(b[i].clone());
        }
        let via_pairs = pair_batch_loss(&embeddings, &batch).unwrap();
        assert!(
            (via_pairs - direct).abs() < 1e-12,
            "pair path {via_pairs} vs direct {direct}"
        );
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let mut rng = seeded_rng(54);
        let groups = vec![
            group(0, 0, vec![0, 1], vec![2, 3]),
            group(0, 1, vec![4, 5], vec![6, 7]),
        ];
        for mode in [PairMode::TwoView, PairMode::MultiView] {
            let batch = build_pairs(&groups, mode, 0.5, ViewSelection::First).unwrap();
            let embeddings: Vec<Vec<f64>> = (0..batch.view_ids.len())
                .map(|_| rand_embedding(&mut rng, 6))
                .collect();
            let plain = pair_batch_loss(&embeddings, &batch).unwrap();
            let mut tape = Tape::new();
            let nodes: Vec<NodeId> = embeddings
                .iter()
                .map(|z| tape.constant(DenseMatrix::row_vector(z.clone())))
                .collect();
            let loss = pair_batch_loss_on_tape(&mut tape, &nodes, &batch).unwrap();
            let got = tape.scalar(loss);
            assert!((got - plain).abs() < 1e-9, "{mode:?}: {got} vs {plain}");
        }
    }

    #[test]
    fn tape_loss_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(55);
        let groups = vec![
            group(0, 0, vec![0], vec![1]),
            group(0, 1, vec![2], vec![3]),
        ];
        let batch = build_pairs(&groups, PairMode::TwoView, 0.5, ViewSelection::First).unwrap();
        let mut set = ParamSet::new();
        let ids: Vec<_> = (0..4)
            .map(|i| {
                set.add(
                    format!("z{i}"),
                    DenseMatrix::row_vector(rand_embedding(&mut rng, 4)),
                )
            })
            .collect();
        let report = gradcheck(
            &mut set,
            |p, want| {
                let mut tape = Tape::new();
                let nodes: Vec<NodeId> = ids.iter().map(|&id| tape.param(p, id)).collect();
                let loss = pair_batch_loss_on_tape(&mut tape, &nodes, &batch)?;
                if want {
                    tape.backward(loss)?;
                    tape.accumulate_param_grads(p)?;
                }
                Ok(tape.scalar(loss))
            },
            1e-6,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-7,
            "max relative error {:.3e} on {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    fn tiny_graph(seed: u64, n: usize, meta: GraphMeta) -> FcGraph {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..n * 3 * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let window = DenseMatrix::from_vec(n, 3 * n, data).unwrap();
        build_graph(&window, 0, meta, 1e-3).unwrap().graph
    }

    fn meta(dyad: u32, subject: u32, trial: u32, view: u32) -> GraphMeta {
        GraphMeta {
            dyad_id: dyad,
            subject_id: subject,
            role: Role::Pst,
            trial_index: trial,
            view_index: view,
        }
    }

    fn tiny_arch(n: usize) -> EncoderArch {
        EncoderArch {
            in_dim: n,
            cheb_k: 2,
            pool_ratio: 0.5,
            hidden1: 4,
            hidden2: 4,
            mlp_hidden: 6,
            embedding_dim: 3,
        }
    }

    #[test]
    fn group_views_splits_members_and_orders_views() {
        let n = 6;
        let graphs = vec![
            tiny_graph(1, n, meta(0, 1, 0, 1)),
            tiny_graph(2, n, meta(0, 0, 0, 0)),
            tiny_graph(3, n, meta(0, 1, 0, 0)),
            tiny_graph(4, n, meta(1, 2, 0, 0)),
            tiny_graph(5, n, meta(1, 3, 0, 0)),
        ];
        let groups = group_views(&graphs).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].dyad_id, 0);
        assert_eq!(groups[0].member_a, vec![1]);
        assert_eq!(groups[0].member_b, vec![2, 0]);
        assert_eq!(groups[1].member_a, vec![3]);
        assert_eq!(groups[1].member_b, vec![4]);
    }

    fn identical_graph_dataset(n_groups: usize, n: usize) -> Vec<FcGraph> {
        let template = tiny_graph(99, n, meta(0, 0, 0, 0));
        let mut out = Vec::new();
        for t in 0..n_groups {
            for subject in 0..2 {
                let mut g = template.clone();
                g.meta = meta(0, subject, t as u32, 0);
                out.push(g);
            }
        }
        out
    }

    #[test]
    fn identical_graphs_hold_the_analytic_loss_constant() {
        // Every embedding equal: each anchor sees 2N−1 denominator terms all
        // at similarity 1, so the per-anchor loss is ln(2N−1) and the cosine
        // gradient vanishes, leaving the value fixed across epochs.
        let n_groups = 4;
        let train = identical_graph_dataset(n_groups, 6);
        let val = identical_graph_dataset(2, 6);
        let cfg = ContrastiveConfig {
            batch_size: 2 * n_groups,
            max_epochs: 3,
            early_stop_patience: 10,
            rng_seed: 7,
            ..ContrastiveConfig::default()
        };
        let out = train_encoder(&train, &val, &tiny_arch(6), &cfg).unwrap();
        let expected_train = ((2 * n_groups - 1) as f64).ln();
        let expected_val = ((2 * 2 - 1) as f64).ln();
        assert_eq!(out.history.len(), 3);
        for h in &out.history {
            assert!(
                (h.train_loss - expected_train).abs() < 1e-9,
                "epoch {}: train {} vs {}",
                h.epoch,
                h.train_loss,
                expected_train
            );
            assert!((h.val_loss - expected_val).abs() < 1e-9);
        }
    }

    fn paired_random_dataset(n_groups: usize, n: usize, base_seed: u64) -> Vec<FcGraph> {
        let mut out = Vec::new();
        for t in 0..n_groups {
            let g = tiny_graph(base_seed + t as u64, n, meta(0, 0, t as u32, 0));
            let mut twin = g.clone();
            twin.meta = meta(0, 1, t as u32, 0);
            out.push(g);
            out.push(twin);
        }
        out
    }

    #[test]
    fn training_reduces_the_loss_on_structured_data() {
        let train = paired_random_dataset(6, 6, 300);
        let val = paired_random_dataset(3, 6, 400);
        let cfg = ContrastiveConfig {
            batch_size: 12,
            lr: 0.01,
            weight_decay: 0.0,
            max_epochs: 25,
            early_stop_patience: 25,
            rng_seed: 11,
            lr_milestones: vec![],
            ..ContrastiveConfig::default()
        };
        let out = train_encoder(&train, &val, &tiny_arch(6), &cfg).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "training did not reduce the loss: {first} -> {last}"
        );
    }

    #[test]
    fn zero_patience_stops_at_the_first_plateau() {
        let train = identical_graph_dataset(3, 6);
        let val = identical_graph_dataset(2, 6);
        let cfg = ContrastiveConfig {
            batch_size: 6,
            max_epochs: 50,
            early_stop_patience: 0,
            rng_seed: 3,
            ..ContrastiveConfig::default()
        };
        let out = train_encoder(&train, &val, &tiny_arch(6), &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let train = paired_random_dataset(4, 6, 500);
        let val = paired_random_dataset(2, 6, 600);
        let cfg = ContrastiveConfig {
            batch_size: 8,
            max_epochs: 4,
            rng_seed: 21,
            ..ContrastiveConfig::default()
        };
        let a = train_encoder(&train, &val, &tiny_arch(6), &cfg).unwrap();
        let b = train_encoder(&train, &val, &tiny_arch(6), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for ((n1, m1), (n2, m2)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2, "parameter {n1} differs between identical runs");
        }
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let history = vec![
            EpochStats {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 1.25,
                lr: 0.001,
            },
            EpochStats {
                epoch: 1,
                train_loss: 1.0,
                val_loss: 0.875,
                lr: 0.001,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
        assert_eq!(lines[1], "0,1.5,1.25,0.001");
    }
}
