//! The pipeline commands.
//!
//! Each command reads the artifacts of its upstream stage from the shared
//! artifact root, writes its own subdirectory, and drops a `run_config.toml`
//! echo beside its outputs so every directory is reproducible on its own.
//! Outputs carry no timestamps: rerunning a command with the same config and
//! seed rewrites byte-identical files.

use crate::config::{Protocol, RunConfig};
use anyhow::{bail, Context, Result};
use fgcl_core::connectivity::{
    build_graph, read_graph_json, sliding_windows, write_graph_json, FcGraph, GraphMeta, Role,
};
use fgcl_core::contrastive::{train_encoder, write_history_csv};
use fgcl_core::dgc::{
    classify, train_dgc, PopulationGraph, PredictionRow, Split, write_predictions_csv,
};
use fgcl_core::encoder::{encode, GraphEncoderParams};
use fgcl_core::eval::{
    aggregate_folds, attraction_pairs, attraction_report, flattened_features, leave_dyad_out_cv,
    score_test_cells, split_721, stage_of, write_attraction_csv, write_results_json,
    write_summary_csv, AttractionReport, FoldAudit, FoldResult, ProtocolResults,
    RESULTS_SCHEMA_VERSION,
};
use fgcl_core::numcore::matrix::DenseMatrix;
use fgcl_core::synthdata::{generate, read_manifest_index, read_trial_csv, write_manifest};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const GRAPH_INDEX_SCHEMA_VERSION: u32 = 1;

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("dataset")
}
pub fn graphs_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("graphs")
}
pub fn pretrain_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("pretrain")
}
pub fn embed_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("embeddings")
}
pub fn classify_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("predictions")
}
pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("eval")
}
pub fn attraction_dir(cfg: &RunConfig) -> PathBuf {
    cfg.io.root.join("attraction")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Generate the synthetic dataset and persist it with its manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = dataset_dir(cfg);
    ensure_dir(&dir)?;
    let dataset = generate(&cfg.synth_config())?;
    let manifest = write_manifest(&dataset, &dir)?;
    cfg.write_echo(&dir)?;
    log::info!(
        "synth: wrote {} trial files for {} dyads to {}",
        manifest.records.len(),
        cfg.synth.n_dyads,
        dir.display()
    );
    Ok(())
}

/// One trial's graph files in the index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphTrialEntry {
    pub dyad_id: u32,
    pub subject_id: u32,
    pub role: Role,
    pub trial_index: u32,
    pub label: u8,
    pub split: Split,
    pub augmented_files: Vec<String>,
    pub basic_file: String,
}

/// Index of a graphs directory: window settings, split assignment, and one
/// entry per successfully converted trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphIndex {
    pub schema_version: u32,
    pub n_roi: usize,
    pub n_time: usize,
    pub window_width: usize,
    pub window_step: usize,
    pub ridge: f64,
    pub views_per_trial: usize,
    pub skipped_trials: Vec<String>,
    pub entries: Vec<GraphTrialEntry>,
}

fn read_graph_index(dir: &Path) -> Result<GraphIndex> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading graph index {}", path.display()))?;
    let index: GraphIndex = serde_json::from_str(&text)
        .with_context(|| format!("parsing graph index {}", path.display()))?;
    anyhow::ensure!(
        index.schema_version == GRAPH_INDEX_SCHEMA_VERSION,
        "graph index {}: schema version {} but this build reads {}",
        path.display(),
        index.schema_version,
        GRAPH_INDEX_SCHEMA_VERSION
    );
    Ok(index)
}

/// Convert the dataset into graph views plus a split-annotated index.
/// Corrupt trial files are skipped with a warning; more than 5% skipped is
/// an error.
pub fn cmd_graphs(cfg: &RunConfig) -> Result<()> {
    let data_dir = dataset_dir(cfg);
    let out = graphs_dir(cfg);
    ensure_dir(&out)?;
    let manifest = read_manifest_index(&data_dir)?;
    let synth = &manifest.config;

    let trial_keys: Vec<(u32, u32)> = manifest
        .records
        .iter()
        .map(|r| (r.dyad_id, r.trial_index))
        .collect();
    let split = split_721(&trial_keys, cfg.split_seed())?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for rec in &manifest.records {
        let series = match read_trial_csv(&data_dir.join(&rec.file), synth.n_roi, synth.n_time) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("graphs: skipping {}: {e}", rec.file);
                skipped.push(rec.file.clone());
                continue;
            }
        };
        let meta = |view_index: u32| GraphMeta {
            dyad_id: rec.dyad_id,
            subject_id: rec.subject_id,
            role: rec.role,
            trial_index: rec.trial_index,
            view_index,
        };
        let stem = format!(
            "d{:02}_s{:03}_t{:03}",
            rec.dyad_id, rec.subject_id, rec.trial_index
        );
        let ts = fgcl_core::connectivity::RoiTimeSeries::new(
            series,
            rec.dyad_id,
            rec.subject_id,
            rec.role,
            rec.trial_index,
            rec.label,
        )?;
        let windows = sliding_windows(&ts, cfg.window.width, cfg.window.step)?;
        let mut augmented_files = Vec::with_capacity(windows.len());
        for (vi, w) in windows.iter().enumerate() {
            let g = build_graph(w, rec.label, meta(vi as u32), cfg.window.ridge)?;
            if g.warnings.ridge_escalated {
                log::warn!("graphs: ridge escalated for {} view {vi}", rec.file);
            }
            let file = format!("aug_{stem}_v{vi:02}.json");
            write_graph_json(&g.graph, &out.join(&file))?;
            augmented_files.push(file);
        }
        let basic = build_graph(&ts.values, rec.label, meta(0), cfg.window.ridge)?;
        let basic_file = format!("basic_{stem}.json");
        write_graph_json(&basic.graph, &out.join(&basic_file))?;
        entries.push(GraphTrialEntry {
            dyad_id: rec.dyad_id,
            subject_id: rec.subject_id,
            role: rec.role,
            trial_index: rec.trial_index,
            label: rec.label,
            split: split[&(rec.dyad_id, rec.trial_index)],
            augmented_files,
            basic_file,
        });
    }
    if skipped.len() * 20 > manifest.records.len() {
        bail!(
            "graphs: {} of {} trials unreadable (over the 5% tolerance)",
            skipped.len(),
            manifest.records.len()
        );
    }
    let views_per_trial = entries.first().map_or(0, |e| e.augmented_files.len());
    let index = GraphIndex {
        schema_version: GRAPH_INDEX_SCHEMA_VERSION,
        n_roi: synth.n_roi,
        n_time: synth.n_time,
        window_width: cfg.window.width,
        window_step: cfg.window.step,
        ridge: cfg.window.ridge,
        views_per_trial,
        skipped_trials: skipped,
        entries,
    };
    let text = serde_json::to_string_pretty(&index).context("serializing graph index")?;
    std::fs::write(out.join("index.json"), text)
        .with_context(|| format!("writing {}", out.join("index.json").display()))?;
    cfg.write_echo(&out)?;
    log::info!(
        "graphs: {} trials -> {} augmented views each (+1 basic), {} skipped",
        index.entries.len(),
        views_per_trial,
        index.skipped_trials.len()
    );
    Ok(())
}

fn load_graphs(dir: &Path, files: impl Iterator<Item = String>) -> Result<Vec<FcGraph>> {
    files
        .map(|f| read_graph_json(&dir.join(&f)).map_err(anyhow::Error::from))
        .collect()
}

/// Augmented views of entries matching `pred`, in index order.
fn load_augmented(
    dir: &Path,
    index: &GraphIndex,
    pred: impl Fn(&GraphTrialEntry) -> bool,
) -> Result<Vec<FcGraph>> {
    load_graphs(
        dir,
        index
            .entries
            .iter()
            .filter(|e| pred(e))
            .flat_map(|e| e.augmented_files.iter().cloned()),
    )
}

fn load_basic(dir: &Path, index: &GraphIndex) -> Result<Vec<FcGraph>> {
    load_graphs(dir, index.entries.iter().map(|e| e.basic_file.clone()))
}

/// Contrastively pretrain the encoder on train-split augmented views,
/// validating on the val split; write the checkpoint and loss history.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let gdir = graphs_dir(cfg);
    let out = pretrain_dir(cfg);
    ensure_dir(&out)?;
    let index = read_graph_index(&gdir)?;
    let train = load_augmented(&gdir, &index, |e| e.split == Split::Train)?;
    let val = load_augmented(&gdir, &index, |e| e.split == Split::Val)?;
    log::info!(
        "pretrain: {} train views, {} val views",
        train.len(),
        val.len()
    );
    let arch = cfg.arch(index.n_roi);
    let trained = train_encoder(&train, &val, &arch, &cfg.contrastive_config())?;
    trained.params.save_json(&out.join("encoder.json"))?;
    write_history_csv(&out.join("loss_history.csv"), &trained.history)?;
    cfg.write_echo(&out)?;
    log::info!(
        "pretrain: best val loss {:.6} at epoch {} ({} epochs run{})",
        trained.best_val_loss,
        trained.best_epoch,
        trained.history.len(),
        if trained.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    Ok(())
}

const EMBED_HEADER_PREFIX: &str = "node_id,dyad_id,subject_id,role,trial_index,label,split";

/// Embed all basic views with the pretrained encoder into one CSV.
pub fn cmd_embed(cfg: &RunConfig) -> Result<()> {
    let gdir = graphs_dir(cfg);
    let out = embed_dir(cfg);
    ensure_dir(&out)?;
    let index = read_graph_index(&gdir)?;
    let params = GraphEncoderParams::load_json(&pretrain_dir(cfg).join("encoder.json"))?;
    anyhow::ensure!(
        params.arch.in_dim == index.n_roi,
        "embed: encoder expects {}-node graphs but the dataset has {} ROIs",
        params.arch.in_dim,
        index.n_roi
    );
    let basic = load_basic(&gdir, &index)?;
    let d = params.arch.embedding_dim;
    let mut csv = String::from(EMBED_HEADER_PREFIX);
    for j in 0..d {
        csv.push_str(&format!(",z{j}"));
    }
    csv.push('\n');
    for (i, (g, e)) in basic.iter().zip(&index.entries).enumerate() {
        let emb = encode(g, &params)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}",
            i,
            e.dyad_id,
            e.subject_id,
            e.role,
            e.trial_index,
            e.label,
            e.split.as_str()
        ));
        for v in &emb.z {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let path = out.join("embeddings.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    cfg.write_echo(&out)?;
    log::info!(
        "embed: wrote {} embeddings of width {d} to {}",
        basic.len(),
        path.display()
    );
    Ok(())
}

/// One parsed row of embeddings.csv.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub meta: GraphMeta,
    pub label: u8,
    pub split: Split,
    pub z: Vec<f64>,
}

fn parse_role(s: &str) -> Result<Role> {
    match s {
        "DMT_actor" => Ok(Role::DmtActor),
        "DMT_partner" => Ok(Role::DmtPartner),
        "PST" => Ok(Role::Pst),
        other => bail!("unknown role {other:?}"),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?}"),
    }
}

/// Parse embeddings.csv back into rows.
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    anyhow::ensure!(
        header.starts_with(EMBED_HEADER_PREFIX),
        "{}: unexpected header {header:?}",
        path.display()
    );
    let width = header.split(',').count() - 7;
    anyhow::ensure!(width >= 1, "{}: no embedding columns", path.display());
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(
            fields.len() == 7 + width,
            "{} line {}: {} fields, expected {}",
            path.display(),
            no + 2,
            fields.len(),
            7 + width
        );
        let ctx = || format!("{} line {}", path.display(), no + 2);
        let z: Vec<f64> = fields[7..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()
            .with_context(ctx)?;
        rows.push(EmbeddingRow {
            meta: GraphMeta {
                dyad_id: fields[1].parse().with_context(ctx)?,
                subject_id: fields[2].parse().with_context(ctx)?,
                role: parse_role(fields[3])?,
                trial_index: fields[4].parse().with_context(ctx)?,
                view_index: 0,
            },
            label: fields[5].parse().with_context(ctx)?,
            split: parse_split(fields[6])?,
            z,
        });
    }
    anyhow::ensure!(!rows.is_empty(), "{}: no data rows", path.display());
    Ok(rows)
}

fn trials_per_dyad_of(metas: &[GraphMeta]) -> BTreeMap<u32, usize> {
    let mut sets: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for m in metas {
        sets.entry(m.dyad_id).or_default().insert(m.trial_index);
    }
    sets.into_iter().map(|(d, s)| (d, s.len())).collect()
}

/// Train the transductive classifier on the embeddings and write per-node
/// prediction rows.
pub fn cmd_classify(cfg: &RunConfig) -> Result<()> {
    let out = classify_dir(cfg);
    ensure_dir(&out)?;
    let rows = read_embeddings_csv(&embed_dir(cfg).join("embeddings.csv"))?;
    let d = rows[0].z.len();
    let mut features = DenseMatrix::zeros(rows.len(), d);
    let mut labels = Vec::with_capacity(rows.len());
    let mut split = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        anyhow::ensure!(
            r.z.len() == d,
            "classify: row {i} has width {} but row 0 has {d}",
            r.z.len()
        );
        features.row_mut(i).copy_from_slice(&r.z);
        labels.push(r.label);
        split.push(r.split);
    }
    let graph = PopulationGraph::new(features, labels, split)?;
    let trained = train_dgc(&graph, &cfg.dgc_config())?;
    let probs = classify(&graph, &trained.params)?;
    trained.params.save_json(&out.join("dgc.json"))?;

    let metas: Vec<GraphMeta> = rows.iter().map(|r| r.meta).collect();
    let per_dyad = trials_per_dyad_of(&metas);
    let pred_rows: Vec<PredictionRow> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let stage = stage_of(r.meta.trial_index as usize, per_dyad[&r.meta.dyad_id])
                .map(|s| s.as_str().to_string())
                .unwrap_or_else(|_| "entire".to_string());
            PredictionRow {
                node_id: i,
                dyad_id: r.meta.dyad_id,
                subject_id: r.meta.subject_id,
                role: r.meta.role,
                trial_index: r.meta.trial_index,
                stage,
                label: r.label,
                prob_class1: probs[i],
                split: r.split,
            }
        })
        .collect();
    write_predictions_csv(&out.join("predictions.csv"), &pred_rows)?;
    cfg.write_echo(&out)?;
    let best = trained
        .history
        .iter()
        .map(|h| h.val_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    log::info!(
        "classify: wrote {} prediction rows (best val acc {best:.4})",
        pred_rows.len()
    );
    Ok(())
}

/// Parsed predictions.csv row set, reduced to what scoring needs.
struct PredictionTable {
    metas: Vec<GraphMeta>,
    labels: Vec<u8>,
    probs: Vec<f64>,
    split: Vec<Split>,
}

fn read_predictions_csv(path: &Path) -> Result<PredictionTable> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    anyhow::ensure!(
        header == "node_id,dyad_id,subject_id,role,trial_index,stage,label,prob_class1,split",
        "{}: unexpected header {header:?}",
        path.display()
    );
    let mut table = PredictionTable {
        metas: Vec::new(),
        labels: Vec::new(),
        probs: Vec::new(),
        split: Vec::new(),
    };
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(
            f.len() == 9,
            "{} line {}: {} fields, expected 9",
            path.display(),
            no + 2,
            f.len()
        );
        let ctx = || format!("{} line {}", path.display(), no + 2);
        table.metas.push(GraphMeta {
            dyad_id: f[1].parse().with_context(ctx)?,
            subject_id: f[2].parse().with_context(ctx)?,
            role: parse_role(f[3])?,
            trial_index: f[4].parse().with_context(ctx)?,
            view_index: 0,
        });
        table.labels.push(f[6].parse().with_context(ctx)?);
        table.probs.push(f[7].parse().with_context(ctx)?);
        table.split.push(parse_split(f[8])?);
    }
    anyhow::ensure!(!table.metas.is_empty(), "{}: no data rows", path.display());
    Ok(table)
}

/// Score saved predictions (7:2:1 protocol) or run leave-dyad-out
/// cross-validation from the graph files; write metrics JSON and the
/// stage-by-role summary CSV.
pub fn cmd_eval(cfg: &RunConfig, protocol_override: Option<Protocol>) -> Result<()> {
    let out = eval_dir(cfg);
    ensure_dir(&out)?;
    let protocol = protocol_override.unwrap_or(cfg.eval.protocol);
    let results = match protocol {
        Protocol::Split721 => {
            let table = read_predictions_csv(&classify_dir(cfg).join("predictions.csv"))?;
            let cells = score_test_cells(
                &table.metas,
                &table.labels,
                &table.probs,
                &table.split,
                cfg.eval.threshold,
            )?;
            let count = |s: Split| table.split.iter().filter(|&&x| x == s).count();
            let fold = FoldResult {
                fold: 0,
                test_dyad: None,
                audit: FoldAudit {
                    fold: 0,
                    test_dyad: None,
                    pretrain_train_views: 0,
                    pretrain_val_views: 0,
                    n_train_nodes: count(Split::Train),
                    n_val_nodes: count(Split::Val),
                    n_test_nodes: count(Split::Test),
                    leakage_detected: false,
                },
                results: cells,
            };
            let folds = vec![fold];
            let aggregate = aggregate_folds(&folds);
            ProtocolResults {
                schema_version: RESULTS_SCHEMA_VERSION,
                protocol: protocol.as_str().to_string(),
                threshold: cfg.eval.threshold,
                folds,
                aggregate,
            }
        }
        Protocol::LeaveDyadOut => {
            let gdir = graphs_dir(cfg);
            let index = read_graph_index(&gdir)?;
            let augmented = load_augmented(&gdir, &index, |_| true)?;
            let basic = load_basic(&gdir, &index)?;
            leave_dyad_out_cv(&augmented, &basic, &cfg.pipeline_config(index.n_roi))?
        }
    };
    write_results_json(&out.join("metrics.json"), &results)?;
    write_summary_csv(&out.join("summary.csv"), &results)?;
    cfg.write_echo(&out)?;
    log::info!(
        "eval: {} protocol, {} fold(s) written to {}",
        results.protocol,
        results.folds.len(),
        out.display()
    );
    Ok(())
}

/// Attraction summary for one feature space.
#[derive(Debug, Serialize)]
struct AttractionSummary {
    feature_space: String,
    mean_pos: f64,
    mean_neg: f64,
    gap: f64,
    pos_pairs: usize,
    neg_pairs: usize,
}

impl AttractionSummary {
    fn of(space: &str, r: &AttractionReport) -> Self {
        AttractionSummary {
            feature_space: space.to_string(),
            mean_pos: r.mean_pos,
            mean_neg: r.mean_neg,
            gap: r.gap,
            pos_pairs: r.pos_count,
            neg_pairs: r.neg_count,
        }
    }
}

/// Positive/negative cosine-similarity reports on held-out basic views, for
/// encoder embeddings and for raw flattened features. Falls back to a
/// freshly initialized encoder (with a warning) when no checkpoint exists.
pub fn cmd_attraction(cfg: &RunConfig) -> Result<()> {
    let gdir = graphs_dir(cfg);
    let out = attraction_dir(cfg);
    ensure_dir(&out)?;
    let index = read_graph_index(&gdir)?;
    let test_entries: Vec<&GraphTrialEntry> = index
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .collect();
    anyhow::ensure!(
        !test_entries.is_empty(),
        "attraction: no held-out (test-split) trials in the index"
    );
    let graphs = load_graphs(
        &gdir,
        test_entries.iter().map(|e| e.basic_file.clone()),
    )?;
    let checkpoint = pretrain_dir(cfg).join("encoder.json");
    let params = if checkpoint.exists() {
        GraphEncoderParams::load_json(&checkpoint)?
    } else {
        log::warn!(
            "attraction: no checkpoint at {}; using an untrained encoder",
            checkpoint.display()
        );
        GraphEncoderParams::init(&cfg.arch(index.n_roi), cfg.rng_seed)?
    };
    let metas: Vec<GraphMeta> = graphs.iter().map(|g| g.meta).collect();
    let (pos, neg) = attraction_pairs(&metas);
    anyhow::ensure!(
        !pos.is_empty() && !neg.is_empty(),
        "attraction: need both positive and negative pairs among {} held-out views",
        graphs.len()
    );
    let embeddings: Vec<Vec<f64>> = graphs
        .iter()
        .map(|g| encode(g, &params).map(|e| e.z))
        .collect::<fgcl_core::Result<_>>()?;
    let emb_report = attraction_report(&embeddings, &pos, &neg)?;
    let graph_refs: Vec<&FcGraph> = graphs.iter().collect();
    let raw_report = attraction_report(&flattened_features(&graph_refs), &pos, &neg)?;
    write_attraction_csv(&out.join("attraction_embedding.csv"), &emb_report)?;
    write_attraction_csv(&out.join("attraction_raw.csv"), &raw_report)?;
    let summary = vec![
        AttractionSummary::of("embedding", &emb_report),
        AttractionSummary::of("raw", &raw_report),
    ];
    let text = serde_json::to_string_pretty(&summary).context("serializing attraction summary")?;
    std::fs::write(out.join("attraction.json"), text)
        .with_context(|| format!("writing {}", out.join("attraction.json").display()))?;
    cfg.write_echo(&out)?;
    log::info!(
        "attraction: embedding gap {:.4}, raw gap {:.4} over {} pos / {} neg pairs",
        emb_report.gap,
        raw_report.gap,
        emb_report.pos_count,
        emb_report.neg_count
    );
    Ok(())
}
