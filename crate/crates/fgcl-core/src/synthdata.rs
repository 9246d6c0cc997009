//! Deterministic synthetic dyad generator.
//!
//! Each trial draws a shared latent that both dyad members mix into their
//! ROI time series, so same-trial graphs carry common structure an encoder
//! can learn to attract. A class-direction latent (two disjoint unit
//! directions, weighted by `class_separation`) makes feedback labels
//! decodable, per-subject fingerprints and mixing matrices keep subjects
//! distinct, and a per-stage ramp can make the class signal grow across a
//! session for stress-contagion experiments. Time courses come from a
//! sinusoid bank (8 frequencies, random phases), giving smooth correlated
//! series whose Pearson and partial correlations are well conditioned.
//!
//! Everything is a pure function of the config: the same `SynthConfig`
//! reproduces the dataset byte for byte. Each dyad owns an independent RNG
//! stream seeded by `rng_seed ^ dyad_index`.

use crate::connectivity::{Role, RoiTimeSeries};
use crate::error::{ensure, FgclError, Result};
use crate::eval::{stage_of, Stage};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::seeded_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Weight of the per-subject component of the mixing matrix relative to the
/// shared base. Kept small so raw connectivity looks alike across subjects
/// and the discriminating structure lives in the latents.
const MIXING_INDIVIDUALITY: f64 = 0.5;

/// Weight of a population-wide constant latent direction. It gives every
/// recording the same dominant connectivity backbone, so raw correlation
/// matrices look globally alike and trial-specific structure is a small
/// perturbation on top.
const STATIC_BACKBONE: f64 = 3.0;

/// Frequencies in the temporal basis, in cycles per trial window.
const FREQ_BANK: usize = 8;

const GLOBAL_STREAM_SALT: u64 = 0x474C_4F42;

/// Generator settings. Every dataset is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Every fourth dyad (3, 7, …) is a PST-PST control pair; the rest are
    /// DMT actor/partner pairs.
    pub n_dyads: usize,
    pub trials_per_dyad: usize,
    pub n_roi: usize,
    pub n_time: usize,
    /// Latent channels; the two class directions occupy disjoint halves.
    pub latent_dim: usize,
    /// Weight of the label-dependent latent direction.
    pub class_separation: f64,
    /// Weight of the trial latent shared by both dyad members.
    pub trial_coherence: f64,
    /// Weight of the per-subject latent bias.
    pub fingerprint_strength: f64,
    /// Per-stage (early, middle, late) multipliers on the class signal of
    /// DMT dyads; PST dyads always use 1.
    pub contagion_ramp: (f64, f64, f64),
    /// Scale of the per-member latent jitter and the ROI-level white noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dyads: 4,
            trials_per_dyad: 60,
            n_roi: 68,
            n_time: 768,
            latent_dim: 16,
            class_separation: 0.8,
            trial_coherence: 1.0,
            fingerprint_strength: 1.0,
            contagion_ramp: (1.0, 1.0, 1.0),
            noise_sigma: 0.5,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_dyads >= 1, "SynthConfig: n_dyads must be at least 1");
        ensure!(
            self.trials_per_dyad >= 3,
            "SynthConfig: trials_per_dyad {} is below the minimum of 3",
            self.trials_per_dyad
        );
        ensure!(self.n_roi >= 2, "SynthConfig: need at least 2 ROIs");
        ensure!(self.n_time >= 8, "SynthConfig: need at least 8 time points");
        ensure!(
            self.latent_dim >= 2 && self.latent_dim % 2 == 0,
            "SynthConfig: latent_dim {} must be even and at least 2",
            self.latent_dim
        );
        let (e, m, l) = self.contagion_ramp;
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("trial_coherence", self.trial_coherence),
            ("fingerprint_strength", self.fingerprint_strength),
            ("noise_sigma", self.noise_sigma),
            ("contagion_ramp.0", e),
            ("contagion_ramp.1", m),
            ("contagion_ramp.2", l),
        ] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "SynthConfig: {name} = {v} must be finite and non-negative"
            );
        }
        Ok(())
    }

    /// Roles of the two members of dyad `d`.
    pub fn dyad_roles(&self, d: usize) -> [Role; 2] {
        if (d + 1) % 4 == 0 {
            [Role::Pst, Role::Pst]
        } else {
            [Role::DmtActor, Role::DmtPartner]
        }
    }
}

/// A generated dataset: one time-series record per (subject, trial),
/// ordered by (dyad, trial, member).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub trials: Vec<RoiTimeSeries>,
}

fn ramp_multiplier(cfg: &SynthConfig, stage: Stage) -> f64 {
    match stage {
        Stage::Early => cfg.contagion_ramp.0,
        Stage::Middle => cfg.contagion_ramp.1,
        Stage::Late => cfg.contagion_ramp.2,
    }
}

fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mixing-matrix entries are N(0, 1/latent_dim) so ROI signals stay O(1).
fn mixing_component(rng: &mut impl Rng, n_roi: usize, latent_dim: usize) -> DenseMatrix {
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let data: Vec<f64> = (0..n_roi * latent_dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect();
    DenseMatrix::from_vec(n_roi, latent_dim, data).expect("mixing component shape")
}

/// Generate all trials of one dyad from its own RNG stream.
fn generate_dyad(
    cfg: &SynthConfig,
    dyad: usize,
    base_mixing: &DenseMatrix,
    static_latent: &[f64],
) -> Result<Vec<RoiTimeSeries>> {
    let l = cfg.latent_dim;
    let half = l / 2;
    let mut rng = seeded_rng(cfg.rng_seed ^ dyad as u64);
    let roles = cfg.dyad_roles(dyad);
    let is_pst = roles[0] == Role::Pst;

    let mut mixing = Vec::with_capacity(2);
    let mut fingerprint = Vec::with_capacity(2);
    for _ in 0..2 {
        let own = mixing_component(&mut rng, cfg.n_roi, l);
        mixing.push(base_mixing.add(&own.scale(MIXING_INDIVIDUALITY))?);
        let f: Vec<f64> = standard_normal_vec(&mut rng, l)
            .into_iter()
            .map(|g| cfg.fingerprint_strength * g / (l as f64).sqrt())
            .collect();
        fingerprint.push(f);
    }

    let mut out = Vec::with_capacity(2 * cfg.trials_per_dyad);
    for t in 0..cfg.trials_per_dyad {
        let y = (t % 2) as u8;
        let stage = stage_of(t, cfg.trials_per_dyad)?;
        let mult = if is_pst {
            1.0
        } else {
            ramp_multiplier(cfg, stage)
        };
        let shared = standard_normal_vec(&mut rng, l);
        let phases: Vec<f64> = (0..l)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let mut basis = DenseMatrix::zeros(l, cfg.n_time);
        for ell in 0..l {
            let freq = (1 + ell % FREQ_BANK) as f64;
            let row = basis.row_mut(ell);
            for (tau, value) in row.iter_mut().enumerate() {
                let angle =
                    std::f64::consts::TAU * freq * tau as f64 / cfg.n_time as f64 + phases[ell];
                *value = angle.sin();
            }
        }
        for member in 0..2 {
            let jitter = standard_normal_vec(&mut rng, l);
            let mut alpha = vec![0.0f64; l];
            for ell in 0..l {
                let class_dir = if usize::from(y) * half <= ell && ell < (usize::from(y) + 1) * half
                {
                    1.0
                } else {
                    0.0
                };
                alpha[ell] = STATIC_BACKBONE * static_latent[ell]
                    + cfg.trial_coherence * shared[ell]
                    + cfg.class_separation * mult * class_dir
                    + fingerprint[member][ell]
                    + cfg.noise_sigma * jitter[ell];
            }
            let mut weighted = basis.clone();
            for ell in 0..l {
                for v in weighted.row_mut(ell) {
                    *v *= alpha[ell];
                }
            }
            let mut series = mixing[member].matmul(&weighted)?;
            for v in series.data_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_sigma * g;
            }
            out.push(RoiTimeSeries::new(
                series,
                dyad as u32,
                (2 * dyad + member) as u32,
                roles[member],
                t as u32,
                y,
            )?);
        }
    }
    Ok(out)
}

/// Generate the full dataset described by `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut global_rng = seeded_rng(cfg.rng_seed ^ GLOBAL_STREAM_SALT);
    let base_mixing = mixing_component(&mut global_rng, cfg.n_roi, cfg.latent_dim);
    let static_latent = standard_normal_vec(&mut global_rng, cfg.latent_dim);
    let mut trials = Vec::with_capacity(cfg.n_dyads * 2 * cfg.trials_per_dyad);
    for dyad in 0..cfg.n_dyads {
        trials.extend(generate_dyad(cfg, dyad, &base_mixing, &static_latent)?);
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        trials,
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One row of the manifest: where a trial's CSV lives and what it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub file: String,
    pub dyad_id: u32,
    pub subject_id: u32,
    pub role: Role,
    pub trial_index: u32,
    pub label: u8,
}

/// Dataset directory index: config echo plus one record per trial file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: SynthConfig,
    pub records: Vec<TrialRecord>,
}

fn trial_file_name(t: &RoiTimeSeries) -> String {
    format!(
        "dyad{:02}_subj{:03}_trial{:03}.csv",
        t.dyad_id, t.subject_id, t.trial_index
    )
}

/// Write one series as CSV: one row per ROI, 17-significant-digit floats so
/// a read round-trips bit-exactly.
fn write_trial_csv(path: &Path, series: &DenseMatrix) -> Result<()> {
    let mut out = String::with_capacity(series.rows() * series.cols() * 25);
    for r in 0..series.rows() {
        let row = series.row(r);
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| FgclError::io(path.display().to_string(), e))
}

/// Parse a trial CSV back into an n_roi x n_time matrix.
pub fn read_trial_csv(path: &Path, n_roi: usize, n_time: usize) -> Result<DenseMatrix> {
    let text =
        std::fs::read_to_string(path).map_err(|e| FgclError::io(path.display().to_string(), e))?;
    let mut data = Vec::with_capacity(n_roi * n_time);
    let mut rows = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        rows += 1;
        let mut cols = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                FgclError::schema(
                    path.display().to_string(),
                    format!("line {}: unparseable value {field:?}", line_no + 1),
                )
            })?;
            ensure!(
                v.is_finite(),
                "trial csv {}: non-finite value on line {}",
                path.display(),
                line_no + 1
            );
            data.push(v);
            cols += 1;
        }
        if cols != n_time {
            return Err(FgclError::schema(
                path.display().to_string(),
                format!("line {}: {cols} columns, expected {n_time}", line_no + 1),
            ));
        }
    }
    if rows != n_roi {
        return Err(FgclError::schema(
            path.display().to_string(),
            format!("{rows} rows, expected {n_roi}"),
        ));
    }
    DenseMatrix::from_vec(n_roi, n_time, data)
}

/// Persist a dataset: `manifest.json` plus one CSV per trial.
pub fn write_manifest(dataset: &SynthDataset, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| FgclError::io(dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(dataset.trials.len());
    for t in &dataset.trials {
        let file = trial_file_name(t);
        write_trial_csv(&dir.join(&file), &t.values)?;
        records.push(TrialRecord {
            file,
            dyad_id: t.dyad_id,
            subject_id: t.subject_id,
            role: t.role,
            trial_index: t.trial_index,
            label: t.label,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: dataset.config.clone(),
        records,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FgclError::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| FgclError::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Load and validate just the manifest index of a dataset directory.
pub fn read_manifest_index(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&path).map_err(|e| FgclError::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| FgclError::json(path.display().to_string(), e))?;
    ensure!(
        manifest.schema_version == MANIFEST_SCHEMA_VERSION,
        "manifest {}: schema version {} but this build reads {}",
        path.display(),
        manifest.schema_version,
        MANIFEST_SCHEMA_VERSION
    );
    manifest.config.validate()?;
    Ok(manifest)
}

/// Load a full dataset back from disk (strict: any unreadable trial fails).
pub fn read_manifest(dir: &Path) -> Result<SynthDataset> {
    let manifest = read_manifest_index(dir)?;
    let cfg = &manifest.config;
    let mut trials = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let values = read_trial_csv(&dir.join(&rec.file), cfg.n_roi, cfg.n_time)?;
        trials.push(RoiTimeSeries::new(
            values,
            rec.dyad_id,
            rec.subject_id,
            rec.role,
            rec.trial_index,
            rec.label,
        )?);
    }
    Ok(SynthDataset {
        config: manifest.config,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::pearson_matrix;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_dyads: 2,
            trials_per_dyad: 6,
            n_roi: 8,
            n_time: 64,
            latent_dim: 8,
            rng_seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_produces_the_expected_record_count() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.n_dyads * 2 * cfg.trials_per_dyad, 480);
        let small = small_cfg();
        let data = generate(&small).unwrap();
        assert_eq!(data.trials.len(), 2 * 2 * 6);
        for t in &data.trials {
            assert_eq!(t.values.shape(), (8, 64));
            assert!(t.values.is_finite());
        }
    }

    #[test]
    fn roles_follow_the_every_fourth_dyad_rule() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.dyad_roles(0), [Role::DmtActor, Role::DmtPartner]);
        assert_eq!(cfg.dyad_roles(1), [Role::DmtActor, Role::DmtPartner]);
        assert_eq!(cfg.dyad_roles(2), [Role::DmtActor, Role::DmtPartner]);
        assert_eq!(cfg.dyad_roles(3), [Role::Pst, Role::Pst]);
        assert_eq!(cfg.dyad_roles(7), [Role::Pst, Role::Pst]);
        let data = generate(&SynthConfig {
            n_dyads: 4,
            ..small_cfg()
        })
        .unwrap();
        for t in &data.trials {
            let expected = if t.dyad_id == 3 {
                Role::Pst
            } else if t.subject_id % 2 == 0 {
                Role::DmtActor
            } else {
                Role::DmtPartner
            };
            assert_eq!(t.role, expected, "dyad {} subj {}", t.dyad_id, t.subject_id);
        }
    }

    #[test]
    fn labels_alternate_and_stay_balanced_per_dyad() {
        for trials in [6usize, 7, 9] {
            let data = generate(&SynthConfig {
                trials_per_dyad: trials,
                ..small_cfg()
            })
            .unwrap();
            for dyad in 0..2u32 {
                let labels: Vec<u8> = data
                    .trials
                    .iter()
                    .filter(|t| t.dyad_id == dyad && t.subject_id % 2 == 0)
                    .map(|t| t.label)
                    .collect();
                assert_eq!(labels.len(), trials);
                let ones = labels.iter().filter(|&&y| y == 1).count() as i64;
                let zeros = labels.len() as i64 - ones;
                assert!((ones - zeros).abs() <= 1);
                for (t, &y) in labels.iter().enumerate() {
                    assert_eq!(y, (t % 2) as u8);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.values.data(), tb.values.data());
        }
        let c = generate(&SynthConfig {
            rng_seed: 12,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.trials[0].values.data(), c.trials[0].values.data());
    }

    #[test]
    fn ramp_changes_dmt_dyads_but_not_pst_dyads() {
        let base = SynthConfig {
            n_dyads: 4,
            ..small_cfg()
        };
        let flat = generate(&base).unwrap();
        let ramped = generate(&SynthConfig {
            contagion_ramp: (0.2, 0.6, 1.0),
            ..base
        })
        .unwrap();
        let mut dmt_changed = false;
        for (a, b) in flat.trials.iter().zip(&ramped.trials) {
            if a.dyad_id == 3 {
                assert_eq!(
                    a.values.data(),
                    b.values.data(),
                    "PST dyad must ignore the ramp"
                );
            } else if a.values.data() != b.values.data() {
                dmt_changed = true;
            }
        }
        assert!(dmt_changed);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = small_cfg();
        assert!(ok.validate().is_ok());
        let cases = [
            SynthConfig {
                trials_per_dyad: 2,
                ..ok.clone()
            },
            SynthConfig {
                latent_dim: 7,
                ..ok.clone()
            },
            SynthConfig {
                noise_sigma: -0.1,
                ..ok.clone()
            },
            SynthConfig {
                contagion_ramp: (1.0, -1.0, 1.0),
                ..ok.clone()
            },
        ];
        for bad in cases {
            assert!(generate(&bad).is_err());
        }
    }

    /// Mean Pearson-matrix distance between classes should exceed the
    /// within-class distance once the class signal is strong.
    fn class_contrast(cfg: &SynthConfig) -> f64 {
        let data = generate(cfg).unwrap();
        let mats: Vec<(u8, DenseMatrix)> = data
            .trials
            .iter()
            .map(|t| (t.label, pearson_matrix(&t.values).unwrap().corr))
            .collect();
        let (mut within, mut across) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..mats.len() {
            for j in (i + 1)..mats.len() {
                let d = mats[i].1.sub(&mats[j].1).unwrap().frobenius_norm();
                if mats[i].0 == mats[j].0 {
                    within.0 += d;
                    within.1 += 1;
                } else {
                    across.0 += d;
                    across.1 += 1;
                }
            }
        }
        across.0 / across.1 as f64 - within.0 / within.1 as f64
    }

    #[test]
    fn class_separation_moves_raw_connectivity_monotonically() {
        for seed in [1u64, 2, 3] {
            let cfg = SynthConfig {
                n_dyads: 1,
                trials_per_dyad: 24,
                noise_sigma: 0.2,
                rng_seed: seed,
                ..small_cfg()
            };
            let contrasts: Vec<f64> = [0.0, 1.5, 3.0]
                .into_iter()
                .map(|sep| {
                    class_contrast(&SynthConfig {
                        class_separation: sep,
                        ..cfg.clone()
                    })
                })
                .collect();
            assert!(
                contrasts[0] < contrasts[1] && contrasts[1] < contrasts[2],
                "seed {seed}: contrasts {contrasts:?} not increasing"
            );
            // Without a class signal the contrast is pure noise.
            assert!(
                contrasts[0].abs() < 0.2 * contrasts[2],
                "seed {seed}: {contrasts:?}"
            );
        }
    }

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(&data, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), data.trials.len());
        assert_eq!(manifest.schema_version, MANIFEST_SCHEMA_VERSION);
        let loaded = read_manifest(dir.path()).unwrap();
        assert_eq!(loaded.config, cfg);
        for (a, b) in data.trials.iter().zip(&loaded.trials) {
            assert_eq!(a.values.data(), b.values.data(), "lossy round trip");
            assert_eq!(a.dyad_id, b.dyad_id);
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.role, b.role);
            assert_eq!(a.trial_index, b.trial_index);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn rewriting_the_same_dataset_is_byte_identical() {
        let cfg = small_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_manifest(&generate(&cfg).unwrap(), dir_a.path()).unwrap();
        write_manifest(&generate(&cfg).unwrap(), dir_b.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 1 + cfg.n_dyads * 2 * cfg.trials_per_dyad);
        for name in names {
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "file {name} differs between identical runs");
        }
    }

    #[test]
    fn corrupt_trial_csv_is_reported_with_path_context() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(&generate(&cfg).unwrap(), dir.path()).unwrap();
        let victim = dir.path().join(&manifest.records[0].file);
        std::fs::write(&victim, "not,numbers,at,all\n").unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&manifest.records[0].file),
            "error should name the file: {msg}"
        );
        // The index itself is still readable.
        assert!(read_manifest_index(dir.path()).is_ok());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&generate(&cfg).unwrap(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replacen(
            "\"schema_version\": 1",
            "\"schema_version\": 999",
            1,
        );
        assert_ne!(text, bumped);
        std::fs::write(&path, bumped).unwrap();
        assert!(read_manifest_index(dir.path()).is_err());
    }
}
