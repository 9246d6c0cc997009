//! TOML run configuration.
//!
//! One file drives every command. Each section mirrors the owning module's
//! settings; unknown keys are rejected so a typo cannot silently fall back
//! to a default. The single top-level `rng_seed` feeds every stage through
//! fixed per-stage salts, so one integer pins the entire pipeline.

use anyhow::{Context, Result};
use fgcl_core::contrastive::{ContrastiveConfig, PairMode};
use fgcl_core::dgc::{DgcConfig, FocalConfig};
use fgcl_core::encoder::EncoderArch;
use fgcl_core::eval::PipelineConfig;
use fgcl_core::synthdata::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Stream salts deriving per-stage seeds from the run seed.
const SPLIT_SEED_SALT: u64 = 0x5350_4C49;
const CONTRASTIVE_SEED_SALT: u64 = 0x434F_4E54;
const DGC_SEED_SALT: u64 = 0xD6C0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_dyads: usize,
    pub trials_per_dyad: usize,
    pub n_roi: usize,
    pub n_time: usize,
    pub latent_dim: usize,
    pub class_separation: f64,
    pub trial_coherence: f64,
    pub fingerprint_strength: f64,
    pub contagion_ramp: (f64, f64, f64),
    pub noise_sigma: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            n_dyads: c.n_dyads,
            trials_per_dyad: c.trials_per_dyad,
            n_roi: c.n_roi,
            n_time: c.n_time,
            latent_dim: c.latent_dim,
            class_separation: c.class_separation,
            trial_coherence: c.trial_coherence,
            fingerprint_strength: c.fingerprint_strength,
            contagion_ramp: c.contagion_ramp,
            noise_sigma: c.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub width: usize,
    pub step: usize,
    /// Ridge multiplier stabilizing the precision-matrix inverse.
    pub ridge: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            width: 300,
            step: 50,
            ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub cheb_k: usize,
    pub pool_ratio: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub mlp_hidden: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let a = EncoderArch::default();
        EncoderSection {
            cheb_k: a.cheb_k,
            pool_ratio: a.pool_ratio,
            hidden1: a.hidden1,
            hidden2: a.hidden2,
            mlp_hidden: a.mlp_hidden,
            embedding_dim: a.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub pair_mode: PairMode,
    pub lr_milestones: Vec<u32>,
    pub lr_gamma: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        ContrastiveSection {
            tau: c.tau,
            lr: c.lr,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            early_stop_patience: c.early_stop_patience,
            pair_mode: c.pair_mode,
            lr_milestones: c.lr_milestones,
            lr_gamma: c.lr_gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgcSection {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub lr_milestones: Vec<u32>,
    pub lr_gamma: f64,
}

impl Default for DgcSection {
    fn default() -> Self {
        let c = DgcConfig::default();
        DgcSection {
            k: c.k,
            epochs: c.epochs,
            lr: c.lr,
            weight_decay: c.weight_decay,
            hidden: c.hidden,
            alpha: c.focal.alpha,
            gamma: c.focal.gamma,
            lr_milestones: c.lr_milestones,
            lr_gamma: c.lr_gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Protocol {
    Split721,
    LeaveDyadOut,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Split721 => "split_721",
            Protocol::LeaveDyadOut => "leave_dyad_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: Protocol::Split721,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Root directory for all artifacts; each command writes a subdirectory.
    pub root: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            root: PathBuf::from("artifacts"),
        }
    }
}

/// The whole run configuration. Defaults reproduce the reference pipeline
/// settings; any field can be overridden in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub synth: SynthSection,
    pub window: WindowSection,
    pub encoder: EncoderSection,
    pub contrastive: ContrastiveSection,
    pub dgc: DgcSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("validating config file {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        anyhow::ensure!(
            self.window.width >= 2 && self.window.step >= 1,
            "window: width {} / step {} out of range",
            self.window.width,
            self.window.step
        );
        anyhow::ensure!(
            self.window.ridge >= 0.0 && self.window.ridge.is_finite(),
            "window: ridge {} must be finite and non-negative",
            self.window.ridge
        );
        self.arch(self.synth.n_roi).validate()?;
        self.contrastive_config().validate()?;
        self.dgc_config().validate()?;
        anyhow::ensure!(
            self.eval.threshold > 0.0 && self.eval.threshold < 1.0,
            "eval: threshold {} outside (0, 1)",
            self.eval.threshold
        );
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_dyads: s.n_dyads,
            trials_per_dyad: s.trials_per_dyad,
            n_roi: s.n_roi,
            n_time: s.n_time,
            latent_dim: s.latent_dim,
            class_separation: s.class_separation,
            trial_coherence: s.trial_coherence,
            fingerprint_strength: s.fingerprint_strength,
            contagion_ramp: s.contagion_ramp,
            noise_sigma: s.noise_sigma,
            rng_seed: self.rng_seed,
        }
    }

    /// Encoder architecture for graphs with `in_dim` nodes (taken from the
    /// dataset manifest, not the config, so the two cannot disagree).
    pub fn arch(&self, in_dim: usize) -> EncoderArch {
        let e = &self.encoder;
        EncoderArch {
            in_dim,
            cheb_k: e.cheb_k,
            pool_ratio: e.pool_ratio,
            hidden1: e.hidden1,
            hidden2: e.hidden2,
            mlp_hidden: e.mlp_hidden,
            embedding_dim: e.embedding_dim,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.rng_seed ^ SPLIT_SEED_SALT
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        let c = &self.contrastive;
        ContrastiveConfig {
            tau: c.tau,
            batch_size: c.batch_size,
            lr: c.lr,
            weight_decay: c.weight_decay,
            max_epochs: c.max_epochs,
            early_stop_patience: c.early_stop_patience,
            pair_mode: c.pair_mode,
            rng_seed: self.rng_seed ^ CONTRASTIVE_SEED_SALT,
            lr_milestones: c.lr_milestones.clone(),
            lr_gamma: c.lr_gamma,
        }
    }

    pub fn dgc_config(&self) -> DgcConfig {
        let d = &self.dgc;
        DgcConfig {
            k: d.k,
            epochs: d.epochs,
            lr: d.lr,
            weight_decay: d.weight_decay,
            hidden: d.hidden,
            focal: FocalConfig {
                alpha: d.alpha,
                gamma: d.gamma,
            },
            lr_milestones: d.lr_milestones.clone(),
            lr_gamma: d.lr_gamma,
            rng_seed: self.rng_seed ^ DGC_SEED_SALT,
        }
    }

    /// Bundle for the full-pipeline protocols.
    pub fn pipeline_config(&self, in_dim: usize) -> PipelineConfig {
        PipelineConfig {
            arch: self.arch(in_dim),
            contrastive: self.contrastive_config(),
            dgc: self.dgc_config(),
            threshold: self.eval.threshold,
            rng_seed: self.rng_seed,
        }
    }

    /// Serialize the effective config next to an artifact so the output
    /// directory is self-describing.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config echo")?;
        let path = dir.join("run_config.toml");
        std::fs::write(&path, text)
            .with_context(|| format!("writing config echo {}", path.display()))?;
        Ok(())
    }
}
