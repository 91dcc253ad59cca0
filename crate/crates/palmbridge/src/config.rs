//! Experiment configuration: a sectioned TOML file, every key optional,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use palmbridge_core::bridge::BlendingCoefficients;
use palmbridge_core::features::{DomainSpec, Protocol, SplitConfig, WorldConfig};
use palmbridge_core::losses::LossWeights;
use palmbridge_core::optim::AdamConfig;
use palmbridge_core::trainer::{CodebookInit, ModelMode, TrainConfig};
use palmbridge_core::verify::ScoreKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Overrides `experiment.output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "PALMBRIDGE_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone only.
    Naive,
    /// Backbone and codebook trained jointly.
    Bridge,
    /// The naive backbone with a codebook fitted to its frozen features.
    PlugAndPlay,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Bridge => "bridge",
            Self::PlugAndPlay => "plug_and_play",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    pub variants: Vec<Variant>,
    pub score: ScoreKind,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1, 2, 3, 4, 5],
            protocol: Protocol::Intra,
            variants: vec![Variant::Naive, Variant::Bridge],
            score: ScoreKind::NegativeL2,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub num_identities: usize,
    pub dim: usize,
    pub raw_dim: usize,
    pub nuisance_sigma: f64,
    pub mean_scale: f64,
    pub min_separation: f64,
    /// Defaults to `dim`.
    pub identity_rank: Option<usize>,
    /// Evaluation-domain shift used by the cross-domain protocol.
    pub shift_scale: f64,
    pub shift_bias_norm: f64,
    pub shift_extra_sigma: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            num_identities: 128,
            dim: 32,
            raw_dim: 64,
            nuisance_sigma: 0.5,
            mean_scale: 1.0,
            min_separation: 4.0,
            identity_rank: None,
            shift_scale: 1.2,
            shift_bias_norm: 1.0,
            shift_extra_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_identity_fraction: f64,
    pub train_samples_per_identity: usize,
    pub eval_samples_per_identity: usize,
    pub gallery_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitConfig::new(Protocol::Intra);
        Self {
            train_identity_fraction: s.train_identity_fraction,
            train_samples_per_identity: s.train_samples_per_identity,
            eval_samples_per_identity: s.eval_samples_per_identity,
            gallery_fraction: s.gallery_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub codebook_size: usize,
    pub w_ori: f64,
    pub w_map: f64,
    pub allow_unconstrained_blend: bool,
    pub straight_through: bool,
    pub codebook_init: CodebookInit,
    pub init_jitter: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = BlendingCoefficients::default();
        Self {
            codebook_size: 512,
            w_ori: c.w_ori,
            w_map: c.w_map,
            allow_unconstrained_blend: false,
            straight_through: true,
            codebook_init: CodebookInit::FirstBatch,
            init_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub alpha_con: f64,
    pub beta_orth: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda: w.lambda_con_inner, alpha_con: w.alpha_con, beta_orth: w.beta_orth }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    /// Defaults to `lr`.
    pub codebook_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, codebook_lr: None, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { batch_size: t.batch_size, epochs: t.epochs, plateau_tol: t.plateau_tol, plateau_window: t.plateau_window }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub roc_points: usize,
    pub gi_bins: usize,
    /// Pairs sampled per population for the assignment rates.
    pub diagnostic_pairs: usize,
    /// Constructed same-cell pairs for the contraction check.
    pub contraction_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { roc_points: 101, gi_bins: 50, diagnostic_pairs: 1000, contraction_pairs: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub world: WorldSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn field(path: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{path}: {what}")))
    }
}

fn finite_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        field("experiment.name", !e.name.is_empty() && !e.name.contains(['/', '\\']), "must be a nonempty file name")?;
        field("experiment.seeds", !e.seeds.is_empty(), "at least one seed is required")?;
        let mut seeds = e.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        field("experiment.seeds", seeds.len() == e.seeds.len(), "seeds must be distinct")?;
        field("experiment.variants", !e.variants.is_empty(), "at least one variant is required")?;

        let w = &self.world;
        field("world.num_identities", w.num_identities >= 2, "must be >= 2")?;
        field("world.dim", w.dim >= 1, "must be >= 1")?;
        field("world.raw_dim", w.raw_dim >= w.dim, "must be >= world.dim")?;
        field("world.nuisance_sigma", finite_nonneg(w.nuisance_sigma), "must be finite and >= 0")?;
        field("world.mean_scale", positive(w.mean_scale), "must be positive")?;
        field("world.min_separation", finite_nonneg(w.min_separation), "must be finite and >= 0")?;
        if let Some(r) = w.identity_rank {
            field("world.identity_rank", (1..=w.dim).contains(&r), "must be in 1..=world.dim")?;
        }
        field("world.shift_scale", positive(w.shift_scale), "must be positive")?;
        field("world.shift_bias_norm", finite_nonneg(w.shift_bias_norm), "must be finite and >= 0")?;
        field("world.shift_extra_sigma", finite_nonneg(w.shift_extra_sigma), "must be finite and >= 0")?;

        let s = &self.split;
        let open = e.protocol != Protocol::Closed;
        field(
            "split.train_identity_fraction",
            !open || (s.train_identity_fraction > 0.0 && s.train_identity_fraction < 1.0),
            "must be in (0,1)",
        )?;
        field("split.train_samples_per_identity", s.train_samples_per_identity >= 1, "must be >= 1")?;
        field("split.eval_samples_per_identity", s.eval_samples_per_identity >= 2, "must be >= 2")?;
        field("split.gallery_fraction", s.gallery_fraction > 0.0 && s.gallery_fraction < 1.0, "must be in (0,1)")?;

        let m = &self.model;
        field("model.codebook_size", m.codebook_size >= 1, "must be >= 1")?;
        field("model.w_ori", (0.0..=1.0).contains(&m.w_ori), "must be in [0,1]")?;
        field("model.w_map", (0.0..=1.0).contains(&m.w_map), "must be in [0,1]")?;
        field(
            "model.w_map",
            m.allow_unconstrained_blend || (m.w_ori + m.w_map - 1.0).abs() <= 1e-12,
            "w_ori + w_map must equal 1 unless allow_unconstrained_blend is set",
        )?;
        field("model.init_jitter", finite_nonneg(m.init_jitter), "must be finite and >= 0")?;

        let l = &self.loss;
        field("loss.lambda", finite_nonneg(l.lambda), "must be finite and >= 0")?;
        field("loss.alpha_con", finite_nonneg(l.alpha_con), "must be finite and >= 0")?;
        field("loss.beta_orth", finite_nonneg(l.beta_orth), "must be finite and >= 0")?;

        let o = &self.optim;
        field("optim.lr", positive(o.lr), "must be positive")?;
        if let Some(lr) = o.codebook_lr {
            field("optim.codebook_lr", positive(lr), "must be positive")?;
        }
        field("optim.beta1", o.beta1 > 0.0 && o.beta1 < 1.0, "must be in (0,1)")?;
        field("optim.beta2", o.beta2 > 0.0 && o.beta2 < 1.0, "must be in (0,1)")?;
        field("optim.eps", positive(o.eps), "must be positive")?;

        let t = &self.train;
        field("train.batch_size", t.batch_size >= 1, "must be >= 1")?;
        field("train.epochs", t.epochs >= 1, "must be >= 1")?;
        field("train.plateau_tol", finite_nonneg(t.plateau_tol), "must be finite and >= 0")?;

        let v = &self.eval;
        field("eval.roc_points", v.roc_points >= 2, "must be >= 2")?;
        field("eval.gi_bins", v.gi_bins >= 1, "must be >= 1")?;
        field("eval.diagnostic_pairs", v.diagnostic_pairs >= 1, "must be >= 1")?;

        // Backstop: the core validators must agree.
        self.world_config().validate().map_err(|e| CliError::Config(format!("world: {e}")))?;
        self.train_config(Variant::Bridge, 0).validate().map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            num_identities: w.num_identities,
            dim: w.dim,
            raw_dim: w.raw_dim,
            nuisance_sigma: w.nuisance_sigma,
            mean_scale: w.mean_scale,
            min_separation: w.min_separation,
            identity_rank: w.identity_rank.unwrap_or(w.dim),
            domains: vec![
                DomainSpec::IDENTITY,
                DomainSpec { scale: w.shift_scale, bias_norm: w.shift_bias_norm, extra_sigma: w.shift_extra_sigma },
            ],
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        let s = &self.split;
        SplitConfig {
            protocol: self.experiment.protocol,
            train_identity_fraction: s.train_identity_fraction,
            train_samples_per_identity: s.train_samples_per_identity,
            eval_samples_per_identity: s.eval_samples_per_identity,
            gallery_fraction: s.gallery_fraction,
        }
    }

    pub fn coeffs(&self) -> BlendingCoefficients {
        BlendingCoefficients { w_ori: self.model.w_ori, w_map: self.model.w_map }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_con_inner: self.loss.lambda, alpha_con: self.loss.alpha_con, beta_orth: self.loss.beta_orth }
    }

    /// Trainer settings for one variant. Plug-and-play uses these settings
    /// for fitting its codebook.
    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let o = &self.optim;
        let backbone = AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps };
        TrainConfig {
            mode: match variant {
                Variant::Naive => ModelMode::Naive,
                Variant::Bridge | Variant::PlugAndPlay => ModelMode::Joint,
            },
            feature_dim: self.world.dim,
            codebook_size: self.model.codebook_size,
            coeffs: self.coeffs(),
            allow_unconstrained_blend: self.model.allow_unconstrained_blend,
            weights: self.loss_weights(),
            straight_through: self.model.straight_through,
            backbone_optim: backbone,
            codebook_optim: AdamConfig { lr: o.codebook_lr.unwrap_or(o.lr), ..backbone },
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            plateau_tol: self.train.plateau_tol,
            plateau_window: self.train.plateau_window,
            codebook_init: self.model.codebook_init,
            init_jitter: self.model.init_jitter,
            seed,
        }
    }

    /// Output root: the environment override if present, else the config's.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.experiment.output_dir.clone())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("[model]\ncodebook_sise = 4\n").unwrap_err();
        assert!(err.to_string().contains("codebook_sise"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_toml("[modle]\n").is_err());
    }

    #[test]
    fn invalid_field_is_named() {
        let err = ExperimentConfig::from_toml("[world]\nnuisance_sigma = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("world.nuisance_sigma"), "{err}");
        let err = ExperimentConfig::from_toml("[model]\nw_ori = 0.5\nw_map = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("model.w_map"), "{err}");
        let err = ExperimentConfig::from_toml("[experiment]\nseeds = [1, 1]\n").unwrap_err();
        assert!(err.to_string().contains("experiment.seeds"), "{err}");
    }

    #[test]
    fn unconstrained_blend_needs_opt_in() {
        let text = "[model]\nw_ori = 0.5\nw_map = 0.3\nallow_unconstrained_blend = true\n";
        assert!(ExperimentConfig::from_toml(text).is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.world.identity_rank = Some(8);
        c.optim.codebook_lr = Some(0.01);
        c.experiment.protocol = Protocol::CrossDomain;
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.loss.beta_orth = 0.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn codebook_lr_defaults_to_backbone_lr() {
        let mut c = ExperimentConfig::default();
        c.optim.lr = 0.01;
        assert_eq!(c.train_config(Variant::Bridge, 1).codebook_optim.lr, 0.01);
        c.optim.codebook_lr = Some(0.5);
        assert_eq!(c.train_config(Variant::Bridge, 1).codebook_optim.lr, 0.5);
    }
}
