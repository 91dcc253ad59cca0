//! On-disk formats: JSON documents for codebooks, checkpoints, metrics and
//! diagnostics; CSV for logs, curves, histograms and splits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use palmbridge_core::bridge::{BlendingCoefficients, Codebook, CODEBOOK_FORMAT_VERSION};
use palmbridge_core::features::OpenSetSplit;
use palmbridge_core::losses::LossWeights;
use palmbridge_core::trainer::{LogRow, ModelMode, TrainedModel};
use palmbridge_core::verify::{GiHistogram, RocPoint};
use palmbridge_core::{BackboneParams, Matrix};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookFile {
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    /// Row-major, `K · D` values.
    pub vectors: Vec<f64>,
}

impl CodebookFile {
    pub fn from_codebook(cb: &Codebook) -> Self {
        Self { version: CODEBOOK_FORMAT_VERSION, k: cb.len(), d: cb.dim(), vectors: cb.vectors.as_slice().to_vec() }
    }

    pub fn into_codebook(self) -> std::result::Result<Codebook, String> {
        if self.version != CODEBOOK_FORMAT_VERSION {
            return Err(format!("unsupported codebook version {} (expected {CODEBOOK_FORMAT_VERSION})", self.version));
        }
        let m = Matrix::from_vec(self.k, self.d, self.vectors).map_err(|e| e.to_string())?;
        Codebook::new(m).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: ModelMode,
    pub seed: u64,
    pub config_hash: String,
    pub coeffs: BlendingCoefficients,
    pub weights: LossWeights,
    pub straight_through: bool,
    pub backbone: BackboneParams,
    pub codebook: Option<CodebookFile>,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, seed: u64, config_hash: String) -> Self {
        Self {
            version: CHECKPOINT_FORMAT_VERSION,
            mode: model.mode,
            seed,
            config_hash,
            coeffs: model.coeffs,
            weights: model.weights,
            straight_through: model.straight_through,
            backbone: model.backbone.clone(),
            codebook: model.codebook.as_ref().map(CodebookFile::from_codebook),
        }
    }

    pub fn into_model(self) -> std::result::Result<TrainedModel, String> {
        if self.version != CHECKPOINT_FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {}", self.version));
        }
        self.backbone.validate().map_err(|e| e.to_string())?;
        let codebook = self.codebook.map(CodebookFile::into_codebook).transpose()?;
        if self.mode != ModelMode::Naive && codebook.is_none() {
            return Err(format!("{:?} checkpoint has no codebook", self.mode));
        }
        if let Some(cb) = &codebook {
            if cb.dim() != self.backbone.dim() {
                return Err(format!("codebook dimension {} does not match backbone dimension {}", cb.dim(), self.backbone.dim()));
            }
        }
        Ok(TrainedModel {
            backbone: self.backbone,
            codebook,
            coeffs: self.coeffs,
            weights: self.weights,
            mode: self.mode,
            straight_through: self.straight_through,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub seed: u64,
    pub eer: f64,
    /// Rank-1 identification accuracy over the queries.
    pub acc: f64,
    pub threshold: f64,
    pub far_at_threshold: f64,
    pub frr_at_threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub genuine_variance: Option<f64>,
    pub impostor_variance: Option<f64>,
    pub epochs_run: usize,
    /// Classifier accuracy on the training set; absent for attached models.
    pub train_accuracy: Option<f64>,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub alpha: f64,
    pub n_pairs: usize,
    /// `max |ratio - (1-α)²|` over constructed same-cell pairs.
    pub exact_dev: Option<f64>,
    /// `max |ratio - (1-α)|` over the same pairs.
    pub stated_dev: Option<f64>,
    pub mean_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub variant: String,
    pub seed: u64,
    /// Evaluation identities.
    pub p_same: f64,
    pub p_collide: f64,
    /// Training identities.
    pub p_same_train: f64,
    pub p_collide_train: f64,
    pub contraction: Contraction,
    /// Assignment count per codeword over the evaluation samples.
    pub utilization: Vec<usize>,
    pub dead_fraction: f64,
    pub orthogonality_initial: Option<f64>,
    pub orthogonality_final: Option<f64>,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::format(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    read_json::<CodebookFile>(path)?.into_codebook().map_err(|m| CliError::format(path, m))
}

pub fn write_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    write_json(path, &CodebookFile::from_codebook(codebook))
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, TrainedModel)> {
    let ckpt: Checkpoint = read_json(path)?;
    let model = ckpt.clone().into_model().map_err(|m| CliError::format(path, m))?;
    Ok((ckpt, model))
}

fn write_csv<F>(path: &Path, header: &[&str], mut rows: F) -> Result<()>
where
    F: FnMut(&mut csv::Writer<BufWriter<File>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| CliError::format(path, e))?;
    rows(&mut w).map_err(|e| CliError::format(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_training_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_csv(path, &["epoch", "step", "task", "consistency", "orthogonality", "total"], |w| {
        log.iter().try_for_each(|r| {
            w.write_record(&[
                r.epoch.to_string(),
                r.step.to_string(),
                r.task.to_string(),
                r.consistency.to_string(),
                r.orthogonality.to_string(),
                r.total.to_string(),
            ])
        })
    })
}

pub fn read_training_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    r.deserialize().collect::<csv::Result<Vec<LogRow>>>().map_err(|e| CliError::format(path, e))
}

pub fn write_roc(path: &Path, roc: &[RocPoint]) -> Result<()> {
    write_csv(path, &["far", "gar"], |w| roc.iter().try_for_each(|p| w.write_record(&[p.far.to_string(), p.gar.to_string()])))
}

pub fn write_gi(path: &Path, h: &GiHistogram) -> Result<()> {
    write_csv(path, &["bin_left", "bin_right", "genuine_count", "impostor_count"], |w| {
        (0..h.genuine.len()).try_for_each(|b| {
            w.write_record(&[
                h.edges[b].to_string(),
                h.edges[b + 1].to_string(),
                h.genuine[b].to_string(),
                h.impostor[b].to_string(),
            ])
        })
    })
}

/// One row per sample: role, identity, domain, then the raw values.
pub fn write_split(path: &Path, split: &OpenSetSplit) -> Result<()> {
    let dim = split.train.first().or(split.gallery.first()).map_or(0, |o| o.values.len());
    let mut header = vec!["split_role".to_string(), "identity".into(), "domain".into()];
    header.extend((0..dim).map(|i| format!("v{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header_refs, |w| {
        for (role, set) in [("train", &split.train), ("gallery", &split.gallery), ("query", &split.query)] {
            for o in set {
                let mut rec = vec![role.to_string(), o.identity.to_string(), o.domain.to_string()];
                rec.extend(o.values.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        Ok(())
    })
}
