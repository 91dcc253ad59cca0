//! Joint training of backbone and codebook, and plug-and-play attachment.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::bridge::{self, BlendingCoefficients, Codebook};
use crate::features::{gaussian, seeded_rng, stream, OpenSetSplit, RawObservation};
use crate::linalg::Matrix;
use crate::losses::{self, LossInputs, LossWeights};
use crate::optim::{AdamConfig, AdamState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Backbone and codebook optimized together.
    Joint,
    /// Backbone alone; no alignment at inference.
    Naive,
    /// Frozen backbone with a codebook trained elsewhere.
    PlugAndPlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// Rows drawn from the embedded features of the first training batch.
    FirstBatch,
    /// Rows drawn from the embedded features of the whole training set.
    TrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ModelMode,
    /// Backbone output dimension `D`.
    pub feature_dim: usize,
    pub codebook_size: usize,
    pub coeffs: BlendingCoefficients,
    pub allow_unconstrained_blend: bool,
    pub weights: LossWeights,
    pub straight_through: bool,
    pub backbone_optim: AdamConfig,
    pub codebook_optim: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop once the mean epoch loss changed by less than this (relative)
    /// over `plateau_window` epochs.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub codebook_init: CodebookInit,
    /// Standard deviation of the jitter added to initial codewords.
    pub init_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Joint,
            feature_dim: 32,
            codebook_size: 512,
            coeffs: BlendingCoefficients::default(),
            allow_unconstrained_blend: false,
            weights: LossWeights::default(),
            straight_through: true,
            backbone_optim: AdamConfig::default(),
            codebook_optim: AdamConfig::default(),
            batch_size: 16,
            epochs: 200,
            plateau_tol: 1e-6,
            plateau_window: 10,
            codebook_init: CodebookInit::FirstBatch,
            init_jitter: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == ModelMode::PlugAndPlay {
            return Err(Error::Config("plug_and_play models are built with attach_codebook, not trained".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Config(format!("init_jitter must be >= 0, got {}", self.init_jitter)));
        }
        self.coeffs.validate(self.allow_unconstrained_blend)?;
        self.weights.validate()?;
        self.backbone_optim.validate()?;
        self.codebook_optim.validate()
    }

    /// A joint model with `w_map = 0` cannot use its codebook at inference,
    /// so it trains exactly like the naive baseline.
    pub fn effective_mode(&self) -> ModelMode {
        if self.mode == ModelMode::Joint && self.coeffs.w_map == 0.0 {
            ModelMode::Naive
        } else {
            self.mode
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub backbone: BackboneParams,
    /// Always `Some` unless `mode` is naive.
    pub codebook: Option<Codebook>,
    pub coeffs: BlendingCoefficients,
    pub weights: LossWeights,
    pub mode: ModelMode,
    pub straight_through: bool,
}

impl TrainedModel {
    pub fn naive(backbone: BackboneParams, weights: LossWeights) -> Self {
        Self {
            backbone,
            codebook: None,
            coeffs: BlendingCoefficients::IDENTITY,
            weights,
            mode: ModelMode::Naive,
            straight_through: false,
        }
    }

    pub fn embed_observations(&self, obs: &[RawObservation]) -> Result<Matrix> {
        let raw = Matrix::from_rows(self.backbone.raw_dim(), obs.iter().map(|o| o.values.as_slice()))?;
        self.backbone.embed_batch(&raw)
    }

    /// Aligned features `ẑ` for already embedded rows. Naive models, and
    /// models with `w_map = 0`, return the input unchanged.
    pub fn align_features(&self, z: &Matrix) -> Result<Matrix> {
        match &self.codebook {
            Some(cb) if self.mode != ModelMode::Naive && self.coeffs.w_map != 0.0 => bridge::align(z, cb, self.coeffs),
            _ => Ok(z.clone()),
        }
    }

    /// `align(embed(x))` for every observation; the one code path used for
    /// enrollment and for queries.
    pub fn templates(&self, obs: &[RawObservation]) -> Result<Matrix> {
        let z = self.embed_observations(obs)?;
        self.align_features(&z)
    }

    pub fn with_coeffs(&self, coeffs: BlendingCoefficients) -> Self {
        Self { coeffs, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub task: f64,
    pub consistency: f64,
    pub orthogonality: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<LogRow>,
    pub epochs_run: usize,
    pub initial_orthogonality: Option<f64>,
    pub final_orthogonality: Option<f64>,
    /// Rank-1 accuracy of the classifier head on the training set.
    pub train_accuracy: f64,
}

fn init_codebook<R: Rng + ?Sized>(features: &Matrix, k: usize, jitter: f64, rng: &mut R) -> Result<Codebook> {
    let n = features.rows();
    let picks: Vec<usize> = if n >= k {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    let mut vectors = Matrix::zeros(k, features.cols());
    for (row, &src) in picks.iter().enumerate() {
        for (dst, &v) in vectors.row_mut(row).iter_mut().zip(features.row(src)) {
            *dst = v + jitter * gaussian(rng);
        }
    }
    Codebook::new(vectors)
}

fn gather(raw: &Matrix, idx: &[usize]) -> Result<Matrix> {
    Matrix::from_rows(raw.cols(), idx.iter().map(|&i| raw.row(i)))
}

pub fn train(split: &OpenSetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mode = config.effective_mode();
    let raw_dim = split.train[0].values.len();
    let raw = Matrix::from_rows(raw_dim, split.train.iter().map(|o| o.values.as_slice()))?;
    let labels = split.train_labels();
    let dim = config.feature_dim;

    let mut rng = seeded_rng(config.seed, stream::TRAIN);
    let mut backbone = BackboneParams::random(dim, raw_dim, split.num_classes(), &mut rng);
    let mut order: Vec<usize> = (0..raw.rows()).collect();
    order.shuffle(&mut rng);

    let mut codebook = match mode {
        ModelMode::Joint => {
            let seed_rows = match config.codebook_init {
                CodebookInit::FirstBatch => &order[..config.batch_size.min(order.len())],
                CodebookInit::TrainingSet => &order[..],
            };
            let feats = backbone.embed_batch(&gather(&raw, seed_rows)?)?;
            Some(init_codebook(&feats, config.codebook_size, config.init_jitter, &mut rng)?)
        }
        _ => None,
    };
    let initial_orthogonality = codebook.as_ref().map(losses::orthogonality_value).transpose()?;
    let coeffs = if mode == ModelMode::Naive { BlendingCoefficients::IDENTITY } else { config.coeffs };

    let mut backbone_opt = AdamState::new(backbone.num_params(), config.backbone_optim)?;
    let mut codebook_opt = AdamState::new(config.codebook_size * dim, config.codebook_optim)?;
    let mut log = Vec::new();
    let mut epoch_means: Vec<f64> = Vec::new();
    let mut step: u64 = 0;
    let mut flat = backbone.to_flat();

    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = gather(&raw, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let report = losses::total_loss(&LossInputs {
                params: &backbone,
                raw: &x,
                labels: &y,
                codebook: codebook.as_ref(),
                coeffs,
                weights: config.weights,
                straight_through: config.straight_through,
            })?;
            if !report.total.is_finite() {
                return Err(Error::Divergence { epoch, last_finite_epoch: epoch.checked_sub(1) });
            }
            step += 1;
            log.push(LogRow {
                epoch,
                step,
                task: report.task,
                consistency: report.consistency,
                orthogonality: report.orthogonality,
                total: report.total,
            });
            epoch_total += report.total;
            n_batches += 1;

            backbone_opt.step(&mut flat, &report.grad_backbone.to_flat())?;
            backbone.copy_from_flat(&flat)?;
            if let (Some(cb), Some(g)) = (codebook.as_mut(), report.grad_codebook.as_ref()) {
                codebook_opt.step(cb.vectors.as_mut_slice(), g.as_slice())?;
            }
        }
        if !backbone.is_finite() || codebook.as_ref().is_some_and(|c| !c.vectors.is_finite()) {
            return Err(Error::Divergence { epoch, last_finite_epoch: epoch.checked_sub(1) });
        }
        epoch_means.push(epoch_total / n_batches as f64);
        if plateaued(&epoch_means, config.plateau_window, config.plateau_tol) {
            break;
        }
    }

    let final_orthogonality = codebook.as_ref().map(losses::orthogonality_value).transpose()?;
    let model = TrainedModel {
        backbone,
        codebook,
        coeffs,
        weights: config.weights,
        mode,
        straight_through: config.straight_through,
    };
    let train_accuracy = classifier_accuracy(&model, &split.train, &labels)?;
    Ok(TrainOutcome {
        model,
        log,
        epochs_run: epoch_means.len(),
        initial_orthogonality,
        final_orthogonality,
        train_accuracy,
    })
}

fn plateaued(means: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || means.len() <= window {
        return false;
    }
    let now = means[means.len() - 1];
    let then = means[means.len() - 1 - window];
    (now - then).abs() <= tol * then.abs()
}

/// Fraction of observations the head classifies correctly from the model's
/// aligned features.
pub fn classifier_accuracy(model: &TrainedModel, obs: &[RawObservation], labels: &[usize]) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::Input("no observations".into()));
    }
    let feats = model.templates(obs)?;
    let mut correct = 0usize;
    for (f, &y) in feats.iter_rows().zip(labels) {
        let logits = model.backbone.logits(f)?;
        let best = logits
            .iter()
            .enumerate()
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        if best.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / obs.len() as f64)
}

/// Trains a codebook against a frozen backbone: only the codebook side of
/// the consistency loss and the orthogonality loss move it. The result is
/// meant for [`attach_codebook`].
pub fn fit_codebook(backbone: &BackboneParams, train: &[RawObservation], config: &TrainConfig) -> Result<Codebook> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let raw = Matrix::from_rows(backbone.raw_dim(), train.iter().map(|o| o.values.as_slice()))?;
    let z = backbone.embed_batch(&raw)?;
    let mut rng = seeded_rng(config.seed, stream::TRAIN);
    let mut order: Vec<usize> = (0..z.rows()).collect();
    order.shuffle(&mut rng);
    let seed_rows = match config.codebook_init {
        CodebookInit::FirstBatch => &order[..config.batch_size.min(order.len())],
        CodebookInit::TrainingSet => &order[..],
    };
    let mut codebook = init_codebook(&gather(&z, seed_rows)?, config.codebook_size, config.init_jitter, &mut rng)?;
    let mut opt = AdamState::new(codebook.len() * codebook.dim(), config.codebook_optim)?;
    let branches = losses::ConsistencyBranches { codebook_pull: 1.0, feature_pull: 0.0 };
    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(config.batch_size) {
            let zb = gather(&z, batch)?;
            let (mapped, assignments) = bridge::map_batch(&zb, &codebook)?;
            let con = losses::consistency_loss_with(&zb, &mapped, branches)?;
            let mut grad = losses::scatter_rows(&con.grad_p_rows, &assignments, codebook.len())?;
            grad.as_mut_slice().iter_mut().for_each(|g| *g *= config.weights.alpha_con);
            let orth = losses::orthogonality_loss(&codebook)?;
            crate::linalg::axpy(config.weights.beta_orth, orth.grad.as_slice(), grad.as_mut_slice());
            opt.step(codebook.vectors.as_mut_slice(), grad.as_slice())?;
        }
        if !codebook.vectors.is_finite() {
            return Err(Error::Divergence { epoch, last_finite_epoch: epoch.checked_sub(1) });
        }
    }
    Ok(codebook)
}

/// Pairs a frozen backbone with a codebook trained elsewhere. Neither input
/// is modified.
pub fn attach_codebook(backbone: &BackboneParams, codebook: &Codebook, coeffs: BlendingCoefficients) -> Result<TrainedModel> {
    codebook.validate()?;
    if codebook.dim() != backbone.dim() {
        return Err(Error::Compatibility { codebook_dim: codebook.dim(), backbone_dim: backbone.dim() });
    }
    coeffs.validate(true)?;
    Ok(TrainedModel {
        backbone: backbone.clone(),
        codebook: Some(codebook.clone()),
        coeffs,
        weights: LossWeights::TASK_ONLY,
        mode: ModelMode::PlugAndPlay,
        straight_through: false,
    })
}

/// FNV-1a over the bit patterns of every value, for detecting mutation.
pub fn checksum(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    values.iter().flat_map(|v| v.to_bits().to_le_bytes()).fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_world, make_openset_split, Protocol, SplitConfig, WorldConfig};

    fn small_split(seed: u64, sigma: f64, ids: usize, protocol: Protocol) -> OpenSetSplit {
        let world = generate_world(&WorldConfig::new(ids, 4, 6, sigma), seed).unwrap();
        let mut sc = SplitConfig::new(protocol);
        sc.train_samples_per_identity = 6;
        sc.eval_samples_per_identity = 4;
        make_openset_split(&world, &sc, seed).unwrap()
    }

    fn small_config(mode: ModelMode, seed: u64) -> TrainConfig {
        TrainConfig { mode, feature_dim: 4, codebook_size: 8, epochs: 20, seed, ..TrainConfig::default() }
    }

    #[test]
    fn naive_separates_two_noiseless_identities() {
        let split = small_split(3, 0.0, 2, Protocol::Closed);
        let config = TrainConfig { epochs: 50, ..small_config(ModelMode::Naive, 3) };
        let out = train(&split, &config).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
        assert!(out.epochs_run <= 50);
        assert!(out.model.codebook.is_none());
    }

    #[test]
    fn joint_training_is_deterministic() {
        let split = small_split(5, 0.5, 8, Protocol::Intra);
        let config = small_config(ModelMode::Joint, 11);
        let a = train(&split, &config).unwrap();
        let b = train(&split, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn orthogonality_falls_during_joint_training() {
        let mut lower = 0;
        for seed in 0..10 {
            let split = small_split(seed, 0.5, 8, Protocol::Intra);
            let out = train(&split, &small_config(ModelMode::Joint, seed)).unwrap();
            if out.final_orthogonality.unwrap() < out.initial_orthogonality.unwrap() {
                lower += 1;
            }
        }
        assert!(lower >= 9, "orthogonality fell on {lower}/10 seeds");
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let split = small_split(2, 0.5, 8, Protocol::Intra);
        let out = train(&split, &small_config(ModelMode::Joint, 2)).unwrap();
        let w = LossWeights::default();
        for row in &out.log {
            let expect = row.task + w.alpha_con * row.consistency + w.beta_orth * row.orthogonality;
            assert!((row.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn codebook_frozen_without_its_gradients() {
        let split = small_split(4, 0.5, 8, Protocol::Intra);
        let mut config = small_config(ModelMode::Joint, 4);
        config.weights = LossWeights { alpha_con: 0.0, beta_orth: 0.0, ..LossWeights::default() };
        config.straight_through = false;
        config.epochs = 1;
        let before = train(&split, &config).unwrap().model.codebook.unwrap();
        config.epochs = 15;
        let after = train(&split, &config).unwrap().model.codebook.unwrap();
        assert_eq!(checksum(before.vectors.as_slice()), checksum(after.vectors.as_slice()));
    }

    #[test]
    fn zero_map_weight_trains_naive() {
        let split = small_split(6, 0.5, 8, Protocol::Intra);
        let mut joint = small_config(ModelMode::Joint, 6);
        joint.coeffs = BlendingCoefficients::IDENTITY;
        let a = train(&split, &joint).unwrap();
        let b = train(&split, &small_config(ModelMode::Naive, 6)).unwrap();
        assert_eq!(a.model.mode, ModelMode::Naive);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let split = small_split(1, 0.5, 8, Protocol::Intra);
        let mut config = small_config(ModelMode::Naive, 1);
        config.backbone_optim.lr = 1e300;
        match train(&split, &config) {
            Err(Error::Divergence { epoch, last_finite_epoch }) => assert_eq!(last_finite_epoch, epoch.checked_sub(1)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn plug_and_play_mode_is_not_trainable() {
        let split = small_split(1, 0.5, 8, Protocol::Intra);
        assert!(matches!(train(&split, &small_config(ModelMode::PlugAndPlay, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn attach_leaves_inputs_untouched() {
        let split = small_split(8, 0.5, 8, Protocol::Intra);
        let naive = train(&split, &small_config(ModelMode::Naive, 8)).unwrap().model;
        let cb = fit_codebook(&naive.backbone, &split.train, &small_config(ModelMode::Joint, 9)).unwrap();
        let (bb_sum, cb_sum) = (checksum(&naive.backbone.to_flat()), checksum(cb.vectors.as_slice()));
        let attached = attach_codebook(&naive.backbone, &cb, BlendingCoefficients::default()).unwrap();
        let _ = attached.templates(&split.query).unwrap();
        assert_eq!(attached.mode, ModelMode::PlugAndPlay);
        assert_eq!(checksum(&attached.backbone.to_flat()), bb_sum);
        assert_eq!(checksum(attached.codebook.as_ref().unwrap().vectors.as_slice()), cb_sum);
    }

    #[test]
    fn attach_with_zero_map_weight_matches_naive() {
        let split = small_split(8, 0.5, 8, Protocol::Intra);
        let naive = train(&split, &small_config(ModelMode::Naive, 8)).unwrap().model;
        let cb = fit_codebook(&naive.backbone, &split.train, &small_config(ModelMode::Joint, 9)).unwrap();
        let attached = attach_codebook(&naive.backbone, &cb, BlendingCoefficients::IDENTITY).unwrap();
        assert_eq!(attached.templates(&split.query).unwrap(), naive.templates(&split.query).unwrap());
    }

    #[test]
    fn attach_rejects_mismatched_dimension() {
        let backbone = BackboneParams::zeros(4, 6, 3);
        let cb = Codebook::new(Matrix::zeros(2, 5)).unwrap();
        assert_eq!(
            attach_codebook(&backbone, &cb, BlendingCoefficients::default()).unwrap_err(),
            Error::Compatibility { codebook_dim: 5, backbone_dim: 4 }
        );
    }

    #[test]
    fn checksum_sees_single_bit_flips() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, f64::from_bits(2.0f64.to_bits() ^ 1), 3.0];
        assert_ne!(checksum(&a), checksum(&b));
    }
}
