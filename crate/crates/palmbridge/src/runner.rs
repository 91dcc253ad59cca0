//! Seeded experiment pipeline: world → split → train → verify → diagnose,
//! plus the one-axis sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use palmbridge_core::bridge::{self, BlendingCoefficients};
use palmbridge_core::diagnostics::{assignment_stats, codebook_utilization, same_cell_pair, verify_contraction};
use palmbridge_core::features::{generate_world, make_openset_split, seeded_rng, stream, OpenSetSplit, RawObservation};
use palmbridge_core::trainer::{attach_codebook, fit_codebook, train, LogRow, TrainOutcome, TrainedModel};
use palmbridge_core::verify::{
    compute_eer, compute_roc, enroll, gi_histogram, rank1_accuracy, sample_variance, score_pairs, GiHistogram, RocPoint, ScoreSet,
};
use rand::Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, Result};
use crate::formats::{self, Checkpoint, Contraction, Diagnostics, Metrics};

/// Seed offset for the codebook fitted in the plug-and-play variant, so it
/// never shares a random stream with the backbone it is attached to.
pub const PLUG_AND_PLAY_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn make_split(config: &ExperimentConfig, seed: u64) -> Result<OpenSetSplit> {
    let world = generate_world(&config.world_config(), seed)?;
    Ok(make_openset_split(&world, &config.split_config(), seed)?)
}

/// Wall-clock split of one inference pass over the queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub backbone_secs: f64,
    pub bridge_secs: f64,
}

impl Timing {
    pub fn overhead_percent(&self) -> f64 {
        if self.backbone_secs > 0.0 {
            100.0 * self.bridge_secs / self.backbone_secs
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub model: TrainedModel,
    pub log: Vec<LogRow>,
    pub scores: ScoreSet,
    pub metrics: Metrics,
    pub roc: Vec<RocPoint>,
    pub gi: GiHistogram,
    pub diagnostics: Option<Diagnostics>,
    pub timing: Timing,
}

impl VariantRun {
    pub fn summary_line(&self) -> String {
        let mut line = format!(
            "seed {} {:<13} EER {:.4} ACC {:.4}",
            self.seed,
            self.variant.name(),
            self.metrics.eer,
            self.metrics.acc
        );
        match &self.diagnostics {
            Some(d) => line += &format!(" p_same {:.4} p_collide {:.4}", d.p_same, d.p_collide),
            None => line += " p_same - p_collide -",
        }
        if self.model.codebook.is_some() {
            line += &format!(" bridge overhead {:.1}%", self.timing.overhead_percent());
        }
        line
    }
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub split: OpenSetSplit,
    pub runs: Vec<VariantRun>,
}

fn eval_observations(split: &OpenSetSplit) -> Vec<RawObservation> {
    split.gallery.iter().chain(&split.query).cloned().collect()
}

fn diagnostics(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    split: &OpenSetSplit,
    model: &TrainedModel,
    orthogonality: (Option<f64>, Option<f64>),
) -> Result<Option<Diagnostics>> {
    let Some(codebook) = &model.codebook else {
        return Ok(None);
    };
    let n_pairs = config.eval.diagnostic_pairs;
    let eval_obs = eval_observations(split);
    let eval_stats = assignment_stats(model, &eval_obs, n_pairs, seed)?;
    let train_stats = assignment_stats(model, &split.train, n_pairs, seed)?;

    let z_eval = model.embed_observations(&eval_obs)?;
    let util = codebook_utilization(codebook, &z_eval)?;

    let mut rng = seeded_rng(seed, stream::SAMPLING);
    let spread = config.world.nuisance_sigma.max(1e-3);
    let mut pairs = Vec::with_capacity(config.eval.contraction_pairs);
    for _ in 0..config.eval.contraction_pairs {
        let k = rng.random_range(0..codebook.len());
        // Rows duplicating a lower-index row own no cell; skip them.
        if let Ok(pair) = same_cell_pair(codebook, k, spread, &mut rng) {
            pairs.push(pair);
        }
    }
    let refs: Vec<(&[f64], &[f64])> = pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let report = verify_contraction(codebook, &refs, model.coeffs.alpha())?;

    Ok(Some(Diagnostics {
        variant: variant.name().into(),
        seed,
        p_same: eval_stats.p_same,
        p_collide: eval_stats.p_collide,
        p_same_train: train_stats.p_same,
        p_collide_train: train_stats.p_collide,
        contraction: Contraction {
            alpha: report.alpha,
            n_pairs: report.n_same_cell_pairs,
            exact_dev: report.max_abs_deviation_exact,
            stated_dev: report.stated_factor_deviation,
            mean_ratio: report.mean_ratio,
        },
        utilization: util.counts,
        dead_fraction: util.dead_fraction,
        orthogonality_initial: orthogonality.0,
        orthogonality_final: orthogonality.1,
        config_hash: config.hash(),
        config: config.clone(),
    }))
}

fn time_inference(model: &TrainedModel, queries: &[RawObservation]) -> Result<Timing> {
    let t0 = Instant::now();
    let z = model.embed_observations(queries)?;
    let backbone_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    if let Some(cb) = &model.codebook {
        bridge::align(&z, cb, model.coeffs)?;
    }
    Ok(Timing { backbone_secs, bridge_secs: t1.elapsed().as_secs_f64() })
}

/// Verification and diagnostics for an already built model.
pub fn evaluate(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    split: &OpenSetSplit,
    model: TrainedModel,
    outcome: Option<&TrainOutcome>,
) -> Result<VariantRun> {
    let kind = config.experiment.score;
    let gallery = enroll(&model, &split.gallery)?;
    let scores = score_pairs(&model, &gallery, &split.query, kind)?;
    let eer = compute_eer(&scores)?;
    let acc = rank1_accuracy(&model, &gallery, &split.query, kind)?;
    let (n_genuine, n_impostor) = scores.counts();
    let metrics = Metrics {
        variant: variant.name().into(),
        seed,
        eer: eer.eer,
        acc,
        threshold: eer.threshold,
        far_at_threshold: eer.far_at_threshold,
        frr_at_threshold: eer.frr_at_threshold,
        n_genuine,
        n_impostor,
        genuine_variance: sample_variance(scores.genuine_values()),
        impostor_variance: sample_variance(scores.impostor_values()),
        epochs_run: outcome.map_or(0, |o| o.epochs_run),
        train_accuracy: outcome.map(|o| o.train_accuracy),
        config_hash: config.hash(),
        config: config.clone(),
    };
    let roc = compute_roc(&scores, config.eval.roc_points)?;
    let gi = gi_histogram(&scores, config.eval.gi_bins)?;
    let orth = outcome.map_or((None, None), |o| (o.initial_orthogonality, o.final_orthogonality));
    let diagnostics = diagnostics(config, variant, seed, split, &model, orth)?;
    let timing = time_inference(&model, &split.query)?;
    Ok(VariantRun {
        variant,
        seed,
        log: outcome.map(|o| o.log.clone()).unwrap_or_default(),
        model,
        scores,
        metrics,
        roc,
        gi,
        diagnostics,
        timing,
    })
}

/// Trains (or attaches) and evaluates one variant. `naive` supplies the
/// frozen backbone for plug-and-play; it is trained on demand otherwise.
pub fn run_variant(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    split: &OpenSetSplit,
    naive: Option<&TrainedModel>,
) -> Result<VariantRun> {
    match variant {
        Variant::Naive | Variant::Bridge => {
            let outcome = train(split, &config.train_config(variant, seed))?;
            evaluate(config, variant, seed, split, outcome.model.clone(), Some(&outcome))
        }
        Variant::PlugAndPlay => {
            let owned;
            let naive = match naive {
                Some(m) => m,
                None => {
                    owned = train(split, &config.train_config(Variant::Naive, seed))?.model;
                    &owned
                }
            };
            let codebook = fit_codebook(
                &naive.backbone,
                &split.train,
                &config.train_config(Variant::PlugAndPlay, seed ^ PLUG_AND_PLAY_SEED_SALT),
            )?;
            let model = attach_codebook(&naive.backbone, &codebook, config.coeffs())?;
            evaluate(config, variant, seed, split, model, None)
        }
    }
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let split = make_split(config, seed)?;
    let mut runs: Vec<VariantRun> = Vec::new();
    // Naive first so plug-and-play can reuse its backbone.
    let mut order = config.experiment.variants.clone();
    order.sort_by_key(|v| *v != Variant::Naive);
    for variant in order {
        let naive = runs.iter().find(|r| r.variant == Variant::Naive).map(|r| &r.model);
        let run = run_variant(config, variant, seed, &split, naive)?;
        runs.push(run);
    }
    runs.sort_by_key(|r| config.experiment.variants.iter().position(|v| *v == r.variant));
    Ok(SeedRun { seed, split, runs })
}

pub fn experiment_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_root().join(&config.experiment.name)
}

pub fn seed_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    experiment_dir(config).join(format!("seed-{seed}"))
}

pub fn write_variant(dir: &Path, config: &ExperimentConfig, run: &VariantRun) -> Result<()> {
    formats::write_json(&dir.join("metrics.json"), &run.metrics)?;
    formats::write_roc(&dir.join("roc.csv"), &run.roc)?;
    formats::write_gi(&dir.join("gi.csv"), &run.gi)?;
    formats::write_training_log(&dir.join("training_log.csv"), &run.log)?;
    formats::write_json(&dir.join("checkpoint.json"), &Checkpoint::new(&run.model, run.seed, config.hash()))?;
    if let Some(d) = &run.diagnostics {
        formats::write_json(&dir.join("diagnostics.json"), d)?;
    }
    Ok(())
}

pub fn write_seed(config: &ExperimentConfig, seed_run: &SeedRun) -> Result<()> {
    let dir = seed_dir(config, seed_run.seed);
    formats::write_split(&dir.join("split.csv"), &seed_run.split)?;
    for run in &seed_run.runs {
        write_variant(&dir.join(run.variant.name()), config, run)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub variant: String,
    pub eer: f64,
    pub acc: f64,
    pub genuine_variance: Option<f64>,
    pub p_same: Option<f64>,
    pub p_collide: Option<f64>,
    pub dead_fraction: Option<f64>,
}

impl SummaryRow {
    fn from_run(run: &VariantRun) -> Self {
        let d = run.diagnostics.as_ref();
        Self {
            seed: run.seed,
            variant: run.variant.name().into(),
            eer: run.metrics.eer,
            acc: run.metrics.acc,
            genuine_variance: run.metrics.genuine_variance,
            p_same: d.map(|d| d.p_same),
            p_collide: d.map(|d| d.p_collide),
            dead_fraction: d.map(|d| d.dead_fraction),
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs every seed in order, writing per-seed outputs and a merged
/// `summary.csv` when `write` is set. `report` receives each summary line.
pub fn run_experiment(config: &ExperimentConfig, write: bool, mut report: impl FnMut(&str)) -> Result<Vec<SeedRun>> {
    let mut out = Vec::new();
    for &seed in &config.experiment.seeds {
        let seed_run = run_seed(config, seed)?;
        for run in &seed_run.runs {
            report(&run.summary_line());
        }
        if write {
            write_seed(config, &seed_run)?;
        }
        out.push(seed_run);
    }
    if write {
        let rows: Vec<SummaryRow> = out.iter().flat_map(|s| s.runs.iter().map(SummaryRow::from_run)).collect();
        write_rows(&experiment_dir(config).join("summary.csv"), &rows)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// `w_map`, with `w_ori = 1 - w_map`.
    Blend,
    /// Codebook size `K`.
    Cardinality,
    /// Which auxiliary losses are switched on.
    Losses,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Blend => "blend",
            Self::Cardinality => "cardinality",
            Self::Losses => "losses",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blend" => Ok(Self::Blend),
            "cardinality" => Ok(Self::Cardinality),
            "losses" => Ok(Self::Losses),
            other => Err(CliError::Config(format!("axis: unknown axis {other:?} (expected blend, cardinality or losses)"))),
        }
    }
}

/// Loss-ablation rows: the task loss is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossRow {
    pub consistency: bool,
    pub orthogonality: bool,
}

impl LossRow {
    pub fn label(self) -> &'static str {
        match (self.consistency, self.orthogonality) {
            (false, false) => "bak",
            (true, false) => "bak+con",
            (false, true) => "bak+orth",
            (true, true) => "bak+con+orth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridPoint {
    Alpha(f64),
    Size(usize),
    Losses(LossRow),
}

impl GridPoint {
    pub fn label(&self) -> String {
        match self {
            Self::Alpha(a) => a.to_string(),
            Self::Size(k) => k.to_string(),
            Self::Losses(r) => r.label().into(),
        }
    }

    /// The config with this point applied; every other field is untouched.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match *self {
            Self::Alpha(a) => {
                let coeffs = BlendingCoefficients { w_ori: 1.0 - a, w_map: a };
                c.model.w_ori = coeffs.w_ori;
                c.model.w_map = coeffs.w_map;
            }
            Self::Size(k) => c.model.codebook_size = k,
            Self::Losses(row) => {
                if !row.consistency {
                    c.loss.alpha_con = 0.0;
                }
                if !row.orthogonality {
                    c.loss.beta_orth = 0.0;
                }
            }
        }
        c
    }
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    let bad = |m: String| CliError::Config(format!("grid: {m}"));
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("{s:?} is not a number")));
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step) = (parse(start)?, parse(end)?, parse(step)?);
            if !(step > 0.0) || end < start {
                return Err(bad(format!("range {text:?} needs start <= end and a positive step")));
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            // Rounded to 12 decimals so 0.1:0.9:0.2 yields 0.7, not 0.7000000000000001.
            Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
        }
        [_] => text.split(',').map(parse).collect(),
        _ => Err(bad(format!("{text:?} is neither a list nor start:end:step"))),
    }
}

/// Grid syntax: comma-separated values or `start:end:step` for numeric axes;
/// comma-separated rows (`bak`, `bak+con`, `bak+orth`, `bak+con+orth`) for
/// the loss axis.
pub fn parse_grid(axis: SweepAxis, text: &str) -> Result<Vec<GridPoint>> {
    let bad = |m: String| CliError::Config(format!("grid: {m}"));
    let points: Vec<GridPoint> = match axis {
        SweepAxis::Blend => parse_numbers(text)?
            .into_iter()
            .map(|a| if (0.0..=1.0).contains(&a) { Ok(GridPoint::Alpha(a)) } else { Err(bad(format!("blend {a} outside [0,1]"))) })
            .collect::<Result<_>>()?,
        SweepAxis::Cardinality => parse_numbers(text)?
            .into_iter()
            .map(|k| {
                if k >= 1.0 && k.fract() == 0.0 {
                    Ok(GridPoint::Size(k as usize))
                } else {
                    Err(bad(format!("codebook size {k} is not a positive integer")))
                }
            })
            .collect::<Result<_>>()?,
        SweepAxis::Losses => text
            .split(',')
            .map(|s| {
                let row = match s.trim() {
                    "bak" => LossRow { consistency: false, orthogonality: false },
                    "bak+con" => LossRow { consistency: true, orthogonality: false },
                    "bak+orth" => LossRow { consistency: false, orthogonality: true },
                    "bak+con+orth" => LossRow { consistency: true, orthogonality: true },
                    other => return Err(bad(format!("unknown loss row {other:?}"))),
                };
                Ok(GridPoint::Losses(row))
            })
            .collect::<Result<_>>()?,
    };
    if points.is_empty() {
        return Err(bad("empty grid".into()));
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub eer: f64,
    pub acc: f64,
    pub genuine_variance: Option<f64>,
    pub p_same: Option<f64>,
    pub p_collide: Option<f64>,
    pub dead_fraction: Option<f64>,
}

/// One bridge run per grid point and seed. Points whose config reduces to
/// the naive model (e.g. blend 0) are trained as such.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    grid: &[GridPoint],
    write: bool,
    mut report: impl FnMut(&str),
) -> Result<Vec<SweepRow>> {
    let dir = experiment_dir(base).join(format!("sweep-{}", axis.name()));
    let configs: Vec<ExperimentConfig> = grid.iter().map(|p| p.apply(base)).collect();
    for (p, c) in grid.iter().zip(&configs) {
        c.validate().map_err(|e| CliError::Config(format!("grid point {}: {e}", p.label())))?;
    }
    let mut rows = Vec::new();
    for &seed in &base.experiment.seeds {
        let split = make_split(base, seed)?;
        for (point, config) in grid.iter().zip(&configs) {
            let run = run_variant(config, Variant::Bridge, seed, &split, None)?;
            report(&format!("{}={} {}", axis.name(), point.label(), run.summary_line()));
            if write {
                let pdir = dir.join(point.label()).join(format!("seed-{seed}"));
                formats::write_json(&pdir.join("metrics.json"), &run.metrics)?;
            }
            let d = run.diagnostics.as_ref();
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: point.label(),
                seed,
                eer: run.metrics.eer,
                acc: run.metrics.acc,
                genuine_variance: run.metrics.genuine_variance,
                p_same: d.map(|d| d.p_same),
                p_collide: d.map(|d| d.p_collide),
                dead_fraction: d.map(|d| d.dead_fraction),
            });
        }
    }
    if write {
        write_rows(&dir.join("table.csv"), &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_grid_is_clean() {
        let g = parse_grid(SweepAxis::Blend, "0.1:0.9:0.2").unwrap();
        let labels: Vec<String> = g.iter().map(GridPoint::label).collect();
        assert_eq!(labels, ["0.1", "0.3", "0.5", "0.7", "0.9"]);
    }

    #[test]
    fn list_grids() {
        assert_eq!(parse_grid(SweepAxis::Cardinality, "64,512").unwrap(), vec![GridPoint::Size(64), GridPoint::Size(512)]);
        assert!(parse_grid(SweepAxis::Cardinality, "1.5").is_err());
        assert!(parse_grid(SweepAxis::Blend, "1.2").is_err());
        assert!(parse_grid(SweepAxis::Blend, "x").is_err());
        assert!(parse_grid(SweepAxis::Losses, "bak,bak+con+orth").is_ok());
        assert!(parse_grid(SweepAxis::Losses, "con").is_err());
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn loss_rows_only_touch_loss_weights() {
        let base = ExperimentConfig::default();
        let off = GridPoint::Losses(LossRow { consistency: false, orthogonality: false }).apply(&base);
        let con = GridPoint::Losses(LossRow { consistency: true, orthogonality: false }).apply(&base);
        assert_eq!((off.loss.alpha_con, off.loss.beta_orth), (0.0, 0.0));
        assert_eq!((con.loss.alpha_con, con.loss.beta_orth), (1.0, 0.0));
        let mut con_no_loss = con.clone();
        con_no_loss.loss = off.loss.clone();
        assert_eq!(con_no_loss, off);
    }

    #[test]
    fn blend_point_sets_both_weights() {
        let c = GridPoint::Alpha(0.9).apply(&ExperimentConfig::default());
        assert_eq!((c.model.w_ori, c.model.w_map), (1.0 - 0.9, 0.9));
        assert!(c.validate().is_ok());
    }
}
