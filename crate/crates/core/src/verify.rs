//! Enrollment, pairwise scoring and verification metrics.
//!
//! A pair is accepted when its score is at least the threshold. For a
//! threshold `t`, `FAR(t)` is the fraction of impostor scores `>= t` and
//! `FRR(t)` the fraction of genuine scores `< t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::trainer::TrainedModel;
use crate::features::RawObservation;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `-||a - b||²`
    #[default]
    NegativeL2,
    Cosine,
}

pub fn similarity(a: &[f64], b: &[f64], kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::NegativeL2 => -linalg::squared_distance(a, b),
        ScoreKind::Cosine => {
            let n = linalg::norm(a) * linalg::norm(b);
            if n == 0.0 { 0.0 } else { linalg::dot(a, b) / n }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryTemplateSet {
    pub identities: Vec<usize>,
    /// One aligned template per row.
    pub templates: Matrix,
}

impl GalleryTemplateSet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

pub fn enroll(model: &TrainedModel, samples: &[RawObservation]) -> Result<GalleryTemplateSet> {
    let templates = model.templates(samples)?;
    if !templates.is_finite() {
        return Err(Error::Input("non-finite template".into()));
    }
    Ok(GalleryTemplateSet { identities: samples.iter().map(|s| s.identity).collect(), templates })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
    pub kind: ScoreKind,
}

impl ScoreSet {
    pub fn counts(&self) -> (usize, usize) {
        let g = self.scores.iter().filter(|s| s.genuine).count();
        (g, self.scores.len() - g)
    }

    pub fn genuine_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().filter(|s| s.genuine).map(|s| s.value)
    }

    pub fn impostor_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().filter(|s| !s.genuine).map(|s| s.value)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (g, i) = self.counts();
        if g == 0 || i == 0 {
            return Err(Error::Metric(format!("need genuine and impostor scores, got {g} genuine / {i} impostor")));
        }
        if self.scores.iter().any(|s| s.value.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        Ok((g, i))
    }
}

/// Scores every query template against every gallery template, query-major.
pub fn score_templates(gallery: &GalleryTemplateSet, query_ids: &[usize], queries: &Matrix, kind: ScoreKind) -> Result<ScoreSet> {
    if gallery.is_empty() || query_ids.is_empty() {
        return Err(Error::Input("gallery and query must be nonempty".into()));
    }
    if queries.rows() != query_ids.len() {
        return Err(Error::Dimension { context: "query templates", expected: query_ids.len(), got: queries.rows() });
    }
    if queries.cols() != gallery.templates.cols() {
        return Err(Error::Compatibility { codebook_dim: gallery.templates.cols(), backbone_dim: queries.cols() });
    }
    let mut scores = Vec::with_capacity(query_ids.len() * gallery.len());
    for (q, &qid) in queries.iter_rows().zip(query_ids) {
        for (t, &gid) in gallery.templates.iter_rows().zip(&gallery.identities) {
            scores.push(Score { value: similarity(q, t, kind), genuine: qid == gid });
        }
    }
    Ok(ScoreSet { scores, kind })
}

/// Aligns the queries exactly like enrollment and scores all pairs.
pub fn score_pairs(model: &TrainedModel, gallery: &GalleryTemplateSet, queries: &[RawObservation], kind: ScoreKind) -> Result<ScoreSet> {
    if queries.is_empty() {
        return Err(Error::Input("query set is empty".into()));
    }
    let q = model.templates(queries)?;
    let ids: Vec<usize> = queries.iter().map(|o| o.identity).collect();
    score_templates(gallery, &ids, &q, kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    /// Rates at the first discrete threshold where `FRR >= FAR`.
    pub far_at_threshold: f64,
    pub frr_at_threshold: f64,
    /// Jump of `FAR - FRR` across the two bracketing thresholds; bounds
    /// `|far_at_threshold - frr_at_threshold|`.
    pub crossing_gap: f64,
}

/// `(threshold, FAR, FRR)` at every distinct score, ascending, followed by a
/// sentinel that rejects everything.
fn operating_points(scores: &ScoreSet, n_gen: usize, n_imp: usize) -> Vec<(f64, f64, f64)> {
    let mut sorted: Vec<Score> = scores.scores.clone();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    let (ng, ni) = (n_gen as f64, n_imp as f64);
    let mut points = Vec::new();
    let mut gen_below = 0usize;
    let mut imp_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].value;
        points.push((t, (n_imp - imp_below) as f64 / ni, gen_below as f64 / ng));
        while i < sorted.len() && sorted[i].value == t {
            if sorted[i].genuine {
                gen_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));
    points
}

/// Equal error rate, linearly interpolated between the two thresholds that
/// bracket the FAR/FRR crossing.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let (ng, ni) = scores.check()?;
    let pts = operating_points(scores, ng, ni);
    let j = pts.iter().position(|&(_, far, frr)| frr >= far).expect("sentinel satisfies FRR >= FAR");
    debug_assert!(j >= 1);
    let (t0, far0, frr0) = pts[j - 1];
    let (t1, far1, frr1) = pts[j];
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let f = d0 / (d0 - d1);
    let eer = far0 + f * (far1 - far0);
    let threshold = if t1.is_finite() { t0 + f * (t1 - t0) } else { t0 };
    Ok(EerResult { eer, threshold, far_at_threshold: far1, frr_at_threshold: frr1, crossing_gap: d0 - d1 })
}

/// FAR and FRR at a single threshold.
pub fn rates_at(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (ng, ni) = scores.check()?;
    let fa = scores.impostor_values().filter(|&v| v >= threshold).count();
    let fr = scores.genuine_values().filter(|&v| v < threshold).count();
    Ok((fa as f64 / ni as f64, fr as f64 / ng as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub gar: f64,
}

/// GAR on an evenly spaced FAR grid over `[0, 1]`: the best genuine
/// acceptance of any threshold whose FAR does not exceed the grid value.
pub fn compute_roc(scores: &ScoreSet, n_points: usize) -> Result<Vec<RocPoint>> {
    if n_points < 2 {
        return Err(Error::Metric(format!("ROC needs at least 2 points, got {n_points}")));
    }
    let (ng, ni) = scores.check()?;
    let pts = operating_points(scores, ng, ni);
    let mut out = Vec::with_capacity(n_points);
    let mut j = pts.len() - 1;
    for k in 0..n_points {
        let far = if k == n_points - 1 { 1.0 } else { k as f64 / (n_points - 1) as f64 };
        // FAR falls with j, so walk j down while the next-lower threshold still fits.
        while j > 0 && pts[j - 1].1 <= far {
            j -= 1;
        }
        out.push(RocPoint { far, gar: 1.0 - pts[j].2 });
    }
    Ok(out)
}

/// Fraction of queries whose best-scoring gallery entry has their identity.
/// A best score shared with another identity counts as a miss.
pub fn rank1_from_templates(gallery: &GalleryTemplateSet, query_ids: &[usize], queries: &Matrix, kind: ScoreKind) -> Result<f64> {
    if gallery.is_empty() || query_ids.is_empty() {
        return Err(Error::Input("gallery and query must be nonempty".into()));
    }
    if let Some(missing) = query_ids.iter().find(|id| !gallery.identities.contains(id)) {
        return Err(Error::Protocol(format!("query identity {missing} is not enrolled")));
    }
    let mut hits = 0usize;
    for (q, &qid) in queries.iter_rows().zip(query_ids) {
        let mut best = f64::NEG_INFINITY;
        let mut best_ids: Vec<usize> = Vec::new();
        for (t, &gid) in gallery.templates.iter_rows().zip(&gallery.identities) {
            let s = similarity(q, t, kind);
            if s > best {
                best = s;
                best_ids.clear();
                best_ids.push(gid);
            } else if s == best && !best_ids.contains(&gid) {
                best_ids.push(gid);
            }
        }
        if best_ids.len() == 1 && best_ids[0] == qid {
            hits += 1;
        }
    }
    Ok(hits as f64 / query_ids.len() as f64)
}

pub fn rank1_accuracy(model: &TrainedModel, gallery: &GalleryTemplateSet, queries: &[RawObservation], kind: ScoreKind) -> Result<f64> {
    let q = model.templates(queries)?;
    let ids: Vec<usize> = queries.iter().map(|o| o.identity).collect();
    rank1_from_templates(gallery, &ids, &q, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiHistogram {
    /// `n_bins + 1` shared edges.
    pub edges: Vec<f64>,
    pub genuine: Vec<usize>,
    pub impostor: Vec<usize>,
}

pub fn gi_histogram(scores: &ScoreSet, n_bins: usize) -> Result<GiHistogram> {
    if n_bins == 0 {
        return Err(Error::Metric("n_bins must be >= 1".into()));
    }
    scores.check()?;
    let (lo, hi) = scores
        .scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.value), hi.max(s.value)));
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|k| if k == n_bins { hi } else { lo + k as f64 * width }).collect();
    let mut genuine = vec![0usize; n_bins];
    let mut impostor = vec![0usize; n_bins];
    for s in &scores.scores {
        let bin = if width > 0.0 { (((s.value - lo) / width) as usize).min(n_bins - 1) } else { 0 };
        if s.genuine {
            genuine[bin] += 1;
        } else {
            impostor[bin] += 1;
        }
    }
    Ok(GiHistogram { edges, genuine, impostor })
}

/// Unbiased sample variance; `None` below two values.
pub fn sample_variance(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64)
}
