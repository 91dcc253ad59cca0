//! Empirical checks of the alignment geometry: how often genuine pairs share
//! a codeword, how often impostor pairs collide, whether same-cell distances
//! contract by exactly `(1 - α)²`, and how many codewords are in use.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{self, BlendingCoefficients, Codebook};
use crate::features::{gaussian, seeded_rng, stream, RawObservation};
use crate::linalg::{self, Matrix};
use crate::trainer::TrainedModel;
use crate::{Error, Result};

/// Unordered index pairs `(i, j)`, `i < j`, whose labels agree (`genuine`)
/// or differ.
pub fn eligible_pairs(identities: &[usize], genuine: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..identities.len() {
        for j in i + 1..identities.len() {
            if (identities[i] == identities[j]) == genuine {
                out.push((i, j));
            }
        }
    }
    out
}

/// `n` pairs drawn uniformly with replacement from the eligible pairs, or all
/// of them when there are at most `n`.
pub fn sample_pairs<R: Rng + ?Sized>(identities: &[usize], genuine: bool, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let all = eligible_pairs(identities, genuine);
    if all.len() <= n {
        return all;
    }
    (0..n).map(|_| all[rng.random_range(0..all.len())]).collect()
}

fn same_assignment_rate(codebook: &Codebook, features: &Matrix, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("empty pair list".into()));
    }
    let (_, assignments) = bridge::map_batch(features, codebook)?;
    let same = pairs.iter().filter(|&&(i, j)| assignments[i].index == assignments[j].index).count();
    Ok(same as f64 / pairs.len() as f64)
}

/// Frequency with which genuine pairs land on the same codeword. The caller
/// supplies same-identity pairs of feature rows.
pub fn estimate_p_same(codebook: &Codebook, features: &Matrix, genuine_pairs: &[(usize, usize)]) -> Result<f64> {
    same_assignment_rate(codebook, features, genuine_pairs)
}

/// Frequency with which impostor pairs land on the same codeword.
pub fn estimate_p_collide(codebook: &Codebook, features: &Matrix, impostor_pairs: &[(usize, usize)]) -> Result<f64> {
    same_assignment_rate(codebook, features, impostor_pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub p_same: f64,
    pub p_collide: f64,
    pub n_genuine_pairs: usize,
    pub n_impostor_pairs: usize,
}

/// Embeds `obs` with the model's backbone and estimates both rates from up to
/// `n_pairs` sampled pairs each. Assignment uses the unblended features, so
/// the result does not depend on the blending coefficients.
pub fn assignment_stats(model: &TrainedModel, obs: &[RawObservation], n_pairs: usize, seed: u64) -> Result<AssignmentStats> {
    let codebook = model.codebook.as_ref().ok_or_else(|| Error::Input("model has no codebook".into()))?;
    let z = model.embed_observations(obs)?;
    let ids: Vec<usize> = obs.iter().map(|o| o.identity).collect();
    let mut rng = seeded_rng(seed, stream::DIAGNOSTICS);
    let genuine = sample_pairs(&ids, true, n_pairs, &mut rng);
    let impostor = sample_pairs(&ids, false, n_pairs, &mut rng);
    Ok(AssignmentStats {
        p_same: estimate_p_same(codebook, &z, &genuine)?,
        p_collide: estimate_p_collide(codebook, &z, &impostor)?,
        n_genuine_pairs: genuine.len(),
        n_impostor_pairs: impostor.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub alpha: f64,
    pub n_same_cell_pairs: usize,
    /// Mean of `||T(z1) - T(z2)||² / ||z1 - z2||²` over same-cell pairs.
    pub mean_ratio: Option<f64>,
    /// `max |ratio - (1 - α)²|`
    pub max_abs_deviation_exact: Option<f64>,
    /// `max |ratio / (1 - α)² - 1|`, undefined at `α = 1`.
    pub max_rel_deviation_exact: Option<f64>,
    /// `max |ratio - (1 - α)|`: distance from a linear-in-α shrink of the
    /// squared norm.
    pub stated_factor_deviation: Option<f64>,
    pub warning: Option<String>,
}

/// Measures the squared-distance ratio over the supplied pairs that share a
/// cell; other pairs are skipped.
pub fn verify_contraction(codebook: &Codebook, pairs: &[(&[f64], &[f64])], alpha: f64) -> Result<ContractionReport> {
    let coeffs = BlendingCoefficients::from_alpha(alpha)?;
    let exact = (1.0 - alpha) * (1.0 - alpha);
    let stated = 1.0 - alpha;
    let mut n = 0usize;
    let mut sum = 0.0;
    let (mut abs_dev, mut rel_dev, mut stated_dev) = (0.0f64, 0.0f64, 0.0f64);
    for &(z1, z2) in pairs {
        let a1 = bridge::nearest_assignment(z1, codebook)?;
        let a2 = bridge::nearest_assignment(z2, codebook)?;
        let before = linalg::squared_distance(z1, z2);
        if a1.index != a2.index || before == 0.0 {
            continue;
        }
        let p = codebook.codeword(a1.index);
        let t1 = bridge::blend(z1, p, coeffs)?;
        let t2 = bridge::blend(z2, p, coeffs)?;
        let ratio = linalg::squared_distance(&t1, &t2) / before;
        n += 1;
        sum += ratio;
        abs_dev = abs_dev.max((ratio - exact).abs());
        if exact > 0.0 {
            rel_dev = rel_dev.max((ratio / exact - 1.0).abs());
        }
        stated_dev = stated_dev.max((ratio - stated).abs());
    }
    if n == 0 {
        return Ok(ContractionReport {
            alpha,
            n_same_cell_pairs: 0,
            mean_ratio: None,
            max_abs_deviation_exact: None,
            max_rel_deviation_exact: None,
            stated_factor_deviation: None,
            warning: Some(format!("none of {} pairs share a cell", pairs.len())),
        });
    }
    Ok(ContractionReport {
        alpha,
        n_same_cell_pairs: n,
        mean_ratio: Some(sum / n as f64),
        max_abs_deviation_exact: Some(abs_dev),
        max_rel_deviation_exact: (exact > 0.0).then_some(rel_dev),
        stated_factor_deviation: Some(stated_dev),
        warning: None,
    })
}

/// Pulls `z` toward codeword `k` along the segment between them until `k` is
/// its strict nearest codeword.
pub fn project_into_cell(codebook: &Codebook, k: usize, z: &[f64]) -> Result<Vec<f64>> {
    if k >= codebook.len() {
        return Err(Error::Index { what: "codeword", index: k, len: codebook.len() });
    }
    let p = codebook.codeword(k);
    let mut t = 1.0;
    for _ in 0..200 {
        let candidate: Vec<f64> = p.iter().zip(z).map(|(pv, zv)| pv + t * (zv - pv)).collect();
        if bridge::nearest_assignment(&candidate, codebook)?.index == k {
            return Ok(candidate);
        }
        t *= 0.5;
    }
    Err(Error::Input(format!("codeword {k} has an empty cell (duplicate of a lower-index row)")))
}

/// Two distinct points in the cell of codeword `k`, drawn as Gaussian
/// perturbations of scale `spread` and projected into the cell.
pub fn same_cell_pair<R: Rng + ?Sized>(codebook: &Codebook, k: usize, spread: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let draw = |rng: &mut R| -> Result<Vec<f64>> {
        let z: Vec<f64> = codebook.codeword(k).iter().map(|p| p + spread * gaussian(rng)).collect();
        project_into_cell(codebook, k, &z)
    };
    Ok((draw(rng)?, draw(rng)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub counts: Vec<usize>,
    pub dead: usize,
    pub dead_fraction: f64,
}

pub fn codebook_utilization(codebook: &Codebook, batch: &Matrix) -> Result<Utilization> {
    let (_, assignments) = bridge::map_batch(batch, codebook)?;
    let mut counts = vec![0usize; codebook.len()];
    for a in &assignments {
        counts[a.index] += 1;
    }
    let dead = counts.iter().filter(|&&c| c == 0).count();
    Ok(Utilization { dead_fraction: dead as f64 / codebook.len() as f64, counts, dead })
}
