//! Synthetic identity worlds and evaluation splits.
//!
//! Observations follow `z = μ_y + ε` in a `dim`-dimensional latent space, pass
//! through a per-domain affine shift, and are lifted to `raw_dim` by a frozen
//! random linear map whose top `dim × dim` block is the identity. The
//! backbone has to learn to undo the lift; the identity block makes exact
//! recovery expressible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

/// Independent RNG streams derived from one experiment seed.
pub mod stream {
    pub const WORLD: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DIAGNOSTICS: u64 = 3;
    pub const SAMPLING: u64 = 4;
}

/// Deterministic generator for `(seed, stream)`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Acquisition condition applied to latent features: `scale · z + bias`, with
/// extra isotropic noise on top of the world's nuisance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub bias: Vec<f64>,
    pub scale: f64,
    pub extra_sigma: f64,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self { bias: vec![0.0; dim], scale: 1.0, extra_sigma: 0.0 }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.bias.len() != dim {
            return Err(Error::Dimension { context: "domain bias", expected: dim, got: self.bias.len() });
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("domain scale must be positive and finite, got {}", self.scale)));
        }
        if !(self.extra_sigma >= 0.0 && self.extra_sigma.is_finite()) {
            return Err(Error::Config(format!("domain extra_sigma must be >= 0, got {}", self.extra_sigma)));
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("domain bias must be finite".into()));
        }
        Ok(())
    }
}

/// Domain description in a world config; the bias direction is drawn from the
/// world seed and scaled to `bias_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub scale: f64,
    pub bias_norm: f64,
    pub extra_sigma: f64,
}

impl DomainSpec {
    pub const IDENTITY: DomainSpec = DomainSpec { scale: 1.0, bias_norm: 0.0, extra_sigma: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub dim: usize,
    pub raw_dim: usize,
    pub nuisance_sigma: f64,
    /// Standard deviation of the identity-mean coordinates.
    pub mean_scale: f64,
    /// Minimum pairwise distance between identity means, in units of
    /// `nuisance_sigma`.
    pub min_separation: f64,
    /// Dimension of the subspace holding the identity means; `dim` makes
    /// them full rank. Nuisance is isotropic in all `dim` directions either
    /// way.
    pub identity_rank: usize,
    /// Domain 0 is the training domain.
    pub domains: Vec<DomainSpec>,
}

impl WorldConfig {
    pub fn new(num_identities: usize, dim: usize, raw_dim: usize, nuisance_sigma: f64) -> Self {
        Self {
            num_identities,
            dim,
            raw_dim,
            nuisance_sigma,
            mean_scale: 1.0,
            min_separation: 4.0,
            identity_rank: dim,
            domains: vec![DomainSpec::IDENTITY],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config(format!("need at least 2 identities, got {}", self.num_identities)));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        if self.raw_dim < self.dim {
            return Err(Error::Config(format!("raw_dim {} must be >= dim {}", self.raw_dim, self.dim)));
        }
        if self.identity_rank == 0 || self.identity_rank > self.dim {
            return Err(Error::Config(format!("identity_rank must be in 1..={}, got {}", self.dim, self.identity_rank)));
        }
        if !(self.nuisance_sigma >= 0.0 && self.nuisance_sigma.is_finite()) {
            return Err(Error::Config(format!("nuisance_sigma must be >= 0, got {}", self.nuisance_sigma)));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::Config(format!("mean_scale must be > 0, got {}", self.mean_scale)));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(Error::Config(format!("min_separation must be >= 0, got {}", self.min_separation)));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for d in &self.domains {
            if !(d.scale > 0.0 && d.scale.is_finite()) || !(d.bias_norm >= 0.0) || !(d.extra_sigma >= 0.0) {
                return Err(Error::Config(format!("invalid domain {d:?}")));
            }
        }
        Ok(())
    }
}

/// One labeled raw observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObservation {
    pub values: Vec<f64>,
    pub identity: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub identity_means: Vec<Vec<f64>>,
    pub nuisance_sigma: f64,
    pub domains: Vec<DomainShift>,
    pub raw_dim: usize,
    pub dim: usize,
    /// `raw_dim × dim`, top block is the identity.
    pub lift: Matrix,
    pub seed: u64,
    pub min_pairwise_distance: f64,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Draws identity means from `N(0, mean_scale² I)` restricted to a random
/// `identity_rank`-dimensional subspace, redrawing any mean closer than
/// `min_separation · nuisance_sigma` to an earlier one.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let dim = config.dim;
    let mut rng = seeded_rng(seed, stream::WORLD);
    let basis = identity_basis(dim, config.identity_rank, &mut rng);

    let min_dist = config.min_separation * config.nuisance_sigma;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(config.num_identities);
    for id in 0..config.num_identities {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let coords: Vec<f64> = (0..config.identity_rank).map(|_| config.mean_scale * gaussian(&mut rng)).collect();
            let candidate = match &basis {
                Some(b) => b.mul_vec(&coords)?,
                None => coords,
            };
            let ok = means.iter().all(|m| {
                let d = libm::sqrt(linalg::squared_distance(m, &candidate));
                d > 0.0 && d >= min_dist
            });
            if ok {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place identity {id} at separation {min_dist} after {MAX_PLACEMENT_ATTEMPTS} draws"
            )));
        }
    }

    let mut min_pairwise_distance = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = libm::sqrt(linalg::squared_distance(&means[i], &means[j]));
            min_pairwise_distance = min_pairwise_distance.min(d);
        }
    }

    let domains = config
        .domains
        .iter()
        .map(|spec| {
            let mut dir: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let n = linalg::norm(&dir);
            for v in &mut dir {
                *v = if n > 0.0 { *v / n * spec.bias_norm } else { 0.0 };
            }
            DomainShift { bias: dir, scale: spec.scale, extra_sigma: spec.extra_sigma }
        })
        .collect();

    let mut lift = Matrix::zeros(config.raw_dim, dim);
    let spread = 1.0 / libm::sqrt(dim as f64);
    for r in 0..config.raw_dim {
        for c in 0..dim {
            lift[(r, c)] = if r < dim {
                if r == c { 1.0 } else { 0.0 }
            } else {
                spread * gaussian(&mut rng)
            };
        }
    }

    Ok(SyntheticWorld {
        identity_means: means,
        nuisance_sigma: config.nuisance_sigma,
        domains,
        raw_dim: config.raw_dim,
        dim,
        lift,
        seed,
        min_pairwise_distance,
    })
}

/// Orthonormal `dim × rank` basis by Gram-Schmidt on Gaussian columns, or
/// `None` for the full space.
fn identity_basis<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Option<Matrix> {
    if rank == dim {
        return None;
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for c in &cols {
            let proj = linalg::dot(&v, c);
            linalg::axpy(-proj, c, &mut v);
        }
        let n = linalg::norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    let mut b = Matrix::zeros(dim, rank);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            b[(i, j)] = x;
        }
    }
    Some(b)
}

impl SyntheticWorld {
    pub fn num_identities(&self) -> usize {
        self.identity_means.len()
    }

    /// Assembles a world from explicit parts.
    pub fn from_parts(identity_means: Vec<Vec<f64>>, nuisance_sigma: f64, domains: Vec<DomainShift>, lift: Matrix, seed: u64) -> Result<Self> {
        let dim = lift.cols();
        if identity_means.len() < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if lift.rows() < dim {
            return Err(Error::Config("raw_dim must be >= dim".into()));
        }
        if domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for m in &identity_means {
            if m.len() != dim {
                return Err(Error::Dimension { context: "identity mean", expected: dim, got: m.len() });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("identity means must be finite".into()));
            }
        }
        for d in &domains {
            d.validate(dim)?;
        }
        let mut min_pairwise_distance = f64::INFINITY;
        for i in 0..identity_means.len() {
            for j in i + 1..identity_means.len() {
                let d = libm::sqrt(linalg::squared_distance(&identity_means[i], &identity_means[j]));
                if d == 0.0 {
                    return Err(Error::Config(format!("identity means {i} and {j} coincide")));
                }
                min_pairwise_distance = min_pairwise_distance.min(d);
            }
        }
        Ok(Self { identity_means, nuisance_sigma, domains, raw_dim: lift.rows(), dim, lift, seed, min_pairwise_distance })
    }

    fn check(&self, identity: usize, domain: usize) -> Result<()> {
        if identity >= self.identity_means.len() {
            return Err(Error::Index { what: "identity", index: identity, len: self.identity_means.len() });
        }
        if domain >= self.domains.len() {
            return Err(Error::Index { what: "domain", index: domain, len: self.domains.len() });
        }
        Ok(())
    }

    /// Domain-transformed latent vector `scale · (μ_y + ε) + bias`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, identity: usize, domain: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check(identity, domain)?;
        let shift = &self.domains[domain];
        let sigma = libm::sqrt(self.nuisance_sigma * self.nuisance_sigma + shift.extra_sigma * shift.extra_sigma);
        Ok(self.identity_means[identity]
            .iter()
            .zip(&shift.bias)
            .map(|(mu, b)| shift.scale * (mu + sigma * gaussian(rng)) + b)
            .collect())
    }

    /// Raw embedding of a latent vector through the frozen lift.
    pub fn embed_raw(&self, latent: &[f64]) -> Result<Vec<f64>> {
        self.lift.mul_vec(latent)
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, identity: usize, domain: usize, rng: &mut R) -> Result<RawObservation> {
        let latent = self.sample_latent(identity, domain, rng)?;
        Ok(RawObservation { values: self.embed_raw(&latent)?, identity, domain })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Disjoint identity halves, everything in domain 0.
    Intra,
    /// Train on domain 0, evaluate unseen identities in the other domains.
    CrossDomain,
    /// Same identities for training and evaluation.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub protocol: Protocol,
    /// Fraction of identities used for training in the open-set protocols.
    pub train_identity_fraction: f64,
    pub train_samples_per_identity: usize,
    pub eval_samples_per_identity: usize,
    pub gallery_fraction: f64,
}

impl SplitConfig {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            train_identity_fraction: 0.5,
            train_samples_per_identity: 8,
            eval_samples_per_identity: 6,
            gallery_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub protocol: Protocol,
    /// Sorted; the position of an identity is its classifier label.
    pub train_identities: Vec<usize>,
    pub eval_identities: Vec<usize>,
    pub train: Vec<RawObservation>,
    pub gallery: Vec<RawObservation>,
    pub query: Vec<RawObservation>,
}

impl OpenSetSplit {
    pub fn num_classes(&self) -> usize {
        self.train_identities.len()
    }

    pub fn class_of(&self, identity: usize) -> Option<usize> {
        self.train_identities.binary_search(&identity).ok()
    }

    /// Classifier labels of the training observations, in order.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|o| self.class_of(o.identity).expect("train label in train set")).collect()
    }
}

pub fn make_openset_split(world: &SyntheticWorld, config: &SplitConfig, seed: u64) -> Result<OpenSetSplit> {
    let n = world.num_identities();
    if !(config.gallery_fraction > 0.0 && config.gallery_fraction < 1.0) {
        return Err(Error::Config(format!("gallery_fraction must be in (0,1), got {}", config.gallery_fraction)));
    }
    if config.train_samples_per_identity == 0 {
        return Err(Error::Protocol("train_samples_per_identity must be >= 1".into()));
    }
    if config.eval_samples_per_identity < 2 {
        return Err(Error::Protocol("eval_samples_per_identity must be >= 2 to fill gallery and query".into()));
    }
    let mut rng = seeded_rng(seed, stream::SPLIT);

    let (mut train_ids, mut eval_ids) = match config.protocol {
        Protocol::Closed => ((0..n).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>()),
        Protocol::Intra | Protocol::CrossDomain => {
            if !(config.train_identity_fraction > 0.0 && config.train_identity_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "train_identity_fraction must be in (0,1), got {}",
                    config.train_identity_fraction
                )));
            }
            let n_train = libm::round(n as f64 * config.train_identity_fraction) as usize;
            if n_train == 0 || n_train >= n {
                return Err(Error::Protocol(format!("{n} identities cannot be split at fraction {}", config.train_identity_fraction)));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let eval = ids.split_off(n_train);
            (ids, eval)
        }
    };
    train_ids.sort_unstable();
    eval_ids.sort_unstable();

    let eval_domains: Vec<usize> = match config.protocol {
        Protocol::CrossDomain => {
            if world.domains.len() < 2 {
                return Err(Error::Protocol("cross_domain protocol needs at least two domains".into()));
            }
            (1..world.domains.len()).collect()
        }
        _ => vec![0],
    };

    let mut train = Vec::with_capacity(train_ids.len() * config.train_samples_per_identity);
    for &id in &train_ids {
        for _ in 0..config.train_samples_per_identity {
            train.push(world.sample_observation(id, 0, &mut rng)?);
        }
    }

    let per_id = config.eval_samples_per_identity;
    let n_gallery = (libm::round(per_id as f64 * config.gallery_fraction) as usize).clamp(1, per_id - 1);
    let mut gallery = Vec::with_capacity(eval_ids.len() * n_gallery);
    let mut query = Vec::with_capacity(eval_ids.len() * (per_id - n_gallery));
    for &id in &eval_ids {
        for j in 0..per_id {
            let domain = eval_domains[j % eval_domains.len()];
            let obs = world.sample_observation(id, domain, &mut rng)?;
            if j < n_gallery {
                gallery.push(obs);
            } else {
                query.push(obs);
            }
        }
    }

    Ok(OpenSetSplit { protocol: config.protocol, train_identities: train_ids, eval_identities: eval_ids, train, gallery, query })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(sigma: f64) -> SyntheticWorld {
        generate_world(&WorldConfig::new(4, 3, 5, sigma), 7).unwrap()
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(matches!(generate_world(&WorldConfig::new(1, 2, 2, 0.1), 0), Err(Error::Config(_))));
        assert!(matches!(generate_world(&WorldConfig::new(2, 0, 2, 0.1), 0), Err(Error::Config(_))));
        assert!(matches!(generate_world(&WorldConfig::new(2, 4, 3, 0.1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_samples_equal_mean() {
        let world = generate_world(&WorldConfig::new(2, 2, 2, 0.0), 7).unwrap();
        let mut rng = seeded_rng(1, 9);
        for id in 0..2 {
            let obs = world.sample_observation(id, 0, &mut rng).unwrap();
            assert_eq!(obs.values, world.identity_means[id]);
        }
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig::new(8, 4, 6, 0.3);
        assert_eq!(generate_world(&cfg, 11).unwrap(), generate_world(&cfg, 11).unwrap());
        assert_ne!(generate_world(&cfg, 11).unwrap(), generate_world(&cfg, 12).unwrap());
    }

    #[test]
    fn min_separation_respected() {
        let mut cfg = WorldConfig::new(16, 4, 4, 0.5);
        cfg.min_separation = 2.0;
        let world = generate_world(&cfg, 3).unwrap();
        assert!(world.min_pairwise_distance >= 1.0);
    }

    #[test]
    fn lift_top_block_is_identity() {
        let world = small_world(0.1);
        let v = [0.5, -1.0, 2.0];
        let raw = world.embed_raw(&v).unwrap();
        assert_eq!(&raw[..3], &v);
        assert_eq!(raw.len(), 5);
    }

    #[test]
    fn domain_bias_shifts_exactly() {
        let mut world = generate_world(&WorldConfig::new(2, 2, 2, 0.0), 7).unwrap();
        world.domains.push(DomainShift { bias: vec![0.25, -1.5], scale: 1.0, extra_sigma: 0.0 });
        let mut rng = seeded_rng(1, 1);
        let a = world.sample_observation(1, 0, &mut rng).unwrap();
        let b = world.sample_observation(1, 1, &mut rng).unwrap();
        assert_eq!(b.values, vec![a.values[0] + 0.25, a.values[1] - 1.5]);
    }

    #[test]
    fn out_of_range_indices() {
        let world = small_world(0.1);
        let mut rng = seeded_rng(0, 0);
        assert!(matches!(world.sample_observation(4, 0, &mut rng), Err(Error::Index { what: "identity", .. })));
        assert!(matches!(world.sample_observation(0, 1, &mut rng), Err(Error::Index { what: "domain", .. })));
    }

    #[test]
    fn intra_split_of_four() {
        let world = small_world(0.1);
        let split = make_openset_split(&world, &SplitConfig::new(Protocol::Intra), 5).unwrap();
        assert_eq!(split.train_identities.len(), 2);
        assert_eq!(split.eval_identities.len(), 2);
        assert!(split.train_identities.iter().all(|i| !split.eval_identities.contains(i)));
        assert!(split.gallery.iter().chain(&split.query).all(|o| split.eval_identities.contains(&o.identity)));
        assert!(split.train.iter().all(|o| split.train_identities.contains(&o.identity)));
    }

    #[test]
    fn closed_split_shares_identities() {
        let world = small_world(0.1);
        let split = make_openset_split(&world, &SplitConfig::new(Protocol::Closed), 5).unwrap();
        assert_eq!(split.train_identities, split.eval_identities);
    }

    #[test]
    fn cross_domain_requires_second_domain() {
        let world = small_world(0.1);
        let err = make_openset_split(&world, &SplitConfig::new(Protocol::CrossDomain), 5).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn cross_domain_evaluates_outside_domain_zero() {
        let mut cfg = WorldConfig::new(6, 3, 4, 0.2);
        cfg.domains.push(DomainSpec { scale: 1.2, bias_norm: 1.0, extra_sigma: 0.0 });
        let world = generate_world(&cfg, 1).unwrap();
        let split = make_openset_split(&world, &SplitConfig::new(Protocol::CrossDomain), 2).unwrap();
        assert!(split.train.iter().all(|o| o.domain == 0));
        assert!(split.gallery.iter().chain(&split.query).all(|o| o.domain != 0));
        assert!((linalg::norm(&world.domains[1].bias) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_identities_for_fraction() {
        let world = generate_world(&WorldConfig::new(2, 2, 2, 0.1), 7).unwrap();
        let mut cfg = SplitConfig::new(Protocol::Intra);
        cfg.train_identity_fraction = 0.9;
        assert!(matches!(make_openset_split(&world, &cfg, 0), Err(Error::Protocol(_))));
    }
}
