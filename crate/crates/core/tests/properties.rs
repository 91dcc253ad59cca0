use palmbridge_core::bridge::{self, nearest_assignment, BlendingCoefficients, Codebook};
use palmbridge_core::diagnostics::{assignment_stats, same_cell_pair, verify_contraction};
use palmbridge_core::features::{generate_world, make_openset_split, seeded_rng, Protocol, SplitConfig, WorldConfig};
use palmbridge_core::losses::{
    consistency_loss, consistency_loss_with, orthogonality_value, total_loss, ConsistencyBranches, LossInputs, LossWeights,
};
use palmbridge_core::trainer::{train, ModelMode, TrainConfig};
use palmbridge_core::verify::{compute_eer, compute_roc, Score, ScoreKind, ScoreSet};
use palmbridge_core::{BackboneParams, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn codebook_and_dim() -> impl Strategy<Value = Codebook> {
    (1usize..8, 1usize..8).prop_flat_map(|(k, d)| matrix(k, d, 3.0)).prop_map(|m| Codebook::new(m).unwrap())
}

/// Brute-force nearest codeword: first index of the minimum.
fn scan_nearest(z: &[f64], cb: &Codebook) -> usize {
    let dists: Vec<f64> = (0..cb.len()).map(|k| cb.codeword(k).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

/// EER by direct counting at every candidate threshold.
fn oracle_eer(gen: &[f64], imp: &[f64]) -> f64 {
    let mut cands: Vec<f64> = gen.iter().chain(imp).cloned().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let rates = |t: f64| {
        let far = imp.iter().filter(|&&s| s >= t).count() as f64 / imp.len() as f64;
        let frr = gen.iter().filter(|&&s| s < t).count() as f64 / gen.len() as f64;
        (far, frr)
    };
    for w in cands.windows(2) {
        let (a0, r0) = rates(w[0]);
        let (a1, r1) = rates(w[1]);
        if r0 < a0 && r1 >= a1 {
            let f = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return a0 + f * (a1 - a0);
        }
    }
    unreachable!("FRR is 0 at the lowest threshold and 1 at the sentinel")
}

fn score_set(gen: &[f64], imp: &[f64]) -> ScoreSet {
    let scores = gen
        .iter()
        .map(|&value| Score { value, genuine: true })
        .chain(imp.iter().map(|&value| Score { value, genuine: false }))
        .collect();
    ScoreSet { scores, kind: ScoreKind::NegativeL2 }
}

fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Coarse values make ties common.
    let value = (-20i32..20).prop_map(|v| v as f64 * 0.25);
    (prop::collection::vec(value.clone(), 1..250), prop::collection::vec(value, 1..250))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_matches_scan(cb in codebook_and_dim(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let z: Vec<f64> = (0..cb.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        prop_assert_eq!(nearest_assignment(&z, &cb).unwrap().index, scan_nearest(&z, &cb));
    }

    #[test]
    fn duplicate_rows_resolve_to_lowest_index(cb in codebook_and_dim(), pick in any::<prop::sample::Index>()) {
        let k = pick.index(cb.len());
        let mut rows: Vec<f64> = cb.vectors.as_slice().to_vec();
        rows.extend_from_slice(cb.codeword(k));
        let dup = Codebook::new(Matrix::from_vec(cb.len() + 1, cb.dim(), rows).unwrap()).unwrap();
        let a = nearest_assignment(cb.codeword(k), &dup).unwrap();
        prop_assert!(a.index <= k);
        prop_assert_eq!(a.squared_distance, 0.0);
    }

    #[test]
    fn assignment_follows_row_permutation(cb in codebook_and_dim(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 1);
        let z: Vec<f64> = (0..cb.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut perm: Vec<usize> = (0..cb.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let rows = perm.iter().flat_map(|&i| cb.codeword(i).to_vec()).collect();
        let permuted = Codebook::new(Matrix::from_vec(cb.len(), cb.dim(), rows).unwrap()).unwrap();
        let a = nearest_assignment(&z, &cb).unwrap();
        let b = nearest_assignment(&z, &permuted).unwrap();
        prop_assert_eq!(a.squared_distance, b.squared_distance);
    }

    #[test]
    fn same_cell_pairs_contract_by_square(cb in codebook_and_dim(), seed in any::<u64>(), alpha in 0.0f64..0.99) {
        let mut rng = seeded_rng(seed, 2);
        let k = scan_nearest(cb.codeword(rng.random_range(0..cb.len())), &cb);
        let (z1, z2) = same_cell_pair(&cb, k, 1.0, &mut rng).unwrap();
        let report = verify_contraction(&cb, &[(&z1, &z2)], alpha).unwrap();
        if report.n_same_cell_pairs == 1 {
            prop_assert!(report.max_abs_deviation_exact.unwrap() <= 1e-9 * (1.0 - alpha) * (1.0 - alpha) + 1e-15);
        }
    }

    #[test]
    fn orthogonality_ignores_row_scale(cb in codebook_and_dim(), scales in prop::collection::vec(0.01f64..100.0, 8)) {
        prop_assume!(cb.vectors.iter_rows().all(|r| r.iter().any(|&v| v != 0.0)));
        let mut scaled = cb.clone();
        for (i, s) in (0..cb.len()).zip(&scales) {
            scaled.vectors.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let (a, b) = (orthogonality_value(&cb).unwrap(), orthogonality_value(&scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn balanced_consistency_gradients_are_opposite(z in matrix(5, 3, 2.0), p in matrix(5, 3, 2.0)) {
        let con = consistency_loss(&z, &p, 1.0).unwrap();
        for (gz, gp) in con.grad_z.as_slice().iter().zip(con.grad_p_rows.as_slice()) {
            prop_assert_eq!(*gz, -*gp);
        }
    }

    #[test]
    fn silenced_branches_give_exact_zero(z in matrix(4, 3, 2.0), p in matrix(4, 3, 2.0)) {
        let no_feature = consistency_loss(&z, &p, 0.0).unwrap();
        prop_assert!(no_feature.grad_z.as_slice().iter().all(|&g| g == 0.0));
        let no_codebook = consistency_loss_with(&z, &p, ConsistencyBranches { codebook_pull: 0.0, feature_pull: 0.25 }).unwrap();
        prop_assert!(no_codebook.grad_p_rows.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn report_total_is_weighted_sum(
        seed in any::<u64>(),
        alpha_con in 0.0f64..3.0,
        beta_orth in 0.0f64..3.0,
        lambda in 0.0f64..2.0,
        st in any::<bool>(),
    ) {
        let mut rng = seeded_rng(seed, 3);
        let params = BackboneParams::random(4, 5, 3, &mut rng);
        let raw = Matrix::from_vec(6, 5, (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let cb = Codebook::new(Matrix::from_vec(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let weights = LossWeights { lambda_con_inner: lambda, alpha_con, beta_orth };
        let r = total_loss(&LossInputs {
            params: &params, raw: &raw, labels: &labels, codebook: Some(&cb),
            coeffs: BlendingCoefficients::default(), weights, straight_through: st,
        }).unwrap();
        let expect = r.task + alpha_con * r.consistency + beta_orth * r.orthogonality;
        prop_assert!((r.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn eer_matches_counting_oracle((gen, imp) in scores_strategy()) {
        let got = compute_eer(&score_set(&gen, &imp)).unwrap().eer;
        prop_assert!((got - oracle_eer(&gen, &imp)).abs() <= 1e-9);
    }

    #[test]
    fn eer_survives_positive_affine_maps((gen, imp) in scores_strategy(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        let base = compute_eer(&score_set(&gen, &imp)).unwrap().eer;
        let map = |v: &f64| a * v + b;
        let moved = compute_eer(&score_set(&gen.iter().map(map).collect::<Vec<_>>(), &imp.iter().map(map).collect::<Vec<_>>())).unwrap().eer;
        prop_assert!((base - moved).abs() <= 1e-9);
    }

    #[test]
    fn roc_is_monotone((gen, imp) in scores_strategy(), n in 2usize..60) {
        let roc = compute_roc(&score_set(&gen, &imp), n).unwrap();
        prop_assert_eq!(roc.len(), n);
        for w in roc.windows(2) {
            prop_assert!(w[0].far <= w[1].far && w[0].gar <= w[1].gar);
        }
        prop_assert_eq!(roc.last().unwrap().gar, 1.0);
    }

    #[test]
    fn embedding_is_affine(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seeded_rng(seed, 4);
        let p = BackboneParams::random(4, 6, 2, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (ex, ey, ez) = (p.embed(&x).unwrap(), p.embed(&y).unwrap(), p.embed(&mix).unwrap());
        let e0 = p.embed(&[0.0; 6]).unwrap();
        for d in 0..4 {
            let expect = a * (ex[d] - e0[d]) + b * (ey[d] - e0[d]) + e0[d];
            prop_assert!((ez[d] - expect).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn open_set_splits_are_disjoint(seed in any::<u64>()) {
        let world = generate_world(&WorldConfig::new(12, 3, 4, 0.5), seed).unwrap();
        let split = make_openset_split(&world, &SplitConfig::new(Protocol::Intra), seed).unwrap();
        for id in &split.eval_identities {
            prop_assert!(!split.train_identities.contains(id));
        }
        prop_assert!(split.train.iter().all(|o| split.train_identities.contains(&o.identity)));
        prop_assert!(split.gallery.iter().chain(&split.query).all(|o| split.eval_identities.contains(&o.identity)));
    }
}

#[test]
fn latent_samples_have_stated_moments() {
    let world = generate_world(&WorldConfig::new(2, 3, 3, 0.5), 21).unwrap();
    let mut rng = seeded_rng(21, 9);
    let n = 40_000;
    let samples: Vec<Vec<f64>> = (0..n).map(|_| world.sample_latent(1, 0, &mut rng).unwrap()).collect();
    let mu = &world.identity_means[1];
    for d in 0..3 {
        let mean = samples.iter().map(|s| s[d]).sum::<f64>() / n as f64;
        // 5 standard errors
        assert!((mean - mu[d]).abs() < 5.0 * 0.5 / (n as f64).sqrt());
    }
    for i in 0..3 {
        for j in 0..3 {
            let cov = samples.iter().map(|s| (s[i] - mu[i]) * (s[j] - mu[j])).sum::<f64>() / n as f64;
            let expect = if i == j { 0.25 } else { 0.0 };
            assert!((cov - expect).abs() < 0.01, "cov[{i}][{j}] = {cov}");
        }
    }
}

#[test]
fn assignment_rates_do_not_depend_on_blend() {
    let world = generate_world(&WorldConfig::new(10, 4, 6, 0.5), 3).unwrap();
    let mut sc = SplitConfig::new(Protocol::Intra);
    sc.train_samples_per_identity = 6;
    let split = make_openset_split(&world, &sc, 3).unwrap();
    let config = TrainConfig { mode: ModelMode::Joint, feature_dim: 4, codebook_size: 6, epochs: 10, seed: 3, ..TrainConfig::default() };
    let model = train(&split, &config).unwrap().model;
    let obs: Vec<_> = split.gallery.iter().chain(&split.query).cloned().collect();
    let base = assignment_stats(&model, &obs, 500, 1).unwrap();
    for alpha in [0.0, 0.3, 0.9] {
        let m = model.with_coeffs(BlendingCoefficients::from_alpha(alpha).unwrap());
        assert_eq!(assignment_stats(&m, &obs, 500, 1).unwrap(), base);
    }
}

#[test]
fn aligned_batch_lies_between_feature_and_codeword() {
    let cb = Codebook::new(Matrix::from_vec(2, 2, vec![0.0, 0.0, 10.0, 10.0]).unwrap()).unwrap();
    let z = Matrix::from_vec(2, 2, vec![1.0, 2.0, 9.0, 8.0]).unwrap();
    let out = bridge::align(&z, &cb, BlendingCoefficients::from_alpha(0.5).unwrap()).unwrap();
    assert_eq!(out.as_slice(), &[0.5, 1.0, 9.5, 9.0]);
}
