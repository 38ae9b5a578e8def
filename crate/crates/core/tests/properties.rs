//! Property tests of module invariants.

use clusterdiff::bounds::{search_upper_bound, utilization_ratio, BoundSearchConfig};
use clusterdiff::dataset::{l2_normalize, make_synthetic, mine_knn, FeatureSet, SyntheticSpec};
use clusterdiff::diffusion::{
    heun_sample, sample_conditions, ConditionDist, DenoiserConfig, DiffusionModel, NoiseSchedule,
};
use clusterdiff::kmeans::{kmeans_fit, ClusterAssignment, KMeansConfig, Method};
use clusterdiff::metrics::{
    anmi, auroc, frechet_distance, gaussian_stats, hungarian_map, ContingencyTable, GaussianStats,
};
use clusterdiff::pipeline::ExperimentConfig;
use clusterdiff::rng;
use clusterdiff::temi::{head_probs, temi_init, temi_loss, PairBatch, TemiConfig};
use proptest::prelude::*;

fn feature_set(max_n: usize, max_d: usize) -> impl Strategy<Value = FeatureSet> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-10.0f32..10.0, n * d)
            .prop_map(move |v| FeatureSet::new(n, d, v, None).unwrap())
    })
}

fn labels(n: usize, k: u32) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..k, n)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_format_round_trips_bitwise(fs in feature_set(20, 5), with_labels in any::<bool>()) {
        let fs = if with_labels {
            let n = fs.n();
            FeatureSet::new(n, fs.dim(), fs.features().to_vec(), Some((0..n as u32).map(|i| i % 3).collect())).unwrap()
        } else {
            fs
        };
        let back = FeatureSet::from_bytes(&fs.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), fs.to_bytes());
        prop_assert_eq!(back.labels(), fs.labels());
    }

    #[test]
    fn normalization_is_idempotent(fs in feature_set(20, 5)) {
        prop_assume!(fs.features().chunks(fs.dim()).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let once = l2_normalize(&fs).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.features().iter().zip(twice.features()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn knn_matches_brute_force(fs in feature_set(64, 4), m_frac in 0.0f64..1.0) {
        prop_assume!(fs.n() >= 3);
        prop_assume!(fs.features().chunks(fs.dim()).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let m = 1 + (m_frac * (fs.n() - 2) as f64) as usize;
        let got = mine_knn(&fs, m).unwrap();
        for i in 0..fs.n() {
            let mut order: Vec<usize> = (0..fs.n()).filter(|&j| j != i).collect();
            let sim: Vec<f64> = (0..fs.n()).map(|j| cosine(fs.row(i), fs.row(j))).collect();
            order.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
            let want: Vec<u32> = order[..m].iter().map(|&j| j as u32).collect();
            prop_assert_eq!(got.of(i), &want[..], "row {}", i);
        }
    }

    #[test]
    fn synthetic_is_deterministic(modes in 1usize..5, per in 1usize..30, extra in 0usize..3, seed in any::<u64>()) {
        let dim = if extra == 0 { 2 } else { modes + extra };
        let spec = SyntheticSpec::balanced(modes, dim, per, 1.0, 0.05, seed);
        let a = make_synthetic(&spec).unwrap();
        prop_assert_eq!(a.n(), spec.total());
        prop_assert_eq!(a.to_bytes(), make_synthetic(&spec).unwrap().to_bytes());
    }

    #[test]
    fn kmeans_inertia_never_rises_and_repeats(fs in feature_set(40, 3), c in 1usize..5, seed in any::<u64>()) {
        prop_assume!(c <= fs.n());
        let cfg = KMeansConfig { restarts: 3, ..KMeansConfig::new(c, seed) };
        let fit = kmeans_fit(&fs, &cfg).unwrap();
        for w in fit.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let again = kmeans_fit(&fs, &cfg).unwrap();
        prop_assert_eq!(&fit.assignment, &again.assignment);
        prop_assert!((fit.assignment.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_uses_every_cluster_on_mixtures(modes in 2usize..6, seed in any::<u64>()) {
        let fs = make_synthetic(&SyntheticSpec::balanced(modes, 2, 40, 1.0, 0.05, seed)).unwrap();
        let fit = kmeans_fit(&fs, &KMeansConfig::new(modes, seed)).unwrap();
        prop_assert_eq!(utilization_ratio(&fit.assignment), 1.0);
    }

    #[test]
    fn head_probabilities_are_distributions(logits in prop::collection::vec(-200.0f64..200.0, 1..12), tau in 0.01f64..2.0) {
        let p = head_probs(&logits, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn symmetrized_loss_ignores_pair_order(seed in any::<u64>(), gamma in 0.55f64..1.0) {
        let cfg = TemiConfig { c: 3, heads: 2, hidden_dim: 5, bottleneck_dim: 4, gamma, seed, ..TemiConfig::default() };
        let model = temi_init(&cfg, 3).unwrap();
        let mut r = rng::seeded(seed);
        let fs = FeatureSet::new(8, 3, (0..24).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect(), None).unwrap();
        let batch = PairBatch::new(vec![0, 1, 2, 3], vec![4, 5, 6, 7], None).unwrap();
        let a = temi_loss(&model, &fs, &batch).unwrap();
        let b = temi_loss(&model, &fs, &batch.swapped()).unwrap();
        prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0));
    }

    #[test]
    fn anmi_ignores_relabeling(ids in labels(40, 4), truth in labels(40, 3), shift in 1u32..4) {
        let a = ClusterAssignment::new(Method::Kmeans, ids.clone(), 4).unwrap();
        let permuted = ClusterAssignment::new(Method::Kmeans, ids.iter().map(|&i| (i + shift) % 4).collect(), 4).unwrap();
        let relabeled: Vec<u32> = truth.iter().map(|&l| 2 - l).collect();
        let base = anmi(&a, &truth).unwrap();
        prop_assert!((base - anmi(&permuted, &truth).unwrap()).abs() < 1e-9);
        prop_assert!((base - anmi(&a, &relabeled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn hungarian_accuracy_ignores_table_permutations(counts in prop::collection::vec(0u64..20, 16), seed in any::<u64>()) {
        let table = ContingencyTable::new(4, 4, counts.clone()).unwrap();
        prop_assume!(table.n() > 0);
        let mut r = rng::seeded(seed);
        let mut rows: Vec<usize> = (0..4).collect();
        let mut cols: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(&mut rows[..], &mut r);
        rand::seq::SliceRandom::shuffle(&mut cols[..], &mut r);
        let permuted: Vec<u64> = (0..16).map(|k| counts[rows[k / 4] * 4 + cols[k % 4]]).collect();
        let other = ContingencyTable::new(4, 4, permuted).unwrap();
        prop_assert_eq!(hungarian_map(&table).matched, hungarian_map(&other).matched);
    }

    #[test]
    fn auroc_ignores_increasing_transforms(
        pos in prop::collection::vec(-3.0f64..3.0, 1..30),
        neg in prop::collection::vec(-3.0f64..3.0, 1..30),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| x.exp() + 3.0 * x).collect::<Vec<_>>();
        let a = auroc(&pos, &neg).unwrap();
        prop_assert!((a - auroc(&f(&pos), &f(&neg)).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(seed in any::<u64>(), d in 1usize..5) {
        let mut r = rng::seeded(seed);
        let mut draw = |shift: f64| {
            let v: Vec<f64> = (0..50 * d).map(|_| shift + rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
            gaussian_stats(&v, 50, d).unwrap()
        };
        let (a, b) = (draw(0.0), draw(0.5));
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn frechet_one_dimensional_closed_form(m1 in -5.0f64..5.0, m2 in -5.0f64..5.0, s1 in 0.01f64..3.0, s2 in 0.01f64..3.0) {
        let g = |m: f64, s: f64| GaussianStats { mean: vec![m], cov: vec![s * s], n: 10 };
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        prop_assert!((frechet_distance(&g(m1, s1), &g(m2, s2)).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn bound_search_invariants(
        seed in any::<u64>(),
        c_true in 2usize..40,
        c_start in 2usize..6,
        alpha in 0.5f64..1.0,
    ) {
        // A stand-in clusterer that uses at most `c_true` clusters.
        let cfg = BoundSearchConfig { alpha, c_start, seed, ..BoundSearchConfig::default() };
        let report = search_upper_bound(&cfg, |c| {
            let ids = (0..c.max(c_true) as u32).map(|i| i % c_true.min(c) as u32).collect();
            ClusterAssignment::new(Method::Temi, ids, c)
        });
        let Ok(report) = report else { return Ok(()) };
        for p in &report.probes {
            prop_assert!(p.r_c > 0.0 && p.r_c <= 1.0);
        }
        let highest = report.probes.iter().filter(|p| p.r_c > alpha).map(|p| p.c).max();
        if report.warning.is_none() {
            prop_assert_eq!(Some(report.c_max), highest);
        }
        prop_assert!(report.doubling_probes() <= cfg.max_doublings + 1);
        let doubling: Vec<&_> = report.probes.iter().filter(|p| p.doubling).collect();
        if let Some(pass) = doubling.iter().filter(|p| p.passed).map(|p| p.c).max() {
            let fail = pass * 2;
            let step = (pass / 8).max(1);
            let grid: Vec<usize> = report.probes.iter().filter(|p| !p.doubling).map(|p| p.c).collect();
            prop_assert!(grid.iter().all(|&c| c > pass && c < fail));
            prop_assert!(grid.len() <= (fail - pass - 1) / step);
        }
    }

    #[test]
    fn sampled_conditions_stay_in_range(c in 1usize..10, n in 0usize..200, seed in any::<u64>()) {
        let ids = sample_conditions(&ConditionDist::Uniform(c), n, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(ids.len(), n);
        prop_assert!(ids.iter().all(|&i| (i as usize) < c));
    }

    #[test]
    fn config_round_trips_through_toml(seed in any::<u64>(), c in 1usize..64, m_img in 1000u64..1_000_000) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.clustering.c = c;
        cfg.diffusion.train.m_img = m_img;
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), steps in 2usize..8) {
        let model = DiffusionModel::new(2, 3, DenoiserConfig { hidden_dim: 8, depth: 2, sigma_data: 0.5 }, seed).unwrap();
        let schedule = NoiseSchedule { num_steps: steps, ..NoiseSchedule::default() };
        let conds = [0, 1, 2, 3, 1];
        let a = heun_sample(&model, &conds, &schedule, &mut rng::seeded(seed)).unwrap();
        let b = heun_sample(&model, &conds, &schedule, &mut rng::seeded(seed)).unwrap();
        prop_assert!(a.iter().all(|v| v.is_finite()));
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
