//! Cross-module invariants as property tests.

use proptest::prelude::*;

use embedkit::cluster::{silhouette_score, Linkage};
use embedkit::matrix::EmbeddingMatrix;
use embedkit::refine::{forward, LinearMap, ProbeWeights};
use embedkit::svd::compress_mse;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_f32(state: &mut u64) -> f32 {
    ((splitmix64(state) >> 40) as f32) / (1u32 << 24) as f32 * 2.0 - 1.0
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
    let mut state = seed;
    let data: Vec<f32> = (0..rows * cols).map(|_| unit_f32(&mut state)).collect();
    EmbeddingMatrix::new("prop", rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Reconstruction MSE after fit/transform/reconstruct never increases
    /// with k, and the full-rank fit is lossless.
    #[test]
    fn svd_mse_non_increasing_in_k(
        rows in 3usize..20,
        cols in 3usize..16,
        seed in any::<u64>(),
    ) {
        let x = random_matrix(rows, cols, seed);
        let max_k = rows.min(cols);
        let mut prev = f64::INFINITY;
        for k in 1..=max_k {
            let mse = compress_mse(&x, k, 0).unwrap();
            prop_assert!(mse <= prev + 1e-12, "k={k}: {mse} > {prev}");
            prev = mse;
        }
        prop_assert!(prev < 1e-9, "full-rank mse {prev}");
    }

    /// The silhouette score stays inside [-1, 1] for any labeling.
    #[test]
    fn silhouette_bounded(
        rows in 4usize..40,
        cols in 1usize..6,
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= rows);
        let x = random_matrix(rows, cols, seed);
        let labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
        let s = silhouette_score(&x, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "silhouette {s}");
    }

    /// forward(c * map, probe / c) == forward(map, probe) for c > 0.
    #[test]
    fn forward_scale_invariance(
        c in 0.05f64..20.0,
        seed in any::<u64>(),
    ) {
        let d = 4;
        let n = 5;
        let classes = 3;
        let seasons: Vec<EmbeddingMatrix> = (0..4)
            .map(|i| random_matrix(n, d, seed.wrapping_add(i)))
            .collect();
        let map_w: Vec<f64> = {
            let mut state = seed ^ 0xABCD;
            (0..d * d).map(|_| unit_f32(&mut state) as f64).collect()
        };
        let map = LinearMap::from_weights(d, map_w.clone()).unwrap();
        let probe = ProbeWeights::seeded_uniform(classes, 4 * d, 0.5, seed ^ 0x1234);

        let scaled_map = LinearMap::from_weights(
            d,
            map_w.iter().map(|&v| v * c).collect(),
        ).unwrap();
        let scaled_probe = ProbeWeights::from_weights(
            classes,
            4 * d,
            probe.weights().iter().map(|&v| v / c).collect(),
        ).unwrap();

        let base = forward(&map, &probe, &seasons).unwrap();
        let scaled = forward(&scaled_map, &scaled_probe, &seasons).unwrap();
        let norm = base.data.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
        for (a, b) in base.data.iter().zip(&scaled.data) {
            prop_assert!((a - b).abs() < 1e-5 * norm, "{a} vs {b}");
        }
    }

    /// Agglomerative clustering with n_clusters = 1 puts everything in one
    /// cluster regardless of linkage.
    #[test]
    fn agglomerative_single_cluster(
        rows in 2usize..25,
        cols in 1usize..5,
        seed in any::<u64>(),
        linkage_idx in 0usize..4,
    ) {
        let linkage = [Linkage::Ward, Linkage::Average, Linkage::Complete, Linkage::Single][linkage_idx];
        let x = random_matrix(rows, cols, seed);
        let a = embedkit::cluster::agglomerative_cluster(&x, 1, linkage).unwrap();
        prop_assert!(a.labels.iter().all(|&l| l == 0));
    }
}
