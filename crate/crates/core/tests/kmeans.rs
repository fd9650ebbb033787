use gridcast_core::baselines::kmeans_fit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_profiles(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.gen_range(5..60);
    let dim = rng.gen_range(1..25);
    // A few blobs plus noise so fits take several iterations.
    let blobs: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.gen_range(0.0..50.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let b = &blobs[rng.gen_range(0..4)];
            b.iter().map(|v| v + rng.gen_range(-15.0..15.0)).collect()
        })
        .collect()
}

#[test]
fn inertia_never_rises_and_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let profiles = random_profiles(&mut rng);
        let k = rng.gen_range(1..=profiles.len().min(8));
        let fit = kmeans_fit(&profiles, k, trial, 200, 0.0).unwrap();
        for w in fit.inertia_history.windows(2) {
            assert!(w[1] <= w[0], "trial {trial}: {} -> {}", w[0], w[1]);
        }
        let mut brute = 0.0;
        for (p, &j) in profiles.iter().zip(&fit.assignments) {
            brute += p.iter().zip(&fit.centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        assert!((brute - fit.inertia).abs() <= 1e-9 * brute.max(1.0), "trial {trial}");
        let mut seen = vec![false; k];
        fit.assignments.iter().for_each(|&j| seen[j] = true);
        assert!(seen.iter().all(|s| *s), "trial {trial}: empty cluster");
    }
}

#[test]
fn one_cluster_centroid_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let profiles = random_profiles(&mut rng);
        let fit = kmeans_fit(&profiles, 1, seed, 50, 0.0).unwrap();
        let n = profiles.len() as f64;
        for h in 0..profiles[0].len() {
            let mean = profiles.iter().map(|p| p[h]).sum::<f64>() / n;
            assert!((fit.centroids[0][h] - mean).abs() <= 1e-9);
        }
    }
}
