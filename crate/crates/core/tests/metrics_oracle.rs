mod common;

use common::{grid_similarities as random_s, metrics_against_sort, random_pairing};
use hise_core::evalretrieval::{recall_at_k, Direction, MetricsReport};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recall_and_median_match_full_sort_oracle() {
    metrics_against_sort(100, 20, 21).unwrap();
}

#[test]
fn recall_is_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = random_s(&mut rng, 15);
        let truth = random_pairing(&mut rng, 15);
        let values: Vec<f64> = (1..=15).map(|k| recall_at_k(&s, &truth, k, Direction::TextToVideo)).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(values[14], 100.0);
        let r = MetricsReport::from_similarity(&s, &truth).unwrap();
        for m in [r.t2v, r.v2t] {
            assert!(0.0 <= m.r1 && m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0);
            assert!(m.mdr >= 1.0);
        }
    }
}

#[test]
fn invariant_under_strictly_increasing_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let s = random_s(&mut rng, 12);
        let truth = random_pairing(&mut rng, 12);
        let transformed = s.mapv(|x| (3.0 * x).exp() - 7.0);
        assert_eq!(
            MetricsReport::from_similarity(&s, &truth).unwrap(),
            MetricsReport::from_similarity(&transformed, &truth).unwrap()
        );
    }
}

#[test]
fn invariant_under_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = 12;
        // continuous scores so no ties depend on the index order
        let s = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let truth = random_pairing(&mut rng, n);
        let pv = random_pairing(&mut rng, n);
        let pt = random_pairing(&mut rng, n);
        // new video i is old video pv[i]; new text j is old text pt[j]
        let permuted = Array2::from_shape_fn((n, n), |(i, j)| s[[pv[i], pt[j]]]);
        let mut inv_pv = vec![0; n];
        for (i, &v) in pv.iter().enumerate() {
            inv_pv[v] = i;
        }
        let new_truth: Vec<usize> = pt.iter().map(|&old_t| inv_pv[truth[old_t]]).collect();
        assert_eq!(
            MetricsReport::from_similarity(&s, &truth).unwrap(),
            MetricsReport::from_similarity(&permuted, &new_truth).unwrap()
        );
    }
}
