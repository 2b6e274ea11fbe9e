mod common;

use prealign::linalg::Matrix;
use prealign::metrics::{
    self, accuracy_auc, alignment_angles, angle_deg, cosine_gram, effective_rank, gram_effective_dim, meta_loss,
    sample_episode, spectral_effective_rank, weight_feedback_distance, weight_trajectory_pca, MetaConfig,
};
use prealign::net::init_mlp;
use proptest::prelude::*;

#[test]
fn effective_rank_closed_forms() {
    for n in [1, 2, 5, 10] {
        assert!((effective_rank(&Matrix::identity(n)).unwrap() - n as f64).abs() < 1e-9);
    }
    let u = [1.0, -2.0, 0.5];
    let v = [0.3, 0.0, 4.0, 1.0];
    let rank_one = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
    assert!((effective_rank(&rank_one).unwrap() - 1.0).abs() < 1e-9);
    assert!((effective_rank(&Matrix::from_diag(&[1.0, 1.0, 0.0])).unwrap() - 2.0).abs() < 1e-9);
    // Two equal and one half-weight value: exp(H) of (0.4, 0.4, 0.2).
    let h: f64 = [0.4f64, 0.4, 0.2].iter().map(|p| -p * p.ln()).sum();
    assert!((spectral_effective_rank(&[2.0, 2.0, 1.0]).unwrap() - h.exp()).abs() < 1e-12);
    assert!(effective_rank(&Matrix::zeros(3, 3)).is_err());
    assert!(spectral_effective_rank(&[]).is_err());
}

#[test]
fn angles_of_known_vectors() {
    assert!((angle_deg(&[1.0, 0.0], &[0.0, 3.0]) - 90.0).abs() < 1e-12);
    assert!(angle_deg(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-6);
    assert!((angle_deg(&[1.0, 0.0], &[-1.0, 0.0]) - 180.0).abs() < 1e-12);
    assert!((angle_deg(&[1.0, 0.0], &[1.0, 1.0]) - 45.0).abs() < 1e-12);
    assert_eq!(angle_deg(&[0.0, 0.0], &[1.0, 1.0]), 90.0);
}

#[test]
fn aligned_network_has_zero_angle_and_distance() {
    let mlp = init_mlp(&[20, 10, 5], 3).unwrap().with_weights_aligned_to_feedback();
    for l in 0..2 {
        let r = alignment_angles(&mlp, l).unwrap();
        assert_eq!(r.per_neuron_deg.len(), mlp.dims()[l]);
        assert!(r.mean_deg.abs() < 1e-5);
        assert!(weight_feedback_distance(&mlp, l).unwrap() < 1e-15);
    }
    assert!(alignment_angles(&mlp, 2).is_err());
}

#[test]
fn distance_matches_definition() {
    let mlp = init_mlp(&[6, 4, 3], 8).unwrap();
    let w = &mlp.weights()[1];
    let bt = mlp.feedback()[1].transpose();
    let expected = w.sub(&bt).unwrap().frobenius_norm();
    assert!((weight_feedback_distance(&mlp, 1).unwrap() - expected).abs() < 1e-14);
    assert_eq!(metrics::feedback_target(&mlp, 1).unwrap(), bt.into_vec());
}

#[test]
fn gram_of_identical_and_orthogonal_neurons() {
    // Three identical neurons: all cosines 1, rank-one Gram.
    let same = Matrix::from_fn(5, 3, |i, _| 1.0 + i as f64);
    assert!((gram_effective_dim(&same).unwrap() - 1.0).abs() < 1e-9);
    // Disjoint supports: Gram is the identity.
    let orth = Matrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.0 });
    assert!(cosine_gram(&orth).max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-15);
    assert!((gram_effective_dim(&orth).unwrap() - 4.0).abs() < 1e-9);
    assert!(gram_effective_dim(&Matrix::zeros(1, 3)).is_err());
}

#[test]
fn auc_is_normalised_trapezoid() {
    assert_eq!(accuracy_auc(&[0.7]).unwrap(), 0.7);
    assert!((accuracy_auc(&[0.5, 0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
    assert!((accuracy_auc(&[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!((accuracy_auc(&[0.0, 0.5, 1.0, 1.0]).unwrap() - (0.25 + 0.75 + 1.0) / 3.0).abs() < 1e-15);
    assert!(accuracy_auc(&[]).is_err());
}

#[test]
fn trajectory_places_points_in_shared_basis() {
    let target = vec![1.0, 1.0, 0.0, 0.0];
    let snaps: Vec<Vec<f64>> =
        (0..5).map(|t| vec![t as f64 * 0.25, t as f64 * 0.25, 0.1 * (t % 2) as f64, 0.0]).collect();
    let tr = weight_trajectory_pca(&snaps, &target, 2).unwrap();
    assert_eq!(tr.coords.len(), 5);
    // The last snapshot coincides with the target.
    let d: f64 = tr.coords[4].iter().zip(&tr.feedback_coord).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(d.sqrt() < 1e-9);
    assert!(tr.explained_variance[0] >= tr.explained_variance[1]);
    assert!(weight_trajectory_pca(&snaps[..2], &target, 2).is_err());
}

#[test]
fn episodes_are_disjoint_balanced_and_seeded() {
    let ds = common::synthetic_digits("t", 300, 6, 3, 2);
    let (s, q) = sample_episode(&ds, 4, 5, 11).unwrap();
    assert_eq!(s.len(), 12);
    assert_eq!(q.len(), 15);
    assert!(s.iter().all(|i| !q.contains(i)));
    for c in 0..3 {
        assert_eq!(s.iter().filter(|&&i| ds.labels()[i] == c).count(), 4);
    }
    assert_eq!(sample_episode(&ds, 4, 5, 11).unwrap(), (s.clone(), q));
    assert_ne!(sample_episode(&ds, 4, 5, 12).unwrap().0, s);
    assert!(sample_episode(&ds, 100, 100, 0).is_err());
}

#[test]
fn meta_loss_is_deterministic_and_sums_tasks() {
    let a = common::synthetic_digits("a", 200, 6, 3, 4);
    let b = common::synthetic_digits("b", 200, 6, 3, 5);
    let mlp = init_mlp(&[36, 10, 3], 1).unwrap();
    let cfg = MetaConfig { shots_per_class: 5, inner_steps: 5, inner_lr: 1e-2, query_per_class: 5, seed: 3 };
    let m1 = meta_loss(&mlp, &cfg, &[&a, &b]).unwrap();
    let m2 = meta_loss(&mlp, &cfg, &[&a, &b]).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1.per_task.len(), 2);
    assert!((m1.per_task.iter().sum::<f64>() - m1.total).abs() < 1e-12);
    assert!(m1.total.is_finite() && m1.total > 0.0);
    // Adaptation must not touch the evaluated network.
    assert_eq!(mlp, init_mlp(&[36, 10, 3], 1).unwrap());
}

fn square_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_rank_is_scale_invariant_and_bounded(m in square_matrix(), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
        prop_assume!(m.max_abs() > 1e-3);
        let e = effective_rank(&m).unwrap();
        let ec = effective_rank(&m.scale(c)).unwrap();
        prop_assert!((e - ec).abs() < 1e-10);
        prop_assert!(e >= 1.0 - 1e-12 && e <= m.rows().min(m.cols()) as f64 + 1e-9);
        // Transpose has the same spectrum.
        prop_assert!((effective_rank(&m.transpose()).unwrap() - e).abs() < 1e-9);
    }

    #[test]
    fn angles_lie_in_range_and_are_symmetric(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
        let x = angle_deg(&a, &b);
        prop_assert!((0.0..=180.0).contains(&x));
        prop_assert!((x - angle_deg(&b, &a)).abs() < 1e-12);
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        if linalg_norm(&a) > 0.0 && linalg_norm(&b) > 0.0 {
            prop_assert!((angle_deg(&a, &neg) - (180.0 - x)).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_gram_is_symmetric_with_unit_diagonal(m in square_matrix()) {
        let g = cosine_gram(&m);
        prop_assert!(g.is_symmetric(1e-12));
        for i in 0..g.rows() {
            prop_assert_eq!(g[(i, i)], 1.0);
            prop_assert!(g.row(i).iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }
}

fn linalg_norm(v: &[f64]) -> f64 {
    prealign::linalg::norm(v)
}
