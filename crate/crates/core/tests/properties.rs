//! Property-based invariants.

use anacil_core::analytic::{ridge_fit, AnalyticState, OneHot};
use anacil_core::buffer::GaussianStream;
use anacil_core::calibration::{l2_norm, ugc_fuse};
use anacil_core::rigidity::{
    gaussian_matrix, grassmann_distance, principal_angles, projection_residual, projector,
    SubspaceBasis,
};
use anacil_core::semantic::{cse_scores, fuse_predictions, top_k, PrototypeBank};
use anacil_core::store::{
    read_dataset, read_prototype_bank, write_dataset, write_prototype_bank, DatasetHeader,
    FeatureRecord, PrototypeBankFile,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
        .prop_filter("non-degenerate", |v| l2_norm(v) > 1e-6)
}

fn basis(seed: u64, dim: usize, rank: usize) -> SubspaceBasis {
    SubspaceBasis::orthonormalize(&gaussian_matrix(&mut GaussianStream::new(seed), dim, rank))
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ugc_is_scale_invariant_with_unit_halves(
        a in vec_strategy(1..20),
        b in vec_strategy(1..20),
        sa in 1e-6f64..1e6,
        sb in 1e-6f64..1e6,
    ) {
        let fused = ugc_fuse(&a, &b).unwrap();
        prop_assert!((l2_norm(&fused[..a.len()]) - 1.0).abs() < 1e-12);
        prop_assert!((l2_norm(&fused[a.len()..]) - 1.0).abs() < 1e-12);
        prop_assert!((l2_norm(&fused) - 2f64.sqrt()).abs() < 1e-12);
        let scaled = ugc_fuse(
            &a.iter().map(|v| v * sa).collect::<Vec<_>>(),
            &b.iter().map(|v| v * sb).collect::<Vec<_>>(),
        ).unwrap();
        for (x, y) in fused.iter().zip(&scaled) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip(
        rows in prop::collection::vec(
            (prop::collection::vec(-1e3f32..1e3, 3), prop::collection::vec(-1e3f32..1e3, 2), 0u32..5, 0u32..3),
            0..20,
        )
    ) {
        let records: Vec<FeatureRecord> = rows
            .into_iter()
            .map(|(a, c, l, t)| FeatureRecord::new(a, c, l, t))
            .collect();
        let mut header = DatasetHeader::describe(&records, 5);
        if records.is_empty() {
            header.adapter_dim = 3;
            header.clip_dim = 2;
        }
        let mut bytes = Vec::new();
        let written = write_dataset(&records, &header, &mut bytes).unwrap();
        prop_assert_eq!(written as usize, bytes.len());
        prop_assert_eq!(bytes.len(), 24 + records.len() * (8 + 4 * 5));
        let (h, back) = read_dataset(&bytes[..]).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back, records);
    }

    #[test]
    fn bank_round_trip(c in 1usize..5, p in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = GaussianStream::new(seed);
        let payload: Vec<f32> = (0..c * p * d).map(|_| rng.next_normal() as f32 + 3.0).collect();
        let bank = PrototypeBankFile::new(c, p, d, payload, vec![]).unwrap();
        let mut bytes = Vec::new();
        write_prototype_bank(&bank, &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), 20 + 4 * c * p * d);
        prop_assert_eq!(read_prototype_bank(&bytes[..]).unwrap(), bank);
    }

    #[test]
    fn snapshot_round_trip(d in 1usize..8, c in 0usize..4, seed in any::<u64>(), lambda in 1e-6f64..10.0) {
        let mut s = AnalyticState::new(d, c, lambda).unwrap();
        if c > 0 {
            let f = gaussian_matrix(&mut GaussianStream::new(seed), 5, d);
            s.rls_update(&f, &OneHot::new((0..5).map(|i| i % c).collect(), c).unwrap()).unwrap();
        }
        let mut bytes = Vec::new();
        s.write_snapshot(&mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), 40 + 8 * (d * d + d * c));
        prop_assert_eq!(AnalyticState::read_snapshot(&bytes[..]).unwrap(), s);
    }

    #[test]
    fn projector_is_symmetric_idempotent(seed in any::<u64>(), dim in 2usize..12, rank_frac in 0.1f64..1.0) {
        let rank = ((dim as f64 * rank_frac) as usize).max(1);
        let p = projector(&basis(seed, dim, rank));
        prop_assert!((&p * &p - &p).amax() < 1e-10);
        prop_assert!((&p - p.transpose()).amax() < 1e-12);
        prop_assert!((p.trace() - rank as f64).abs() < 1e-10);
    }

    #[test]
    fn pythagorean_split(seed in any::<u64>(), y in prop::collection::vec(-10.0f64..10.0, 8)) {
        let b = basis(seed, 8, 3);
        let p = projector(&b);
        let yv = nalgebra::DVector::from_column_slice(&y);
        let inside = (&p * &yv).norm_squared();
        let outside = projection_residual(&b, &y).unwrap();
        prop_assert!((inside + outside - yv.norm_squared()).abs() < 1e-9 * (1.0 + yv.norm_squared()));
    }

    #[test]
    fn grassmann_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), r1 in 1usize..5, r2 in 1usize..5) {
        let a = basis(s1, 10, r1);
        let b = basis(s2, 10, r2);
        let ab = grassmann_distance(&a, &b).unwrap();
        let ba = grassmann_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0 && ab <= (r1.min(r2) as f64).sqrt() + 1e-12);
        prop_assert!(grassmann_distance(&a, &a).unwrap() < 1e-10);
        let angles = principal_angles(&a, &b).unwrap();
        prop_assert_eq!(angles.len(), r1.min(r2));
        let from_angles: f64 = angles.iter().map(|t| t.sin().powi(2)).sum::<f64>().sqrt();
        prop_assert!((from_angles - ab).abs() < 1e-9);
    }

    #[test]
    fn rls_is_order_invariant(seed in any::<u64>(), chunk in 1usize..12) {
        let mut rng = GaussianStream::new(seed);
        let f = gaussian_matrix(&mut rng, 24, 10);
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let mut fwd = AnalyticState::new(10, 3, 0.3).unwrap();
        fwd.rls_update_chunked(&f, &OneHot::new(labels.clone(), 3).unwrap(), chunk).unwrap();
        let rev_idx: Vec<usize> = (0..24).rev().collect();
        let mut rev = AnalyticState::new(10, 3, 0.3).unwrap();
        rev.rls_update_chunked(
            &f.select_rows(&rev_idx),
            &OneHot::new(rev_idx.iter().map(|&i| labels[i]).collect(), 3).unwrap(),
            chunk,
        ).unwrap();
        let scale = fwd.weights().norm();
        prop_assert!((fwd.weights() - rev.weights()).norm() <= 1e-9 * scale);
    }

    #[test]
    fn ridge_shrinks_monotonically(seed in any::<u64>()) {
        let f = gaussian_matrix(&mut GaussianStream::new(seed), 30, 12);
        let t = OneHot::new((0..30).map(|i| i % 4).collect(), 4).unwrap();
        let norms: Vec<f64> = [1e-4, 1e-2, 1.0, 1e2]
            .iter()
            .map(|&l| ridge_fit(&f, &t, l).unwrap().norm())
            .collect();
        for w in norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cse_is_sparse_and_contained(seed in any::<u64>(), c in 2usize..15, k in 1usize..20) {
        let mut rng = GaussianStream::new(seed);
        let means = DMatrix::from_fn(c, 6, |_, _| rng.next_normal().abs() + 0.01);
        let bank = PrototypeBank::from_means(means, vec![]).unwrap();
        let logits: Vec<f64> = (0..c).map(|_| rng.next_normal()).collect();
        let clip: Vec<f64> = (0..6).map(|_| rng.next_normal().abs() + 0.01).collect();
        let cands = top_k(&logits, k).unwrap();
        prop_assert_eq!(cands.len(), k.min(c));
        let scores = cse_scores(&clip, &bank, &cands, c, None).unwrap();
        prop_assert_eq!(scores.iter().filter(|s| **s == 0.0).count(), c - k.min(c));
        let (_, pred) = fuse_predictions(&logits, &scores).unwrap();
        prop_assert!(cands.contains(pred));
    }
}
