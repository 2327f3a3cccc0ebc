//! Property tests over the geometric and numeric invariants.

use pcc_core::autodiff::DiffArray;
use pcc_core::data;
use pcc_core::geometry::{chamfer_l2, chamfer_l2_exact, f_score, PointCloud};
use proptest::prelude::*;

fn cloud_strategy(max_n: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(
        (
            -1.0f32..1.0, // keep coordinates bounded and finite
            -1.0f32..1.0,
            -1.0f32..1.0,
        ),
        1..max_n,
    )
    .prop_map(|pts| PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap())
}

fn rotate(cloud: &PointCloud, yaw: f32, pitch: f32) -> PointCloud {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch.cos(), pitch.sin());
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                let (x, y, z) = (p[0], p[1], p[2]);
                // Rz(yaw) then Rx(pitch).
                let (x1, y1) = (cy * x - sy * y, sy * x + cy * y);
                let (y2, z2) = (cp * y1 - sp * z, sp * y1 + cp * z);
                [x1, y2, z2]
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric(p in cloud_strategy(40), q in cloud_strategy(40)) {
        prop_assert_eq!(chamfer_l2_exact(&p, &q), chamfer_l2_exact(&q, &p));
    }

    #[test]
    fn chamfer_nonnegative_and_zero_on_self(p in cloud_strategy(40)) {
        prop_assert!(chamfer_l2_exact(&p, &p) == 0.0);
        let shifted = PointCloud::new(
            p.points.iter().map(|q| [q[0] + 0.5, q[1], q[2]]).collect(),
        ).unwrap();
        prop_assert!(chamfer_l2_exact(&p, &shifted) >= 0.0);
    }

    #[test]
    fn chamfer_rigid_rotation_invariant(
        p in cloud_strategy(32),
        q in cloud_strategy(32),
        yaw in 0.0f32..std::f32::consts::TAU,
        pitch in 0.0f32..std::f32::consts::PI,
    ) {
        let base = chamfer_l2_exact(&p, &q);
        let rotated = chamfer_l2_exact(&rotate(&p, yaw, pitch), &rotate(&q, yaw, pitch));
        prop_assert!((base - rotated).abs() < 1e-5, "{} vs {}", base, rotated);
    }

    #[test]
    fn chamfer_tape_matches_exact_metric(p in cloud_strategy(24), q in cloud_strategy(24)) {
        let tape = chamfer_l2(&p.to_array(), &q.to_array()).unwrap().value() as f64;
        let exact = chamfer_l2_exact(&p, &q);
        prop_assert!((tape - exact).abs() < 1e-5 * (1.0 + exact), "{} vs {}", tape, exact);
    }

    #[test]
    fn f_score_monotone_in_threshold(p in cloud_strategy(24), q in cloud_strategy(24)) {
        let mut prev = 0.0;
        for step in 1..=12 {
            let d = step as f64 * 0.25;
            let f = f_score(&p, &q, d).unwrap();
            prop_assert!(f + 1e-12 >= prev, "f-score decreased: {} -> {} at d={}", prev, f, d);
            prev = f;
        }
    }

    #[test]
    fn softmax_rows_always_stochastic(
        rows in prop::collection::vec(prop::collection::vec(-1.0e4f32..1.0e4, 4), 1..6)
    ) {
        let n = rows.len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let x = DiffArray::from_vec(flat, &[n, 4]).unwrap();
        let s = x.softmax_rows().unwrap().to_vec();
        for row in s.chunks(4) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ply_and_pcf_round_trips(p in cloud_strategy(64)) {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("c.ply");
        data::write_ply(&p, &ply).unwrap();
        let back = data::read_ply(&ply).unwrap();
        prop_assert_eq!(&p.points, &back.points);

        let pcf = dir.path().join("c.pcf");
        let flat: Vec<f32> = p.points.iter().flatten().copied().collect();
        data::write_pcf(&pcf, &[p.len(), 3], &flat).unwrap();
        let (shape, data_back) = data::read_pcf(&pcf).unwrap();
        prop_assert_eq!(shape, vec![p.len(), 3]);
        prop_assert_eq!(flat, data_back);
    }

    #[test]
    fn normalization_round_trips(p in cloud_strategy(48)) {
        // Skip degenerate single-position clouds, which normalize() rejects.
        let spread = p.points.iter().any(|a| *a != p.points[0]);
        prop_assume!(spread);
        let (normed, t) = data::normalize(&p).unwrap();
        let max_norm = normed
            .points
            .iter()
            .map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt())
            .fold(0.0f32, f32::max);
        prop_assert!((max_norm - 1.0).abs() < 1e-4);
        let back = data::denormalize(&normed, &t);
        for (a, b) in p.points.iter().zip(&back.points) {
            for axis in 0..3 {
                prop_assert!((a[axis] - b[axis]).abs() < 1e-5);
            }
        }
    }
}
