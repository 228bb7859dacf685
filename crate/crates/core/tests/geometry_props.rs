//! Rigid-motion and warp properties over random inputs.

use nalgebra::{Rotation3, Unit, Vector3};
use proptest::prelude::*;

use s2tpv::geometry::{vvt, warp_bev, EgoGrid, RigidTransform};
use s2tpv::tensor::Tensor;

fn rigid() -> impl Strategy<Value = RigidTransform> {
    (prop::array::uniform3(-1.0f64..1.0), -3.2f64..3.2, prop::array::uniform3(-20.0f64..20.0))
        .prop_filter("usable rotation axis", |(a, _, _)| Vector3::from(*a).norm() > 1e-3)
        .prop_map(|(axis, angle, t)| {
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
            RigidTransform::new(*r.matrix(), Vector3::from(t)).unwrap()
        })
}

fn planar() -> impl Strategy<Value = RigidTransform> {
    (-30.0f64..30.0, -30.0f64..30.0, -3.2f64..3.2).prop_map(|(x, y, yaw)| RigidTransform::planar(x, y, yaw))
}

proptest! {
    #[test]
    fn vvt_without_motion_is_the_inverse_extrinsic(camera in rigid(), pose in rigid()) {
        let v = vvt(&camera, &pose, &pose).unwrap();
        let inv = camera.inverse();
        prop_assert!((v.rotation - inv.rotation).abs().max() < 1e-12);
        prop_assert!((v.translation - inv.translation).abs().max() < 1e-12);
    }

    #[test]
    fn vvt_matches_composed_closed_form_inverses(
        camera in rigid(), past in rigid(), current in rigid(), x in prop::array::uniform3(-40.0f64..40.0),
    ) {
        let x = Vector3::from(x);
        let v = vvt(&camera, &past, &current).unwrap();
        let chained = camera.inverse().apply(&past.inverse().apply(&current.apply(&x)));
        prop_assert!((v.apply(&x) - chained).norm() < 1e-9);
    }

    #[test]
    fn vvt_sees_only_relative_motion(camera in rigid(), past in planar(), current in planar(), world in planar()) {
        let a = vvt(&camera, &past, &current).unwrap();
        let b = vvt(&camera, &world.compose(&past), &world.compose(&current)).unwrap();
        prop_assert!((a.rotation - b.rotation).abs().max() < 1e-9);
        prop_assert!((a.translation - b.translation).abs().max() < 1e-9);
    }

    /// Moving `k` cells along one axis zeroes exactly `k` border lines and
    /// shifts the rest by `k`.
    #[test]
    fn warp_loses_exactly_the_cells_moved_out(
        along_h in any::<bool>(), k in -3i32..=3, dims in (4usize..9, 4usize..9), base in planar(),
    ) {
        let (h, w) = dims;
        let grid = EgoGrid::new([h, w, 2], [[-(h as f64), h as f64], [-(w as f64), w as f64], [-1.0, 3.0]]).unwrap();
        // cell pitch is 2 m on both axes; entries are never zero
        let c = 2;
        let data = (0..h * w * c).map(|i| 1.0 + i as f64).collect();
        let prev = Tensor::new(&[h, w, c], data).unwrap();
        let step = 2.0 * k as f64;
        let (dx, dy) = if along_h { (step, 0.0) } else { (0.0, step) };
        let cur = base.compose(&RigidTransform::planar(dx, dy, 0.0));
        let out = warp_bev(&prev, &base, &cur, &grid).unwrap();

        let (di, dj) = if along_h { (k, 0) } else { (0, k) };
        let mut zero_lines = 0;
        for i in 0..h as i32 {
            for j in 0..w as i32 {
                let (si, sj) = (i + di, j + dj);
                let o = ((i as usize) * w + j as usize) * c;
                let got = &out.data()[o..o + c];
                if si < 0 || sj < 0 || si >= h as i32 || sj >= w as i32 {
                    prop_assert!(got.iter().all(|&v| v == 0.0), "cell ({}, {}) should be empty", i, j);
                } else {
                    let s = ((si as usize) * w + sj as usize) * c;
                    prop_assert_eq!(got, &prev.data()[s..s + c]);
                }
            }
        }
        let lines: Vec<bool> = if along_h {
            (0..h).map(|i| out.data()[i * w * c..(i + 1) * w * c].iter().all(|&v| v == 0.0)).collect()
        } else {
            (0..w).map(|j| (0..h).all(|i| out.data()[(i * w + j) * c..(i * w + j + 1) * c].iter().all(|&v| v == 0.0))).collect()
        };
        zero_lines += lines.iter().filter(|&&z| z).count();
        prop_assert_eq!(zero_lines, k.unsigned_abs() as usize);
    }
}

#[test]
fn identity_motion_warps_to_the_input() {
    let grid = EgoGrid::new([5, 6, 2], [[-5.0, 5.0], [-6.0, 6.0], [-1.0, 3.0]]).unwrap();
    let prev = Tensor::new(&[5, 6, 3], (0..90).map(|i| (i as f64).sin()).collect()).unwrap();
    let pose = RigidTransform::planar(12.0, -4.0, 0.7);
    assert_eq!(warp_bev(&prev, &pose, &pose, &grid).unwrap(), prev);
}
