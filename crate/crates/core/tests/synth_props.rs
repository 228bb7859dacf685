//! Synthetic data: voxelization, seeded determinism and frame changes of
//! LiDAR sweeps.

use nalgebra::Vector3;
use proptest::prelude::*;

use s2tpv::bench::render_config;
use s2tpv::geometry::EgoGrid;
use s2tpv::synth::{
    desk_scene, generate_scene, lidar_seed, sample_lidar, surround_rig, sweep_points, voxelize_labels, LidarPoint,
    EMPTY, N_SEMANTIC,
};

fn grid() -> EgoGrid {
    EgoGrid::new([6, 5, 3], [[-6.0, 6.0], [-5.0, 5.0], [-1.0, 2.0]]).unwrap()
}

fn point() -> impl Strategy<Value = LidarPoint> {
    // reaches a little past the grid so some points are dropped
    (-7.0f64..7.0, -6.0f64..6.0, -1.5f64..2.5, 0u8..N_SEMANTIC as u8)
        .prop_map(|(x, y, z, class)| LidarPoint { p: Vector3::new(x, y, z), class })
}

/// Count-and-argmax with the smallest class winning ties.
fn brute_force(points: &[LidarPoint], grid: &EgoGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(grid.n_voxels());
    for h in 0..grid.h() {
        for w in 0..grid.w() {
            for d in 0..grid.d() {
                let mut counts = [0usize; N_SEMANTIC];
                for q in points.iter().filter(|q| grid.voxel_of(&q.p) == Some([h, w, d])) {
                    counts[q.class as usize] += 1;
                }
                let max = *counts.iter().max().unwrap();
                out.push(if max == 0 { EMPTY } else { counts.iter().position(|&c| c == max).unwrap() as u8 });
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn voxelization_ignores_point_order(points in proptest::collection::vec(point(), 0..300), perm_seed in any::<u64>()) {
        let g = grid();
        let base = voxelize_labels(&points, &g).unwrap();
        prop_assert_eq!(&base.labels, &brute_force(&points, &g));

        let mut shuffled = points.clone();
        let mut s = perm_seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(voxelize_labels(&shuffled, &g).unwrap(), base);
    }
}

#[test]
fn scenes_and_frames_are_seed_determined() {
    let rig = || surround_rig(24, 16, 70f64.to_radians());
    let a = desk_scene(31, 3, rig()).unwrap();
    assert_eq!(a, desk_scene(31, 3, rig()).unwrap());
    assert_ne!(a, desk_scene(32, 3, rig()).unwrap());

    let render = render_config();
    for t in 0..3 {
        let x = generate_scene(&a, t, &render).unwrap();
        let y = generate_scene(&a, t, &render).unwrap();
        assert_eq!(x.ego_pose, y.ego_pose);
        assert_eq!(x.lidar_points, y.lidar_points);
        for (p, q) in x.pyramids.iter().flatten().zip(y.pyramids.iter().flatten()) {
            assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert!(!x.lidar_points.is_empty());
    }
}

#[test]
fn earlier_sweeps_round_trip_through_the_global_frame() {
    let spec = desk_scene(5, 3, surround_rig(24, 16, 70f64.to_radians())).unwrap();
    let t = 2;
    let merged = sweep_points(&spec, t, 2).unwrap();
    let older = sample_lidar(&spec, t - 1, lidar_seed(&spec, t - 1)).unwrap();
    let current = sample_lidar(&spec, t, lidar_seed(&spec, t)).unwrap();
    assert_eq!(merged.len(), older.len() + current.len());

    let (pose_old, pose_t) = (spec.pose(t - 1).unwrap(), spec.pose(t).unwrap());
    let moved: Vec<&LidarPoint> = merged.iter().filter(|m| !current.contains(m)).collect();
    assert_eq!(moved.len(), older.len());
    let mut worst: f64 = 0.0;
    for (m, o) in moved.iter().zip(&older) {
        assert_eq!(m.class, o.class);
        // both land on the same global point
        worst = worst.max((pose_t.apply(&m.p) - pose_old.apply(&o.p)).norm());
        // and back into the older ego frame
        worst = worst.max((pose_old.inverse().apply(&pose_t.apply(&m.p)) - o.p).norm());
    }
    assert!(worst < 1e-9, "round trip error {worst:e} m");
}
