//! Tri-plane aggregation and cross-view reference properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2tpv::geometry::{Axis, EgoGrid, Plane};
use s2tpv::tensor::Tensor;
use s2tpv::tpv::{aggregate_point, aggregate_voxels, cross_view_refs, query_count, TpvState};

fn random_state(rng: &mut ChaCha8Rng, [h, w, d]: [usize; 3], c: usize) -> TpvState {
    let mut t = |rows: usize, cols: usize| {
        let n = rows * cols * c;
        Tensor::new(&[rows, cols, c], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    TpvState::new(t(h, w), t(d, h), t(w, d)).unwrap()
}

fn grid(dims: [usize; 3]) -> EgoGrid {
    EgoGrid::new(dims, [[-8.0, 8.0], [-6.0, 6.0], [-1.0, 3.0]]).unwrap()
}

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    (1usize..6, 1usize..6, 1usize..4).prop_map(|(h, w, d)| [h, w, d])
}

proptest! {
    #[test]
    fn voxel_broadcast_equals_point_sampling_at_centers(dims in dims_strategy(), c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, dims, c);
        let g = grid(dims);
        let vox = aggregate_voxels(&s).unwrap();
        prop_assert_eq!(vox.shape(), &[dims[0], dims[1], dims[2], c]);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    let p = aggregate_point(&s, &g, &g.voxel_center(h, w, d)).unwrap();
                    let o = ((h * dims[1] + w) * dims[2] + d) * c;
                    for k in 0..c {
                        prop_assert!((vox.data()[o + k] - p.data()[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_matches_a_naive_loop_bit_for_bit(dims in dims_strategy(), c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, dims, c);
        let vox = aggregate_voxels(&s).unwrap();
        let [hh, ww, dd] = dims;
        let mut i = 0;
        for h in 0..hh {
            for w in 0..ww {
                for d in 0..dd {
                    for k in 0..c {
                        let want = s.hw.get(&[h, w, k]) + s.dh.get(&[d, h, k]) + s.wd.get(&[w, d, k]);
                        prop_assert_eq!(vox.data()[i].to_bits(), want.to_bits());
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn aggregation_is_linear(dims in dims_strategy(), seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, frac in prop::array::uniform3(0.0f64..1.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_state(&mut rng, dims, 2), random_state(&mut rng, dims, 2));
        let mix = a.lincomb(alpha, &b, beta).unwrap();
        let combine = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| alpha * p + beta * q).unwrap();

        let want = combine(&aggregate_voxels(&a).unwrap(), &aggregate_voxels(&b).unwrap());
        prop_assert!(aggregate_voxels(&mix).unwrap().max_abs_diff(&want) < 1e-9);

        let g = grid(dims);
        let lo = |axis: Axis| g.bounds[axis.index()][0];
        let span = |axis: Axis| g.bounds[axis.index()][1] - lo(axis);
        let p = nalgebra::Vector3::new(
            lo(Axis::H) + frac[0] * span(Axis::H),
            lo(Axis::W) + frac[1] * span(Axis::W),
            lo(Axis::D) + frac[2] * span(Axis::D),
        );
        let want = combine(&aggregate_point(&a, &g, &p).unwrap(), &aggregate_point(&b, &g, &p).unwrap());
        prop_assert!(aggregate_point(&mix, &g, &p).unwrap().max_abs_diff(&want) < 1e-9);
    }
}

fn plane_extent(p: Plane, [h, w, d]: [usize; 3]) -> (usize, usize) {
    match p {
        Plane::Hw => (h, w),
        Plane::Dh => (d, h),
        Plane::Wd => (w, d),
    }
}

#[test]
fn cross_view_refs_stay_inside_their_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let dims = [rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..6)];
        let plane = Plane::ALL[rng.gen_range(0..3)];
        let n_cross = rng.gen_range(1..6);
        let (rows, cols) = plane_extent(plane, dims);
        let cell = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let r = cross_view_refs(plane, cell, dims, n_cross).unwrap();
        assert_eq!(r.self_point, [cell.0 as f64, cell.1 as f64]);
        for (other, pts) in &r.cross {
            assert_ne!(*other, plane);
            assert_eq!(pts.len(), n_cross);
            let (or, oc) = plane_extent(*other, dims);
            for &[a, b] in pts {
                assert!(
                    (0.0..=(or - 1) as f64).contains(&a) && (0.0..=(oc - 1) as f64).contains(&b),
                    "{plane:?} {cell:?} -> {other:?} {a},{b}"
                );
            }
        }
        assert!(cross_view_refs(plane, (rows, 0), dims, n_cross).is_err());
    }
}

#[test]
fn top_plane_origin_cell_reads_the_column_through_it() {
    let r = cross_view_refs(Plane::Hw, (0, 0), [4, 4, 3], 3).unwrap();
    assert_eq!(r.self_point, [0.0, 0.0]);
    assert_eq!(r.cross[0], (Plane::Dh, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]));
    assert_eq!(r.cross[1], (Plane::Wd, vec![[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]]));
}

#[test]
fn query_count_enumerates_plane_cells() {
    for h in 1..8 {
        for w in 1..8 {
            for d in 1..5 {
                let cells: usize = Plane::ALL
                    .iter()
                    .map(|&p| {
                        let (r, c) = plane_extent(p, [h, w, d]);
                        r * c
                    })
                    .sum();
                assert_eq!(query_count([h, w, d]), cells);
            }
        }
    }
    assert_eq!(query_count([100, 100, 8]), 11_600);
}
