use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, DenseMap};
use super::{max_abs, rand_tensor, randomize, timed, Check, SuiteReport};
use crate::attention::{cvha, plan_sca, sca, tcvha_step, Cvha, DeformAttn, DeformAttnShape, Tcvha};
use crate::error::Result;
use crate::geometry::{sample_ego_refs, vvt, CameraModel, EgoGrid, Plane, RigidTransform, Z_NEAR};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::tpv::{TpvState, TpvVars};

const TOL: f64 = 1e-9;
const DIMS: [usize; 3] = [4, 4, 2];
const C: usize = 4;
const HEADS: usize = 2;

/// Largest deviation of any softmax row from summing to one; rows that are
/// fully masked must sum to zero instead.
fn weight_row_error(g: &Graph<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for op in ["softmax", "masked_softmax"] {
        for t in g.values_of(op) {
            let k = t.last_dim();
            for row in t.data().chunks(k) {
                let s: f64 = row.iter().sum();
                let e = if op == "masked_softmax" && s == 0.0 { 0.0 } else { (s - 1.0).abs() };
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
        }
    }
    worst
}

fn state_maps(s: &TpvState<f64>) -> oracle::Planes {
    Plane::ALL.map(|p| DenseMap::from_tensor(s.plane(p)))
}

fn random_state<R: Rng>(rng: &mut R) -> TpvState<f64> {
    let mut s = TpvState::zeros(DIMS, C);
    for p in Plane::ALL {
        let shape = s.plane(p).shape().to_vec();
        *s.plane_mut(p) = rand_tensor(&shape, 1.0, rng);
    }
    s
}

fn flat(s: &TpvState<f64>, p: Plane) -> &[f64] {
    s.plane(p).data()
}

/// Deformable attention and the three TPV attention blocks against dense
/// loops on 4x4x2 grids with every parameter randomized.
pub fn attention_suite(cases: usize) -> Result<SuiteReport> {
    timed("attention", || {
        let mut deform = Check::new("deform_attn vs dense loops", TOL);
        let mut deform_w = Check::new("deform_attn weights vs dense softmax", TOL);
        let mut sca_c = Check::new("sca vs dense loops", TOL);
        let mut cvha_c = Check::new("cvha vs dense loops", TOL);
        let mut tcvha_c = Check::new("tcvha_step vs dense loops", TOL);
        let mut sums = Check::new("attention weights sum to one", 1e-6);

        for case in 0..cases as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0xA77E_0000 + case);

            // Plain deformable attention with masks and two value maps.
            let shape =
                DeformAttnShape { c_query: 3, c_value: 5, embed_dim: C, n_heads: HEADS, n_refs: 3, n_points: 2 };
            let mut store = ParamStore::new();
            let a = DeformAttn::new(&mut store, "a", shape, &mut rng)?;
            randomize(&mut store, 0.6, &mut rng);
            let n = 6;
            let maps = [rand_tensor(&[4, 4, 5], 1.0, &mut rng), rand_tensor(&[3, 5, 5], 1.0, &mut rng)];
            let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
            let base = rand_tensor(&[n, 3, 2], 1.0, &mut rng).map(|v| 1.5 + 2.0 * v);
            let mut mask: Vec<bool> = (0..n * 3).map(|_| rng.gen_bool(0.7)).collect();
            mask[..3].iter_mut().for_each(|m| *m = false);
            let queries = rand_tensor(&[n, 3], 1.0, &mut rng);
            let mut g: Graph = Graph::new();
            let params = g.params(&store);
            let mvars: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
            let values = a.project_values(&mut g, &params, &mvars)?;
            let q = g.constant(queries.clone());
            let r = a.attend(&mut g, &params, q, &values, &ids, &base, Some(&mask))?;
            let dense: Vec<DenseMap> =
                maps.iter().map(|m| DenseMap::from_tensor(m).project(&store, &a.value)).collect();
            for i in 0..n {
                let b: Vec<[f64; 2]> = (0..3).map(|k| [base.get(&[i, k, 0]), base.get(&[i, k, 1])]).collect();
                let want =
                    oracle::deform_query(&store, &a, queries.row(i), &dense, &ids, &b, &mask[i * 3..(i + 1) * 3]);
                deform.see(max_abs(g.value(r.out).row(i), &want.out));
                let wrow = &g.value(r.weights).data()[i * HEADS * 6..(i + 1) * HEADS * 6];
                deform_w.see(max_abs(wrow, &want.weights));
            }
            sums.see(weight_row_error(&g));

            // Spatial cross-attention with two cameras and a moving ego.
            let grid = EgoGrid::new(DIMS, [[-4.0, 4.0], [-4.0, 4.0], [-1.0, 3.0]])?;
            let (n_ref, n_levels, feat) = (3, 2, 3);
            let cameras: Vec<CameraModel> = (0..2)
                .map(|_| {
                    let mount =
                        Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(0.5..2.0));
                    CameraModel::facing(rng.gen_range(-3.1..3.1), mount, rng.gen_range(1.2..2.2), 8, 6)
                })
                .collect::<Result<_>>()?;
            let past =
                RigidTransform::planar(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
            let cur =
                RigidTransform::planar(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3));
            let pyramids: Vec<Vec<Tensor<f64>>> = (0..2)
                .map(|_| vec![rand_tensor(&[6, 8, feat], 1.0, &mut rng), rand_tensor(&[3, 4, feat], 1.0, &mut rng)])
                .collect();
            let shape = DeformAttnShape {
                c_query: C,
                c_value: feat,
                embed_dim: C,
                n_heads: HEADS,
                n_refs: n_levels * n_ref,
                n_points: 2,
            };
            let mut store = ParamStore::new();
            let a = DeformAttn::new(&mut store, "sca", shape, &mut rng)?;
            randomize(&mut store, 0.6, &mut rng);
            let views: Vec<RigidTransform> =
                cameras.iter().map(|c| vvt(&c.extrinsic, &past, &cur)).collect::<Result<_>>()?;
            let level_shapes: Vec<Vec<[usize; 2]>> =
                pyramids.iter().map(|p| p.iter().map(|t| [t.shape()[0], t.shape()[1]]).collect()).collect();
            let dense_pyr: Vec<Vec<DenseMap>> =
                pyramids.iter().map(|p| p.iter().map(DenseMap::from_tensor).collect()).collect();
            let state = random_state(&mut rng);
            let mut g: Graph = Graph::new();
            let params = g.params(&store);
            let pvars: Vec<Vec<_>> =
                pyramids.iter().map(|p| p.iter().map(|t| g.constant(t.clone())).collect()).collect();
            let values = pvars.iter().map(|l| a.project_values(&mut g, &params, l)).collect::<Result<Vec<_>>>()?;
            for plane in Plane::ALL {
                let refs = sample_ego_refs(plane, &grid, n_ref)?;
                let plan = plan_sca(&refs, &cameras, &views, &level_shapes)?;
                let q = g.constant(state.plane(plane).clone());
                let out = sca(&mut g, &params, &a, q, &plan, &values)?;
                let want = oracle::sca_plane(
                    &store,
                    &a,
                    plane,
                    &grid,
                    n_ref,
                    flat(&state, plane),
                    &cameras,
                    &dense_pyr,
                    (&past, &cur),
                    Z_NEAR,
                );
                sca_c.see(max_abs(g.value(out).data(), &want));
            }
            sums.see(weight_row_error(&g));

            // Cross-view hybrid attention.
            let mut store = ParamStore::new();
            let m = Cvha::new(&mut store, "cvha", C, HEADS, 2, 2, &mut rng)?;
            randomize(&mut store, 0.6, &mut rng);
            let x = random_state(&mut rng);
            let mut g: Graph = Graph::new();
            let params = g.params(&store);
            let xv = TpvVars::constant(&mut g, &x);
            let y = cvha(&mut g, &params, &m, xv)?.value(&g);
            let want = oracle::cvha(&store, &m.attn, m.n_cross, &state_maps(&x), DIMS);
            for p in Plane::ALL {
                cvha_c.see(max_abs(flat(&y, p), &want[p.index()]));
            }
            sums.see(weight_row_error(&g));

            // One temporal step.
            let mut store = ParamStore::new();
            let m = Tcvha::new(&mut store, "tcvha", C, HEADS, 2, 2, &mut rng)?;
            randomize(&mut store, 0.6, &mut rng);
            let (prev, cur_s) = (random_state(&mut rng), random_state(&mut rng));
            let mut g: Graph = Graph::new();
            let params = g.params(&store);
            let (pv, cv) = (TpvVars::constant(&mut g, &prev), TpvVars::constant(&mut g, &cur_s));
            let y = tcvha_step(&mut g, &params, &m, pv, cv)?.value(&g);
            let want =
                oracle::tcvha_step(&store, &m.fuse, &m.attn, m.n_cross, &state_maps(&prev), &state_maps(&cur_s), DIMS);
            for p in Plane::ALL {
                tcvha_c.see(max_abs(flat(&y, p), &want[p.index()]));
            }
            sums.see(weight_row_error(&g));
        }
        Ok(vec![deform, deform_w, sca_c, cvha_c, tcvha_c, sums])
    })
}
