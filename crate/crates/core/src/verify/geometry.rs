use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Mat4};
use super::{timed, Check, SuiteReport};
use crate::error::Result;
use crate::geometry::{
    hit_views, project_refs, sample_ego_refs, vvt, warp_bev, CameraModel, EgoGrid, Plane, RigidTransform, Z_NEAR,
};
use crate::tensor::Tensor;

const TOL: f64 = 1e-9;

fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.gen_range(-3.1..3.1)).matrix()
}

fn random_rigid<R: Rng>(rng: &mut R, reach: f64) -> RigidTransform {
    let t = Vector3::new(rng.gen_range(-reach..reach), rng.gen_range(-reach..reach), rng.gen_range(-reach..reach));
    RigidTransform::new(random_rotation(rng), t).expect("orthonormal")
}

fn mat4_of(t: &RigidTransform) -> Mat4 {
    let (r, v) = oracle::mat3(t);
    oracle::homogeneous(&r, &v)
}

fn mat4_diff(a: &Mat4, b: &Mat4) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

/// A camera with skew and an arbitrary mount, or a level one from the rig helper.
fn random_camera<R: Rng>(rng: &mut R) -> CameraModel {
    let (w, h) = (rng.gen_range(16..96), rng.gen_range(12..64));
    if rng.gen_bool(0.5) {
        let mount = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0));
        return CameraModel::facing(rng.gen_range(-3.1..3.1), mount, rng.gen_range(0.6..2.0), w, h).expect("camera");
    }
    let f = rng.gen_range(10.0..80.0);
    let k = Matrix3::new(
        f * rng.gen_range(0.8..1.2),
        rng.gen_range(-2.0..2.0),
        w as f64 * rng.gen_range(0.3..0.7),
        0.0,
        f,
        h as f64 * rng.gen_range(0.3..0.7),
        0.0,
        0.0,
        1.0,
    );
    CameraModel::new(k, random_rigid(rng, 1.5), (w, h)).expect("camera")
}

/// Virtual view composition, projection and top-plane warping against
/// explicit matrix algebra and scalar pinhole arithmetic.
pub fn geometry_suite(cases: usize) -> Result<SuiteReport> {
    timed("geometry", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6E0);
        let mut expanded = Check::new("vvt vs expanded rotation/translation", TOL);
        let mut product = Check::new("vvt vs 4x4 homogeneous product", TOL);
        let mut identity = Check::new("vvt identity (same pose)", TOL);
        let mut compose = Check::new("vvt composition through a middle pose", TOL);
        let mut projection = Check::new("projection vs scalar pinhole (px)", TOL);
        let mut validity = Check::new("projection validity flags", 0.0);
        let mut hits = Check::new("hit views vs brute force", 0.0);
        let mut warp = Check::new("warp vs vvt under pure translation", TOL);

        for _ in 0..cases {
            let cam = random_rigid(&mut rng, 2.0);
            let (p1, p2, p3) =
                (random_rigid(&mut rng, 50.0), random_rigid(&mut rng, 50.0), random_rigid(&mut rng, 50.0));
            let v = vvt(&cam, &p1, &p3)?;
            let got = mat4_of(&v);

            let (r, t) = oracle::vvt_expanded(&cam, &p1, &p3);
            expanded.see(mat4_diff(&got, &oracle::homogeneous(&r, &t)));

            let want = oracle::mat4_mul(
                &oracle::rigid_inverse4(&mat4_of(&cam)),
                &oracle::mat4_mul(&oracle::rigid_inverse4(&mat4_of(&p1)), &mat4_of(&p3)),
            );
            product.see(mat4_diff(&got, &want));

            identity.see(mat4_diff(&mat4_of(&vvt(&cam, &p2, &p2)?), &oracle::rigid_inverse4(&mat4_of(&cam))));

            let via = oracle::mat4_mul(
                &mat4_of(&vvt(&cam, &p1, &p2)?),
                &oracle::mat4_mul(&oracle::rigid_inverse4(&mat4_of(&p2)), &mat4_of(&p3)),
            );
            compose.see(mat4_diff(&got, &via));

            // projection through a virtual view
            let camera = random_camera(&mut rng);
            let (past, cur) = (random_rigid(&mut rng, 3.0), random_rigid(&mut rng, 3.0));
            let view = vvt(&camera.extrinsic, &past, &cur)?;
            let (rv, tv) = oracle::vvt_expanded(&camera.extrinsic, &past, &cur);
            let pts: Vec<Vector3<f64>> = (0..32)
                .map(|_| Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0)))
                .collect();
            let proj = project_refs(&pts, &view, &camera);
            for (i, p) in pts.iter().enumerate() {
                let pc = oracle::apply(&rv, &tv, &[p.x, p.y, p.z]);
                match oracle::pinhole(&camera, &pc, Z_NEAR) {
                    Some((uv, inside)) => {
                        projection.see((proj.pixels[i][0] - uv[0]).abs().max((proj.pixels[i][1] - uv[1]).abs()));
                        validity.expect(proj.valid[i] == inside);
                    }
                    None => validity.expect(!proj.valid[i]),
                }
            }
        }

        for _ in 0..cases.div_ceil(4) {
            let dims = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4)];
            let grid = EgoGrid::new(dims, [[-6.0, 6.0], [-5.0, 7.0], [-1.0, 3.0]])?;
            let n_ref = rng.gen_range(1..4);
            let cameras: Vec<CameraModel> = (0..3).map(|_| random_camera(&mut rng)).collect();
            let (past, cur) = (random_rigid(&mut rng, 2.0), random_rigid(&mut rng, 2.0));
            let views: Vec<RigidTransform> =
                cameras.iter().map(|c| vvt(&c.extrinsic, &past, &cur)).collect::<Result<_>>()?;
            for plane in Plane::ALL {
                let refs = sample_ego_refs(plane, &grid, n_ref)?;
                let got = hit_views(&refs, &cameras, &views)?;
                let (rows, cols) = grid.plane_dims(plane);
                for a in 0..rows {
                    for b in 0..cols {
                        let pillar = oracle::pillar(plane, &grid, a, b, n_ref);
                        let want: Vec<usize> = (0..cameras.len())
                            .filter(|&i| {
                                let (rv, tv) = oracle::vvt_expanded(&cameras[i].extrinsic, &past, &cur);
                                pillar.iter().any(|p| {
                                    matches!(
                                        oracle::pinhole(&cameras[i], &oracle::apply(&rv, &tv, p), Z_NEAR),
                                        Some((_, true))
                                    )
                                })
                            })
                            .collect();
                        hits.expect(got[a * cols + b] == want);
                    }
                }
            }
        }

        // A field linear in global (x, y) is reproduced exactly by bilinear
        // sampling wherever all four neighbours exist.
        let grid = EgoGrid::new([12, 10, 2], [[-6.0, 6.0], [-4.0, 6.0], [-1.0, 3.0]])?;
        let ident = RigidTransform::identity();
        for _ in 0..cases {
            let yaw = rng.gen_range(-3.1..3.1);
            let (x0, y0) = (rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0));
            let prev = RigidTransform::planar(x0, y0, yaw);
            let (dx, dy) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let cur = prev.compose(&RigidTransform::from_translation(dx, dy, 0.0));
            let coef: Vec<[f64; 3]> = (0..2)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)])
                .collect();
            let field =
                |g: &Vector3<f64>| -> Vec<f64> { coef.iter().map(|c| c[0] + c[1] * g.x + c[2] * g.y).collect() };
            let mut data = Vec::new();
            for i in 0..grid.h() {
                for j in 0..grid.w() {
                    data.extend(field(&prev.apply(&grid.voxel_center(i, j, 0))));
                }
            }
            let prev_bev = Tensor::new(&[grid.h(), grid.w(), 2], data)?;
            let warped = warp_bev(&prev_bev, &prev, &cur, &grid)?;
            let (rv, tv) = oracle::vvt_expanded(&ident, &prev, &cur);
            for i in 0..grid.h() {
                for j in 0..grid.w() {
                    let c = grid.voxel_center(i, j, 0);
                    let q = oracle::apply(&rv, &tv, &[c.x, c.y, 0.0]);
                    let r = (q[0] - grid.bounds[0][0]) / grid.cell_size(crate::geometry::Axis::H) - 0.5;
                    let s = (q[1] - grid.bounds[1][0]) / grid.cell_size(crate::geometry::Axis::W) - 0.5;
                    let got = &warped.data()[(i * grid.w() + j) * 2..(i * grid.w() + j + 1) * 2];
                    let margin = 1e-6;
                    if r >= margin
                        && r <= (grid.h() - 1) as f64 - margin
                        && s >= margin
                        && s <= (grid.w() - 1) as f64 - margin
                    {
                        let want = field(&prev.apply(&Vector3::new(q[0], q[1], q[2])));
                        warp.see(super::max_abs(got, &want));
                    } else if r <= -1.0 - margin
                        || s <= -1.0 - margin
                        || r >= grid.h() as f64 + margin
                        || s >= grid.w() as f64 + margin
                    {
                        warp.see(got.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
                    }
                }
            }
        }
        Ok(vec![expanded, product, identity, compose, projection, validity, hits, warp])
    })
}
