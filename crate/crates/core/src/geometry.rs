//! Rigid-body and camera math.
//!
//! Frames: ego space has x forward, y left, z up, origin on the ground under
//! the vehicle. Cameras use x right, y down, z along the optical axis. The
//! voxel grid maps H to x, W to y and D to z.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sample_bilinear, Real, Tensor};

const ORTHO_TOL: f64 = 1e-9;

/// Minimum camera-space depth for a projection to count as valid (meters).
pub const Z_NEAR: f64 = 0.1;

/// Rotation plus translation, `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validating constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.check()?;
        Ok(t)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    /// Planar pose: yaw about +z, then translation in the ground plane.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        RigidTransform {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// Errors unless `R^T R = I` and `det R = 1` within 1e-9.
    pub fn check(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Geometry("non-finite transform".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Geometry(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:.3e}, det = {det:.12})"
            )));
        }
        Ok(())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        RigidTransform {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Yaw angle of the rotated x axis, for planar poses.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// Pinhole camera with its mounting on the vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// Camera to ego.
    pub extrinsic: RigidTransform,
    /// (width, height) in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(intrinsics: Matrix3<f64>, extrinsic: RigidTransform, image_size: (usize, usize)) -> Result<Self> {
        let k = &intrinsics;
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !upper || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) {
            return Err(Error::Geometry(format!(
                "intrinsics must be upper-triangular with positive focal lengths: {k}"
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::Geometry("empty image".into()));
        }
        extrinsic.check()?;
        Ok(CameraModel { intrinsics, extrinsic, image_size })
    }

    /// A level camera at `mount` (ego meters) looking along `yaw`, with a
    /// horizontal field of view in radians and a centered principal point.
    pub fn facing(yaw: f64, mount: Vector3<f64>, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        let k = Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(k, camera_mount(yaw, mount), (width, height))
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    /// Unit ray direction in camera coordinates through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector3::new(x, y, 1.0).normalize()
    }
}

/// Camera-to-ego transform for a level camera facing `yaw`.
pub fn camera_mount(yaw: f64, mount: Vector3<f64>) -> RigidTransform {
    let (s, c) = yaw.sin_cos();
    let forward = Vector3::new(c, s, 0.0);
    let right = Vector3::new(s, -c, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    RigidTransform { rotation: Matrix3::from_columns(&[right, down, forward]), translation: mount }
}

/// Virtual view transformation.
///
/// Maps a point in the current ego frame into camera `i` as it was mounted at
/// a past timestep: current ego -> global -> past ego -> past camera.
/// `camera` is camera->ego, both poses are ego->global.
pub fn vvt(
    camera: &RigidTransform,
    past_pose: &RigidTransform,
    current_pose: &RigidTransform,
) -> Result<RigidTransform> {
    camera.check()?;
    past_pose.check()?;
    current_pose.check()?;
    let m = camera.to_homogeneous().try_inverse().expect("rigid transforms are invertible")
        * past_pose.to_homogeneous().try_inverse().expect("rigid transforms are invertible")
        * current_pose.to_homogeneous();
    Ok(RigidTransform::from_homogeneous(&m))
}

/// The three TPV planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    /// Top view, indexed `(h, w)`.
    Hw,
    /// Indexed `(d, h)`.
    Dh,
    /// Indexed `(w, d)`.
    Wd,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Hw, Plane::Dh, Plane::Wd];

    pub fn index(self) -> usize {
        match self {
            Plane::Hw => 0,
            Plane::Dh => 1,
            Plane::Wd => 2,
        }
    }

    /// The two other planes in cyclic order HW -> DH -> WD -> HW.
    pub fn others(self) -> [Plane; 2] {
        match self {
            Plane::Hw => [Plane::Dh, Plane::Wd],
            Plane::Dh => [Plane::Wd, Plane::Hw],
            Plane::Wd => [Plane::Hw, Plane::Dh],
        }
    }

    /// Grid axes spanned by the plane as (row axis, col axis).
    pub fn axes(self) -> (Axis, Axis) {
        match self {
            Plane::Hw => (Axis::H, Axis::W),
            Plane::Dh => (Axis::D, Axis::H),
            Plane::Wd => (Axis::W, Axis::D),
        }
    }

    /// The grid axis orthogonal to the plane.
    pub fn normal(self) -> Axis {
        match self {
            Plane::Hw => Axis::D,
            Plane::Dh => Axis::W,
            Plane::Wd => Axis::H,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Hw => "hw",
            Plane::Dh => "dh",
            Plane::Wd => "wd",
        }
    }
}

/// Grid axes; H is metric x, W is metric y, D is metric z.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    H,
    W,
    D,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::H => 0,
            Axis::W => 1,
            Axis::D => 2,
        }
    }
}

/// Metric extent of ego space and its voxel discretization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoGrid {
    /// Cells along (H, W, D).
    pub dims: [usize; 3],
    /// Metric `[min, max)` along x, y, z.
    pub bounds: [[f64; 2]; 3],
}

impl EgoGrid {
    pub fn new(dims: [usize; 3], bounds: [[f64; 2]; 3]) -> Result<Self> {
        let g = EgoGrid { dims, bounds };
        g.check()?;
        Ok(g)
    }

    pub fn check(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Geometry(format!("grid dims must be positive: {:?}", self.dims)));
        }
        for b in &self.bounds {
            if !(b[1] - b[0] > 0.0) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(Error::Geometry(format!("degenerate ego bounds {b:?}")));
            }
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.dims[0]
    }

    pub fn w(&self) -> usize {
        self.dims[1]
    }

    pub fn d(&self) -> usize {
        self.dims[2]
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.dims[axis.index()]
    }

    pub fn cell_size(&self, axis: Axis) -> f64 {
        let b = self.bounds[axis.index()];
        (b[1] - b[0]) / self.dims[axis.index()] as f64
    }

    /// Metric coordinate of the center of cell `i` along `axis`.
    pub fn center(&self, axis: Axis, i: usize) -> f64 {
        self.bounds[axis.index()][0] + (i as f64 + 0.5) * self.cell_size(axis)
    }

    /// Continuous node coordinate of a metric position (cell centers are integers).
    pub fn to_continuous(&self, axis: Axis, metric: f64) -> f64 {
        (metric - self.bounds[axis.index()][0]) / self.cell_size(axis) - 0.5
    }

    pub fn voxel_center(&self, h: usize, w: usize, d: usize) -> Vector3<f64> {
        Vector3::new(self.center(Axis::H, h), self.center(Axis::W, w), self.center(Axis::D, d))
    }

    /// Voxel containing a metric point, if inside bounds.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for (a, slot) in idx.iter_mut().enumerate() {
            let b = self.bounds[a];
            if !(p[a] >= b[0] && p[a] < b[1]) {
                return None;
            }
            let i = ((p[a] - b[0]) / (b[1] - b[0]) * self.dims[a] as f64).floor() as usize;
            *slot = i.min(self.dims[a] - 1);
        }
        Some(idx)
    }

    /// (rows, cols) of a plane.
    pub fn plane_dims(&self, plane: Plane) -> (usize, usize) {
        let (r, c) = plane.axes();
        (self.extent(r), self.extent(c))
    }

    pub fn plane_cells(&self, plane: Plane) -> usize {
        let (r, c) = self.plane_dims(plane);
        r * c
    }
}

/// Lifted pillar points for every cell of one plane, cell-major.
#[derive(Clone, Debug)]
pub struct EgoRefPoints {
    pub plane: Plane,
    pub n_ref: usize,
    /// `cells * n_ref` ego points; cell `(a, b)` owns `[(a * cols + b) * n_ref ..]`.
    pub points: Vec<Vector3<f64>>,
    /// Sample depths along the plane normal (meters).
    pub depths: Vec<f64>,
}

impl EgoRefPoints {
    pub fn n_cells(&self) -> usize {
        self.points.len() / self.n_ref
    }

    pub fn cell(&self, c: usize) -> &[Vector3<f64>] {
        &self.points[c * self.n_ref..(c + 1) * self.n_ref]
    }
}

/// Midpoints of `n` equal partitions of `[lo, hi)`.
pub fn midpoint_depths(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * step).collect()
}

/// Reference points sampled uniformly along the axis orthogonal to `plane`
/// at each plane cell's metric center.
pub fn sample_ego_refs(plane: Plane, grid: &EgoGrid, n_ref: usize) -> Result<EgoRefPoints> {
    grid.check()?;
    if n_ref == 0 {
        return Err(Error::Geometry("n_ref must be at least 1".into()));
    }
    let normal = plane.normal();
    let nb = grid.bounds[normal.index()];
    let depths = midpoint_depths(nb[0], nb[1], n_ref);
    let (ra, ca) = plane.axes();
    let (rows, cols) = grid.plane_dims(plane);
    let mut points = Vec::with_capacity(rows * cols * n_ref);
    for a in 0..rows {
        for b in 0..cols {
            let mut p = Vector3::zeros();
            p[ra.index()] = grid.center(ra, a);
            p[ca.index()] = grid.center(ca, b);
            for &dk in &depths {
                p[normal.index()] = dk;
                points.push(p);
            }
        }
    }
    Ok(EgoRefPoints { plane, n_ref, points, depths })
}

/// Image-plane projections of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(u, v)` pixel coordinates; meaningful only where `valid`.
    pub pixels: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Projects ego points through a (virtual) view and the camera intrinsics.
/// A point is valid when it lies beyond [`Z_NEAR`] and inside the image.
pub fn project_refs(points: &[Vector3<f64>], virtual_view: &RigidTransform, camera: &CameraModel) -> Projection {
    let k = &camera.intrinsics;
    let (wpx, hpx) = (camera.width() as f64, camera.height() as f64);
    let mut pixels = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let pc = virtual_view.apply(p);
        if !(pc.z > Z_NEAR) {
            pixels.push([f64::NAN, f64::NAN]);
            valid.push(false);
            continue;
        }
        let h = k * pc;
        let (u, v) = (h.x / h.z, h.y / h.z);
        pixels.push([u, v]);
        valid.push(u >= 0.0 && u < wpx && v >= 0.0 && v < hpx);
    }
    Projection { pixels, valid }
}

/// Per-camera projections of every reference point.
pub fn project_all(
    refs: &EgoRefPoints,
    cameras: &[CameraModel],
    virtual_views: &[RigidTransform],
) -> Result<Vec<Projection>> {
    if cameras.is_empty() {
        return Err(Error::Config("camera list is empty".into()));
    }
    if cameras.len() != virtual_views.len() {
        return Err(Error::Config(format!("{} cameras but {} virtual views", cameras.len(), virtual_views.len())));
    }
    Ok(cameras.iter().zip(virtual_views).map(|(cam, view)| project_refs(&refs.points, view, cam)).collect())
}

/// Hit views per cell from precomputed projections.
pub fn hit_views_from(projections: &[Projection], n_cells: usize, n_ref: usize) -> Vec<Vec<usize>> {
    (0..n_cells)
        .map(|c| {
            projections
                .iter()
                .enumerate()
                .filter(|(_, p)| p.valid[c * n_ref..(c + 1) * n_ref].iter().any(|&v| v))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Cameras onto which at least one of a cell's reference points projects
/// inside the image, for every cell.
pub fn hit_views(
    refs: &EgoRefPoints,
    cameras: &[CameraModel],
    virtual_views: &[RigidTransform],
) -> Result<Vec<Vec<usize>>> {
    let proj = project_all(refs, cameras, virtual_views)?;
    Ok(hit_views_from(&proj, refs.n_cells(), refs.n_ref))
}

/// Coordinates within this distance of an integer node are snapped onto it.
const SNAP: f64 = 1e-9;

/// Rounds `x` onto the nearest integer node when within floating-point noise.
pub fn snap_to_node(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Warps a top-view feature plane from the previous ego frame into the
/// current one. Each current cell center is carried to the previous ego frame
/// and bilinearly sampled; cells that land outside become zero.
pub fn warp_bev<T: Real>(
    prev_bev: &Tensor<T>,
    prev_pose: &RigidTransform,
    cur_pose: &RigidTransform,
    grid: &EgoGrid,
) -> Result<Tensor<T>> {
    let (h, w) = (grid.h(), grid.w());
    if prev_bev.rank() != 3 || prev_bev.shape()[0] != h || prev_bev.shape()[1] != w {
        return Err(Error::dim(format!("warp_bev: plane {:?} vs grid {h}x{w}", prev_bev.shape())));
    }
    let c = prev_bev.shape()[2];
    let to_prev = prev_pose.inverse().compose(cur_pose);
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h {
        for j in 0..w {
            let p = Vector3::new(grid.center(Axis::H, i), grid.center(Axis::W, j), 0.0);
            let q = to_prev.apply(&p);
            let r = snap_to_node(grid.to_continuous(Axis::H, q.x));
            let s = snap_to_node(grid.to_continuous(Axis::W, q.y));
            let o = (i * w + j) * c;
            sample_bilinear(prev_bev.data(), h, w, T::lit(r), T::lit(s), &mut out[o..o + c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn vvt_reduces_to_inverse_extrinsic() {
        let cam = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let id = RigidTransform::identity();
        let v = vvt(&cam, &id, &id).unwrap();
        assert_relative_eq!(v.rotation, Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(v.translation, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn vvt_zero_motion_is_inverse_camera() {
        let cam = RigidTransform::new(rot(Vector3::new(0.3, -1.0, 0.2), 0.7), Vector3::new(0.5, -0.2, 1.5)).unwrap();
        let pose = RigidTransform::planar(12.0, -3.0, 0.4);
        let v = vvt(&cam, &pose, &pose).unwrap();
        let inv = cam.inverse();
        assert!((v.rotation - inv.rotation).abs().max() < 1e-12);
        assert!((v.translation - inv.translation).abs().max() < 1e-12);
    }

    #[test]
    fn vvt_forward_motion() {
        let id = RigidTransform::identity();
        let past = RigidTransform::identity();
        let current = RigidTransform::from_translation(2.0, 0.0, 0.0);
        let v = vvt(&id, &past, &current).unwrap();
        assert_relative_eq!(v.apply(&Vector3::zeros()), Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn vvt_rejects_non_orthonormal() {
        let bad = RigidTransform { rotation: Matrix3::identity() * 1.1, translation: Vector3::zeros() };
        let id = RigidTransform::identity();
        assert!(matches!(vvt(&bad, &id, &id), Err(Error::Geometry(_))));
    }

    #[test]
    fn ego_ref_depths() {
        let grid = EgoGrid::new([2, 2, 4], [[0.0, 2.0], [0.0, 2.0], [-1.0, 3.0]]).unwrap();
        let refs = sample_ego_refs(Plane::Hw, &grid, 4).unwrap();
        assert_eq!(refs.depths, vec![-0.5, 0.5, 1.5, 2.5]);
        let one = sample_ego_refs(Plane::Hw, &grid, 1).unwrap();
        assert_eq!(one.depths, vec![1.0]);
        assert_eq!(one.cell(3)[0], Vector3::new(1.5, 1.5, 1.0));

        let big = EgoGrid::new([100, 100, 8], [[-50.0, 50.0], [-50.0, 50.0], [-5.0, 3.0]]).unwrap();
        assert_eq!(sample_ego_refs(Plane::Hw, &big, 4).unwrap().points.len(), 40000);
    }

    #[test]
    fn dh_and_wd_sample_their_normals() {
        let grid = EgoGrid::new([2, 3, 4], [[0.0, 2.0], [0.0, 3.0], [0.0, 4.0]]).unwrap();
        let dh = sample_ego_refs(Plane::Dh, &grid, 3).unwrap();
        assert_eq!(dh.n_cells(), 4 * 2);
        // cell (d=1, h=0): z = 1.5, x = 0.5, y sweeps W
        assert_eq!(
            dh.cell(2),
            &[Vector3::new(0.5, 0.5, 1.5), Vector3::new(0.5, 1.5, 1.5), Vector3::new(0.5, 2.5, 1.5)]
        );
        let wd = sample_ego_refs(Plane::Wd, &grid, 2).unwrap();
        assert_eq!(wd.cell(0), &[Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.5, 0.5, 0.5)]);
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let grid = EgoGrid { dims: [2, 2, 2], bounds: [[0.0, 1.0], [0.0, 1.0], [1.0, 1.0]] };
        assert!(matches!(sample_ego_refs(Plane::Hw, &grid, 2), Err(Error::Geometry(_))));
        let grid = EgoGrid { dims: [2, 2, 2], bounds: [[0.0, 1.0]; 3] };
        assert!(sample_ego_refs(Plane::Hw, &grid, 0).is_err());
    }

    fn optical_axis_camera(w: usize, h: usize) -> CameraModel {
        let k = Matrix3::new(100.0, 0.0, 320.0, 0.0, 100.0, 240.0, 0.0, 0.0, 1.0);
        CameraModel::new(k, RigidTransform::identity(), (w, h)).unwrap()
    }

    #[test]
    fn projection_cases() {
        let cam = optical_axis_camera(640, 480);
        let p = project_refs(
            &[Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, -1.0)],
            &RigidTransform::identity(),
            &cam,
        );
        assert_eq!(p.pixels[0], [320.0, 240.0]);
        assert_eq!(p.valid, vec![true, false]);

        let cam = optical_axis_camera(1600, 900);
        // (1700, 500) at depth 1
        let p = project_refs(&[Vector3::new(13.8, 2.6, 1.0)], &RigidTransform::identity(), &cam);
        assert_relative_eq!(p.pixels[0][0], 1700.0, epsilon = 1e-9);
        assert_relative_eq!(p.pixels[0][1], 500.0, epsilon = 1e-9);
        assert!(!p.valid[0]);
    }

    #[test]
    fn camera_mount_looks_along_yaw() {
        let cam = CameraModel::facing(std::f64::consts::FRAC_PI_2, Vector3::new(0.0, 0.0, 1.5), 1.2, 64, 48).unwrap();
        let view = cam.extrinsic.inverse();
        // a point 5 m to the left at camera height is straight ahead
        let p = project_refs(&[Vector3::new(0.0, 5.0, 1.5)], &view, &cam);
        assert!(p.valid[0]);
        assert_relative_eq!(p.pixels[0][0], 32.0, epsilon = 1e-9);
        assert_relative_eq!(p.pixels[0][1], 24.0, epsilon = 1e-9);
        // and a point above it projects higher in the image (smaller v)
        let p = project_refs(&[Vector3::new(0.0, 5.0, 2.0)], &view, &cam);
        assert!(p.pixels[0][1] < 24.0);
    }

    #[test]
    fn hit_views_single_forward_camera() {
        let grid = EgoGrid::new([4, 4, 2], [[-8.0, 8.0], [-8.0, 8.0], [-1.0, 3.0]]).unwrap();
        let cam = CameraModel::facing(0.0, Vector3::new(0.0, 0.0, 1.5), 1.5, 64, 64).unwrap();
        let refs = sample_ego_refs(Plane::Hw, &grid, 4).unwrap();
        let views = [cam.extrinsic.inverse()];
        let hits = hit_views(&refs, std::slice::from_ref(&cam), &views).unwrap();
        // cell (h=3, w=1/2) is straight ahead at x = 6, y = -2/2
        assert_eq!(hits[3 * 4 + 1], vec![0]);
        assert_eq!(hits[3 * 4 + 2], vec![0]);
        // cell (h=0, *) is behind
        assert!(hits[1].is_empty());
        assert!(matches!(hit_views(&refs, &[], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn warp_identity_and_cell_shift() {
        let grid = EgoGrid::new([4, 5, 1], [[0.0, 4.0], [0.0, 5.0], [0.0, 1.0]]).unwrap();
        let data: Vec<f64> = (0..4 * 5 * 2).map(|i| i as f64 + 1.0).collect();
        let prev = Tensor::new(&[4, 5, 2], data).unwrap();
        let pose = RigidTransform::planar(3.0, -1.0, 0.3);
        assert_eq!(warp_bev(&prev, &pose, &pose, &grid).unwrap(), prev);

        let prev_pose = RigidTransform::identity();
        let cur_pose = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let out = warp_bev(&prev, &prev_pose, &cur_pose, &grid).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                for c in 0..2 {
                    let expect = if i + 1 < 4 { prev.get(&[i + 1, j, c]) } else { 0.0 };
                    assert_eq!(out.get(&[i, j, c]), expect);
                }
            }
        }
    }
}
