//! LiDAR sweeps and voxel ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{raycast, Hit, WorldSpec, EMPTY, N_SEMANTIC};
use crate::error::{Error, Result};
use crate::geometry::EgoGrid;

/// Sweeps merged into one frame's voxel labels: the current and the previous.
pub const GT_SWEEPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    /// Ego frame (meters).
    pub p: Vector3<f64>,
    pub class: u8,
}

/// Global-frame hits of a stratified, jittered azimuth x elevation fan of
/// `n_az x n_el` rays from the sensor at timestep `t`.
pub(crate) fn lidar_hits(spec: &WorldSpec, t: usize, seed: u64, n_az: usize, n_el: usize) -> Result<Vec<Hit>> {
    let pose = spec.pose(t)?;
    let l = &spec.lidar;
    if n_az == 0 || n_el == 0 {
        return Err(Error::Config("lidar needs at least one ray".into()));
    }
    let origin = pose.apply(&Vector3::new(0.0, 0.0, l.height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e0, e1) = (l.elevation[0], l.elevation[1]);
    let mut out = Vec::new();
    for i in 0..n_el {
        for j in 0..n_az {
            let el = e0 + (i as f64 + rng.gen::<f64>()) * (e1 - e0) / n_el as f64;
            let az = (j as f64 + rng.gen::<f64>()) * std::f64::consts::TAU / n_az as f64;
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            out.extend(raycast(spec, &origin, &(pose.rotation * dir), l.max_range));
        }
    }
    Ok(out)
}

/// One sweep of timestep `t`. Misses are dropped; points are in the ego frame.
pub fn sample_lidar(spec: &WorldSpec, t: usize, seed: u64) -> Result<Vec<LidarPoint>> {
    let inv = spec.pose(t)?.inverse();
    let hits = lidar_hits(spec, t, seed, spec.lidar.n_azimuth, spec.lidar.n_elevation)?;
    Ok(hits.into_iter().map(|h| LidarPoint { p: inv.apply(&h.point), class: h.class }).collect())
}

/// Sweeps `t - n_sweeps + 1 ..= t` (clamped at 0) in the ego frame of `t`.
pub fn sweep_points(spec: &WorldSpec, t: usize, n_sweeps: usize) -> Result<Vec<LidarPoint>> {
    let pose_t = spec.pose(t)?;
    let to_t = pose_t.inverse();
    let first = (t + 1).saturating_sub(n_sweeps.max(1));
    let mut out = Vec::new();
    for k in first..=t {
        let pts = sample_lidar(spec, k, super::lidar_seed(spec, k))?;
        if k == t {
            out.extend(pts);
        } else {
            let m = to_t.compose(&spec.pose(k)?);
            out.extend(pts.into_iter().map(|q| LidarPoint { p: m.apply(&q.p), class: q.class }));
        }
    }
    Ok(out)
}

/// Voxel grid of class ids, `EMPTY` where unobserved, stored in `(h, w, d)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelLabelGrid {
    pub dims: [usize; 3],
    /// Number of label values including `EMPTY`.
    pub n_classes: usize,
    pub labels: Vec<u8>,
}

impl VoxelLabelGrid {
    pub fn new(dims: [usize; 3], n_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::dim(format!("{} labels for grid {dims:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Label(format!("label {bad} >= class count {n_classes}")));
        }
        Ok(VoxelLabelGrid { dims, n_classes, labels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        VoxelLabelGrid { dims, n_classes: N_SEMANTIC + 1, labels: vec![EMPTY; dims.iter().product()] }
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[self.index(h, w, d)]
    }
}

/// Majority class per voxel; ties go to the smallest id, voxels without
/// points are `EMPTY`. Points outside the grid are ignored.
pub fn voxelize_labels(points: &[LidarPoint], grid: &EgoGrid) -> Result<VoxelLabelGrid> {
    let n = grid.n_voxels();
    let mut counts = vec![0u32; n * N_SEMANTIC];
    for q in points {
        if q.class as usize >= N_SEMANTIC {
            return Err(Error::Label(format!("lidar class {} >= {N_SEMANTIC}", q.class)));
        }
        if let Some([h, w, d]) = grid.voxel_of(&q.p) {
            counts[((h * grid.w() + w) * grid.d() + d) * N_SEMANTIC + q.class as usize] += 1;
        }
    }
    let labels = counts
        .chunks_exact(N_SEMANTIC)
        .map(|c| {
            let (best, &max) = c.iter().enumerate().rev().max_by_key(|(_, &v)| v).expect("nonempty");
            if max == 0 {
                EMPTY
            } else {
                best as u8
            }
        })
        .collect();
    VoxelLabelGrid::new(grid.dims, N_SEMANTIC + 1, labels)
}

/// Ground truth of timestep `t`: the current and previous sweeps merged.
pub fn gt_labels(spec: &WorldSpec, t: usize, grid: &EgoGrid) -> Result<VoxelLabelGrid> {
    voxelize_labels(&sweep_points(spec, t, GT_SWEEPS)?, grid)
}

#[cfg(test)]
mod tests {
    use super::super::{class, raycast, surround_rig, LidarSpec, Waypoint};
    use super::*;

    fn world(ground: bool) -> WorldSpec {
        WorldSpec {
            seed: 3,
            ground_class: ground.then_some(class::DRIVEABLE),
            objects: vec![],
            trajectory: vec![Waypoint { time: 0.0, x: 2.0, y: -1.0, yaw: 0.3 }],
            cameras: surround_rig(8, 8, 1.0),
            lidar: LidarSpec { n_azimuth: 24, n_elevation: 4, ..LidarSpec::standard() },
        }
    }

    #[test]
    fn straight_down_hits_origin() {
        let w = world(true);
        let hit = raycast(&w, &Vector3::new(0.0, 0.0, 1.5), &Vector3::new(0.0, 0.0, -1.0), 10.0).unwrap();
        assert_eq!(hit.point, Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(hit.class, class::DRIVEABLE);
    }

    #[test]
    fn empty_world_has_no_points() {
        assert!(sample_lidar(&world(false), 0, 1).unwrap().is_empty());
        let pts = sample_lidar(&world(true), 0, 1).unwrap();
        assert!(!pts.is_empty());
        // ground points in the ego frame lie at z = 0 since the motion is planar
        assert!(pts.iter().all(|q| q.p.z.abs() < 1e-9));
    }

    #[test]
    fn voxelize_single_and_ties() {
        let grid = EgoGrid::new([2, 2, 2], [[0.0, 2.0], [0.0, 2.0], [0.0, 2.0]]).unwrap();
        let v = voxelize_labels(&[LidarPoint { p: grid.voxel_center(1, 0, 1), class: 5 }], &grid).unwrap();
        assert_eq!(v.get(1, 0, 1), 5);
        assert_eq!(v.labels.iter().filter(|&&l| l == EMPTY).count(), 7);
        let p = grid.voxel_center(0, 0, 0);
        let tie = [
            LidarPoint { p, class: 4 },
            LidarPoint { p, class: 2 },
            LidarPoint { p, class: 4 },
            LidarPoint { p, class: 2 },
        ];
        assert_eq!(voxelize_labels(&tie, &grid).unwrap().get(0, 0, 0), 2);
        assert!(voxelize_labels(&[], &grid).unwrap().labels.iter().all(|&l| l == EMPTY));
    }
}
