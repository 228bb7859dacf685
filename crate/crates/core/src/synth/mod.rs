//! Deterministic synthetic driving scenes.
//!
//! A [`WorldSpec`] holds static geometry in the global frame, a planar ego
//! trajectory and the sensor rig. Frames are produced on demand: camera
//! features by ray casting, LiDAR sweeps by a jittered beam fan, and voxel
//! labels from the sweeps.

mod io;
mod lidar;
mod raycast;
mod render;
mod scenes;

pub use io::{
    read_grid, read_scene, read_scenes, scene_from_str, scene_to_string, write_grid, write_scene, GRID_MAGIC,
    SCENE_VERSION,
};
pub use lidar::{gt_labels, sample_lidar, sweep_points, voxelize_labels, LidarPoint, VoxelLabelGrid};
pub use raycast::{intersect, raycast, Hit, Surface};
pub use render::{block_mean, feature_embedding, render_features, render_raw, RenderConfig};
pub use scenes::{
    bench_rig, desk_scene, occlusion_scene, target_visibility, OcclusionLayout, Visibility, OCCLUSION_FRAMES,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameInput;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::tensor::{Real, Tensor};

/// Semantic classes of the synthetic world, in id order.
pub const CLASS_NAMES: [&str; 8] =
    ["driveable", "car", "truck", "pedestrian", "barrier", "vegetation", "manmade", "traffic_cone"];

pub const N_SEMANTIC: usize = CLASS_NAMES.len();

/// Label of voxels no point falls into.
pub const EMPTY: u8 = N_SEMANTIC as u8;

pub mod class {
    pub const DRIVEABLE: u8 = 0;
    pub const CAR: u8 = 1;
    pub const TRUCK: u8 = 2;
    pub const PEDESTRIAN: u8 = 3;
    pub const BARRIER: u8 = 4;
    pub const VEGETATION: u8 = 5;
    pub const MANMADE: u8 = 6;
    pub const TRAFFIC_CONE: u8 = 7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Box yawed about its vertical axis.
    Box { center: [f64; 3], size: [f64; 3], yaw: f64 },
    /// Vertical cylinder between heights `z[0]` and `z[1]`.
    Cylinder { center: [f64; 2], z: [f64; 2], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Object {
    pub class: u8,
    pub shape: Shape,
}

/// Planar ego pose at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Waypoint {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::planar(self.x, self.y, self.yaw)
    }
}

/// Level camera on the ego vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub yaw: f64,
    /// Ego-frame position (meters).
    pub mount: [f64; 3],
    /// Horizontal field of view (radians).
    pub hfov: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn model(&self) -> Result<CameraModel> {
        CameraModel::facing(self.yaw, Vector3::from(self.mount), self.hfov, self.width, self.height)
    }
}

/// Spinning beam fan at `(0, 0, height)` in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSpec {
    pub height: f64,
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// Elevation range `[min, max]` (radians, positive up).
    pub elevation: [f64; 2],
    pub max_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    /// Class of the ground plane `z = 0`; no ground when absent.
    pub ground_class: Option<u8>,
    pub objects: Vec<Object>,
    pub trajectory: Vec<Waypoint>,
    pub cameras: Vec<CameraSpec>,
    pub lidar: LidarSpec,
}

/// Six level cameras at 60 degree spacing, 1.5 m up.
pub fn surround_rig(width: usize, height: usize, hfov: f64) -> Vec<CameraSpec> {
    (0..6)
        .map(|i| CameraSpec {
            yaw: std::f64::consts::FRAC_PI_3 * i as f64,
            mount: [0.0, 0.0, 1.5],
            hfov,
            width,
            height,
        })
        .collect()
}

impl LidarSpec {
    pub fn standard() -> Self {
        LidarSpec { height: 1.8, n_azimuth: 180, n_elevation: 16, elevation: [-0.6, 0.15], max_range: 40.0 }
    }
}

impl WorldSpec {
    pub fn check(&self) -> Result<()> {
        let bad_class = |c: u8| (c as usize) >= N_SEMANTIC;
        if self.ground_class.is_some_and(bad_class) {
            return Err(Error::Label(format!("ground class {:?} out of range", self.ground_class)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if bad_class(o.class) {
                return Err(Error::Label(format!("object {i}: class {} out of range", o.class)));
            }
            let ok = match &o.shape {
                Shape::Box { center, size, yaw } => {
                    size.iter().all(|&s| s > 0.0 && s.is_finite())
                        && center.iter().all(|c| c.is_finite())
                        && yaw.is_finite()
                }
                Shape::Cylinder { center, z, radius } => {
                    *radius > 0.0 && z[1] > z[0] && center.iter().chain(z).all(|c| c.is_finite())
                }
            };
            if !ok {
                return Err(Error::Config(format!("object {i}: degenerate shape {:?}", o.shape)));
            }
        }
        if self.trajectory.is_empty() {
            return Err(Error::Config("trajectory is empty".into()));
        }
        if self.trajectory.windows(2).any(|w| !(w[1].time > w[0].time)) {
            return Err(Error::Config("trajectory timestamps must be strictly increasing".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::Config("rig has no cameras".into()));
        }
        for c in &self.cameras {
            c.model()?;
        }
        let l = &self.lidar;
        if l.n_azimuth == 0 || l.n_elevation == 0 || !(l.max_range > 0.0) || !(l.elevation[1] >= l.elevation[0]) {
            return Err(Error::Config(format!("invalid lidar spec {l:?}")));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn pose(&self, t: usize) -> Result<RigidTransform> {
        self.trajectory
            .get(t)
            .map(Waypoint::pose)
            .ok_or_else(|| Error::Range(format!("timestep {t} outside trajectory of {} frames", self.trajectory.len())))
    }

    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        self.cameras.iter().map(CameraSpec::model).collect()
    }
}

/// One rendered timestep.
#[derive(Clone, Debug)]
pub struct SceneFrame {
    pub t: usize,
    pub timestamp: f64,
    /// Ego to global.
    pub ego_pose: RigidTransform,
    pub cameras: Vec<CameraModel>,
    /// Per camera, per level `[rows, cols, feat_dim]`.
    pub pyramids: Vec<Vec<Tensor<f64>>>,
    /// Current sweep in the ego frame.
    pub lidar_points: Vec<LidarPoint>,
}

impl SceneFrame {
    pub fn to_input<T: Real>(&self) -> FrameInput<T> {
        FrameInput {
            pose: self.ego_pose,
            cameras: self.cameras.clone(),
            pyramids: self.pyramids.iter().map(|p| p.iter().map(Tensor::cast).collect()).collect(),
        }
    }
}

/// Sweep seed of timestep `t`.
pub fn lidar_seed(spec: &WorldSpec, t: usize) -> u64 {
    spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64)
}

/// Renders timestep `t` of `spec`.
pub fn generate_scene(spec: &WorldSpec, t: usize, render: &RenderConfig) -> Result<SceneFrame> {
    spec.check()?;
    let ego_pose = spec.pose(t)?;
    let cameras = spec.camera_models()?;
    let pyramids = render_features(spec, &ego_pose, &cameras, render)?;
    let lidar_points = sample_lidar(spec, t, lidar_seed(spec, t))?;
    Ok(SceneFrame { t, timestamp: spec.trajectory[t].time, ego_pose, cameras, pyramids, lidar_points })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> WorldSpec {
        WorldSpec {
            seed: 1,
            ground_class: Some(class::DRIVEABLE),
            objects: vec![Object {
                class: class::CAR,
                shape: Shape::Box { center: [4.0, 0.0, 0.75], size: [2.0, 1.6, 1.5], yaw: 0.0 },
            }],
            trajectory: vec![
                Waypoint { time: 0.0, x: 0.0, y: 0.0, yaw: 0.0 },
                Waypoint { time: 0.5, x: 0.5, y: 0.0, yaw: 0.0 },
            ],
            cameras: surround_rig(16, 8, 1.2),
            lidar: LidarSpec { n_azimuth: 36, n_elevation: 4, ..LidarSpec::standard() },
        }
    }

    #[test]
    fn deterministic_frames() {
        let spec = tiny_spec();
        let cfg = RenderConfig { n_scale: 2, feat_dim: 4, embed_seed: 0 };
        let a = generate_scene(&spec, 1, &cfg).unwrap();
        let b = generate_scene(&spec, 1, &cfg).unwrap();
        assert_eq!(a.pyramids, b.pyramids);
        assert_eq!(a.lidar_points, b.lidar_points);
        assert!(matches!(generate_scene(&spec, 2, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn spec_validation() {
        let mut spec = tiny_spec();
        spec.trajectory[1].time = 0.0;
        assert!(spec.check().is_err());
        let mut spec = tiny_spec();
        spec.objects[0].class = 9;
        assert!(matches!(spec.check(), Err(Error::Label(_))));
    }
}
