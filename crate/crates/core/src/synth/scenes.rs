//! Scene generators: generic desk scenes and the occlusion benchmark.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lidar::lidar_hits;
use super::{
    class, lidar_seed, raycast, surround_rig, CameraSpec, LidarSpec, Object, Shape, Surface, Waypoint, WorldSpec,
};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

const FRAME_DT: f64 = 0.5;

fn boxed(class: u8, center: [f64; 3], size: [f64; 3], yaw: f64) -> Object {
    Object { class, shape: Shape::Box { center, size, yaw } }
}

fn cylinder(class: u8, x: f64, y: f64, height: f64, radius: f64) -> Object {
    Object { class, shape: Shape::Cylinder { center: [x, y], z: [0.0, height], radius } }
}

/// Moves an object given in the frame `pose` into the global frame.
fn place(o: Object, pose: &RigidTransform) -> Object {
    let shape = match o.shape {
        Shape::Box { center, size, yaw } => {
            let c = pose.apply(&Vector3::from(center));
            Shape::Box { center: [c.x, c.y, c.z], size, yaw: yaw + pose.yaw() }
        }
        Shape::Cylinder { center, z, radius } => {
            let c = pose.apply(&Vector3::new(center[0], center[1], 0.0));
            Shape::Cylinder { center: [c.x, c.y], z, radius }
        }
    };
    Object { class: o.class, shape }
}

fn random_object<R: Rng>(rng: &mut R, x: f64, y: f64) -> Object {
    let yaw = rng.gen_range(-0.4..0.4);
    match rng.gen_range(0..7) {
        0 => boxed(class::CAR, [x, y, 0.75], [4.0, 1.8, 1.5], yaw),
        1 => boxed(class::TRUCK, [x, y, 1.5], [6.0, 2.4, 3.0], yaw),
        2 => cylinder(class::PEDESTRIAN, x, y, 1.8, 0.3),
        3 => boxed(class::BARRIER, [x, y, 0.5], [2.0, 0.4, 1.0], yaw),
        4 => cylinder(class::VEGETATION, x, y, 3.0, 1.0),
        5 => boxed(class::MANMADE, [x, y, 2.0], [3.0, 3.0, 4.0], yaw),
        _ => cylinder(class::TRAFFIC_CONE, x, y, 0.7, 0.2),
    }
}

/// Generic street scene: objects scattered beside a gently curving drive.
pub fn desk_scene(seed: u64, n_frames: usize, cameras: Vec<CameraSpec>) -> Result<WorldSpec> {
    if n_frames == 0 {
        return Err(Error::Config("desk scene needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = rng.gen_range(2.0..4.0);
    let turn = rng.gen_range(-0.05..0.05);
    let (mut x, mut y, mut yaw) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.1..3.1));
    let mut trajectory = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        trajectory.push(Waypoint { time: k as f64 * FRAME_DT, x, y, yaw });
        x += speed * yaw.cos();
        y += speed * yaw.sin();
        yaw += turn;
    }
    let mid = trajectory[n_frames / 2].pose();
    let span = speed * n_frames as f64 / 2.0 + 12.0;
    let n_obj = rng.gen_range(8..16);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (ox, oy) = (rng.gen_range(-span..span), side * rng.gen_range(3.0..14.0));
        objects.push(place(random_object(&mut rng, ox, oy), &mid));
    }
    let spec = WorldSpec {
        seed,
        ground_class: Some(class::DRIVEABLE),
        objects,
        trajectory,
        cameras,
        lidar: LidarSpec::standard(),
    };
    spec.check()?;
    Ok(spec)
}

/// Indices of the designed objects of an occlusion scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionLayout {
    /// The hidden object.
    pub target: usize,
    /// The object hiding it at the last frame.
    pub occluder: usize,
    /// Occluders with nothing behind them.
    pub decoys: Vec<usize>,
    /// Frame at which the target is hidden (the last one).
    pub occluded_frame: usize,
}

/// Sensor returns on one object at a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visibility {
    /// Hits of the frame's LiDAR sweep.
    pub lidar: usize,
    /// Hits of a dense 720 x 64 beam fan, a geometric occlusion check.
    pub dense_lidar: usize,
    /// Camera pixels whose center ray hits the object.
    pub pixels: usize,
}

/// Counts sensor returns on object `target` at frame `t`.
pub fn target_visibility(spec: &WorldSpec, t: usize, target: usize) -> Result<Visibility> {
    let on_target = |s: Surface| s == Surface::Object(target);
    let lidar = lidar_hits(spec, t, lidar_seed(spec, t), spec.lidar.n_azimuth, spec.lidar.n_elevation)?
        .iter()
        .filter(|h| on_target(h.surface))
        .count();
    let dense_lidar =
        lidar_hits(spec, t, lidar_seed(spec, t) ^ 0xD15E, 720, 64)?.iter().filter(|h| on_target(h.surface)).count();
    let pose = spec.pose(t)?;
    let mut pixels = 0;
    for cam in spec.camera_models()? {
        let to_global = pose.compose(&cam.extrinsic);
        let (w, h) = cam.image_size;
        for v in 0..h {
            for u in 0..w {
                let ray = to_global.rotation * cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
                if raycast(spec, &to_global.translation, &ray, 80.0).is_some_and(|h| on_target(h.surface)) {
                    pixels += 1;
                }
            }
        }
    }
    Ok(Visibility { lidar, dense_lidar, pixels })
}

/// Frames per occlusion scene.
pub const OCCLUSION_FRAMES: usize = 8;

/// Wall length range (meters); also its height and thickness.
const WALL: ([f64; 2], f64, f64) = ([4.0, 5.0], 2.5, 0.4);

fn wall(x_start: f64, len: f64, y: f64) -> Object {
    let (_, h, t) = WALL;
    boxed(class::MANMADE, [x_start + len / 2.0, y, h / 2.0], [len, t, h], 0.0)
}

/// Draws one candidate layout in the ego frame of the last timestep.
fn occlusion_candidate<R: Rng>(rng: &mut R, seed: u64, cameras: &[CameraSpec]) -> (WorldSpec, OcclusionLayout) {
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let speed = rng.gen_range(3.5..4.5);

    // Wall beside the road; the truck sits just beyond its rear end, where
    // the sight line from the last ego position falls on the wall but the
    // one from the previous position passes behind it.
    let x0 = rng.gen_range(0.5..2.0);
    let len = rng.gen_range(WALL.0[0]..WALL.0[1]);
    let yw = rng.gen_range(2.5..3.5);
    let (tl, tw, th) = (2.0, 1.4, 1.5);
    let gap = rng.gen_range(0.3..1.5);
    let y_near = yw + WALL.2 / 2.0 + gap;
    let r_far = yw / (y_near + tw);
    let xt = x0 / r_far + rng.gen_range(0.0..0.6);
    let mut objects = vec![
        wall(x0, len, side * yw),
        boxed(
            class::TRUCK,
            [xt + tl / 2.0, side * (y_near + tw / 2.0), th / 2.0],
            [tl, tw, th],
            rng.gen_range(-0.1..0.1),
        ),
    ];

    // A decoy wall on the other side with the same distribution.
    let dx0 = rng.gen_range(0.5..2.0);
    let dlen = rng.gen_range(WALL.0[0]..WALL.0[1]);
    let dyw = rng.gen_range(2.5..3.5);
    objects.push(wall(dx0, dlen, -side * dyw));

    // Clutter behind the ego and ahead on the road.
    let n_clutter = rng.gen_range(2..5);
    for _ in 0..n_clutter {
        let (x, y) = if rng.gen_bool(0.5) {
            (rng.gen_range(-8.0..-3.0), rng.gen_range(-6.0..6.0))
        } else {
            (rng.gen_range(8.0..10.0), rng.gen_range(-1.5..1.5))
        };
        let o = match rng.gen_range(0..5) {
            0 => boxed(class::CAR, [x, y, 0.75], [4.0, 1.8, 1.5], rng.gen_range(-0.3..0.3)),
            1 => cylinder(class::PEDESTRIAN, x, y, 1.8, 0.3),
            2 => cylinder(class::TRAFFIC_CONE, x, y, 0.7, 0.2),
            3 => boxed(class::BARRIER, [x, y, 0.5], [2.0, 0.4, 1.0], rng.gen_range(-0.3..0.3)),
            _ => cylinder(class::VEGETATION, x, y, 3.0, 1.0),
        };
        objects.push(o);
    }

    let last = OCCLUSION_FRAMES - 1;
    let global =
        RigidTransform::planar(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-3.1..3.1));
    let trajectory = (0..OCCLUSION_FRAMES)
        .map(|k| {
            let p = global.compose(&RigidTransform::planar(-((last - k) as f64) * speed, 0.0, 0.0));
            Waypoint { time: k as f64 * FRAME_DT, x: p.translation.x, y: p.translation.y, yaw: p.yaw() }
        })
        .collect();
    let objects = objects.into_iter().map(|o| place(o, &global)).collect();
    let spec = WorldSpec {
        seed,
        ground_class: Some(class::DRIVEABLE),
        objects,
        trajectory,
        cameras: cameras.to_vec(),
        lidar: LidarSpec::standard(),
    };
    (spec, OcclusionLayout { target: 1, occluder: 0, decoys: vec![2], occluded_frame: last })
}

/// Minimum returns on the target at the frame before occlusion.
const MIN_VISIBLE_LIDAR: usize = 8;
const MIN_VISIBLE_PIXELS: usize = 2;

/// An occlusion scene: a truck hidden behind a wall at the last frame but
/// seen at the frame before, verified by ray casting every sensor.
pub fn occlusion_scene(seed: u64, cameras: &[CameraSpec]) -> Result<(WorldSpec, OcclusionLayout)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let (spec, layout) = occlusion_candidate(&mut rng, seed, cameras);
        let t = layout.occluded_frame;
        let hidden = target_visibility(&spec, t, layout.target)?;
        if hidden.lidar + hidden.dense_lidar + hidden.pixels != 0 {
            continue;
        }
        let seen = target_visibility(&spec, t - 1, layout.target)?;
        if seen.lidar >= MIN_VISIBLE_LIDAR && seen.pixels >= MIN_VISIBLE_PIXELS {
            spec.check()?;
            return Ok((spec, layout));
        }
    }
    Err(Error::Config(format!("no valid occlusion layout found for seed {seed}")))
}

/// Camera rig used by the occlusion benchmark.
pub fn bench_rig() -> Vec<CameraSpec> {
    surround_rig(48, 32, 70f64.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scene_is_valid_and_deterministic() {
        let a = desk_scene(4, 5, surround_rig(16, 16, 1.2)).unwrap();
        let b = desk_scene(4, 5, surround_rig(16, 16, 1.2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_frames(), 5);
    }
}

#[cfg(test)]
mod occlusion_tests {
    use super::*;

    #[test]
    fn occlusion_scene_hides_target_at_last_frame() {
        for seed in 0..3 {
            let (spec, layout) = occlusion_scene(seed, &bench_rig()).unwrap();
            let t = layout.occluded_frame;
            let hidden = target_visibility(&spec, t, layout.target).unwrap();
            assert_eq!(hidden, Visibility { lidar: 0, dense_lidar: 0, pixels: 0 });
            let seen = target_visibility(&spec, t - 1, layout.target).unwrap();
            eprintln!("seed {seed}: {seen:?}");
            assert!(seen.lidar >= MIN_VISIBLE_LIDAR && seen.pixels >= MIN_VISIBLE_PIXELS);
        }
    }
}
