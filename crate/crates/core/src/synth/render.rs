//! Camera feature rendering: a stand-in for a learned image backbone.
//!
//! Each pixel center is ray cast into the world. The raw feature is the hit
//! class one-hot plus an inverse-depth channel; a fixed random linear map
//! embeds it to `feat_dim` channels, and coarser levels are block means.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{raycast, WorldSpec, N_SEMANTIC};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::tensor::Tensor;

/// Camera rays stop here (meters).
const MAX_VIEW_DISTANCE: f64 = 80.0;

/// Raw channels: class one-hot then inverse depth.
pub const RAW_CHANNELS: usize = N_SEMANTIC + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Pyramid levels.
    pub n_scale: usize,
    pub feat_dim: usize,
    /// Seed of the fixed embedding matrix.
    pub embed_seed: u64,
}

/// `[h, w, RAW_CHANNELS]` for one camera of an ego at `ego_pose`.
pub fn render_raw(world: &WorldSpec, ego_pose: &RigidTransform, camera: &CameraModel) -> Tensor<f64> {
    let (w, h) = camera.image_size;
    let cam_to_global = ego_pose.compose(&camera.extrinsic);
    let origin = cam_to_global.translation;
    let mut data = vec![0.0; h * w * RAW_CHANNELS];
    for v in 0..h {
        for u in 0..w {
            let ray = cam_to_global.rotation * camera.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            if let Some(hit) = raycast(world, &origin, &ray, MAX_VIEW_DISTANCE) {
                let o = (v * w + u) * RAW_CHANNELS;
                data[o + hit.class as usize] = 1.0;
                data[o + N_SEMANTIC] = 1.0 / hit.t.max(1.0);
            }
        }
    }
    Tensor::new(&[h, w, RAW_CHANNELS], data).expect("shape matches buffer")
}

/// Fixed `[RAW_CHANNELS, feat_dim]` Gaussian embedding with variance `1 / RAW_CHANNELS`.
pub fn feature_embedding(seed: u64, feat_dim: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (RAW_CHANNELS as f64).sqrt()).expect("valid std");
    let data = (0..RAW_CHANNELS * feat_dim).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(&[RAW_CHANNELS, feat_dim], data).expect("shape matches buffer")
}

/// Mean over non-overlapping `f x f` blocks of a `[H, W, C]` map.
pub fn block_mean(map: &Tensor<f64>, f: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::dim(format!("block_mean: {h}x{w} not divisible into {f}x{f} blocks")));
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; ho * wo * c];
    let md = map.data();
    let inv = 1.0 / (f * f) as f64;
    for i in 0..h {
        for j in 0..w {
            let o = ((i / f) * wo + j / f) * c;
            for k in 0..c {
                out[o + k] += md[(i * w + j) * c + k] * inv;
            }
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

fn embed(raw: &Tensor<f64>, e: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    let fd = e.shape()[1];
    let mut out = vec![0.0; h * w * fd];
    for (px, r) in raw.data().chunks_exact(RAW_CHANNELS).enumerate() {
        let o = &mut out[px * fd..(px + 1) * fd];
        for (k, &x) in r.iter().enumerate() {
            if x != 0.0 {
                for (y, &ev) in o.iter_mut().zip(e.row(k)) {
                    *y += x * ev;
                }
            }
        }
    }
    Tensor::new(&[h, w, fd], out).expect("shape matches buffer")
}

/// Per camera, `n_scale` levels of `[h / 2^j, w / 2^j, feat_dim]` features.
pub fn render_features(
    world: &WorldSpec,
    ego_pose: &RigidTransform,
    cameras: &[CameraModel],
    cfg: &RenderConfig,
) -> Result<Vec<Vec<Tensor<f64>>>> {
    if cfg.n_scale == 0 || cfg.feat_dim == 0 {
        return Err(Error::Config(format!("render: n_scale and feat_dim must be positive, got {cfg:?}")));
    }
    let e = feature_embedding(cfg.embed_seed, cfg.feat_dim);
    let coarsest = 1usize << (cfg.n_scale - 1);
    cameras
        .iter()
        .map(|cam| {
            let (w, h) = cam.image_size;
            if w % coarsest != 0 || h % coarsest != 0 {
                return Err(Error::Config(format!(
                    "image {w}x{h} not divisible by {coarsest} for {} levels",
                    cfg.n_scale
                )));
            }
            let level0 = embed(&render_raw(world, ego_pose, cam), &e);
            let mut levels = Vec::with_capacity(cfg.n_scale);
            for j in 1..cfg.n_scale {
                levels.push(block_mean(&level0, 1 << j)?);
            }
            levels.insert(0, level0);
            Ok(levels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{class, surround_rig, LidarSpec, Waypoint};
    use super::*;

    fn ground_world() -> WorldSpec {
        WorldSpec {
            seed: 0,
            ground_class: Some(class::DRIVEABLE),
            objects: vec![],
            trajectory: vec![Waypoint { time: 0.0, x: 0.0, y: 0.0, yaw: 0.0 }],
            cameras: surround_rig(8, 8, 1.2),
            lidar: LidarSpec::standard(),
        }
    }

    #[test]
    fn ground_only_class_channels() {
        let world = ground_world();
        let cam = world.cameras[0].model().unwrap();
        let raw = render_raw(&world, &RigidTransform::identity(), &cam);
        for v in 0..8 {
            for u in 0..8 {
                let px = &raw.data()[(v * 8 + u) * RAW_CHANNELS..(v * 8 + u + 1) * RAW_CHANNELS];
                let below = v >= 4;
                assert_eq!(px[class::DRIVEABLE as usize], if below { 1.0 } else { 0.0 });
                assert!(px[1..N_SEMANTIC].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn single_level_has_no_pooling() {
        let world = ground_world();
        let cams = world.camera_models().unwrap();
        let cfg = RenderConfig { n_scale: 1, feat_dim: 3, embed_seed: 9 };
        let p = render_features(&world, &RigidTransform::identity(), &cams, &cfg).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0].len(), 1);
        assert_eq!(p[0][0].shape(), &[8, 8, 3]);
        let cfg = RenderConfig { n_scale: 5, ..cfg };
        assert!(render_features(&world, &RigidTransform::identity(), &cams, &cfg).is_err());
    }
}
