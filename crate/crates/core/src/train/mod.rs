//! Losses, optimizer and the training loop.

mod loss;
mod optim;

pub use loss::{cross_entropy, lovasz_grad, lovasz_on_logits, lovasz_softmax, task_loss, LossWeights, TaskLoss};
pub use optim::{cosine_lr, Adam, AdamConfig};

use std::io::Write;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameInput;
use crate::error::{Error, Result};
use crate::geometry::EgoGrid;
use crate::model::{Model, ModelConfig, Task};
use crate::synth::{gt_labels, lidar_seed, render_features, sample_lidar, RenderConfig, WorldSpec};
use crate::tensor::{Graph, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// History frames fused during training.
    pub m_train: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub adam: AdamConfig,
    pub render: RenderConfig,
    /// Inclusive range of timesteps sampled for supervision; all when absent.
    #[serde(default)]
    pub timesteps: Option<[usize; 2]>,
    /// Supervised LiDAR points per sample, subsampled at random; 0 keeps all.
    #[serde(default)]
    pub max_points: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            task: Task::Sop,
            lr: 2e-3,
            lr_floor: 0.05,
            steps: 500,
            batch_size: 1,
            seed: 0,
            m_train: 1,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            render: RenderConfig { n_scale: 2, feat_dim: 32, embed_seed: 7 },
            timesteps: None,
            max_points: 1024,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("invalid learning rate {} (floor {})", self.lr, self.lr_floor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some([a, b]) = self.timesteps {
            if a > b {
                return Err(Error::Config(format!("timestep range [{a}, {b}] is empty")));
            }
        }
        Ok(())
    }
}

/// Model and training settings in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const RUN_CONFIG_VERSION: u32 = 1;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!("run config version {} unsupported", cfg.version)));
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("run config serialization failed: {e}")))
    }

    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        self.train.check()?;
        let enc = &self.model.encoder;
        if self.train.render.feat_dim != enc.feat_dim || self.train.render.n_scale != enc.n_levels {
            return Err(Error::Config(format!(
                "render produces {} levels of {} channels, encoder expects {} of {}",
                self.train.render.n_scale, self.train.render.feat_dim, enc.n_levels, enc.feat_dim
            )));
        }
        Ok(())
    }
}

/// Camera input of timestep `t`.
pub fn frame_input<T: Real>(spec: &WorldSpec, t: usize, render: &RenderConfig) -> Result<FrameInput<T>> {
    let pose = spec.pose(t)?;
    let cameras = spec.camera_models()?;
    let pyramids = render_features(spec, &pose, &cameras, render)?;
    Ok(FrameInput { pose, cameras, pyramids: pyramids.iter().map(|p| p.iter().map(|l| l.cast()).collect()).collect() })
}

/// One supervised example: a frame window and the labels of its last frame.
pub struct Sample<T: Real> {
    /// Oldest first, ending at the supervised timestep.
    pub frames: Vec<FrameInput<T>>,
    /// Class id per voxel in `(h, w, d)` order, `EMPTY` included.
    pub voxel_gt: Vec<usize>,
    /// Ego-frame LiDAR points of the current sweep inside the grid.
    pub points: Vec<Vector3<f64>>,
    pub point_gt: Vec<usize>,
}

/// Builds the window `t - history ..= t` (clamped at 0). With `max_points`
/// nonzero and `rng` given, points are subsampled without replacement.
pub fn build_sample<T: Real, R: Rng>(
    spec: &WorldSpec,
    t: usize,
    history: usize,
    render: &RenderConfig,
    grid: &EgoGrid,
    max_points: usize,
    rng: Option<&mut R>,
) -> Result<Sample<T>> {
    spec.pose(t)?;
    let frames = (t.saturating_sub(history)..=t).map(|k| frame_input(spec, k, render)).collect::<Result<Vec<_>>>()?;
    let voxel_gt = gt_labels(spec, t, grid)?.labels.into_iter().map(usize::from).collect();
    let mut pts: Vec<_> =
        sample_lidar(spec, t, lidar_seed(spec, t))?.into_iter().filter(|q| grid.voxel_of(&q.p).is_some()).collect();
    if let (Some(rng), true) = (rng, max_points > 0 && pts.len() > max_points) {
        let mut keep = sample_indices(rng, pts.len(), max_points).into_vec();
        keep.sort_unstable();
        pts = keep.into_iter().map(|i| pts[i]).collect();
    }
    Ok(Sample {
        frames,
        voxel_gt,
        points: pts.iter().map(|q| q.p).collect(),
        point_gt: pts.iter().map(|q| q.class as usize).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Loss of one sample under `steps` history frames, with gradients
/// accumulated into the store scaled by `grad_scale`.
pub fn sample_loss<T: Real>(
    model: &mut Model<T>,
    s: &Sample<T>,
    steps: usize,
    task: Task,
    w: LossWeights,
    grad_scale: f64,
) -> Result<f64> {
    let mut g: Graph<T> = Graph::new();
    let params = g.params(&model.store);
    let pred = model.forward(&mut g, &params, &s.frames, steps, &s.points)?;
    let loss = task_loss(&mut g, pred.voxels, &s.voxel_gt, pred.points, &s.point_gt, task, w)?;
    let scaled = g.scale(loss.total, T::lit(grad_scale));
    g.backward(scaled)?;
    g.accumulate_param_grads(&mut model.store);
    Ok(g.value(loss.total).item().to_f64().unwrap_or(f64::NAN))
}

/// Runs `cfg.steps` optimizer steps on random (scene, timestep) draws.
/// `on_step` sees each record as it is produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    dataset: &[WorldSpec],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.check()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let grid = model.cfg.encoder.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let spec = &dataset[rng.gen_range(0..dataset.len())];
            let last = spec.n_frames() - 1;
            let (lo, hi) = match cfg.timesteps {
                Some([a, b]) => (a.min(last), b.min(last)),
                None => (0, last),
            };
            let t = rng.gen_range(lo..=hi);
            let s = build_sample::<T, _>(spec, t, cfg.m_train, &cfg.render, &grid, cfg.max_points, Some(&mut rng))?;
            let loss = sample_loss(model, &s, cfg.m_train, cfg.task, cfg.loss_weights, 1.0 / cfg.batch_size as f64)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                    other => other,
                })?;
            total += loss / cfg.batch_size as f64;
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("step {step}: non-finite loss {total}")));
        }
        adam.step(&mut model.store, cosine_lr(cfg.lr, step, cfg.steps, cfg.lr_floor));
        let rec = LossRecord { step, loss: total };
        on_step(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

pub fn write_loss_csv(curve: &[LossRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for r in curve {
        writeln!(w, "{},{:.9}", r.step, r.loss)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{desk_scene, surround_rig};

    fn tiny() -> (Model<f64>, TrainConfig, Vec<WorldSpec>) {
        let mut mcfg = ModelConfig::preset("bench").unwrap();
        mcfg.encoder.embed_dim = 8;
        mcfg.encoder.ffn_hidden = 8;
        mcfg.encoder.feat_dim = 4;
        mcfg.encoder.n_heads = 2;
        mcfg.encoder.grid = EgoGrid::new([4, 4, 2], [[-8.0, 8.0], [-8.0, 8.0], [-1.0, 3.0]]).unwrap();
        mcfg.decoder_hidden = 8;
        let tcfg = TrainConfig {
            steps: 3,
            render: RenderConfig { n_scale: 2, feat_dim: 4, embed_seed: 1 },
            max_points: 64,
            ..TrainConfig::desk()
        };
        let mut spec = desk_scene(3, 3, surround_rig(8, 8, 1.2)).unwrap();
        spec.lidar.n_azimuth = 60;
        spec.lidar.n_elevation = 4;
        (Model::new(mcfg).unwrap(), tcfg, vec![spec])
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut m, cfg, data) = tiny();
        let before: Vec<_> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
        train(&mut m, &data, &TrainConfig { lr: 0.0, ..cfg }, |_| {}).unwrap();
        assert!(m.store.iter().zip(&before).all(|((_, p), b)| &p.value == b));
    }

    #[test]
    fn fixed_seed_reproduces_curve() {
        let (mut a, cfg, data) = tiny();
        let (mut b, _, _) = tiny();
        let ca = train(&mut a, &data, &cfg, |_| {}).unwrap();
        let cb = train(&mut b, &data, &cfg, |_| {}).unwrap();
        assert_eq!(ca, cb);
        assert!(ca.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn run_config_round_trip() {
        let run = RunConfig {
            version: RUN_CONFIG_VERSION,
            model: ModelConfig::preset("desk").unwrap(),
            train: TrainConfig::desk(),
        };
        assert_eq!(RunConfig::from_toml(&run.to_toml().unwrap()).unwrap(), run);
        let mut bad = run.clone();
        bad.train.render.feat_dim = 3;
        assert!(bad.check().is_err());
    }
}
