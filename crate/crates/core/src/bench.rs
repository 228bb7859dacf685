//! The occlusion benchmark: scenes where a truck is seen at the second to
//! last frame and hidden behind a wall at the last, scored at the last.

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalMask, EvalReport};
use crate::model::{Model, ModelConfig, Task};
use crate::synth::{bench_rig, occlusion_scene, RenderConfig, WorldSpec, OCCLUSION_FRAMES};
use crate::train::{train, LossRecord, RunConfig, TrainConfig, RUN_CONFIG_VERSION};

/// Evaluation scenes use seeds from here up; training seeds stay below.
pub const EVAL_SEED_BASE: u64 = 1 << 32;
pub const N_EVAL_SCENES: usize = 20;

pub fn render_config() -> RenderConfig {
    RenderConfig { n_scale: 2, feat_dim: 16, embed_seed: 11 }
}

/// Small model and schedule for the benchmark, with `m_train` history frames.
pub fn run_config(m_train: usize, seed: u64, steps: usize) -> Result<RunConfig> {
    let mut model = ModelConfig::preset("bench")?;
    model.encoder.feat_dim = render_config().feat_dim;
    model.encoder.temporal_steps = m_train;
    model.decoder_hidden = model.encoder.embed_dim;
    model.seed = seed;
    let last = OCCLUSION_FRAMES - 1;
    let train = TrainConfig {
        task: Task::Sop,
        steps,
        seed,
        m_train,
        render: render_config(),
        timesteps: Some([last - 1, last]),
        max_points: 512,
        ..TrainConfig::desk()
    };
    let run = RunConfig { version: RUN_CONFIG_VERSION, model, train };
    run.check()?;
    Ok(run)
}

pub fn scenes(first_seed: u64, n: usize) -> Result<Vec<WorldSpec>> {
    (0..n as u64).map(|i| occlusion_scene(first_seed + i, &bench_rig()).map(|(s, _)| s)).collect()
}

pub fn eval_scenes() -> Result<Vec<WorldSpec>> {
    scenes(EVAL_SEED_BASE, N_EVAL_SCENES)
}

/// Scoring at the occluded frame with `steps` history frames.
pub fn eval_config(steps: usize) -> EvalConfig {
    let last = OCCLUSION_FRAMES - 1;
    EvalConfig {
        task: Task::Sop,
        steps,
        timesteps: Some([last, last]),
        mask: EvalMask::GtOrPred,
        render: render_config(),
    }
}

/// Trains one model on `train_set` and scores it on `eval_set` with its own
/// history length.
pub fn train_and_eval(
    run: &RunConfig,
    train_set: &[WorldSpec],
    eval_set: &[WorldSpec],
    on_step: impl FnMut(&LossRecord),
) -> Result<(Model<f64>, Vec<LossRecord>, EvalReport)> {
    let mut model: Model<f64> = Model::new(run.model.clone())?;
    let curve = train(&mut model, train_set, &run.train, on_step)?;
    let report = evaluate(&model, eval_set, &eval_config(run.train.m_train))?;
    Ok((model, curve, report))
}
