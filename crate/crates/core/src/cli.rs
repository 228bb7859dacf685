//! The `s2tpv` command line: scene generation, training, evaluation, the
//! temporal-range sweep, visual dumps and the built-in oracle suites.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on numeric
//! failures (non-finite values, failed oracle checks).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench;
use crate::error::{Error, Result};
use crate::eval::{
    ablate_temporal_range, emit_heatmap, evaluate, predict, write_ablation_csv, write_gain_vs_count_csv,
    write_report_csv, EvalConfig, EvalMask, EvalReport,
};
use crate::model::Model;
use crate::synth::{
    bench_rig, desk_scene, gt_labels, occlusion_scene, read_scene, read_scenes, surround_rig, write_grid, write_scene,
    WorldSpec, CLASS_NAMES, N_SEMANTIC,
};
use crate::tensor::Tensor;
use crate::train::{train, write_loss_csv, RunConfig};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Parser, Debug)]
#[command(name = "s2tpv", version, about = "Spatiotemporal tri-perspective-view occupancy toolkit")]
struct Cli {
    /// Run configuration (TOML); defaults to the occlusion-benchmark settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for scene generation, initialization and sampling.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded scene dataset as TOML documents.
    GenScenes(GenScenesArgs),
    /// Train a model; writes model.ckpt, run.toml and loss.csv.
    Train(TrainArgs),
    /// Score a checkpoint; writes report.csv.
    Eval(EvalArgs),
    /// Score one checkpoint at several inference-time history lengths.
    Ablate(AblateArgs),
    /// Dump the top-plane heatmap and predicted/true label grids of one frame.
    Viz(VizArgs),
    /// Run the oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SceneKind {
    /// Target visible at the second to last frame, occluded at the last.
    Occlusion,
    /// Objects scattered along a curving drive.
    Street,
}

#[derive(Args, Debug)]
struct GenScenesArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, value_enum, default_value_t = SceneKind::Occlusion)]
    kind: SceneKind,
    /// Frames per street scene; occlusion scenes have a fixed length.
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory of scene documents; the seeded occlusion benchmark when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Benchmark training scenes generated when --data is absent.
    #[arg(long, default_value_t = 40)]
    scenes: usize,
    /// Overrides the configured number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the history length used in training.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    GtOrPred,
    GtOccupied,
    All,
}

impl From<MaskArg> for EvalMask {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::GtOrPred => EvalMask::GtOrPred,
            MaskArg::GtOccupied => EvalMask::GtOccupied,
            MaskArg::All => EvalMask::All,
        }
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Checkpoint file; its run.toml is read from the same directory unless
    /// --config is given.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Scored timesteps as `A..B` (inclusive) or `T`; the final frame when absent.
    #[arg(long, value_name = "RANGE")]
    frames: Option<String>,
    /// Cells counted in occupancy scoring.
    #[arg(long, value_enum, default_value_t = MaskArg::GtOrPred)]
    mask: MaskArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    score: ScoreArgs,
    /// History frames at inference; the training value when absent.
    #[arg(long)]
    m: Option<usize>,
    /// Second checkpoint; adds gain_vs_count.csv comparing the two.
    #[arg(long, value_name = "PATH")]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    score: ScoreArgs,
    /// History lengths as `A..B` (inclusive) or a comma list.
    #[arg(long, default_value = "0..7")]
    m: String,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Scene document; the first benchmark evaluation scene when absent.
    #[arg(long, value_name = "PATH")]
    scene: Option<PathBuf>,
    /// Timestep; the final frame when absent.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args, Debug)]
struct SelftestArgs {}

/// Parses `argv` (program name first), runs the command and maps the
/// outcome to an exit code. Messages go to stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("s2tpv: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(s) = cli.seed {
        // TOML integers are signed 64-bit
        if s > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
    }
    match &cli.command {
        Command::GenScenes(a) => gen_scenes(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Viz(a) => viz_cmd(cli, a),
        Command::Selftest(_) => selftest(),
    }
    .map(|()| EXIT_OK)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// `A..B` (inclusive), `A..=B` or a comma list of integers.
fn parse_list(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("expected `A..B` or a comma list, got {s:?}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

fn parse_range(s: &str) -> Result<[usize; 2]> {
    let v = parse_list(s)?;
    match (v.first(), v.last()) {
        (Some(&a), Some(&b)) if s.contains("..") || v.len() == 1 => Ok([a, b]),
        _ => Err(Error::Config(format!("expected a frame range `A..B` or `T`, got {s:?}"))),
    }
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn load_run(path: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn load_dataset(data: &DataArgs, benchmark: impl FnOnce() -> Result<Vec<WorldSpec>>) -> Result<Vec<WorldSpec>> {
    match &data.data {
        Some(dir) => {
            let scenes: Vec<WorldSpec> = read_scenes(dir)?.into_iter().map(|(_, s)| s).collect();
            if scenes.is_empty() {
                return Err(Error::Config(format!("no scene documents in {}", dir.display())));
            }
            Ok(scenes)
        }
        None => benchmark(),
    }
}

fn gen_scenes(cli: &Cli, a: &GenScenesArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let base = seed(cli);
    for i in 0..a.n as u64 {
        let s = base.checked_add(i).ok_or_else(|| Error::Config("scene seed overflow".into()))?;
        let spec = match a.kind {
            SceneKind::Occlusion => occlusion_scene(s, &bench_rig())?.0,
            SceneKind::Street => desk_scene(s, a.frames, surround_rig(48, 32, 70f64.to_radians()))?,
        };
        write_scene(&out.join(format!("scene_{i:04}.toml")), &spec)?;
    }
    println!("wrote {} scenes to {}", a.n, out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut run = match &cli.config {
        Some(p) => load_run(p)?,
        None => bench::run_config(1, seed(cli), 1500)?,
    };
    if let Some(s) = cli.seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    if let Some(n) = a.steps {
        run.train.steps = n;
    }
    if let Some(m) = a.m {
        run.train.m_train = m;
        run.model.encoder.temporal_steps = m;
    }
    run.check()?;
    let first =
        run.train.seed.checked_mul(10_000).ok_or_else(|| Error::Config("seed too large for the benchmark".into()))?;
    let data = load_dataset(&a.data, || bench::scenes(first, a.scenes))?;
    let out = out_dir(cli)?;

    let mut model: Model = Model::new(run.model.clone())?;
    let every = (run.train.steps / 20).max(1);
    let curve = train(&mut model, &data, &run.train, |r| {
        if r.step % every == 0 || r.step + 1 == run.train.steps {
            eprintln!("step {:>6}  loss {:.5}", r.step, r.loss);
        }
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut w = create(&ckpt)?;
    model.save_checkpoint(&mut w)?;
    w.flush().map_err(|e| Error::io(&ckpt, e))?;
    let cfg_path = out.join(RUN_CONFIG_FILE);
    std::fs::write(&cfg_path, run.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    write_with(&out.join("loss.csv"), |w| write_loss_csv(&curve, w))?;
    println!("wrote {} ({} steps)", ckpt.display(), curve.len());
    Ok(())
}

/// `--config` if given, else the run.toml written next to the checkpoint.
fn run_config_for(cli: &Cli, checkpoint: &Path) -> PathBuf {
    match &cli.config {
        Some(p) => p.clone(),
        None => sibling_config(checkpoint),
    }
}

fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE)
}

/// The run config and the model it describes with the checkpoint's weights.
fn load_model(cfg_path: &Path, checkpoint: &Path) -> Result<(Model, RunConfig)> {
    let f = File::open(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let run = load_run(cfg_path)?;
    let mut model: Model = Model::new(run.model.clone())?;
    model.load_checkpoint(std::io::BufReader::new(f))?;
    Ok((model, run))
}

fn score_setup(cli: &Cli, a: &ScoreArgs) -> Result<(Model, Vec<WorldSpec>, EvalConfig)> {
    let (model, run) = load_model(&run_config_for(cli, &a.checkpoint), &a.checkpoint)?;
    let data = load_dataset(&a.data, bench::eval_scenes)?;
    let last = data.iter().map(|s| s.n_frames() - 1).min().unwrap_or(0);
    let timesteps = match &a.frames {
        Some(r) => parse_range(r)?,
        None => [last, last],
    };
    let cfg = EvalConfig {
        task: run.train.task,
        steps: run.train.m_train,
        timesteps: Some(timesteps),
        mask: a.mask.into(),
        render: run.train.render.clone(),
    };
    Ok((model, data, cfg))
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label}: mIoU {:.4}", r.miou);
    for (c, name) in CLASS_NAMES.iter().enumerate().take(N_SEMANTIC) {
        if let Some(v) = r.per_class_iou[c] {
            println!("  {name:<14} {v:.4}");
        }
    }
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (model, data, mut cfg) = score_setup(cli, &a.score)?;
    if let Some(m) = a.m {
        cfg.steps = m;
    }
    let report = evaluate(&model, &data, &cfg)?;
    let out = out_dir(cli)?;
    write_with(&out.join("report.csv"), |w| write_report_csv(&report, w))?;
    print_report("eval", &report);
    if let Some(b) = &a.baseline {
        let (base, base_run) = load_model(&sibling_config(b), b)?;
        let base_cfg = EvalConfig { steps: base_run.train.m_train, ..cfg.clone() };
        let base_report = evaluate(&base, &data, &base_cfg)?;
        write_with(&out.join("gain_vs_count.csv"), |w| write_gain_vs_count_csv(&base_report, &report, w))?;
        print_report("baseline", &base_report);
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let ms = parse_list(&a.m)?;
    let (model, data, cfg) = score_setup(cli, &a.score)?;
    let rows = ablate_temporal_range(&model, &data, &ms, &cfg)?;
    let out = out_dir(cli)?;
    write_with(&out.join("ablation.csv"), |w| write_ablation_csv(&rows, w))?;
    for (m, r) in &rows {
        println!("M={m}  mIoU {:.4}", r.miou);
    }
    Ok(())
}

fn viz_cmd(cli: &Cli, a: &VizArgs) -> Result<()> {
    let (model, run) = load_model(&run_config_for(cli, &a.checkpoint), &a.checkpoint)?;
    let spec = match &a.scene {
        Some(p) => read_scene(p)?,
        None => occlusion_scene(bench::EVAL_SEED_BASE, &bench_rig())?.0,
    };
    let t = a.t.unwrap_or(spec.n_frames() - 1);
    let m = a.m.unwrap_or(run.train.m_train);
    let grid = model.cfg.encoder.grid;
    let p = predict(&model, &spec, t, m, &run.train.render)?;
    let out = out_dir(cli)?;
    let plane = Tensor::new(&[grid.h(), grid.w(), model.cfg.encoder.embed_dim], p.hw_plane)?;
    emit_heatmap(&plane, &out.join("hw_plane.pgm"))?;
    let pred_path = out.join("pred.s2tpvgrid");
    write_grid(&grid, &p.voxels, create(&pred_path)?)?;
    let gt_path = out.join("gt.s2tpvgrid");
    write_grid(&grid, &gt_labels(&spec, t, &grid)?, create(&gt_path)?)?;
    println!("wrote hw_plane.pgm, pred.s2tpvgrid and gt.s2tpvgrid to {}", out.display());
    Ok(())
}

fn selftest() -> Result<()> {
    let reports = verify::run_all()?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    if ok {
        println!("selftest: all {} suites passed", reports.len());
        Ok(())
    } else {
        Err(Error::Numeric("selftest: oracle checks failed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges_parse() {
        assert_eq!(parse_list("0..7").unwrap(), (0..=7).collect::<Vec<_>>());
        assert_eq!(parse_list("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_list("1, 4,2").unwrap(), vec![1, 4, 2]);
        assert!(parse_list("3..1").is_err());
        assert!(parse_list("x").is_err());
        assert_eq!(parse_range("5").unwrap(), [5, 5]);
        assert_eq!(parse_range("1..6").unwrap(), [1, 6]);
        assert!(parse_range("1,2").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["s2tpv", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["s2tpv", "train", "--no-such-flag"]), EXIT_INVALID);
        assert_eq!(run(["s2tpv"]), EXIT_INVALID);
        assert_eq!(run(["s2tpv", "--help"]), EXIT_OK);
    }
}
