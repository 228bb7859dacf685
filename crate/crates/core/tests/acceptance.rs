//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6 and 7 train six benchmark models and take a few
//! minutes on one core.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use s2tpv::bench::{eval_config, eval_scenes, run_config, scenes, train_and_eval};
use s2tpv::cli;
use s2tpv::eval::{ablate_temporal_range, write_ablation_csv, EvalReport};
use s2tpv::model::Model;
use s2tpv::synth::{class, CLASS_NAMES, N_SEMANTIC, OCCLUSION_FRAMES};
use s2tpv::verify::{self, SuiteReport};
use s2tpv::Result;

const STEPS: usize = 1500;
const TRAIN_SCENES: usize = 40;
const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_GAIN: f64 = 0.02;

struct Outcome {
    id: u8,
    title: &'static str,
    passed: bool,
    elapsed: Duration,
    limit: Duration,
    detail: Vec<String>,
}

impl Outcome {
    fn print(&self) {
        let ok = self.passed && self.elapsed <= self.limit;
        let status = if ok { "PASS" } else { "FAIL" };
        println!(
            "{status} [{}] {} ({:.2} s, limit {} s)",
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        );
        for d in &self.detail {
            println!("       {d}");
        }
    }

    fn ok(&self) -> bool {
        self.passed && self.elapsed <= self.limit
    }
}

fn criterion(id: u8, title: &'static str, limit_s: u64, body: impl FnOnce() -> Result<(bool, Vec<String>)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, vec![format!("error: {e}")]),
    };
    let o = Outcome { id, title, passed, elapsed: start.elapsed(), limit: Duration::from_secs(limit_s), detail };
    o.print();
    o
}

fn suite(id: u8, title: &'static str, limit_s: u64, run: impl FnOnce() -> Result<SuiteReport>) -> Outcome {
    criterion(id, title, limit_s, || {
        let r = run()?;
        Ok((r.passed(), r.to_string().lines().skip(1).map(|l| l.trim().to_string()).collect()))
    })
}

fn class_curve(rows: &[(usize, EvalReport)], c: usize) -> Vec<Option<f64>> {
    rows.iter().map(|(_, r)| r.per_class_iou[c]).collect()
}

fn files_equal(a: &Path, b: &Path, name: &str) -> std::io::Result<bool> {
    Ok(std::fs::read(a.join(name))? == std::fs::read(b.join(name))?)
}

fn main() -> ExitCode {
    let mut outcomes = vec![
        suite(1, "geometry oracles", 10, || verify::geometry_suite(200)),
        suite(2, "attention oracles on 50 seeded 4x4x2 cases", 60, || verify::attention_suite(50)),
        suite(3, "finite-difference gradients", 300, verify::gradient_suite),
        suite(4, "query count H*W + D*H + W*D", 10, verify::query_count_suite),
        suite(5, "loss oracles", 60, verify::loss_suite),
    ];

    // Criterion 6 keeps the first temporal model for criterion 7.
    let mut kept: Option<Model> = None;
    outcomes.push(criterion(6, "temporal gain on the occlusion benchmark", 1800, || {
        let eval_set = eval_scenes()?;
        let mut detail = Vec::new();
        let mut gains = Vec::new();
        for seed in SEEDS {
            let train_set = scenes(seed * 10_000, TRAIN_SCENES)?;
            let mut miou = [0.0; 2];
            for m in [1, 0] {
                let (model, _, report) = train_and_eval(&run_config(m, seed, STEPS)?, &train_set, &eval_set, |_| {})?;
                miou[m] = report.miou;
                if m == 1 && kept.is_none() {
                    kept = Some(model);
                }
            }
            gains.push(miou[1] - miou[0]);
            detail.push(format!(
                "seed {seed}: mIoU M=1 {:.4}  M=0 {:.4}  gain {:+.4}",
                miou[1],
                miou[0],
                miou[1] - miou[0]
            ));
        }
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        detail.push(format!(
            "mean gain {:+.2} points (need >= {:.0}), {STEPS} steps per model",
            100.0 * mean,
            100.0 * MIN_GAIN
        ));
        Ok((mean >= MIN_GAIN, detail))
    }));

    outcomes.push(criterion(7, "inference-time ablation M = 0..7 on one checkpoint", 300, || {
        let Some(trained) = kept.take() else {
            return Ok((false, vec!["no checkpoint from criterion 6".into()]));
        };
        let mut bytes = Vec::new();
        trained.save_checkpoint(&mut bytes)?;
        let mut model: Model = Model::new(trained.cfg.clone())?;
        model.load_checkpoint(bytes.as_slice())?;

        let ms: Vec<usize> = (0..OCCLUSION_FRAMES).collect();
        let rows = ablate_temporal_range(&model, &eval_scenes()?, &ms, &eval_config(1))?;
        let mut csv = Vec::new();
        write_ablation_csv(&rows, &mut csv).expect("in-memory write");
        let text = String::from_utf8(csv).expect("utf-8 csv");
        let data_rows = text.lines().count() - 1;
        let finite =
            rows.iter().all(|(_, r)| r.miou.is_finite() && r.per_class_iou.iter().flatten().all(|v| v.is_finite()))
                && !text.contains("NaN");
        let varying: Vec<&str> = (0..N_SEMANTIC)
            .filter(|&c| {
                let curve = class_curve(&rows, c);
                curve.iter().any(|v| *v != curve[0])
            })
            .map(|c| CLASS_NAMES[c])
            .collect();
        let target = class_curve(&rows, class::TRUCK as usize);
        let target_varies = target.iter().any(|v| *v != target[0]);
        let mut detail = vec![
            format!("{data_rows} data rows, all values finite: {finite}"),
            format!("non-constant class curves: {}", varying.join(", ")),
        ];
        for (m, r) in &rows {
            let t = r.per_class_iou[class::TRUCK as usize].map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            detail.push(format!("M={m}: mIoU {:.4}  truck {t}", r.miou));
        }
        Ok((data_rows == 8 && finite && target_varies && !varying.is_empty(), detail))
    }));

    outcomes.push(criterion(8, "byte-identical train and eval outputs across runs", 300, || {
        let root = tempfile::tempdir().expect("temp dir");
        let data = root.path().join("scenes");
        let gen = ["s2tpv", "gen-scenes", "--n", "3", "--seed", "5", "--out", data.to_str().unwrap()];
        if cli::run(gen) != 0 {
            return Ok((false, vec!["gen-scenes failed".into()]));
        }
        let mut dirs = Vec::new();
        for run in ["a", "b"] {
            let out = root.path().join(run);
            let out_s = out.to_str().unwrap();
            let d = data.to_str().unwrap();
            let train = ["s2tpv", "train", "--data", d, "--steps", "40", "--seed", "9", "--out", out_s];
            let ckpt = out.join(cli::CHECKPOINT_FILE);
            let eval = ["s2tpv", "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--out", out_s];
            if cli::run(train) != 0 || cli::run(eval) != 0 {
                return Ok((false, vec![format!("run {run} failed")]));
            }
            dirs.push(out);
        }
        let mut same = true;
        let mut detail = Vec::new();
        for name in [cli::CHECKPOINT_FILE, cli::RUN_CONFIG_FILE, "loss.csv", "report.csv"] {
            let eq = files_equal(&dirs[0], &dirs[1], name).map_err(|e| s2tpv::Error::Format(e.to_string()))?;
            same &= eq;
            detail.push(format!("{name}: {}", if eq { "identical" } else { "DIFFERENT" }));
        }
        Ok((same, detail))
    }));

    outcomes.push(suite(9, "voxelization and metric oracles", 30, || verify::voxel_metric_suite(10_000)));

    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.ok()).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
