//! Metrics, the inference-time temporal-range sweep and visualization exports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Task};
use crate::synth::{RenderConfig, VoxelLabelGrid, WorldSpec, CLASS_NAMES, EMPTY, N_SEMANTIC};
use crate::tensor::{Graph, Real, Tensor};
use crate::train::build_sample;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(format!("merging {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Which cells are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMask {
    /// Cells occupied in the ground truth or the prediction.
    #[default]
    GtOrPred,
    /// Cells occupied in the ground truth.
    GtOccupied,
    All,
}

impl EvalMask {
    fn keep(self, gt: usize, pred: usize, empty: usize) -> bool {
        match self {
            EvalMask::GtOrPred => gt != empty || pred != empty,
            EvalMask::GtOccupied => gt != empty,
            EvalMask::All => true,
        }
    }
}

/// Counts `(gt, pred)` pairs over the cells kept by `mask`; `empty` is the
/// label of unoccupied cells.
pub fn confusion(pred: &[usize], gt: &[usize], k: usize, mask: EvalMask, empty: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!("confusion: {} predictions for {} labels", pred.len(), gt.len())));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= k || g >= k {
            return Err(Error::Label(format!("confusion: label pair ({g}, {p}) outside {k} classes")));
        }
        if mask.keep(g, p, empty) {
            cm.counts[g * k + p] += 1;
        }
    }
    Ok(cm)
}

/// Per-class IoU (`None` where the class never occurs in either labeling)
/// and the mean over the defined ones.
pub fn miou(cm: &ConfusionMatrix, included: &[usize]) -> Result<(Vec<Option<f64>>, f64)> {
    if included.is_empty() {
        return Err(Error::Config("miou: no classes included".into()));
    }
    let mut per = vec![None; cm.k];
    for &c in included {
        if c >= cm.k {
            return Err(Error::Label(format!("miou: class {c} outside {} classes", cm.k)));
        }
        let tp = cm.get(c, c);
        let fn_: u64 = (0..cm.k).map(|p| cm.get(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..cm.k).map(|g| cm.get(g, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom > 0 {
            per[c] = Some(tp as f64 / denom as f64);
        }
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Label("miou: no included class occurs".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub task: crate::model::Task,
    /// History frames fused at inference.
    pub steps: usize,
    /// Inclusive range of scored timesteps; every frame when absent.
    #[serde(default)]
    pub timesteps: Option<[usize; 2]>,
    #[serde(default)]
    pub mask: EvalMask,
    pub render: RenderConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// IoU per label value; `None` where undefined or not scored.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
    /// Ground-truth LiDAR points per semantic class over the scored frames.
    pub gt_points: Vec<u64>,
}

fn argmax_rows<T: Real>(logits: &Tensor<T>, limit: usize) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..limit.min(k) {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Voxel and point predictions of timestep `t` with `steps` history frames.
pub fn predict<T: Real>(
    model: &Model<T>,
    spec: &WorldSpec,
    t: usize,
    steps: usize,
    render: &RenderConfig,
) -> Result<Prediction> {
    if steps > t {
        return Err(Error::Range(format!("{steps} history steps need {} frames before t = {t}", steps)));
    }
    let s = build_sample::<T, rand_chacha::ChaCha8Rng>(spec, t, steps, render, &model.cfg.encoder.grid, 0, None)?;
    let mut g: Graph<T> = Graph::new();
    let params = g.params(&model.store);
    let pred = model.forward(&mut g, &params, &s.frames, steps, &s.points)?;
    g.check_finite()?;
    let grid = model.cfg.encoder.grid;
    let voxels = argmax_rows(g.value(pred.voxels), model.cfg.n_classes());
    Ok(Prediction {
        voxels: VoxelLabelGrid::new(grid.dims, model.cfg.n_classes(), voxels.iter().map(|&c| c as u8).collect())?,
        voxel_gt: s.voxel_gt,
        points: argmax_rows(g.value(pred.points), N_SEMANTIC),
        point_gt: s.point_gt,
        hw_plane: g.value(pred.tpv.hw).to_f64_vec(),
    })
}

/// Labels of one evaluated frame.
pub struct Prediction {
    pub voxels: VoxelLabelGrid,
    pub voxel_gt: Vec<usize>,
    pub points: Vec<usize>,
    pub point_gt: Vec<usize>,
    /// Top plane values, `[H, W, C]` flattened.
    pub hw_plane: Vec<f64>,
}

/// Scores every selected timestep of every scene.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &[WorldSpec], cfg: &EvalConfig) -> Result<EvalReport> {
    let k = model.cfg.n_classes();
    let mut cm = ConfusionMatrix::new(k);
    let mut gt_points = vec![0u64; N_SEMANTIC];
    for spec in dataset {
        let last = spec.n_frames() - 1;
        let (lo, hi) = match cfg.timesteps {
            Some([a, b]) if a <= b && b <= last => (a, b),
            Some(r) => return Err(Error::Range(format!("timesteps {r:?} outside {} frames", spec.n_frames()))),
            None => (0, last),
        };
        for t in lo..=hi {
            let p = predict(model, spec, t, cfg.steps, &cfg.render)?;
            for &c in &p.point_gt {
                gt_points[c] += 1;
            }
            let part = match cfg.task {
                Task::Sop => {
                    let pred: Vec<usize> = p.voxels.labels.iter().map(|&c| c as usize).collect();
                    confusion(&pred, &p.voxel_gt, k, cfg.mask, EMPTY as usize)?
                }
                Task::LidarSeg => confusion(&p.points, &p.point_gt, k, EvalMask::All, EMPTY as usize)?,
            };
            cm.merge(&part)?;
        }
    }
    let included: Vec<usize> = (0..N_SEMANTIC).collect();
    let (per_class_iou, miou) = miou(&cm, &included)?;
    Ok(EvalReport { per_class_iou, miou, confusion: cm, gt_points })
}

/// One evaluation per history length, weights untouched.
pub fn ablate_temporal_range<T: Real>(
    model: &Model<T>,
    dataset: &[WorldSpec],
    m_values: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<(usize, EvalReport)>> {
    m_values
        .iter()
        .map(|&m| evaluate(model, dataset, &EvalConfig { steps: m, ..cfg.clone() }).map(|r| (m, r)))
        .collect()
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `m,miou,<class>...` with one row per history length.
pub fn write_ablation_csv(rows: &[(usize, EvalReport)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "m,miou,{}", CLASS_NAMES.join(","))?;
    for (m, r) in rows {
        let cls: Vec<String> = (0..N_SEMANTIC).map(|c| fmt_iou(r.per_class_iou[c])).collect();
        writeln!(w, "{m},{:.6},{}", r.miou, cls.join(","))?;
    }
    w.flush()
}

/// Per-class IoU table plus the confusion matrix.
pub fn write_report_csv(r: &EvalReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "class,iou,gt_points")?;
    for (c, name) in CLASS_NAMES.iter().enumerate().take(N_SEMANTIC) {
        writeln!(w, "{name},{},{}", fmt_iou(r.per_class_iou[c]), r.gt_points[c])?;
    }
    writeln!(w, "miou,{:.6},", r.miou)?;
    writeln!(w)?;
    let names: Vec<&str> = CLASS_NAMES.iter().copied().chain(["empty"]).take(r.confusion.k).collect();
    writeln!(w, "gt\\pred,{}", names.join(","))?;
    for g in 0..r.confusion.k {
        let row: Vec<String> = (0..r.confusion.k).map(|p| r.confusion.get(g, p).to_string()).collect();
        writeln!(w, "{},{}", names.get(g).copied().unwrap_or("?"), row.join(","))?;
    }
    w.flush()
}

/// IoU change between two reports against each class's point count.
pub fn write_gain_vs_count_csv(base: &EvalReport, other: &EvalReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "class,gt_points,log10_points,iou_base,iou_other,delta")?;
    for (c, name) in CLASS_NAMES.iter().enumerate().take(N_SEMANTIC) {
        let (a, b) = (base.per_class_iou[c], other.per_class_iou[c]);
        let delta = a.zip(b).map(|(a, b)| format!("{:.6}", b - a)).unwrap_or_default();
        let n = base.gt_points[c];
        let log = if n > 0 { format!("{:.6}", (n as f64).log10()) } else { String::new() };
        writeln!(w, "{name},{n},{log},{},{},{delta}", fmt_iou(a), fmt_iou(b))?;
    }
    w.flush()
}

/// Per-cell channel L2 norm of an `[H, W, C]` plane, min-max scaled to
/// 0..=255. A constant field maps to zeros.
pub fn heatmap_pixels(plane: &Tensor<f64>) -> Result<(usize, usize, Vec<u8>)> {
    if plane.rank() != 3 {
        return Err(Error::dim(format!("heatmap: expected [H, W, C], got {:?}", plane.shape())));
    }
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let c = plane.shape()[2].max(1);
    let norms: Vec<f64> = plane.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let (lo, hi) = norms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    let px = norms.iter().map(|&x| if span > 0.0 { ((x - lo) / span * 255.0).round() as u8 } else { 0 }).collect();
    Ok((h, w, px))
}

/// Writes the plane's norm map as a binary PGM (`P5`), one pixel per cell.
pub fn emit_heatmap(plane: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w, px) = heatmap_pixels(plane)?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(&px);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM written by [`emit_heatmap`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    if fields[0] != "P5" || parse(&fields[3])? != 255 {
        return Err(Error::Format("expected an 8-bit P5 graymap".into()));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos..).filter(|p| p.len() == w * h).ok_or_else(|| Error::Format("PGM size mismatch".into()))?;
    Ok((h, w, px.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_labelings_are_diagonal() {
        let x = [0, 1, 2, 2, 1];
        let cm = confusion(&x, &x, 3, EvalMask::All, 2).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p);
            }
        }
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn constant_prediction_fills_one_column() {
        let cm = confusion(&[0; 4], &[0, 1, 2, 1], 3, EvalMask::All, 2).unwrap();
        assert_eq!((0..3).map(|g| cm.get(g, 0)).sum::<u64>(), 4);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn masks() {
        let (pred, gt) = ([2, 0, 2, 1], [2, 2, 1, 0]);
        assert_eq!(confusion(&pred, &gt, 3, EvalMask::GtOrPred, 2).unwrap().total(), 3);
        assert_eq!(confusion(&pred, &gt, 3, EvalMask::GtOccupied, 2).unwrap().total(), 2);
        assert!(confusion(&pred, &gt[..3], 3, EvalMask::All, 2).is_err());
    }

    #[test]
    fn hand_counted_iou() {
        let cm = ConfusionMatrix { k: 2, counts: vec![1, 1, 1, 1] };
        let (per, m) = miou(&cm, &[0, 1]).unwrap();
        assert_eq!(per, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(m, 1.0 / 3.0);
        let disjoint = ConfusionMatrix { k: 2, counts: vec![0, 2, 0, 0] };
        assert_eq!(miou(&disjoint, &[0]).unwrap().0[0], Some(0.0));
    }

    #[test]
    fn heatmap_extremes() {
        let (_, _, flat) = heatmap_pixels(&Tensor::full(&[3, 4, 2], 0.7)).unwrap();
        assert!(flat.iter().all(|&p| p == flat[0]));
        let mut hot = Tensor::zeros(&[3, 4, 2]);
        hot.set(&[1, 2, 0], 5.0);
        let (_, _, px) = heatmap_pixels(&hot).unwrap();
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(px[4 + 2], 255);
        assert_eq!(px.iter().filter(|&&p| p == 0).count(), 11);
    }
}
