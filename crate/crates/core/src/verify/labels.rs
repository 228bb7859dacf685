use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;
use super::{rand_tensor, timed, Check, SuiteReport};
use crate::error::Result;
use crate::eval::{confusion, miou, EvalMask};
use crate::geometry::EgoGrid;
use crate::model::Task;
use crate::synth::{voxelize_labels, LidarPoint, EMPTY, N_SEMANTIC};
use crate::tensor::{Graph, Tensor};
use crate::train::{cross_entropy, lovasz_on_logits, lovasz_softmax, task_loss, LossWeights};

/// Every labeling of `n` samples over `k` classes, in counting order.
fn labelings(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..k.pow(n as u32)).map(move |mut code| {
        (0..n)
            .map(|_| {
                let c = code % k;
                code /= k;
                c
            })
            .collect()
    })
}

fn random_probs<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut p = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        p.extend(row.into_iter().map(|v| v / z));
    }
    p
}

/// Lovász-softmax against the level-set integral of the Jaccard loss over
/// every labeling of up to 6 samples and 3 classes, cross-entropy against
/// unshifted scalar math and the task loss against its two parts.
pub fn loss_suite() -> Result<SuiteReport> {
    timed("losses", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
        let mut lovasz = Check::new("lovasz_softmax vs extension (exhaustive)", 1e-12);
        let mut range = Check::new("lovasz_softmax within [0, 1]", 0.0);
        for n in 1..=6 {
            for k in 1..=3 {
                for targets in labelings(n, k) {
                    let probs = random_probs(n, k, &mut rng);
                    let mut g: Graph = Graph::new();
                    let p = g.constant(Tensor::new(&[n, k], probs.clone())?);
                    let l = lovasz_softmax(&mut g, p, &targets)?;
                    let got = g.value(l).item();
                    lovasz.see((got - oracle::lovasz_softmax(&probs, k, &targets)).abs());
                    range.expect((0.0..=1.0).contains(&got));
                }
            }
        }

        let mut ce = Check::new("cross_entropy vs scalar oracle", 1e-12);
        for _ in 0..200 {
            let (n, k) = (rng.gen_range(1..8), rng.gen_range(1..10));
            let logits = rand_tensor(&[n, k], 4.0, &mut rng);
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut g: Graph = Graph::new();
            let x = g.constant(logits.clone());
            let l = cross_entropy(&mut g, x, &targets)?;
            let got = g.value(l).item();
            ce.see((got - oracle::cross_entropy(logits.data(), k, &targets)).abs());
        }

        let mut compose = Check::new("task_loss = sum of its parts (exact)", 0.0);
        let mut zeroed = Check::new("task_loss with zero CE weight = lovasz", 0.0);
        let mut perfect = Check::new("task_loss of perfect logits", 1e-12);
        for _ in 0..100 {
            let k = N_SEMANTIC + 1;
            let (nv, np) = (rng.gen_range(1..30), rng.gen_range(0..20));
            let vl = rand_tensor(&[nv, k], 3.0, &mut rng);
            let pl = rand_tensor(&[np, k], 3.0, &mut rng);
            let vgt: Vec<usize> = (0..nv).map(|_| rng.gen_range(0..k)).collect();
            let pgt: Vec<usize> = (0..np).map(|_| rng.gen_range(0..N_SEMANTIC)).collect();
            for task in [Task::Sop, Task::LidarSeg] {
                let mut g: Graph = Graph::new();
                let (v, p) = (g.constant(vl.clone()), g.constant(pl.clone()));
                let t = task_loss(&mut g, v, &vgt, p, &pgt, task, LossWeights::default())?.total;
                let total = g.value(t).item();
                let mut h: Graph = Graph::new();
                let (v, p) = (h.constant(vl.clone()), h.constant(pl.clone()));
                let (l, c) = match task {
                    Task::Sop => (lovasz_on_logits(&mut h, v, &vgt)?, cross_entropy(&mut h, p, &pgt)?),
                    Task::LidarSeg => {
                        let s = h.take_cols(p, N_SEMANTIC)?;
                        (lovasz_on_logits(&mut h, s, &pgt)?, cross_entropy(&mut h, v, &vgt)?)
                    }
                };
                let (l, c) = (h.value(l).item(), h.value(c).item());
                compose.see((total - (l + c)).abs());
                let mut g: Graph = Graph::new();
                let (v, p) = (g.constant(vl.clone()), g.constant(pl.clone()));
                let w = LossWeights { lovasz: 1.0, cross_entropy: 0.0 };
                let t = task_loss(&mut g, v, &vgt, p, &pgt, task, w)?.total;
                zeroed.see((g.value(t).item() - l).abs());
            }
            // one-hot logits with a wide margin
            let hot = |gt: &[usize]| {
                let mut t = Tensor::full(&[gt.len(), k], -40.0);
                for (i, &c) in gt.iter().enumerate() {
                    t.set(&[i, c], 40.0);
                }
                t
            };
            for task in [Task::Sop, Task::LidarSeg] {
                let mut g: Graph = Graph::new();
                let (v, p) = (g.constant(hot(&vgt)), g.constant(hot(&pgt)));
                let t = task_loss(&mut g, v, &vgt, p, &pgt, task, LossWeights::default())?.total;
                perfect.see(g.value(t).item());
            }
        }
        Ok(vec![lovasz, range, ce, compose, zeroed, perfect])
    })
}

/// Voxelization of random points against a counting oracle, then
/// confusion and IoU against set intersection over every pair of 3-class
/// labelings of a 2x2x2 grid.
pub fn voxel_metric_suite(n_points: usize) -> Result<SuiteReport> {
    timed("voxelization and metrics", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x70C5);
        let mut vox = Check::new("voxelize_labels vs counting oracle", 0.0);
        for (dims, bounds) in
            [([8, 8, 4], [[-8.0, 8.0], [-8.0, 8.0], [-2.0, 2.0]]), ([5, 7, 3], [[-3.3, 4.1], [0.0, 7.7], [-1.0, 2.5]])]
        {
            let grid = EgoGrid::new(dims, bounds)?;
            let mut pts = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let p = Vector3::from_fn(|a, _| rng.gen_range(bounds[a][0] - 1.0..bounds[a][1] + 1.0));
                // clustered classes make ties and majorities both common
                let class = (rng.gen_range(0..3) + (p.x.abs() as usize)) as u8 % N_SEMANTIC as u8;
                pts.push(LidarPoint { p, class });
            }
            let got = voxelize_labels(&pts, &grid)?;
            let want = oracle::count_labels(
                &pts.iter().map(|q| ([q.p.x, q.p.y, q.p.z], q.class)).collect::<Vec<_>>(),
                &grid,
                N_SEMANTIC,
                EMPTY,
            );
            for (a, b) in got.labels.iter().zip(&want) {
                vox.expect(a == b);
            }
        }

        let mut cm_total = Check::new("confusion counts = kept cells", 0.0);
        let mut iou = Check::new("per-class IoU vs set intersection", 1e-15);
        let mut mean = Check::new("mIoU vs set intersection", 1e-15);
        let (k, empty) = (3usize, 2usize);
        let included = [0usize, 1];
        let masks = [EvalMask::All, EvalMask::GtOrPred, EvalMask::GtOccupied];
        let all: Vec<Vec<usize>> = labelings(8, k).collect();
        for (gi, gt) in all.iter().enumerate() {
            for (pi, pred) in all.iter().enumerate() {
                let mask = masks[(gi + pi) % 3];
                let keep: Vec<bool> = gt
                    .iter()
                    .zip(pred)
                    .map(|(&g, &p)| match mask {
                        EvalMask::All => true,
                        EvalMask::GtOrPred => g != empty || p != empty,
                        EvalMask::GtOccupied => g != empty,
                    })
                    .collect();
                let cm = confusion(pred, gt, k, mask, empty)?;
                cm_total.expect(cm.total() == keep.iter().filter(|&&b| b).count() as u64);
                let (want_per, want_mean) = oracle::set_iou(pred, gt, &keep, k, &included);
                match (miou(&cm, &included), want_mean) {
                    (Ok((per, m)), Some(wm)) => {
                        for &c in &included {
                            iou.see(match (per[c], want_per[c]) {
                                (Some(a), Some(b)) => (a - b).abs(),
                                (None, None) => 0.0,
                                _ => f64::INFINITY,
                            });
                        }
                        mean.see((m - wm).abs());
                    }
                    (Err(_), None) => mean.see(0.0),
                    _ => mean.see(f64::INFINITY),
                }
            }
        }
        Ok(vec![vox, cm_total, iou, mean])
    })
}
