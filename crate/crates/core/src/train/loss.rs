//! Classification losses as fused graph ops.

use crate::error::{Error, Result};
use crate::model::Task;
use crate::tensor::{Graph, Real, Tensor, Var};

fn check_targets(op: &str, shape: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::dim(format!("{op}: expected [N, K], got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::dim(format!("{op}: {} targets for {n} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Label(format!("{op}: target {t} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// Mean negative log-softmax probability of each row's target. Zero rows
/// give zero.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (n, k) = check_targets("cross_entropy", g.shape(logits), targets)?;
    let x = g.value(logits).data();
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - m).exp() / z;
        }
        loss = loss + m + z.ln() - row[t];
    }
    let inv_n = if n == 0 { T::zero() } else { T::one() / T::lit(n as f64) };
    let targets = targets.to_vec();
    Ok(g.push(
        "cross_entropy",
        Tensor::scalar(loss * inv_n),
        &[logits],
        Box::new(move |inp, _, go, _| {
            let s = go.item() * inv_n;
            let mut grad = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                grad[i * k + t] = grad[i * k + t] - T::one();
            }
            let grad = grad.into_iter().map(|v| v * s).collect();
            vec![Some(Tensor::new(inp[0].shape(), grad).expect("shape"))]
        }),
    ))
}

/// Gradient of the Jaccard loss extension along a foreground mask sorted by
/// descending error.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                inter -= 1.0;
            } else {
                union += 1.0;
            }
            let j = 1.0 - inter / union;
            let d = j - prev;
            prev = j;
            d
        })
        .collect()
}

/// Lovász-softmax over the classes present in `targets`, averaged.
/// Rows of `probs` are class probabilities. No targets gives zero.
pub fn lovasz_softmax<T: Real>(g: &mut Graph<T>, probs: Var, targets: &[usize]) -> Result<Var> {
    let (n, k) = check_targets("lovasz_softmax", g.shape(probs), targets)?;
    let p = g.value(probs).data();
    let mut present = vec![false; k];
    for &t in targets {
        present[t] = true;
    }
    let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    // d loss / d p, accumulated while computing the value.
    let mut dp = vec![T::zero(); n * k];
    let mut loss = T::zero();
    let inv_c = if classes.is_empty() { T::zero() } else { T::one() / T::lit(classes.len() as f64) };
    let mut order: Vec<usize> = (0..n).collect();
    for &c in &classes {
        let err: Vec<T> =
            (0..n).map(|i| if targets[i] == c { T::one() - p[i * k + c] } else { p[i * k + c] }).collect();
        order.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let fg: Vec<bool> = order.iter().map(|&i| targets[i] == c).collect();
        let grad = lovasz_grad(&fg);
        for (&i, &gr) in order.iter().zip(&grad) {
            let gr = T::lit(gr);
            loss = loss + err[i] * gr * inv_c;
            let sign = if targets[i] == c { -T::one() } else { T::one() };
            dp[i * k + c] = sign * gr * inv_c;
        }
    }
    Ok(g.push(
        "lovasz_softmax",
        Tensor::scalar(loss),
        &[probs],
        Box::new(move |inp, _, go, _| {
            let s = go.item();
            let grad = dp.iter().map(|&v| v * s).collect();
            vec![Some(Tensor::new(inp[0].shape(), grad).expect("shape"))]
        }),
    ))
}

/// Lovász-softmax applied to logits via a softmax over the last axis.
pub fn lovasz_on_logits<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().ok_or_else(|| Error::dim("lovasz_on_logits: scalar logits"))?;
    let rows = g.reshape(logits, &[shape.iter().product::<usize>() / k.max(1), k])?;
    let probs = g.softmax(rows, 1)?;
    lovasz_softmax(g, probs, targets)
}

/// Weighted components of a task loss.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub total: Var,
    pub lovasz: Var,
    pub cross_entropy: Var,
}

/// Relative weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lovasz: f64,
    pub cross_entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lovasz: 1.0, cross_entropy: 1.0 }
    }
}

/// Occupancy: Lovász on voxels plus cross-entropy on points. LiDAR
/// segmentation swaps the two branches and scores points without the
/// trailing `empty` column, since LiDAR returns are always occupied.
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    voxel_logits: Var,
    voxel_gt: &[usize],
    point_logits: Var,
    point_gt: &[usize],
    task: Task,
    w: LossWeights,
) -> Result<TaskLoss> {
    let k = *g.shape(voxel_logits).last().ok_or_else(|| Error::dim("task_loss: scalar voxel logits"))?;
    let voxel_rows = g.reshape(voxel_logits, &[voxel_gt.len(), k])?;
    let (lovasz, cross_entropy) = match task {
        Task::Sop => (lovasz_on_logits(g, voxel_rows, voxel_gt)?, cross_entropy(g, point_logits, point_gt)?),
        Task::LidarSeg => {
            let semantic = g.take_cols(point_logits, k.saturating_sub(1))?;
            (lovasz_on_logits(g, semantic, point_gt)?, cross_entropy(g, voxel_rows, voxel_gt)?)
        }
    };
    let a = g.scale(lovasz, T::lit(w.lovasz));
    let b = g.scale(cross_entropy, T::lit(w.cross_entropy));
    let total = g.add(a, b)?;
    Ok(TaskLoss { total, lovasz, cross_entropy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g: Graph = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let l = eval(|g| {
            let x = g.constant(Tensor::zeros(&[3, 4]));
            cross_entropy(g, x, &[0, 3, 1]).unwrap()
        });
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let l = eval(|g| {
            let x = g.constant(Tensor::from_f64(&[2, 2], &[60.0, -60.0, -60.0, 60.0]).unwrap());
            cross_entropy(g, x, &[0, 1]).unwrap()
        });
        assert!(l < 1e-40);
    }

    #[test]
    fn bad_targets_are_label_errors() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(cross_entropy(&mut g, x, &[0, 3]), Err(Error::Label(_))));
        assert!(matches!(lovasz_softmax(&mut g, x, &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn lovasz_single_sample_half() {
        let l = eval(|g| {
            let p = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
            lovasz_softmax(g, p, &[0]).unwrap()
        });
        assert_eq!(l, 0.5);
    }

    #[test]
    fn lovasz_perfect_and_empty() {
        let perfect = eval(|g| {
            let p = g.constant(Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
            lovasz_softmax(g, p, &[0, 2, 0]).unwrap()
        });
        assert_eq!(perfect, 0.0);
        let empty = eval(|g| {
            let p = g.constant(Tensor::zeros(&[0, 3]));
            lovasz_softmax(g, p, &[]).unwrap()
        });
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn lovasz_grad_sums_to_final_jaccard() {
        let fg = [true, false, true, false, false];
        let gr = lovasz_grad(&fg);
        // with every sample counted as an error the Jaccard loss is 1
        assert!((gr.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gr.iter().all(|&v| v >= 0.0));
    }
}
