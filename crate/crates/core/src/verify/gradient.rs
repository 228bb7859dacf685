use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rand_tensor, randomize, timed, Check, SuiteReport};
use crate::attention::{cvha, tcvha_step, Cvha, DeformAttn, DeformAttnShape, Tcvha};
use crate::encoder::{EncoderConfig, FrameInput, Variant};
use crate::error::Result;
use crate::geometry::{CameraModel, EgoGrid, RigidTransform};
use crate::model::{Model, ModelConfig, Task};
use crate::tensor::{grad_check, Graph, ParamStore, Tensor, Var};
use crate::tpv::TpvVars;
use crate::train::{cross_entropy, lovasz_on_logits, task_loss, LossWeights};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Registers `inputs` as parameters and compares tape gradients of `f`
/// with central differences.
fn op_check(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<Check> {
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.register(format!("in{i}"), t)?;
    }
    let r = grad_check(&mut store, EPS, f)?;
    let mut c = Check::new(name, TOL);
    c.see(r.max_rel_error);
    c.cases = r.checked;
    Ok(c)
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = rand_tensor(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// A scalar objective over the parameter leaves of a graph.
type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn toy_model(variant: Variant) -> Result<Model<f64>> {
    let grid = EgoGrid::new([4, 4, 2], [[-4.0, 4.0], [-4.0, 4.0], [-1.0, 3.0]])?;
    let encoder = EncoderConfig {
        grid,
        embed_dim: 4,
        n_layers: 1,
        temporal_steps: 1,
        n_ref: 2,
        n_cross: 1,
        n_heads: 2,
        n_points: 1,
        ffn_hidden: 4,
        feat_dim: 3,
        n_levels: 1,
        variant,
    };
    Model::new(ModelConfig { encoder, decoder_hidden: 4, seed: 3 })
}

fn toy_frames<R: Rng>(rng: &mut R) -> Result<Vec<FrameInput<f64>>> {
    let cam = CameraModel::facing(0.0, Vector3::new(-5.0, 0.0, 1.0), 1.6, 8, 6)?;
    [RigidTransform::planar(0.0, 0.0, 0.0), RigidTransform::planar(0.6, 0.2, 0.05)]
        .into_iter()
        .map(|pose| {
            Ok(FrameInput { pose, cameras: vec![cam.clone()], pyramids: vec![vec![rand_tensor(&[6, 8, 3], 1.0, rng)]] })
        })
        .collect()
}

/// Central-difference checks of every differentiable op, the attention
/// blocks and the full loss of a one-camera, one-history-frame toy model.
pub fn gradient_suite() -> Result<SuiteReport> {
    timed("gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
        let mut r = |shape: &[usize]| rand_tensor(shape, 1.0, &mut rng);
        let mut checks = vec![
            op_check("affine", vec![r(&[3, 4]), r(&[4, 2]), r(&[2])], |g, p| {
                let y = g.affine(p[0], p[1], Some(p[2]))?;
                probe(g, y, 1)
            })?,
            op_check("add / sub / mul", vec![r(&[2, 3]), r(&[2, 3])], |g, p| {
                let a = g.add(p[0], p[1])?;
                let s = g.sub(p[0], p[1])?;
                let m = g.mul(a, s)?;
                probe(g, m, 2)
            })?,
            op_check("scale / sum / mean / add_all", vec![r(&[5]), r(&[5])], |g, p| {
                let a = g.scale(p[0], 1.7);
                let m = g.mul(p[0], p[1])?;
                let s = g.sum(m);
                let mean = g.mean(p[1]);
                let t = g.add_all(&[s, mean])?;
                let q = probe(g, a, 3)?;
                g.add(t, q)
            })?,
            op_check("reshape", vec![r(&[2, 6])], |g, p| {
                let y = g.reshape(p[0], &[3, 4])?;
                let y = g.mul(y, y)?;
                probe(g, y, 4)
            })?,
            op_check("softmax (inner and middle axis)", vec![r(&[2, 3, 4])], |g, p| {
                let a = g.softmax(p[0], 2)?;
                let b = g.softmax(p[0], 1)?;
                let a = probe(g, a, 5)?;
                let b = probe(g, b, 6)?;
                g.add(a, b)
            })?,
            op_check("masked_softmax", vec![r(&[3, 4])], |g, p| {
                let mask = [true, false, true, true, false, false, false, false, true, true, false, true];
                let y = g.masked_softmax(p[0], &mask)?;
                probe(g, y, 7)
            })?,
            op_check("softplus / gelu", vec![r(&[6])], |g, p| {
                let a = g.softplus(p[0]);
                let b = g.gelu(p[0]);
                let a = probe(g, a, 8)?;
                let b = probe(g, b, 9)?;
                g.add(a, b)
            })?,
            op_check("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
                probe(g, y, 10)
            })?,
            op_check("concat_last / take_cols", vec![r(&[3, 2]), r(&[3, 3])], |g, p| {
                let y = g.concat_last(p[0], p[1])?;
                let y = g.take_cols(y, 4)?;
                probe(g, y, 11)
            })?,
            op_check("gather_rows (repeated index)", vec![r(&[4, 3])], |g, p| {
                let y = g.gather_rows(p[0], &[2, 0, 2, 3])?;
                probe(g, y, 12)
            })?,
            op_check("hit_mean", vec![r(&[2, 3]), r(&[3, 3]), r(&[5, 3])], |g, p| {
                let y = g.hit_mean(&[(p[0], vec![1, 3]), (p[1], vec![0, 1, 4])], p[2])?;
                probe(g, y, 13)
            })?,
            op_check("grid_sample2d", vec![r(&[3, 4, 2]), r(&[5, 2]).map(|v| 1.2 + 1.9 * v)], |g, p| {
                let y = g.grid_sample2d(p[0], p[1])?;
                probe(g, y, 14)
            })?,
            op_check(
                "deform_gather",
                vec![r(&[3, 4, 4]), r(&[2, 3, 4]), r(&[3, 2, 3, 2]).map(|v| 0.7 * v), r(&[3, 2, 3])],
                |g, p| {
                    let base = Tensor::from_f64(
                        &[3, 3, 2],
                        &[0.3, 1.2, 1.7, 0.4, 0.6, 2.3, 1.1, 1.9, 0.2, 0.8, 1.4, 1.6, 2.2, 0.9, 0.5, 1.3, 1.8, 2.6],
                    )?;
                    let y = g.deform_gather(&[p[0], p[1]], &[0, 1, 0], &base, p[2], p[3])?;
                    probe(g, y, 15)
                },
            )?,
            op_check("tpv_broadcast_sum", vec![r(&[3, 2, 2]), r(&[2, 3, 2]), r(&[2, 2, 2])], |g, p| {
                let y = g.tpv_broadcast_sum(p[0], p[1], p[2])?;
                probe(g, y, 16)
            })?,
            op_check("cross_entropy", vec![r(&[4, 3])], |g, p| cross_entropy(g, p[0], &[0, 2, 2, 1]))?,
            op_check("lovasz_softmax on logits", vec![r(&[6, 3]).map(|v| 2.0 * v)], |g, p| {
                lovasz_on_logits(g, p[0], &[0, 2, 2, 1, 0, 0])
            })?,
        ];
        for task in [Task::Sop, Task::LidarSeg] {
            let name = format!("task_loss ({task:?})");
            checks.push(op_check(&name, vec![r(&[2, 2, 1, 4]).map(|v| 2.0 * v), r(&[3, 4]).map(|v| 2.0 * v)], move |g, p| {
                Ok(task_loss(g, p[0], &[0, 3, 3, 1], p[1], &[2, 0, 1], task, LossWeights::default())?.total)
            })?);
        }

        // Attention blocks with every parameter in play.
        let blocks =
            |name: &str, f: &dyn Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<Objective>| -> Result<Check> {
                let mut rng = ChaCha8Rng::seed_from_u64(0xB10C);
                let mut store = ParamStore::new();
                let obj = f(&mut store, &mut rng)?;
                randomize(&mut store, 0.5, &mut rng);
                let rep = grad_check(&mut store, EPS, obj)?;
                let mut c = Check::new(name, TOL);
                c.see(rep.max_rel_error);
                c.cases = rep.checked;
                Ok(c)
            };
        checks.push(blocks("deform_attn (attend)", &|store, rng| {
            let shape = DeformAttnShape { c_query: 3, c_value: 2, embed_dim: 4, n_heads: 2, n_refs: 2, n_points: 2 };
            let a = DeformAttn::new(store, "a", shape, rng)?;
            let (maps, q) = (rand_tensor(&[3, 4, 2], 1.0, rng), rand_tensor(&[3, 3], 1.0, rng));
            let base = rand_tensor(&[3, 2, 2], 1.0, rng).map(|v| 1.3 + v);
            Ok(Box::new(move |g: &mut Graph<f64>, p: &[Var]| {
                let m = g.constant(maps.clone());
                let v = a.project_values(g, p, &[m])?;
                let q = g.constant(q.clone());
                let out = a.attend(g, p, q, &v, &[0, 0], &base, Some(&[true, true, false, true, true, true]))?;
                probe(g, out.out, 17)
            }))
        })?);
        checks.push(blocks("cvha", &|store, rng| {
            let m = Cvha::new(store, "c", 2, 1, 1, 1, rng)?;
            let planes = [
                rand_tensor(&[2, 3, 2], 1.0, rng),
                rand_tensor(&[2, 2, 2], 1.0, rng),
                rand_tensor(&[3, 2, 2], 1.0, rng),
            ];
            Ok(Box::new(move |g: &mut Graph<f64>, p: &[Var]| {
                let x = TpvVars::from_planes(planes.clone().map(|t| g.constant(t)));
                let y = cvha(g, p, &m, x)?;
                let parts = y.planes().map(|v| probe(g, v, 18));
                g.add_all(&parts.into_iter().collect::<Result<Vec<_>>>()?)
            }))
        })?);
        checks.push(blocks("tcvha_step", &|store, rng| {
            let m = Tcvha::new(store, "t", 2, 1, 1, 1, rng)?;
            let mk = |rng: &mut ChaCha8Rng| {
                [
                    rand_tensor(&[2, 3, 2], 1.0, rng),
                    rand_tensor(&[2, 2, 2], 1.0, rng),
                    rand_tensor(&[3, 2, 2], 1.0, rng),
                ]
            };
            let (a, b) = (mk(rng), mk(rng));
            Ok(Box::new(move |g: &mut Graph<f64>, p: &[Var]| {
                let prev = TpvVars::from_planes(a.clone().map(|t| g.constant(t)));
                let cur = TpvVars::from_planes(b.clone().map(|t| g.constant(t)));
                let y = tcvha_step(g, p, &m, prev, cur)?;
                let parts = y.planes().map(|v| probe(g, v, 19));
                g.add_all(&parts.into_iter().collect::<Result<Vec<_>>>()?)
            }))
        })?);

        // End to end: one camera, one history frame, toy grid.
        for task in [Task::Sop, Task::LidarSeg] {
            let mut rng = ChaCha8Rng::seed_from_u64(0xE2E);
            let mut model = toy_model(Variant::Unified)?;
            randomize(&mut model.store, 0.5, &mut rng);
            let frames = toy_frames(&mut rng)?;
            let pts: Vec<Vector3<f64>> = (0..5)
                .map(|_| Vector3::new(rng.gen_range(-3.9..3.9), rng.gen_range(-3.9..3.9), rng.gen_range(-0.9..2.9)))
                .collect();
            let point_gt: Vec<usize> = (0..5).map(|_| rng.gen_range(0..8)).collect();
            let voxel_gt: Vec<usize> = (0..32).map(|_| rng.gen_range(0..9)).collect();
            let mut store = std::mem::replace(&mut model.store, ParamStore::new());
            let rep = grad_check(&mut store, EPS, |g, p| {
                let pred = model.forward(g, p, &frames, 1, &pts)?;
                Ok(task_loss(g, pred.voxels, &voxel_gt, pred.points, &point_gt, task, LossWeights::default())?.total)
            })?;
            let mut c = Check::new(format!("end-to-end loss ({task:?}, N=1, M=1)"), TOL);
            c.see(rep.max_rel_error);
            c.cases = rep.checked;
            checks.push(c);
        }
        Ok(checks)
    })
}
