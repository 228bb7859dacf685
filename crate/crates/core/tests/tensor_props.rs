//! Properties of the tensor engine: normalization, bilinear sampling,
//! determinism and tape gradients against central differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2tpv::tensor::{grad_check, Graph, ParamStore, Tensor, Var};
use s2tpv::Result;

const SEEDS: u64 = 24;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// A coordinate in `[lo, hi)` kept at least 0.1 away from integers, where
/// bilinear sampling has kinks.
fn off_node(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.gen_range(lo..hi) as f64 + rng.gen_range(0.1..0.9)
}

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        proptest::collection::vec(-50.0f64..50.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

/// Checks `sum(op(inputs) * probe)` with fixed random probe weights.
fn check_op(name: &str, inputs: Vec<Tensor>, seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut store: ParamStore = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.register(format!("in{i}"), t).unwrap();
    }
    let report = grad_check(&mut store, 1e-6, |g, p| {
        let y = op(g, p)?;
        let shape = g.shape(y).to_vec();
        let probe = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xB0B), &shape, 1.0);
        let w = g.constant(probe);
        let yw = g.mul(y, w)?;
        Ok(g.sum(yw))
    })
    .unwrap();
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_rel_error < TOL,
        "{name} seed {seed}: rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_and_linear_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, m) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
        let mut r = |s: &[usize]| rand_tensor(&mut rng, s, 2.0);
        check_op("affine", vec![r(&[n, k]), r(&[k, m]), r(&[m])], seed, |g, p| g.affine(p[0], p[1], Some(p[2])));
        check_op("affine without bias", vec![r(&[n, k]), r(&[k, m])], seed, |g, p| g.affine(p[0], p[1], None));
        check_op("add, sub, mul", vec![r(&[n, k]), r(&[n, k])], seed, |g, p| {
            let a = g.add(p[0], p[1])?;
            let s = g.sub(p[0], p[1])?;
            g.mul(a, s)
        });
        check_op("scale, mean, add_all", vec![r(&[n, k])], seed, |g, p| {
            let a = g.scale(p[0], -1.3);
            let mean = g.mean(p[0]);
            let sq = g.mul(p[0], p[0])?;
            let s = g.sum(sq);
            let t = g.add_all(&[mean, s])?;
            let t = g.reshape(t, &[1, 1])?;
            let a = g.reshape(a, &[n * k, 1])?;
            let b = g.affine(a, t, None)?;
            Ok(b)
        });
        check_op("softplus", vec![r(&[n, k])], seed, |g, p| Ok(g.softplus(p[0])));
        check_op("gelu", vec![r(&[n, k])], seed, |g, p| Ok(g.gelu(p[0])));
        check_op("layer_norm", vec![r(&[n, k + 1]), r(&[k + 1]), r(&[k + 1])], seed, |g, p| {
            g.layer_norm(p[0], p[1], p[2], 1e-5)
        });
        check_op("concat_last, take_cols", vec![r(&[n, k]), r(&[n, m])], seed, |g, p| {
            let c = g.concat_last(p[0], p[1])?;
            let c = g.mul(c, c)?;
            g.take_cols(c, k + m - 1)
        });
    }
}

#[test]
fn normalizing_and_indexing_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4));
        let axis = rng.gen_range(0..3);
        let x = rand_tensor(&mut rng, &[a, b, c], 3.0);
        check_op("softmax", vec![x], seed, move |g, p| g.softmax(p[0], axis));

        let x = rand_tensor(&mut rng, &[a, b], 3.0);
        // at least one unmasked entry per row
        let mask: Vec<bool> = (0..a * b).map(|i| i % b == 0 || rng.gen_bool(0.5)).collect();
        check_op("masked_softmax", vec![x], seed, move |g, p| g.masked_softmax(p[0], &mask));

        let rows = rng.gen_range(2..6);
        let idx: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..rows)).collect();
        let x = rand_tensor(&mut rng, &[rows, c], 1.0);
        check_op("gather_rows", vec![x], seed, move |g, p| g.gather_rows(p[0], &idx));

        let targets: Vec<usize> = (0..rows).filter(|_| rng.gen_bool(0.6)).collect();
        let others: Vec<usize> = (0..rows).filter(|_| rng.gen_bool(0.6)).collect();
        let ins = vec![
            rand_tensor(&mut rng, &[targets.len(), c], 1.0),
            rand_tensor(&mut rng, &[others.len(), c], 1.0),
            rand_tensor(&mut rng, &[rows, c], 1.0),
        ];
        check_op("hit_mean", ins, seed, move |g, p| {
            let mut parts = Vec::new();
            if !targets.is_empty() {
                parts.push((p[0], targets.clone()));
            }
            if !others.is_empty() {
                parts.push((p[1], others.clone()));
            }
            g.hit_mean(&parts, p[2])
        });
    }
}

#[test]
fn sampling_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w, c) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..3));
        let n = rng.gen_range(1..5);
        let plane = rand_tensor(&mut rng, &[h, w, c], 1.0);
        // some points straddle the border, where outside neighbours count zero
        let pts: Vec<f64> =
            (0..n).flat_map(|_| [off_node(&mut rng, -1, h as i32), off_node(&mut rng, -1, w as i32)]).collect();
        let pts = Tensor::new(&[n, 2], pts).unwrap();
        check_op("grid_sample2d", vec![plane, pts], seed, |g, p| g.grid_sample2d(p[0], p[1]));

        let (d, cc) = (rng.gen_range(1..4), rng.gen_range(1..3));
        let ins = vec![
            rand_tensor(&mut rng, &[h, w, cc], 1.0),
            rand_tensor(&mut rng, &[d, h, cc], 1.0),
            rand_tensor(&mut rng, &[w, d, cc], 1.0),
        ];
        check_op("tpv_broadcast_sum", ins, seed, |g, p| g.tpv_broadcast_sum(p[0], p[1], p[2]));

        // two heads of one channel each over two maps
        let (heads, slots) = (2, 3);
        let maps = [rand_tensor(&mut rng, &[h, w, 2], 1.0), rand_tensor(&mut rng, &[w, h, 2], 1.0)];
        let map_ids = vec![0, 1, 0];
        let base_rows: Vec<f64> = (0..n * slots)
            .flat_map(|i| {
                let (rows, cols) = if map_ids[i % slots] == 0 { (h, w) } else { (w, h) };
                [off_node(&mut rng, 0, rows as i32), off_node(&mut rng, 0, cols as i32)]
            })
            .collect();
        let base = Tensor::new(&[n, slots, 2], base_rows).unwrap();
        // integer offsets keep the sampled points off nodes
        let offsets: Vec<f64> = (0..n * heads * slots * 2).map(|_| rng.gen_range(-1..=1) as f64).collect();
        let ins = vec![
            maps[0].clone(),
            maps[1].clone(),
            Tensor::new(&[n, heads, slots, 2], offsets).unwrap(),
            rand_tensor(&mut rng, &[n, heads, slots], 1.0),
        ];
        check_op("deform_gather", ins, seed, move |g, p| g.deform_gather(&[p[0], p[1]], &map_ids, &base, p[2], p[3]));
    }
}

fn sample(plane: &Tensor, row: f64, col: f64) -> Vec<f64> {
    let mut g: Graph = Graph::new();
    let p = g.constant(plane.clone());
    let q = g.constant(Tensor::new(&[1, 2], vec![row, col]).unwrap());
    let s = g.grid_sample2d(p, q).unwrap();
    g.value(s).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_sums_to_one(x in tensor_strategy(3), axis_pick in 0usize..3) {
        let axis = axis_pick % x.rank();
        let shape = x.shape().to_vec();
        let mut g: Graph = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, axis).unwrap();
        let y = g.value(s);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|k| y.data()[(o * shape[axis] + k) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6, "sum {}", total);
            }
        }
    }

    #[test]
    fn grid_sample_is_exact_on_nodes_and_linear_between(
        h in 2usize..6, w in 2usize..6, c in 1usize..4, seed in any::<u64>(), t in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = rand_tensor(&mut rng, &[h, w, c], 5.0);
        let (i, j) = (rng.gen_range(0..h - 1), rng.gen_range(0..w - 1));
        for (r, q) in [(i, j), (i + 1, j), (i, j + 1)] {
            let node = &plane.data()[(r * w + q) * c..(r * w + q + 1) * c];
            prop_assert_eq!(sample(&plane, r as f64, q as f64), node.to_vec());
        }
        let (a, b) = (sample(&plane, i as f64, j as f64), sample(&plane, i as f64, (j + 1) as f64));
        let mid = sample(&plane, i as f64, j as f64 + 0.5);
        let along = sample(&plane, i as f64, j as f64 + t);
        for k in 0..c {
            prop_assert!((mid[k] - 0.5 * (a[k] + b[k])).abs() < 1e-12);
            prop_assert!((along[k] - ((1.0 - t) * a[k] + t * b[k])).abs() < 1e-12);
        }
        let down = sample(&plane, (i + 1) as f64, j as f64);
        let mid = sample(&plane, i as f64 + 0.5, j as f64);
        for k in 0..c {
            prop_assert!((mid[k] - 0.5 * (a[k] + down[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_passes_are_bit_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g: Graph = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[3, 4], 2.0));
            let w = g.constant(rand_tensor(&mut rng, &[4, 5], 1.0));
            let gamma = g.constant(rand_tensor(&mut rng, &[5], 1.0));
            let beta = g.constant(rand_tensor(&mut rng, &[5], 1.0));
            let y = g.affine(x, w, None).unwrap();
            let y = g.layer_norm(y, gamma, beta, 1e-5).unwrap();
            let y = g.gelu(y);
            let y = g.softmax(y, 1).unwrap();
            let y = g.softplus(y);
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
