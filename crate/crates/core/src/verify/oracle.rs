//! Dense reference implementations written with plain loops and arrays.
//!
//! None of these call into the kernels they check: sampling uses a tent
//! kernel summed over every node, rigid motion uses explicit 3x3 algebra and
//! projection is scalar pinhole arithmetic.

use crate::attention::DeformAttn;
use crate::geometry::{CameraModel, EgoGrid, Plane, RigidTransform};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tensor};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub fn mat3(t: &RigidTransform) -> (Mat3, Vec3) {
    let r = &t.rotation;
    let m = [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]];
    (m, [t.translation.x, t.translation.y, t.translation.z])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Virtual view in expanded form: `R = Rc' Rp' Rt`, `t = Rc' (Rp' (tt - tp) - tc)`
/// with `'` the transpose, `c` the camera mount, `p` the past pose and `t`
/// the current pose.
pub fn vvt_expanded(camera: &RigidTransform, past: &RigidTransform, current: &RigidTransform) -> (Mat3, Vec3) {
    let (rc, tc) = mat3(camera);
    let (rp, tp) = mat3(past);
    let (rt, tt) = mat3(current);
    let (rct, rpt) = (transpose(&rc), transpose(&rp));
    let rot = mat_mul(&rct, &mat_mul(&rpt, &rt));
    let trans = mat_vec(&rct, &sub(&mat_vec(&rpt, &sub(&tt, &tp)), &tc));
    (rot, trans)
}

pub type Mat4 = [[f64; 4]; 4];

pub fn homogeneous(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of a rigid 4x4 matrix, `[R' | -R' t]`.
pub fn rigid_inverse4(m: &Mat4) -> Mat4 {
    let r = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
    let rt = transpose(&r);
    let t = mat_vec(&rt, &[m[0][3], m[1][3], m[2][3]]);
    homogeneous(&rt, &[-t[0], -t[1], -t[2]])
}

pub fn apply(r: &Mat3, t: &Vec3, p: &Vec3) -> Vec3 {
    let q = mat_vec(r, p);
    [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
}

/// Pixel of a camera-frame point and whether it lands in the image beyond
/// the near plane.
pub fn pinhole(cam: &CameraModel, pc: &Vec3, z_near: f64) -> Option<([f64; 2], bool)> {
    if !(pc[2] > z_near) {
        return None;
    }
    let k = &cam.intrinsics;
    let (x, y) = (pc[0] / pc[2], pc[1] / pc[2]);
    let u = k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)];
    let v = k[(1, 1)] * y + k[(1, 2)];
    let inside = u >= 0.0 && u < cam.width() as f64 && v >= 0.0 && v < cam.height() as f64;
    Some(([u, v], inside))
}

/// Row-major `[rows, cols, ch]` feature map.
#[derive(Clone, Debug)]
pub struct DenseMap {
    pub rows: usize,
    pub cols: usize,
    pub ch: usize,
    pub data: Vec<f64>,
}

impl DenseMap {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        DenseMap { rows: s[0], cols: s[1], ch: s[2], data: t.data().to_vec() }
    }

    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.cols + c) * self.ch;
        &self.data[o..o + self.ch]
    }

    /// Tent-kernel interpolation summed over all nodes; equals bilinear
    /// sampling with zero padding outside the grid.
    pub fn sample(&self, row: f64, col: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.ch];
        for r in 0..self.rows {
            let wr = (1.0 - (row - r as f64).abs()).max(0.0);
            if wr == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                let wc = (1.0 - (col - c as f64).abs()).max(0.0);
                if wc == 0.0 {
                    continue;
                }
                for (o, &v) in out.iter_mut().zip(self.at(r, c)) {
                    *o += wr * wc * v;
                }
            }
        }
        out
    }

    /// Applies a linear layer to every node.
    pub fn project(&self, store: &ParamStore<f64>, l: &Linear) -> DenseMap {
        let mut data = Vec::with_capacity(self.rows * self.cols * l.fan_out);
        for r in 0..self.rows {
            for c in 0..self.cols {
                data.extend(linear(store, l, self.at(r, c)));
            }
        }
        DenseMap { rows: self.rows, cols: self.cols, ch: l.fan_out, data }
    }
}

/// `x W + b` for one input vector.
pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight).data();
    let b = store.value(l.bias).data();
    assert_eq!(x.len(), l.fan_in, "linear oracle input width");
    (0..l.fan_out).map(|j| b[j] + (0..l.fan_in).map(|i| x[i] * w[i * l.fan_out + j]).sum::<f64>()).collect()
}

/// Softmax over the entries flagged valid; the others get zero. A row with
/// no valid entry is all zeros.
pub fn masked_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let m = logits.iter().zip(valid).filter(|(_, &v)| v).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().zip(valid).map(|(&l, &v)| if v { (l - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Output of one deformable-attention query.
#[derive(Clone, Debug)]
pub struct AttnOut {
    pub out: Vec<f64>,
    /// `[heads, slots]`.
    pub weights: Vec<f64>,
}

/// One query of deformable attention.
///
/// `values` are already projected maps, `map_ids[r]` picks the map of
/// reference `r`, `base[r]` is its `(row, col)` and `valid[r]` its mask.
pub fn deform_query(
    store: &ParamStore<f64>,
    a: &DeformAttn,
    query: &[f64],
    values: &[DenseMap],
    map_ids: &[usize],
    base: &[[f64; 2]],
    valid: &[bool],
) -> AttnOut {
    let s = a.shape;
    let (heads, refs, pts) = (s.n_heads, s.n_refs, s.n_points);
    let slots = refs * pts;
    let ch = s.embed_dim / heads;
    let off = linear(store, &a.offset, query);
    let logits = linear(store, &a.weight, query);
    let mut weights = Vec::with_capacity(heads * slots);
    let mut agg = vec![0.0; s.embed_dim];
    for h in 0..heads {
        let slot_valid: Vec<bool> = (0..slots).map(|k| valid[k / pts]).collect();
        let w = masked_softmax(&logits[h * slots..(h + 1) * slots], &slot_valid);
        for r in 0..refs {
            if !valid[r] {
                continue;
            }
            for p in 0..pts {
                let k = r * pts + p;
                let o = (h * slots + k) * 2;
                let v = values[map_ids[r]].sample(base[r][0] + off[o], base[r][1] + off[o + 1]);
                for c in 0..ch {
                    agg[h * ch + c] += w[k] * v[h * ch + c];
                }
            }
        }
        weights.extend(w);
    }
    AttnOut { out: linear(store, &a.output, &agg), weights }
}

/// Metric center of cell `i` along an axis with bounds `b` and `n` cells.
fn center(b: [f64; 2], n: usize, i: usize) -> f64 {
    b[0] + (i as f64 + 0.5) * (b[1] - b[0]) / n as f64
}

/// Pillar points of plane cell `(a, b)` as `(x, y, z)` ego meters.
pub fn pillar(plane: Plane, grid: &EgoGrid, a: usize, b: usize, n_ref: usize) -> Vec<Vec3> {
    let [h, w, d] = grid.dims;
    let [bx, by, bz] = grid.bounds;
    let depth = |bounds: [f64; 2], k: usize| bounds[0] + (k as f64 + 0.5) * (bounds[1] - bounds[0]) / n_ref as f64;
    (0..n_ref)
        .map(|k| match plane {
            Plane::Hw => [center(bx, h, a), center(by, w, b), depth(bz, k)],
            Plane::Dh => [center(bx, h, b), depth(by, k), center(bz, d, a)],
            Plane::Wd => [depth(bx, k), center(by, w, a), center(bz, d, b)],
        })
        .collect()
}

/// Spatial cross-attention of one plane, from scratch.
///
/// `queries` is the flat `[rows * cols, C]` plane, `pyramids[i]` camera
/// `i`'s raw levels (finest first) and `poses = (past, current)` the ego
/// poses of the capture and of the query frame.
#[allow(clippy::too_many_arguments)]
pub fn sca_plane(
    store: &ParamStore<f64>,
    a: &DeformAttn,
    plane: Plane,
    grid: &EgoGrid,
    n_ref: usize,
    queries: &[f64],
    cameras: &[CameraModel],
    pyramids: &[Vec<DenseMap>],
    poses: (&RigidTransform, &RigidTransform),
    z_near: f64,
) -> Vec<f64> {
    let [h, w, d] = grid.dims;
    let (rows, cols) = match plane {
        Plane::Hw => (h, w),
        Plane::Dh => (d, h),
        Plane::Wd => (w, d),
    };
    let c = a.shape.embed_dim;
    let projected: Vec<Vec<DenseMap>> =
        pyramids.iter().map(|levels| levels.iter().map(|m| m.project(store, &a.value)).collect()).collect();
    let n_levels = pyramids[0].len();
    let map_ids: Vec<usize> = (0..n_levels * n_ref).map(|s| s / n_ref).collect();
    let mut out = Vec::with_capacity(rows * cols * c);
    for ra in 0..rows {
        for cb in 0..cols {
            let cell = ra * cols + cb;
            let q = &queries[cell * c..(cell + 1) * c];
            let pts = pillar(plane, grid, ra, cb, n_ref);
            let mut acc = vec![0.0; c];
            let mut hits = 0usize;
            for (i, cam) in cameras.iter().enumerate() {
                let (rv, tv) = vvt_expanded(&cam.extrinsic, poses.0, poses.1);
                let px: Vec<Option<[f64; 2]>> = pts
                    .iter()
                    .map(|p| match pinhole(cam, &apply(&rv, &tv, p), z_near) {
                        Some((uv, true)) => Some(uv),
                        _ => None,
                    })
                    .collect();
                if px.iter().all(Option::is_none) {
                    continue;
                }
                hits += 1;
                let mut base = Vec::new();
                let mut valid = Vec::new();
                for m in &pyramids[i] {
                    let (sr, sc) = (m.rows as f64 / cam.height() as f64, m.cols as f64 / cam.width() as f64);
                    for uv in &px {
                        match uv {
                            Some([u, v]) => {
                                base.push([v * sr - 0.5, u * sc - 0.5]);
                                valid.push(true);
                            }
                            None => {
                                base.push([f64::NAN, f64::NAN]);
                                valid.push(false);
                            }
                        }
                    }
                }
                let r = deform_query(store, a, q, &projected[i], &map_ids, &base, &valid);
                for (x, y) in acc.iter_mut().zip(r.out) {
                    *x += y;
                }
            }
            if hits == 0 {
                out.extend_from_slice(q);
            } else {
                out.extend(acc.into_iter().map(|v| v / hits as f64));
            }
        }
    }
    out
}

/// `n` evenly spaced positions over `[0, len - 1]`; one sample sits in the middle.
pub fn spaced(len: usize, n: usize) -> Vec<f64> {
    let top = (len - 1) as f64;
    if n == 1 {
        return vec![top / 2.0];
    }
    (0..n).map(|k| top * k as f64 / (n - 1) as f64).collect()
}

/// Position of the 3D index point `(h, w, d)` on `plane`.
pub fn on_plane(plane: Plane, hwd: [f64; 3]) -> [f64; 2] {
    let [h, w, d] = hwd;
    match plane {
        Plane::Hw => [h, w],
        Plane::Dh => [d, h],
        Plane::Wd => [w, d],
    }
}

/// The two planes a cell reads besides its own, in attention slot order.
pub fn partner_planes(plane: Plane) -> [Plane; 2] {
    match plane {
        Plane::Hw => [Plane::Dh, Plane::Wd],
        Plane::Dh => [Plane::Wd, Plane::Hw],
        Plane::Wd => [Plane::Hw, Plane::Dh],
    }
}

/// Index points on the line through cell `(a, b)` orthogonal to `plane`.
pub fn cell_line(plane: Plane, dims: [usize; 3], a: usize, b: usize, n: usize) -> Vec<[f64; 3]> {
    let (af, bf) = (a as f64, b as f64);
    match plane {
        Plane::Hw => spaced(dims[2], n).into_iter().map(|k| [af, bf, k]).collect(),
        Plane::Dh => spaced(dims[1], n).into_iter().map(|k| [bf, k, af]).collect(),
        Plane::Wd => spaced(dims[0], n).into_iter().map(|k| [k, af, bf]).collect(),
    }
}

fn plane_shape(plane: Plane, dims: [usize; 3]) -> (usize, usize) {
    let [h, w, d] = dims;
    match plane {
        Plane::Hw => (h, w),
        Plane::Dh => (d, h),
        Plane::Wd => (w, d),
    }
}

/// Three planes in `Plane::ALL` order.
pub type Planes = [DenseMap; 3];

/// Cross-view hybrid attention from scratch.
pub fn cvha(store: &ParamStore<f64>, a: &DeformAttn, n_cross: usize, x: &Planes, dims: [usize; 3]) -> [Vec<f64>; 3] {
    let values: Vec<DenseMap> = x.iter().map(|m| m.project(store, &a.value)).collect();
    Plane::ALL.map(|p| {
        let (rows, cols) = plane_shape(p, dims);
        let [o1, o2] = partner_planes(p);
        let mut ids = vec![p.index()];
        ids.extend(std::iter::repeat_n(o1.index(), n_cross));
        ids.extend(std::iter::repeat_n(o2.index(), n_cross));
        let mut out = Vec::new();
        for ra in 0..rows {
            for cb in 0..cols {
                let line = cell_line(p, dims, ra, cb, n_cross);
                let mut base = vec![[ra as f64, cb as f64]];
                base.extend(line.iter().map(|&q| on_plane(o1, q)));
                base.extend(line.iter().map(|&q| on_plane(o2, q)));
                let valid = vec![true; base.len()];
                out.extend(deform_query(store, a, x[p.index()].at(ra, cb), &values, &ids, &base, &valid).out);
            }
        }
        out
    })
}

/// One temporal fusion step from scratch.
pub fn tcvha_step(
    store: &ParamStore<f64>,
    fuse: &Linear,
    a: &DeformAttn,
    n_cross: usize,
    prev: &Planes,
    cur: &Planes,
    dims: [usize; 3],
) -> [Vec<f64>; 3] {
    let values: Vec<DenseMap> = prev.iter().chain(cur.iter()).map(|m| m.project(store, &a.value)).collect();
    Plane::ALL.map(|p| {
        let (rows, cols) = plane_shape(p, dims);
        let [o1, o2] = partner_planes(p);
        let mut ids = vec![p.index(), 3 + p.index()];
        ids.extend(std::iter::repeat_n(3 + o1.index(), n_cross));
        ids.extend(std::iter::repeat_n(3 + o2.index(), n_cross));
        let mut out = Vec::new();
        for ra in 0..rows {
            for cb in 0..cols {
                let mut cat = prev[p.index()].at(ra, cb).to_vec();
                cat.extend_from_slice(cur[p.index()].at(ra, cb));
                let q = linear(store, fuse, &cat);
                let line = cell_line(p, dims, ra, cb, n_cross);
                let here = [ra as f64, cb as f64];
                let mut base = vec![here, here];
                base.extend(line.iter().map(|&q| on_plane(o1, q)));
                base.extend(line.iter().map(|&q| on_plane(o2, q)));
                let valid = vec![true; base.len()];
                out.extend(deform_query(store, a, &q, &values, &ids, &base, &valid).out);
            }
        }
        out
    })
}

/// Jaccard loss of an error set `s` against ground-truth set `gt`:
/// `1 - |gt \ s| / |gt ∪ s|`.
pub fn jaccard_loss(gt: &[bool], s: &[bool]) -> f64 {
    let kept = gt.iter().zip(s).filter(|(&g, &e)| g && !e).count() as f64;
    let union = gt.iter().zip(s).filter(|(&g, &e)| g || e).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        1.0 - kept / union
    }
}

/// Lovász extension of the Jaccard loss at errors `e` as the integral of
/// the loss of the level sets `{i : e_i >= t}` over `t` in `[0, 1]`.
pub fn lovasz_extension(gt: &[bool], e: &[f64]) -> f64 {
    let mut levels: Vec<f64> = e.to_vec();
    levels.sort_by(|a, b| b.partial_cmp(a).expect("finite errors"));
    levels.dedup();
    let mut total = 0.0;
    for (j, &t) in levels.iter().enumerate() {
        let below = levels.get(j + 1).copied().unwrap_or(0.0);
        let set: Vec<bool> = e.iter().map(|&v| v >= t).collect();
        total += (t - below) * jaccard_loss(gt, &set);
    }
    total
}

/// Mean Lovász-softmax over the classes present in `targets`.
pub fn lovasz_softmax(probs: &[f64], k: usize, targets: &[usize]) -> f64 {
    let present: Vec<usize> = (0..k).filter(|c| targets.contains(c)).collect();
    if present.is_empty() {
        return 0.0;
    }
    let total: f64 = present
        .iter()
        .map(|&c| {
            let gt: Vec<bool> = targets.iter().map(|&t| t == c).collect();
            let e: Vec<f64> = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| if t == c { 1.0 - probs[i * k + c] } else { probs[i * k + c] })
                .collect();
            lovasz_extension(&gt, &e)
        })
        .sum();
    total / present.len() as f64
}

/// Mean `-ln(softmax(x)[target])` evaluated without any shift.
pub fn cross_entropy(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        })
        .sum();
    total / targets.len() as f64
}

/// Majority label per voxel by counting into a map keyed by cell index;
/// ties go to the smaller class, empty voxels get `empty`.
pub fn count_labels(points: &[(Vec3, u8)], grid: &EgoGrid, n_classes: usize, empty: u8) -> Vec<u8> {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<[usize; 3], Vec<u32>> = BTreeMap::new();
    'points: for (p, class) in points {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let [lo, hi] = grid.bounds[a];
            if p[a] < lo || p[a] >= hi {
                continue 'points;
            }
            idx[a] = ((p[a] - lo) / ((hi - lo) / grid.dims[a] as f64)) as usize;
        }
        counts.entry(idx).or_insert_with(|| vec![0; n_classes])[*class as usize] += 1;
    }
    let [h, w, d] = grid.dims;
    let mut out = vec![empty; h * w * d];
    for (idx, c) in counts {
        let mut best = 0;
        for k in 1..n_classes {
            if c[k] > c[best] {
                best = k;
            }
        }
        out[(idx[0] * w + idx[1]) * d + idx[2]] = best as u8;
    }
    out
}

/// Per-class IoU by intersecting cell sets (bitmasks, so at most 64
/// cells), with `None` for classes absent from both labelings, and the mean
/// over the defined classes of `included`.
pub fn set_iou(
    pred: &[usize],
    gt: &[usize],
    keep: &[bool],
    k: usize,
    included: &[usize],
) -> (Vec<Option<f64>>, Option<f64>) {
    assert!(pred.len() <= 64, "set_iou oracle handles at most 64 cells");
    let set = |labels: &[usize], c: usize| -> u64 {
        labels.iter().enumerate().filter(|&(i, &l)| keep[i] && l == c).fold(0u64, |m, (i, _)| m | 1 << i)
    };
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let (p, g) = (set(pred, c), set(gt, c));
            let union = (p | g).count_ones();
            (union > 0).then(|| (p & g).count_ones() as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = included.iter().filter_map(|&c| per[c]).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}
