//! Tri-perspective view latent: three orthogonal feature planes.
//!
//! Plane layouts: HW is `[H, W, C]`, DH is `[D, H, C]`, WD is `[W, D, C]`.
//! A voxel `(h, w, d)` reads HW at `(h, w)`, DH at `(d, h)` and WD at `(w, d)`.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{snap_to_node, Axis, EgoGrid, Plane};
use crate::tensor::{sample_bilinear, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Standard deviation of the query initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

/// Concrete plane values.
#[derive(Clone, Debug, PartialEq)]
pub struct TpvState<T: Real = f64> {
    pub hw: Tensor<T>,
    pub dh: Tensor<T>,
    pub wd: Tensor<T>,
}

fn plane_shape(dims: [usize; 3], plane: Plane, c: usize) -> [usize; 3] {
    let [h, w, d] = dims;
    match plane {
        Plane::Hw => [h, w, c],
        Plane::Dh => [d, h, c],
        Plane::Wd => [w, d, c],
    }
}

impl<T: Real> TpvState<T> {
    pub fn new(hw: Tensor<T>, dh: Tensor<T>, wd: Tensor<T>) -> Result<Self> {
        let s = TpvState { hw, dh, wd };
        s.check()?;
        Ok(s)
    }

    pub fn zeros(dims: [usize; 3], c: usize) -> Self {
        TpvState {
            hw: Tensor::zeros(&plane_shape(dims, Plane::Hw, c)),
            dh: Tensor::zeros(&plane_shape(dims, Plane::Dh, c)),
            wd: Tensor::zeros(&plane_shape(dims, Plane::Wd, c)),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.hw.rank() != 3 {
            return Err(Error::dim(format!("tpv: hw plane must be rank 3, got {:?}", self.hw.shape())));
        }
        let dims = [self.hw.shape()[0], self.hw.shape()[1], self.dh.shape().first().copied().unwrap_or(0)];
        let c = self.hw.shape()[2];
        for p in Plane::ALL {
            let want = plane_shape(dims, p, c);
            if self.plane(p).shape() != want {
                return Err(Error::dim(format!(
                    "tpv: {} plane {:?}, expected {want:?}",
                    p.name(),
                    self.plane(p).shape()
                )));
            }
        }
        Ok(())
    }

    /// `[H, W, D]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.hw.shape()[0], self.hw.shape()[1], self.dh.shape()[0]]
    }

    pub fn embed_dim(&self) -> usize {
        self.hw.shape()[2]
    }

    pub fn plane(&self, p: Plane) -> &Tensor<T> {
        match p {
            Plane::Hw => &self.hw,
            Plane::Dh => &self.dh,
            Plane::Wd => &self.wd,
        }
    }

    pub fn plane_mut(&mut self, p: Plane) -> &mut Tensor<T> {
        match p {
            Plane::Hw => &mut self.hw,
            Plane::Dh => &mut self.dh,
            Plane::Wd => &mut self.wd,
        }
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        let f = |x: &Tensor<T>, y: &Tensor<T>| x.zip_map(y, |u, v| a * u + b * v);
        Ok(TpvState { hw: f(&self.hw, &other.hw)?, dh: f(&self.dh, &other.dh)?, wd: f(&self.wd, &other.wd)? })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        Plane::ALL.iter().map(|&p| self.plane(p).max_abs_diff(other.plane(p))).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.hw.is_finite() && self.dh.is_finite() && self.wd.is_finite()
    }
}

/// Plane leaves on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TpvVars {
    pub hw: Var,
    pub dh: Var,
    pub wd: Var,
}

impl TpvVars {
    pub fn plane(&self, p: Plane) -> Var {
        match p {
            Plane::Hw => self.hw,
            Plane::Dh => self.dh,
            Plane::Wd => self.wd,
        }
    }

    pub fn from_planes(planes: [Var; 3]) -> Self {
        TpvVars { hw: planes[0], dh: planes[1], wd: planes[2] }
    }

    pub fn planes(&self) -> [Var; 3] {
        [self.hw, self.dh, self.wd]
    }

    pub fn constant<T: Real>(g: &mut Graph<T>, s: &TpvState<T>) -> Self {
        TpvVars { hw: g.constant(s.hw.clone()), dh: g.constant(s.dh.clone()), wd: g.constant(s.wd.clone()) }
    }

    pub fn value<T: Real>(&self, g: &Graph<T>) -> TpvState<T> {
        TpvState { hw: g.value(self.hw).clone(), dh: g.value(self.dh).clone(), wd: g.value(self.wd).clone() }
    }
}

/// Learnable plane queries with additive positional embeddings.
#[derive(Clone, Debug)]
pub struct TpvQueries {
    pub dims: [usize; 3],
    pub embed_dim: usize,
    /// Indexed by `Plane::index`.
    pub queries: [ParamId; 3],
    pub pos: [ParamId; 3],
}

/// `H*W + D*H + W*D`.
pub fn query_count(dims: [usize; 3]) -> usize {
    let [h, w, d] = dims;
    h * w + d * h + w * d
}

/// Registers `{prefix}.query.{plane}` (Gaussian, std 0.02) and
/// `{prefix}.pos.{plane}` (zeros) for all three planes.
pub fn init_queries<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dims: [usize; 3],
    c: usize,
    seed: u64,
) -> Result<TpvQueries> {
    if dims.contains(&0) || c == 0 {
        return Err(Error::Config(format!("init_queries: dims {dims:?} and C={c} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, QUERY_INIT_STD).expect("valid std");
    let mut queries = Vec::with_capacity(3);
    let mut pos = Vec::with_capacity(3);
    for p in Plane::ALL {
        let shape = plane_shape(dims, p, c);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
        queries.push(store.register(format!("{prefix}.query.{}", p.name()), Tensor::new(&shape, data)?)?);
        pos.push(store.register(format!("{prefix}.pos.{}", p.name()), Tensor::zeros(&shape))?);
    }
    Ok(TpvQueries { dims, embed_dim: c, queries: [queries[0], queries[1], queries[2]], pos: [pos[0], pos[1], pos[2]] })
}

impl TpvQueries {
    /// Query plus positional embedding for each plane, on the graph.
    pub fn vars<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<TpvVars> {
        let mut out = [Var(0); 3];
        for p in Plane::ALL {
            let i = p.index();
            out[i] = g.add(params[self.queries[i].index()], params[self.pos[i].index()])?;
        }
        Ok(TpvVars::from_planes(out))
    }
}

/// `n` evenly spaced node coordinates covering `[0, len - 1]`; a single
/// sample sits at the middle.
pub fn node_linspace(len: usize, n: usize) -> Vec<f64> {
    let top = len.saturating_sub(1) as f64;
    match n {
        0 => Vec::new(),
        1 => vec![top / 2.0],
        _ => (0..n).map(|k| top * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Reference points of one plane cell: itself plus `n_cross` points into
/// each of the two other planes (in `Plane::others` order), all as
/// continuous `(row, col)` node coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossRefs {
    pub self_point: [f64; 2],
    pub cross: [(Plane, Vec<[f64; 2]>); 2],
}

/// Cross-view reference points for `cell = (row, col)` of `plane`.
///
/// The other planes are hit along the line through the cell orthogonal to
/// `plane`: an HW cell `(h, w)` reads DH at `(d_k, h)` and WD at `(w, d_k)`.
pub fn cross_view_refs(plane: Plane, cell: (usize, usize), dims: [usize; 3], n_cross: usize) -> Result<CrossRefs> {
    let [h, w, d] = dims;
    let (a, b) = cell;
    let (rows, cols) = match plane {
        Plane::Hw => (h, w),
        Plane::Dh => (d, h),
        Plane::Wd => (w, d),
    };
    if a >= rows || b >= cols {
        return Err(Error::Range(format!("cell {cell:?} outside {} plane {rows}x{cols}", plane.name())));
    }
    let (af, bf) = (a as f64, b as f64);
    let line = node_linspace(dims[plane.normal().index()], n_cross);
    let [o1, o2] = plane.others();
    // The first other plane indexes the cell's row coordinate as its column,
    // the second indexes the cell's column coordinate as its row.
    let p1 = line.iter().map(|&k| [k, af]).collect();
    let p2 = line.iter().map(|&k| [bf, k]).collect();
    Ok(CrossRefs { self_point: [af, bf], cross: [(o1, p1), (o2, p2)] })
}

/// Reference layout of every cell of `plane`, ready for deformable sampling:
/// `[cells, 1 + 2 n_cross, 2]` with slot 0 the cell itself followed by the
/// points into `plane.others()[0]` and then `plane.others()[1]`.
pub fn cross_view_base<T: Real>(plane: Plane, dims: [usize; 3], n_cross: usize) -> Result<Tensor<T>> {
    let [h, w, d] = dims;
    let (rows, cols) = match plane {
        Plane::Hw => (h, w),
        Plane::Dh => (d, h),
        Plane::Wd => (w, d),
    };
    let slots = 1 + 2 * n_cross;
    let mut data = Vec::with_capacity(rows * cols * slots * 2);
    for a in 0..rows {
        for b in 0..cols {
            let r = cross_view_refs(plane, (a, b), dims, n_cross)?;
            data.extend(r.self_point.iter().map(|&v| T::lit(v)));
            for (_, pts) in &r.cross {
                for p in pts {
                    data.extend(p.iter().map(|&v| T::lit(v)));
                }
            }
        }
    }
    Tensor::new(&[rows * cols, slots, 2], data)
}

/// Continuous node coordinates of an ego point on each plane, in
/// `Plane::ALL` order.
pub fn plane_coords(grid: &EgoGrid, p: &Vector3<f64>) -> Result<[[f64; 2]; 3]> {
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite ego point {p:?}")));
    }
    let ih = snap_to_node(grid.to_continuous(Axis::H, p.x));
    let iw = snap_to_node(grid.to_continuous(Axis::W, p.y));
    let id = snap_to_node(grid.to_continuous(Axis::D, p.z));
    Ok([[ih, iw], [id, ih], [iw, id]])
}

/// Sum of the three plane features sampled at the projections of `xyz`.
pub fn aggregate_point<T: Real>(tpv: &TpvState<T>, grid: &EgoGrid, xyz: &Vector3<f64>) -> Result<Tensor<T>> {
    if tpv.dims() != grid.dims {
        return Err(Error::dim(format!("aggregate_point: tpv {:?} vs grid {:?}", tpv.dims(), grid.dims)));
    }
    let coords = plane_coords(grid, xyz)?;
    let c = tpv.embed_dim();
    let mut acc = vec![T::zero(); c];
    let mut buf = vec![T::zero(); c];
    for p in Plane::ALL {
        let t = tpv.plane(p);
        let [r, s] = coords[p.index()];
        sample_bilinear(t.data(), t.shape()[0], t.shape()[1], T::lit(r), T::lit(s), &mut buf);
        for (a, &b) in acc.iter_mut().zip(&buf) {
            *a = *a + b;
        }
    }
    Tensor::new(&[c], acc)
}

/// Voxel-center features `[H, W, D, C]` by separable broadcast.
pub fn aggregate_voxels<T: Real>(tpv: &TpvState<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = TpvVars::constant(&mut g, tpv);
    let out = g.tpv_broadcast_sum(v.hw, v.dh, v.wd)?;
    Ok(g.value(out).clone())
}

/// Differentiable point aggregation: `[N, C]` features for ego points.
pub fn aggregate_points_var<T: Real>(
    g: &mut Graph<T>,
    tpv: TpvVars,
    grid: &EgoGrid,
    pts: &[Vector3<f64>],
) -> Result<Var> {
    let mut coords: [Vec<T>; 3] = Default::default();
    for p in pts {
        let cc = plane_coords(grid, p)?;
        for (buf, rc) in coords.iter_mut().zip(cc) {
            buf.push(T::lit(rc[0]));
            buf.push(T::lit(rc[1]));
        }
    }
    let mut terms = Vec::with_capacity(3);
    for (p, data) in Plane::ALL.into_iter().zip(coords) {
        let q = g.constant(Tensor::new(&[pts.len(), 2], data)?);
        terms.push(g.grid_sample2d(tpv.plane(p), q)?);
    }
    g.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> EgoGrid {
        EgoGrid::new(dims, [[-2.0, 2.0], [-2.0, 2.0], [-1.0, 1.0]]).unwrap()
    }

    #[test]
    fn query_counts() {
        assert_eq!(query_count([100, 100, 8]), 11600);
        assert_eq!(query_count([4, 4, 2]), 32);
        let mut store: ParamStore<f64> = ParamStore::new();
        let q = init_queries(&mut store, "tpv", [4, 4, 2], 8, 3).unwrap();
        let n: usize = q.queries.iter().map(|&id| store.value(id).rows()).sum();
        assert_eq!(n, 32);
        assert!(q.pos.iter().all(|&id| store.value(id).data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let mut a: ParamStore<f64> = ParamStore::new();
        let mut b: ParamStore<f64> = ParamStore::new();
        let qa = init_queries(&mut a, "q", [3, 5, 2], 4, 11).unwrap();
        init_queries(&mut b, "q", [3, 5, 2], 4, 11).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.value, y.value);
        }
        let hw = a.value(qa.queries[0]);
        let std = (hw.data().iter().map(|v| v * v).sum::<f64>() / hw.numel() as f64).sqrt();
        assert!(std > 0.005 && std < 0.05, "{std}");
    }

    #[test]
    fn cross_refs_enumeration() {
        let r = cross_view_refs(Plane::Hw, (0, 0), [3, 3, 2], 2).unwrap();
        assert_eq!(r.self_point, [0.0, 0.0]);
        assert_eq!(r.cross[0], (Plane::Dh, vec![[0.0, 0.0], [1.0, 0.0]]));
        assert_eq!(r.cross[1], (Plane::Wd, vec![[0.0, 0.0], [0.0, 1.0]]));

        let r = cross_view_refs(Plane::Wd, (0, 0), [1, 1, 1], 4).unwrap();
        for (_, pts) in &r.cross {
            assert!(pts.iter().all(|p| *p == [0.0, 0.0]));
        }
        assert!(cross_view_refs(Plane::Dh, (2, 0), [4, 4, 2], 2).is_err());
    }

    #[test]
    fn cross_base_layout() {
        let b: Tensor = cross_view_base(Plane::Dh, [3, 4, 2], 2).unwrap();
        assert_eq!(b.shape(), &[6, 5, 2]);
        // cell (d=1, h=2): self, WD (w_k, 1), HW (2, w_k) with w_k in {0, 3}
        let row: Vec<f64> = b.data()[5 * 10..6 * 10].to_vec();
        assert_eq!(row, vec![1.0, 2.0, 0.0, 1.0, 3.0, 1.0, 2.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn aggregate_single_plane() {
        let g = grid([4, 4, 2]);
        let mut s: TpvState = TpvState::zeros([4, 4, 2], 3);
        assert!(aggregate_point(&s, &g, &Vector3::new(0.3, -0.7, 0.1)).unwrap().data().iter().all(|&v| v == 0.0));
        for (k, v) in [1.5, -2.0, 4.0].into_iter().enumerate() {
            s.hw.set(&[2, 1, k], v);
        }
        let out = aggregate_point(&s, &g, &g.voxel_center(2, 1, 0)).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0, 4.0]);
        assert!(aggregate_point(&s, &g, &Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn aggregate_constant_planes() {
        let dims = [2, 2, 2];
        let s: TpvState =
            TpvState::new(Tensor::ones(&[2, 2, 2]), Tensor::ones(&[2, 2, 2]), Tensor::ones(&[2, 2, 2])).unwrap();
        let v = aggregate_voxels(&s).unwrap();
        assert_eq!(v.shape(), &[2, 2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 3.0));
        assert_eq!(s.dims(), dims);
    }
}
