//! Cross-view hybrid attention over TPV planes, plain and temporal.

use rand::Rng;

use super::{DeformAttn, DeformAttnShape};
use crate::error::{Error, Result};
use crate::geometry::Plane;
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::tpv::{cross_view_base, TpvVars};

/// Self-attention across the three planes. Shared by all planes.
#[derive(Clone, Debug)]
pub struct Cvha {
    pub attn: DeformAttn,
    pub n_cross: usize,
}

impl Cvha {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        n_heads: usize,
        n_points: usize,
        n_cross: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape =
            DeformAttnShape { c_query: c, c_value: c, embed_dim: c, n_heads, n_refs: 1 + 2 * n_cross, n_points };
        Ok(Cvha { attn: DeformAttn::new(store, name, shape, rng)?, n_cross })
    }
}

/// Temporal variant: queries fuse the previous and current planes, and
/// references add the aligned history point.
#[derive(Clone, Debug)]
pub struct Tcvha {
    /// `2C -> C`, applied to `[prev | cur]`.
    pub fuse: Linear,
    pub attn: DeformAttn,
    pub n_cross: usize,
}

impl Tcvha {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        n_heads: usize,
        n_points: usize,
        n_cross: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fuse = Linear::new(store, &format!("{name}.fuse"), 2 * c, c, Init::Xavier, rng)?;
        let shape =
            DeformAttnShape { c_query: c, c_value: c, embed_dim: c, n_heads, n_refs: 2 + 2 * n_cross, n_points };
        Ok(Tcvha { fuse, attn: DeformAttn::new(store, &format!("{name}.attn"), shape, rng)?, n_cross })
    }
}

fn flatten<T: Real>(g: &mut Graph<T>, v: Var) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(v).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("plane must be rank 3, got {shape:?}")));
    }
    Ok((g.reshape(v, &[shape[0] * shape[1], shape[2]])?, shape))
}

fn tpv_dims<T: Real>(g: &Graph<T>, x: TpvVars) -> Result<[usize; 3]> {
    let (hw, dh, wd) = (g.shape(x.hw), g.shape(x.dh), g.shape(x.wd));
    if hw.len() != 3 || dh.len() != 3 || wd.len() != 3 {
        return Err(Error::Wiring("tpv planes must be rank 3".into()));
    }
    let dims = [hw[0], hw[1], dh[0]];
    let c = hw[2];
    if dh != [dims[2], dims[0], c] || wd != [dims[1], dims[2], c] {
        return Err(Error::Wiring(format!("tpv planes disagree: hw {hw:?}, dh {dh:?}, wd {wd:?}")));
    }
    Ok(dims)
}

/// Inserts a copy of the self slot in front of every cell's references.
fn with_history_slot<T: Real>(base: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, slots) = (base.shape()[0], base.shape()[1]);
    let bd = base.data();
    let mut out = Vec::with_capacity(n * (slots + 1) * 2);
    for q in 0..n {
        let row = &bd[q * slots * 2..(q + 1) * slots * 2];
        out.extend_from_slice(&row[..2]);
        out.extend_from_slice(row);
    }
    Tensor::new(&[n, slots + 1, 2], out)
}

fn cross_ids(plane: Plane, n_cross: usize, offset: usize) -> Vec<usize> {
    let [o1, o2] = plane.others();
    std::iter::repeat_n(offset + o1.index(), n_cross).chain(std::iter::repeat_n(offset + o2.index(), n_cross)).collect()
}

/// Each plane cell attends to itself and to `n_cross` points in each of the
/// other planes, all read from the same input snapshot.
pub fn cvha<T: Real>(g: &mut Graph<T>, params: &[Var], m: &Cvha, x: TpvVars) -> Result<TpvVars> {
    let dims = tpv_dims(g, x)?;
    let values = m.attn.project_values(g, params, &x.planes())?;
    let mut out = x.planes();
    for p in Plane::ALL {
        let (q, shape) = flatten(g, x.plane(p))?;
        let mut ids = vec![p.index()];
        ids.extend(cross_ids(p, m.n_cross, 0));
        let base = cross_view_base(p, dims, m.n_cross)?;
        let a = m.attn.attend(g, params, q, &values, &ids, &base, None)?;
        out[p.index()] = g.reshape(a.out, &shape)?;
    }
    Ok(TpvVars::from_planes(out))
}

/// One temporal fusion step `T'_k` from `T'_{k-1}` and `T_k`.
///
/// Value maps are the three previous planes (ids 0..3) then the three
/// current ones (ids 3..6). Slot order per cell: history point, self point,
/// cross points into the current other planes.
pub fn tcvha_step<T: Real>(
    g: &mut Graph<T>,
    params: &[Var],
    m: &Tcvha,
    prev: TpvVars,
    cur: TpvVars,
) -> Result<TpvVars> {
    let dims = tpv_dims(g, cur)?;
    if tpv_dims(g, prev)? != dims || g.shape(prev.hw) != g.shape(cur.hw) {
        return Err(Error::Wiring(format!(
            "tcvha: previous planes {:?} vs current {:?}",
            g.shape(prev.hw),
            g.shape(cur.hw)
        )));
    }
    let mut maps = prev.planes().to_vec();
    maps.extend(cur.planes());
    let values = m.attn.project_values(g, params, &maps)?;
    let mut out = cur.planes();
    for p in Plane::ALL {
        let (qp, shape) = flatten(g, prev.plane(p))?;
        let (qc, _) = flatten(g, cur.plane(p))?;
        let cat = g.concat_last(qp, qc)?;
        let q = m.fuse.forward(g, params, cat)?;
        let mut ids = vec![p.index(), 3 + p.index()];
        ids.extend(cross_ids(p, m.n_cross, 3));
        let base = with_history_slot(&cross_view_base(p, dims, m.n_cross)?)?;
        let a = m.attn.attend(g, params, q, &values, &ids, &base, None)?;
        out[p.index()] = g.reshape(a.out, &shape)?;
    }
    Ok(TpvVars::from_planes(out))
}

/// Recursive fusion over `[T_{t-M} .. T_t]`; the oldest state is fused with
/// itself to start the recursion.
pub fn temporal_fuse<T: Real>(g: &mut Graph<T>, params: &[Var], m: &Tcvha, history: &[TpvVars]) -> Result<TpvVars> {
    let (&first, rest) = history.split_first().ok_or_else(|| Error::Config("temporal_fuse: empty history".into()))?;
    let mut fused = tcvha_step(g, params, m, first, first)?;
    for &cur in rest {
        fused = tcvha_step(g, params, m, fused, cur)?;
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpv::TpvState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn history_slot_duplicates_self() {
        let b: Tensor = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(with_history_slot(&b).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_planes_stay_zero() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Cvha::new(&mut store, "cvha", 4, 2, 2, 2, &mut rng).unwrap();
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let x = TpvVars::constant(&mut g, &TpvState::zeros([4, 4, 2], 4));
        let y = cvha(&mut g, &p, &m, x).unwrap();
        assert!(y.value(&g).max_abs_diff(&TpvState::zeros([4, 4, 2], 4)) == 0.0);
    }

    #[test]
    fn empty_history_is_config_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tcvha::new(&mut store, "t", 4, 2, 1, 1, &mut rng).unwrap();
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        assert!(matches!(temporal_fuse(&mut g, &p, &m, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_states_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tcvha::new(&mut store, "t", 4, 2, 1, 1, &mut rng).unwrap();
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let a = TpvVars::constant(&mut g, &TpvState::zeros([4, 4, 2], 4));
        let b = TpvVars::constant(&mut g, &TpvState::zeros([4, 3, 2], 4));
        assert!(matches!(tcvha_step(&mut g, &p, &m, a, b), Err(Error::Wiring(_))));
    }
}
