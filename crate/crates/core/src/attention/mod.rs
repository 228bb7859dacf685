//! Deformable attention and the composite TPV attention blocks.

mod history;
mod hybrid;
mod sca;

pub use history::HistoryQueue;
pub use hybrid::{cvha, tcvha_step, temporal_fuse, Cvha, Tcvha};
pub use sca::{plan_sca, sca, sca_update, ScaCameraPlan, ScaPlan, INVALID_REF};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Sizes of one deformable attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformAttnShape {
    /// Width of the query vectors.
    pub c_query: usize,
    /// Width of the raw value maps.
    pub c_value: usize,
    /// Output width, split evenly across heads.
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Reference slots per query (levels times references for image maps).
    pub n_refs: usize,
    /// Sampling points per head per reference.
    pub n_points: usize,
}

impl DeformAttnShape {
    pub fn slots(&self) -> usize {
        self.n_refs * self.n_points
    }
}

/// Offset, weight, value and output projections of one attention block.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub shape: DeformAttnShape,
    pub offset: Linear,
    pub weight: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Result of [`DeformAttn::attend`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[n, embed_dim]`.
    pub out: Var,
    /// `[n, heads, slots]`, each head row summing to one (or zero when fully masked).
    pub weights: Var,
}

impl DeformAttn {
    /// Offset and attention-weight matrices start at zero (uniform attention);
    /// offset biases fan the points of each head out in a fixed direction.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: DeformAttnShape,
        rng: &mut R,
    ) -> Result<Self> {
        let s = shape;
        if s.n_heads == 0 || !s.embed_dim.is_multiple_of(s.n_heads) {
            return Err(Error::Config(format!("embed_dim {} not divisible by {} heads", s.embed_dim, s.n_heads)));
        }
        if s.n_refs == 0 || s.n_points == 0 || s.c_query == 0 || s.c_value == 0 {
            return Err(Error::Config(format!("degenerate attention shape {s:?}")));
        }
        let slots = s.slots();
        let offset = Linear::new(store, &format!("{name}.offset"), s.c_query, s.n_heads * slots * 2, Init::Zeros, rng)?;
        let weight = Linear::new(store, &format!("{name}.weight"), s.c_query, s.n_heads * slots, Init::Zeros, rng)?;
        let value = Linear::new(store, &format!("{name}.value"), s.c_value, s.embed_dim, Init::Xavier, rng)?;
        let output = Linear::new(store, &format!("{name}.output"), s.embed_dim, s.embed_dim, Init::Xavier, rng)?;
        let bias = store.value_mut(offset.bias).data_mut();
        for h in 0..s.n_heads {
            let theta = std::f64::consts::TAU * h as f64 / s.n_heads as f64;
            for r in 0..s.n_refs {
                for p in 0..s.n_points {
                    let radius = (p + 1) as f64 * 0.5;
                    let i = (h * slots + r * s.n_points + p) * 2;
                    bias[i] = T::lit(radius * theta.sin());
                    bias[i + 1] = T::lit(radius * theta.cos());
                }
            }
        }
        Ok(DeformAttn { shape, offset, weight, value, output })
    }

    /// Projects raw `[Hm, Wm, c_value]` maps to `[Hm, Wm, embed_dim]`.
    pub fn project_values<T: Real>(&self, g: &mut Graph<T>, params: &[Var], maps: &[Var]) -> Result<Vec<Var>> {
        maps.iter().map(|&m| self.value.forward(g, params, m)).collect()
    }

    /// Attends from `queries [n, c_query]` into projected `values`.
    ///
    /// `map_ids[r]` names the value map of reference `r`, `base [n, n_refs, 2]`
    /// holds the reference locations in that map's `(row, col)` node
    /// coordinates and `mask`, if given, flags valid references per
    /// `(query, ref)`. Masked references receive zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        queries: Var,
        values: &[Var],
        map_ids: &[usize],
        base: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> Result<Attended> {
        let s = self.shape;
        let (refs, pts, heads) = (s.n_refs, s.n_points, s.n_heads);
        let slots = s.slots();
        let qs = g.shape(queries);
        if qs.len() != 2 || qs[1] != s.c_query {
            return Err(Error::dim(format!("attend: queries {qs:?}, expected [n, {}]", s.c_query)));
        }
        let n = qs[0];
        if map_ids.len() != refs {
            return Err(Error::Wiring(format!("attend: {} map ids for {refs} references", map_ids.len())));
        }
        if let Some(&m) = map_ids.iter().find(|&&m| m >= values.len()) {
            return Err(Error::Wiring(format!("attend: reference targets missing value map {m}")));
        }
        if base.shape() != [n, refs, 2] {
            return Err(Error::dim(format!("attend: base {:?}, expected [{n}, {refs}, 2]", base.shape())));
        }
        if let Some(m) = mask {
            if m.len() != n * refs {
                return Err(Error::dim(format!("attend: mask has {} flags for {n}x{refs}", m.len())));
            }
        }
        let off = self.offset.forward(g, params, queries)?;
        let off = g.reshape(off, &[n, heads, slots, 2])?;
        let logits = self.weight.forward(g, params, queries)?;
        let logits = g.reshape(logits, &[n, heads, slots])?;
        let weights = match mask {
            Some(m) => {
                let mut full = Vec::with_capacity(n * heads * slots);
                for q in 0..n {
                    for _ in 0..heads {
                        for r in 0..refs {
                            full.extend(std::iter::repeat_n(m[q * refs + r], pts));
                        }
                    }
                }
                g.masked_softmax(logits, &full)?
            }
            None => g.softmax(logits, 2)?,
        };
        let bd = base.data();
        let mut expanded = Vec::with_capacity(n * slots * 2);
        for q in 0..n {
            for r in 0..refs {
                for _ in 0..pts {
                    expanded.push(bd[(q * refs + r) * 2]);
                    expanded.push(bd[(q * refs + r) * 2 + 1]);
                }
            }
        }
        let base_exp = Tensor::new(&[n, slots, 2], expanded)?;
        let ids: Vec<usize> = map_ids.iter().flat_map(|&m| std::iter::repeat_n(m, pts)).collect();
        let agg = g.deform_gather(values, &ids, &base_exp, off, weights)?;
        let out = self.output.forward(g, params, agg)?;
        Ok(Attended { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(shape: DeformAttnShape) -> (ParamStore<f64>, DeformAttn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DeformAttn::new(&mut store, "attn", shape, &mut rng).unwrap();
        (store, a)
    }

    fn identity(store: &mut ParamStore<f64>, a: &DeformAttn) {
        let c = a.shape.embed_dim;
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.set(&[i, i], 1.0);
        }
        *store.value_mut(a.value.weight) = eye.clone();
        *store.value_mut(a.output.weight) = eye;
        *store.value_mut(a.offset.bias) = Tensor::zeros(store.value(a.offset.bias).shape());
    }

    #[test]
    fn degenerate_attention_returns_node_value() {
        let shape = DeformAttnShape { c_query: 2, c_value: 2, embed_dim: 2, n_heads: 1, n_refs: 1, n_points: 1 };
        let (mut store, a) = setup(shape);
        identity(&mut store, &a);
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let map = g.constant(Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let vals = a.project_values(&mut g, &p, &[map]).unwrap();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.1]).unwrap());
        let base = Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap();
        let r = a.attend(&mut g, &p, q, &vals, &[0], &base, None).unwrap();
        assert_eq!(g.value(r.out).data(), &[5.0, 6.0]);
    }

    #[test]
    fn hard_selection_ignores_second_ref() {
        let shape = DeformAttnShape { c_query: 2, c_value: 2, embed_dim: 2, n_heads: 1, n_refs: 2, n_points: 1 };
        let (mut store, a) = setup(shape);
        identity(&mut store, &a);
        store.value_mut(a.weight.bias).data_mut().copy_from_slice(&[0.0, -1e4]);
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let map = g.constant(Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let vals = a.project_values(&mut g, &p, &[map]).unwrap();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let base = Tensor::from_f64(&[1, 2, 2], &[0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = a.attend(&mut g, &p, q, &vals, &[0, 0], &base, None).unwrap();
        assert_eq!(g.value(r.out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn wiring_errors() {
        let shape = DeformAttnShape { c_query: 2, c_value: 2, embed_dim: 2, n_heads: 1, n_refs: 1, n_points: 1 };
        let (store, a) = setup(shape);
        let mut g: Graph = Graph::new();
        let p = g.params(&store);
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let base = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(a.attend(&mut g, &p, q, &[], &[0], &base, None), Err(Error::Wiring(_))));
        let mut s2: ParamStore<f64> = ParamStore::new();
        let bad = DeformAttnShape { embed_dim: 3, n_heads: 2, ..shape };
        assert!(DeformAttn::new(&mut s2, "x", bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn offset_bias_pattern() {
        let shape = DeformAttnShape { c_query: 4, c_value: 4, embed_dim: 4, n_heads: 4, n_refs: 1, n_points: 2 };
        let (store, a) = setup(shape);
        let b = store.value(a.offset.bias).data();
        // head 1 points along +row, second point twice as far
        assert!((b[4] - 0.5).abs() < 1e-12 && b[5].abs() < 1e-12);
        assert!((b[6] - 1.0).abs() < 1e-12);
        assert!(store.value(a.offset.weight).data().iter().all(|&v| v == 0.0));
        assert!(store.value(a.weight.weight).data().iter().all(|&v| v == 0.0));
    }
}
