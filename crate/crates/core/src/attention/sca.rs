//! Spatial cross-attention from plane queries into camera feature pyramids.

use super::DeformAttn;
use crate::error::{Error, Result};
use crate::geometry::{project_all, CameraModel, EgoRefPoints, RigidTransform};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Map coordinate given to masked references; finite so gradients stay clean.
pub const INVALID_REF: [f64; 2] = [-10.0, -10.0];

/// Sampling plan for the cells one camera sees.
#[derive(Clone, Debug)]
pub struct ScaCameraPlan<T: Real = f64> {
    pub camera: usize,
    /// Plane cells (flat `row * cols + col`) with at least one valid reference.
    pub cells: Vec<usize>,
    /// `[cells, levels * n_ref, 2]` level-map coordinates, level-major.
    pub base: Tensor<T>,
    /// Validity per `(cell, level * n_ref + ref)`.
    pub mask: Vec<bool>,
}

/// Geometry-only part of SCA for one plane and timestep; independent of
/// parameters, so it is built once and reused across layers.
#[derive(Clone, Debug)]
pub struct ScaPlan<T: Real = f64> {
    pub n_cells: usize,
    pub n_ref: usize,
    pub n_levels: usize,
    pub cameras: Vec<ScaCameraPlan<T>>,
    /// Level index of every reference slot.
    pub map_ids: Vec<usize>,
}

impl<T: Real> ScaPlan<T> {
    /// Cameras hit by each cell.
    pub fn hit_views(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_cells];
        for cp in &self.cameras {
            for &c in &cp.cells {
                out[c].push(cp.camera);
            }
        }
        out
    }
}

/// Projects the pillar points of every cell into each camera and converts
/// pixels to node coordinates of each pyramid level. `level_shapes[i]` lists
/// `(rows, cols)` of camera `i`'s levels, finest first.
pub fn plan_sca<T: Real>(
    refs: &EgoRefPoints,
    cameras: &[CameraModel],
    views: &[RigidTransform],
    level_shapes: &[Vec<[usize; 2]>],
) -> Result<ScaPlan<T>> {
    let proj = project_all(refs, cameras, views)?;
    if level_shapes.len() != cameras.len() {
        return Err(Error::Wiring(format!("{} pyramids for {} cameras", level_shapes.len(), cameras.len())));
    }
    let n_levels = level_shapes[0].len();
    if n_levels == 0 || level_shapes.iter().any(|l| l.len() != n_levels) {
        return Err(Error::Wiring("every camera needs the same positive number of pyramid levels".into()));
    }
    let (n_cells, n_ref) = (refs.n_cells(), refs.n_ref);
    let slots = n_levels * n_ref;
    let mut plans = Vec::new();
    for (i, (p, cam)) in proj.iter().zip(cameras).enumerate() {
        let (w_img, h_img) = (cam.width() as f64, cam.height() as f64);
        let mut cells = Vec::new();
        let mut base = Vec::new();
        let mut mask = Vec::new();
        for c in 0..n_cells {
            let valid = &p.valid[c * n_ref..(c + 1) * n_ref];
            if !valid.iter().any(|&v| v) {
                continue;
            }
            cells.push(c);
            for &[rows, cols] in &level_shapes[i] {
                let (sr, sc) = (rows as f64 / h_img, cols as f64 / w_img);
                for (r, &ok) in valid.iter().enumerate() {
                    let [u, v] = p.pixels[c * n_ref + r];
                    let rc = if ok { [v * sr - 0.5, u * sc - 0.5] } else { INVALID_REF };
                    base.push(T::lit(rc[0]));
                    base.push(T::lit(rc[1]));
                    mask.push(ok);
                }
            }
        }
        let n = cells.len();
        plans.push(ScaCameraPlan { camera: i, cells, base: Tensor::new(&[n, slots, 2], base)?, mask });
    }
    let map_ids = (0..n_levels).flat_map(|l| std::iter::repeat_n(l, n_ref)).collect();
    Ok(ScaPlan { n_cells, n_ref, n_levels, cameras: plans, map_ids })
}

/// Spatial cross-attention for one plane.
///
/// `queries` is `[rows, cols, C]`; `values[i]` are camera `i`'s pyramid levels
/// after value projection. Each cell averages the attention results of its
/// hit cameras; cells no camera sees keep their query.
pub fn sca<T: Real>(
    g: &mut Graph<T>,
    params: &[Var],
    attn: &DeformAttn,
    queries: Var,
    plan: &ScaPlan<T>,
    values: &[Vec<Var>],
) -> Result<Var> {
    sca_with(g, params, attn, queries, plan, values, false)
}

/// [`sca`] for use as a residual update: cells no camera sees get zero, so
/// adding the result leaves them unchanged.
pub fn sca_update<T: Real>(
    g: &mut Graph<T>,
    params: &[Var],
    attn: &DeformAttn,
    queries: Var,
    plan: &ScaPlan<T>,
    values: &[Vec<Var>],
) -> Result<Var> {
    sca_with(g, params, attn, queries, plan, values, true)
}

#[allow(clippy::too_many_arguments)]
fn sca_with<T: Real>(
    g: &mut Graph<T>,
    params: &[Var],
    attn: &DeformAttn,
    queries: Var,
    plan: &ScaPlan<T>,
    values: &[Vec<Var>],
    unseen_zero: bool,
) -> Result<Var> {
    let shape = g.shape(queries).to_vec();
    let n: usize = shape[..shape.len() - 1].iter().product();
    if n != plan.n_cells {
        return Err(Error::Wiring(format!("sca: {n} queries for a plan over {} cells", plan.n_cells)));
    }
    if attn.shape.n_refs != plan.n_levels * plan.n_ref {
        return Err(Error::Wiring(format!(
            "sca: attention expects {} references, plan has {} levels x {} refs",
            attn.shape.n_refs, plan.n_levels, plan.n_ref
        )));
    }
    let flat = g.reshape(queries, &[n, shape[shape.len() - 1]])?;
    let mut parts = Vec::with_capacity(plan.cameras.len());
    for cp in &plan.cameras {
        if cp.cells.is_empty() {
            continue;
        }
        let maps =
            values.get(cp.camera).ok_or_else(|| Error::Wiring(format!("sca: no pyramid for camera {}", cp.camera)))?;
        let q = g.gather_rows(flat, &cp.cells)?;
        let a = attn.attend(g, params, q, maps, &plan.map_ids, &cp.base, Some(&cp.mask))?;
        parts.push((a.out, cp.cells.clone()));
    }
    let fallback = if unseen_zero { g.constant(Tensor::zeros(&[n, attn.shape.embed_dim])) } else { flat };
    let fused = g.hit_mean(&parts, fallback)?;
    g.reshape(fused, &shape)
}
