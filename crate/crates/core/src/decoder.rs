//! Two-layer softplus MLP mapping aggregated TPV features to class logits.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::Result;
use crate::geometry::EgoGrid;
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamStore, Real, Var};
use crate::tpv::{aggregate_points_var, TpvVars};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub linear1: Linear,
    pub linear2: Linear,
    pub n_classes: usize,
}

impl Decoder {
    /// `C -> hidden -> n_classes`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Decoder {
            linear1: Linear::new(store, &format!("{name}.linear1"), c, hidden, Init::Xavier, rng)?,
            linear2: Linear::new(store, &format!("{name}.linear2"), hidden, n_classes, Init::Xavier, rng)?,
            n_classes,
        })
    }

    pub fn numel(&self) -> usize {
        self.linear1.numel() + self.linear2.numel()
    }

    /// MLP over the trailing axis of `features`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], features: Var) -> Result<Var> {
        let h = self.linear1.forward(g, params, features)?;
        let h = g.softplus(h);
        self.linear2.forward(g, params, h)
    }
}

/// Logits `[H, W, D, n_classes]` at every voxel center.
pub fn decode_voxels<T: Real>(g: &mut Graph<T>, params: &[Var], dec: &Decoder, tpv: TpvVars) -> Result<Var> {
    let feats = g.tpv_broadcast_sum(tpv.hw, tpv.dh, tpv.wd)?;
    dec.forward(g, params, feats)
}

/// Logits `[N, n_classes]` at ego points.
pub fn decode_points<T: Real>(
    g: &mut Graph<T>,
    params: &[Var],
    dec: &Decoder,
    tpv: TpvVars,
    grid: &EgoGrid,
    points: &[Vector3<f64>],
) -> Result<Var> {
    let feats = aggregate_points_var(g, tpv, grid, points)?;
    dec.forward(g, params, feats)
}
