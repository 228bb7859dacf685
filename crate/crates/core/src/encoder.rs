//! The layered spatiotemporal TPV encoder.
//!
//! Unified layer, pre-norm:
//!
//! ```text
//! x <- x + cvha(ln1 x)
//! T_k = sca(ln2 x, frame k)          for every history frame, oldest first
//! x <- x + temporal_fuse(T_{t-M} .. T_t)
//! x <- x + ffn(ln3 x)
//! ```
//!
//! The warp variant replaces `cvha` with a temporal step against the
//! previous output's top plane warped into the current frame, and lifts only
//! the current frame. Its SCA is a residual update, so cells no camera sees
//! are left as they are.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cvha, plan_sca, sca, sca_update, tcvha_step, temporal_fuse, Cvha, DeformAttn, DeformAttnShape, HistoryQueue,
    ScaPlan, Tcvha,
};
use crate::error::{Error, Result};
use crate::geometry::{sample_ego_refs, vvt, warp_bev, CameraModel, EgoGrid, Plane, RigidTransform};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::tpv::{init_queries, TpvQueries, TpvVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Virtual-view lifting of every history frame plus recursive temporal fusion.
    Unified,
    /// Top-plane warping of the previous output.
    Warp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub grid: EgoGrid,
    pub embed_dim: usize,
    pub n_layers: usize,
    /// History frames fused besides the current one.
    pub temporal_steps: usize,
    /// Pillar points per plane cell.
    pub n_ref: usize,
    /// Points per other plane in cross-view attention.
    pub n_cross: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub ffn_hidden: usize,
    /// Channels of the camera feature maps.
    pub feat_dim: usize,
    /// Pyramid levels per camera.
    pub n_levels: usize,
    pub variant: Variant,
}

impl EncoderConfig {
    fn preset(
        grid: EgoGrid,
        c: usize,
        n_layers: usize,
        n_ref: usize,
        n_heads: usize,
        n_points: usize,
        n_levels: usize,
    ) -> Self {
        EncoderConfig {
            grid,
            embed_dim: c,
            n_layers,
            temporal_steps: 1,
            n_ref,
            n_cross: 4,
            n_heads,
            n_points,
            ffn_hidden: 2 * c,
            feat_dim: c,
            n_levels,
            variant: Variant::Unified,
        }
    }

    /// 100x100x8 grid over 102.4 m, C = 256, three layers.
    pub fn base() -> Self {
        let grid = EgoGrid { dims: [100, 100, 8], bounds: [[-51.2, 51.2], [-51.2, 51.2], [-5.0, 3.0]] };
        Self::preset(grid, 256, 3, 4, 8, 4, 4)
    }

    /// As `base` with C = 128.
    pub fn small() -> Self {
        EncoderConfig { embed_dim: 128, ffn_hidden: 256, feat_dim: 128, ..Self::base() }
    }

    /// 32x32x4 grid over 32 m, C = 32.
    pub fn desk() -> Self {
        let grid = EgoGrid { dims: [32, 32, 4], bounds: [[-16.0, 16.0], [-16.0, 16.0], [-1.0, 3.0]] };
        Self::preset(grid, 32, 2, 4, 4, 2, 2)
    }

    /// 16x16x2 grid of 1 m cells with a single layer; sized for the occlusion benchmark.
    pub fn bench() -> Self {
        let grid = EgoGrid { dims: [16, 16, 2], bounds: [[-8.0, 8.0], [-8.0, 8.0], [-1.0, 3.0]] };
        EncoderConfig { n_cross: 2, ..Self::preset(grid, 32, 1, 4, 4, 2, 2) }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "small" => Ok(Self::small()),
            "desk" => Ok(Self::desk()),
            "bench" => Ok(Self::bench()),
            _ => Err(Error::Config(format!("unknown encoder preset {name:?} (base, small, desk, bench)"))),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn check(&self) -> Result<()> {
        self.grid.check()?;
        let c = self.embed_dim;
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if c == 0 || self.n_heads == 0 || !c.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {c} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        for (name, v) in [
            ("n_ref", self.n_ref),
            ("n_cross", self.n_cross),
            ("n_points", self.n_points),
            ("ffn_hidden", self.ffn_hidden),
            ("feat_dim", self.feat_dim),
            ("n_levels", self.n_levels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One timestep of encoder input.
#[derive(Clone, Debug)]
pub struct FrameInput<T: Real = f64> {
    /// Ego to global.
    pub pose: RigidTransform,
    pub cameras: Vec<CameraModel>,
    /// Per camera, per level `[rows, cols, feat_dim]`, finest first.
    pub pyramids: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> FrameInput<T> {
    fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("frame has no cameras".into()));
        }
        if self.pyramids.len() != self.cameras.len() {
            return Err(Error::Wiring(format!("{} pyramids for {} cameras", self.pyramids.len(), self.cameras.len())));
        }
        for (i, p) in self.pyramids.iter().enumerate() {
            if p.len() != cfg.n_levels {
                return Err(Error::Wiring(format!(
                    "camera {i}: {} pyramid levels, expected {}",
                    p.len(),
                    cfg.n_levels
                )));
            }
            if let Some(t) = p.iter().find(|t| t.rank() != 3 || t.last_dim() != cfg.feat_dim) {
                return Err(Error::Wiring(format!(
                    "camera {i}: level {:?}, expected [rows, cols, {}]",
                    t.shape(),
                    cfg.feat_dim
                )));
            }
        }
        Ok(())
    }

    fn level_shapes(&self) -> Vec<Vec<[usize; 2]>> {
        self.pyramids.iter().map(|p| p.iter().map(|t| [t.shape()[0], t.shape()[1]]).collect()).collect()
    }
}

/// Appends a frame to a history queue.
pub fn push_history<E>(queue: &mut HistoryQueue<E>, entry: E) {
    queue.push(entry);
}

/// Frame indices for `steps` history frames ending at the newest of `len`
/// frames, oldest first; short histories repeat their oldest frame.
pub fn history_indices(len: usize, steps: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Config("no frames to encode".into()));
    }
    let want = steps + 1;
    let start = len.saturating_sub(want);
    let mut idx = vec![start; want.saturating_sub(len - start)];
    idx.extend(start..len);
    Ok(idx)
}

/// Self-mixing stage of a layer.
#[derive(Clone, Debug)]
pub enum Mixer {
    Cvha(Cvha),
    Tcvha(Tcvha),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub mixer: Mixer,
    pub ln2: LayerNorm,
    pub sca: DeformAttn,
    /// Present in the unified variant.
    pub temporal: Option<Tcvha>,
    pub ln3: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Cached output of the previous warp-variant call.
#[derive(Clone, Debug)]
pub struct WarpCache<T: Real = f64> {
    pub bev: Tensor<T>,
    pub pose: RigidTransform,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub queries: TpvQueries,
    pub layers: Vec<EncoderLayer>,
}

/// SCA plans of one frame for the three planes.
pub type FramePlan<T> = [ScaPlan<T>; 3];

fn ln_planes<T: Real>(g: &mut Graph<T>, params: &[Var], ln: &LayerNorm, x: TpvVars) -> Result<TpvVars> {
    let mut out = x.planes();
    for v in out.iter_mut() {
        *v = ln.forward(g, params, *v)?;
    }
    Ok(TpvVars::from_planes(out))
}

fn add_planes<T: Real>(g: &mut Graph<T>, x: TpvVars, y: TpvVars) -> Result<TpvVars> {
    Ok(TpvVars { hw: g.add(x.hw, y.hw)?, dh: g.add(x.dh, y.dh)?, wd: g.add(x.wd, y.wd)? })
}

impl Encoder {
    /// Registers every encoder parameter under `enc.`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let c = cfg.embed_dim;
        let queries = init_queries(store, "enc.tpv", cfg.dims(), c, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0FE7_C0DE);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = format!("enc.layer{l}");
            let mixer = match cfg.variant {
                Variant::Unified => Mixer::Cvha(Cvha::new(
                    store,
                    &format!("{name}.cvha"),
                    c,
                    cfg.n_heads,
                    cfg.n_points,
                    cfg.n_cross,
                    &mut rng,
                )?),
                Variant::Warp => Mixer::Tcvha(Tcvha::new(
                    store,
                    &format!("{name}.mix"),
                    c,
                    cfg.n_heads,
                    cfg.n_points,
                    cfg.n_cross,
                    &mut rng,
                )?),
            };
            let sca_shape = DeformAttnShape {
                c_query: c,
                c_value: cfg.feat_dim,
                embed_dim: c,
                n_heads: cfg.n_heads,
                n_refs: cfg.n_levels * cfg.n_ref,
                n_points: cfg.n_points,
            };
            let layer = EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{name}.ln1"), c)?,
                mixer,
                ln2: LayerNorm::new(store, &format!("{name}.ln2"), c)?,
                sca: DeformAttn::new(store, &format!("{name}.sca"), sca_shape, &mut rng)?,
                temporal: match cfg.variant {
                    Variant::Unified => Some(Tcvha::new(
                        store,
                        &format!("{name}.tcvha"),
                        c,
                        cfg.n_heads,
                        cfg.n_points,
                        cfg.n_cross,
                        &mut rng,
                    )?),
                    Variant::Warp => None,
                },
                ln3: LayerNorm::new(store, &format!("{name}.ln3"), c)?,
                ffn1: Linear::new(store, &format!("{name}.ffn1"), c, cfg.ffn_hidden, Init::Xavier, &mut rng)?,
                ffn2: Linear::new(store, &format!("{name}.ffn2"), cfg.ffn_hidden, c, Init::Xavier, &mut rng)?,
            };
            layers.push(layer);
        }
        Ok(Encoder { cfg, queries, layers })
    }

    /// Projection plans of `frame` seen from the ego frame at `current_pose`.
    pub fn plan_frame<T: Real>(&self, frame: &FrameInput<T>, current_pose: &RigidTransform) -> Result<FramePlan<T>> {
        frame.check(&self.cfg)?;
        let views =
            frame.cameras.iter().map(|c| vvt(&c.extrinsic, &frame.pose, current_pose)).collect::<Result<Vec<_>>>()?;
        let shapes = frame.level_shapes();
        let plan = |p: Plane| -> Result<ScaPlan<T>> {
            let refs = sample_ego_refs(p, &self.cfg.grid, self.cfg.n_ref)?;
            plan_sca(&refs, &frame.cameras, &views, &shapes)
        };
        Ok([plan(Plane::Hw)?, plan(Plane::Dh)?, plan(Plane::Wd)?])
    }

    fn pyramid_vars<T: Real>(g: &mut Graph<T>, frame: &FrameInput<T>) -> Vec<Vec<Var>> {
        frame.pyramids.iter().map(|p| p.iter().map(|t| g.constant(t.clone())).collect()).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn sca_planes<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        layer: &EncoderLayer,
        q: TpvVars,
        plan: &FramePlan<T>,
        pyramid: &[Vec<Var>],
        residual: bool,
    ) -> Result<TpvVars> {
        let values =
            pyramid.iter().map(|levels| layer.sca.project_values(g, params, levels)).collect::<Result<Vec<_>>>()?;
        let mut out = q.planes();
        for p in Plane::ALL {
            let run = if residual { sca_update } else { sca };
            out[p.index()] = run(g, params, &layer.sca, q.plane(p), &plan[p.index()], &values)?;
        }
        Ok(TpvVars::from_planes(out))
    }

    fn ffn<T: Real>(&self, g: &mut Graph<T>, params: &[Var], layer: &EncoderLayer, x: TpvVars) -> Result<TpvVars> {
        let c = ln_planes(g, params, &layer.ln3, x)?;
        let mut out = c.planes();
        for v in out.iter_mut() {
            let h = layer.ffn1.forward(g, params, *v)?;
            let h = g.gelu(h);
            *v = layer.ffn2.forward(g, params, h)?;
        }
        add_planes(g, x, TpvVars::from_planes(out))
    }

    /// Encodes the newest of `frames` (oldest first) fusing `steps` history
    /// frames. `steps` may differ from the configured value at inference.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        frames: &[FrameInput<T>],
        steps: usize,
    ) -> Result<TpvVars> {
        if self.cfg.variant != Variant::Unified {
            return Err(Error::Config("encode requires the unified variant".into()));
        }
        let idx = history_indices(frames.len(), steps)?;
        let current = &frames[frames.len() - 1];
        let mut unique: Vec<usize> = idx.clone();
        unique.dedup();
        let mut plans = Vec::with_capacity(unique.len());
        let mut pyramids = Vec::with_capacity(unique.len());
        for &f in &unique {
            plans.push(self.plan_frame(&frames[f], &current.pose)?);
            pyramids.push(Self::pyramid_vars(g, &frames[f]));
        }
        let mut x = self.queries.vars(g, params)?;
        for layer in &self.layers {
            let Mixer::Cvha(mix) = &layer.mixer else {
                return Err(Error::Wiring("unified layer without cross-view attention".into()));
            };
            let a = ln_planes(g, params, &layer.ln1, x)?;
            let m = cvha(g, params, mix, a)?;
            x = add_planes(g, x, m)?;
            let b = ln_planes(g, params, &layer.ln2, x)?;
            let spatial = (0..unique.len())
                .map(|u| self.sca_planes(g, params, layer, b, &plans[u], &pyramids[u], false))
                .collect::<Result<Vec<_>>>()?;
            let history: Vec<TpvVars> =
                idx.iter().map(|f| spatial[unique.iter().position(|u| u == f).expect("deduplicated index")]).collect();
            let temporal = layer.temporal.as_ref().expect("unified layers carry temporal fusion");
            let fused = temporal_fuse(g, params, temporal, &history)?;
            x = add_planes(g, x, fused)?;
            x = self.ffn(g, params, layer, x)?;
        }
        Ok(x)
    }

    /// Warp-variant encoding of one frame. Reads and then replaces `cache`;
    /// without a cache the temporal step fuses the state with itself.
    pub fn encode_warp<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        frame: &FrameInput<T>,
        cache: &mut Option<WarpCache<T>>,
    ) -> Result<TpvVars> {
        if self.cfg.variant != Variant::Warp {
            return Err(Error::Config("encode_warp requires the warp variant".into()));
        }
        let plan = self.plan_frame(frame, &frame.pose)?;
        let pyramid = Self::pyramid_vars(g, frame);
        let warped = match cache.as_ref() {
            Some(c) => Some(g.constant(warp_bev(&c.bev, &c.pose, &frame.pose, &self.cfg.grid)?)),
            None => None,
        };
        let mut x = self.queries.vars(g, params)?;
        for layer in &self.layers {
            let Mixer::Tcvha(mix) = &layer.mixer else {
                return Err(Error::Wiring("warp layer without temporal attention".into()));
            };
            let a = ln_planes(g, params, &layer.ln1, x)?;
            let prev = match warped {
                Some(w) => TpvVars { hw: layer.ln1.forward(g, params, w)?, ..a },
                None => a,
            };
            let m = tcvha_step(g, params, mix, prev, a)?;
            x = add_planes(g, x, m)?;
            let b = ln_planes(g, params, &layer.ln2, x)?;
            let s = self.sca_planes(g, params, layer, b, &plan, &pyramid, true)?;
            x = add_planes(g, x, s)?;
            x = self.ffn(g, params, layer, x)?;
        }
        *cache = Some(WarpCache { bev: g.value(x.hw).clone(), pose: frame.pose });
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_padding() {
        assert_eq!(history_indices(1, 0).unwrap(), vec![0]);
        assert_eq!(history_indices(1, 2).unwrap(), vec![0, 0, 0]);
        assert_eq!(history_indices(5, 1).unwrap(), vec![3, 4]);
        assert_eq!(history_indices(2, 3).unwrap(), vec![0, 0, 0, 1]);
        assert!(history_indices(0, 1).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in ["base", "small", "desk", "bench"] {
            EncoderConfig::by_name(name).unwrap().check().unwrap();
        }
        assert_eq!(EncoderConfig::small().embed_dim, 128);
        let bad = EncoderConfig { n_heads: 3, ..EncoderConfig::desk() };
        assert!(bad.check().is_err());
        assert!(EncoderConfig::by_name("huge").is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = EncoderConfig::bench();
        let text = toml::to_string(&cfg).unwrap();
        let back: EncoderConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
