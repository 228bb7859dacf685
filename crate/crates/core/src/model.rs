//! Encoder plus decoder head, with the configuration that rebuilds them.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_points, decode_voxels, Decoder};
use crate::encoder::{Encoder, WarpCache};
use crate::encoder::{EncoderConfig, FrameInput, Variant};
use crate::error::{Error, Result};
use crate::synth::N_SEMANTIC;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Real, Var};
use crate::tpv::TpvVars;

/// Supervision scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Semantic occupancy: Lovász on voxels, cross-entropy on points.
    Sop,
    /// LiDAR segmentation: Lovász on points, cross-entropy on voxels.
    LidarSeg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig::by_name(name)?;
        let decoder_hidden = 2 * encoder.embed_dim;
        Ok(ModelConfig { encoder, decoder_hidden, seed: 0 })
    }

    /// Semantic classes plus `empty`.
    pub fn n_classes(&self) -> usize {
        N_SEMANTIC + 1
    }

    pub fn check(&self) -> Result<()> {
        self.encoder.check()?;
        if self.decoder_hidden == 0 {
            return Err(Error::Config("decoder_hidden must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters and the modules that index into them.
pub struct Model<T: Real = f64> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Logits of one forward pass.
pub struct Prediction {
    pub tpv: TpvVars,
    /// `[H, W, D, K]`.
    pub voxels: Var,
    /// `[N, K]`.
    pub points: Var,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.check()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.encoder.clone(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00DE_C0DE);
        let decoder =
            Decoder::new(&mut store, "dec", cfg.encoder.embed_dim, cfg.decoder_hidden, cfg.n_classes(), &mut rng)?;
        Ok(Model { cfg, store, encoder, decoder })
    }

    /// Encodes the newest of `frames` with `steps` history frames.
    pub fn encode(&self, g: &mut Graph<T>, params: &[Var], frames: &[FrameInput<T>], steps: usize) -> Result<TpvVars> {
        match self.cfg.encoder.variant {
            Variant::Unified => self.encoder.encode(g, params, frames, steps),
            Variant::Warp => {
                // Replays the recurrent cache over the window, newest last.
                let mut idx = crate::encoder::history_indices(frames.len(), steps)?;
                // padding repeats the oldest frame, which the cache already holds
                idx.dedup();
                let mut cache: Option<WarpCache<T>> = None;
                let mut out = None;
                for (k, &f) in idx.iter().enumerate() {
                    if k + 1 == idx.len() {
                        out = Some(self.encoder.encode_warp(g, params, &frames[f], &mut cache)?);
                    } else {
                        let mut sub: Graph<T> = Graph::new();
                        let sub_params = sub.params(&self.store);
                        self.encoder.encode_warp(&mut sub, &sub_params, &frames[f], &mut cache)?;
                    }
                }
                out.ok_or_else(|| Error::Config("no frames to encode".into()))
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        frames: &[FrameInput<T>],
        steps: usize,
        points: &[Vector3<f64>],
    ) -> Result<Prediction> {
        let tpv = self.encode(g, params, frames, steps)?;
        let voxels = decode_voxels(g, params, &self.decoder, tpv)?;
        let points = decode_points(g, params, &self.decoder, tpv, &self.cfg.encoder.grid, points)?;
        Ok(Prediction { tpv, voxels, points })
    }

    pub fn save_checkpoint(&self, w: impl std::io::Write) -> Result<()> {
        write_checkpoint(&self.store, w).map_err(|e| Error::Format(format!("checkpoint write failed: {e}")))
    }

    pub fn load_checkpoint(&mut self, r: impl std::io::Read) -> Result<()> {
        let entries = read_checkpoint(r)?;
        self.store.load_entries(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let cfg = ModelConfig::preset("bench").unwrap();
        let a: Model = Model::new(cfg.clone()).unwrap();
        let mut b: Model = Model::new(ModelConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.store.get(a.encoder.queries.queries[0]).value, b.store.get(b.encoder.queries.queries[0]).value);
        let mut buf = Vec::new();
        a.save_checkpoint(&mut buf).unwrap();
        b.load_checkpoint(&buf[..]).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig::preset("desk").unwrap();
        let back: ModelConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
