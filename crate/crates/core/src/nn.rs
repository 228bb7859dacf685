//! Parameterized layers built on the graph ops.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Identity on the leading square block, zeros elsewhere.
    Identity,
}

pub fn init_matrix<T: Real, R: Rng>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, cols]);
    match init {
        Init::Zeros => {}
        Init::Xavier => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-a..a)));
        }
        Init::Identity => {
            for i in 0..rows.min(cols) {
                t.set(&[i, i], T::one());
            }
        }
    }
    t
}

/// `y = x W + b` over the trailing axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), init_matrix(fan_in, fan_out, init, rng))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        g.affine(x, params[self.weight.index()], Some(params[self.bias.index()]))
    }

    pub fn numel(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the trailing axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, params[self.gamma.index()], params[self.beta.index()], T::lit(LN_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_registers_named_params() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "head.l1", 3, 5, Init::Xavier, &mut rng).unwrap();
        assert_eq!(store.value(l.weight).shape(), &[3, 5]);
        assert_eq!(store.get(l.bias).name, "head.l1.bias");
        assert_eq!(store.numel(), l.numel());
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(store.value(l.weight).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn identity_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor = init_matrix(2, 3, Init::Identity, &mut rng);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
