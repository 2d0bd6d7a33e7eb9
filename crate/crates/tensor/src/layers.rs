//! Parameterised building blocks. Each layer only holds [`ParamId`]s; values
//! live in the [`ParamStore`] it was registered in.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight initialisation for a freshly registered layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    Uniform,
    /// All zeros.
    Zero,
}

fn uniform<T: Float, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::cast(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
        let bound = 1.0 / ((in_ch * spec.taps()) as f64).sqrt();
        let (w, b) = match init {
            Init::Uniform => (uniform(rng, &shape, bound), uniform(rng, &[out_ch], bound)),
            Init::Zero => (Tensor::zeros(&shape), Tensor::zeros(&[out_ch])),
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            spec,
            in_ch,
            out_ch,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv(x, w, Some(b), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], bound))?,
            bias: store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Uses `gcd(max_groups, channels)` groups so any channel count is valid.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups: gcd(max_groups, channels),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Sinusoidal embedding of per-item timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Float>(timesteps: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..dim {
            let v = if i < 2 * half {
                let k = i % half;
                let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
                if i < half {
                    (t * freq).sin()
                } else {
                    (t * freq).cos()
                }
            } else {
                0.0
            };
            data.push(T::cast(v));
        }
    }
    Tensor::from_vec(&[timesteps.len(), dim], data).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_conv_has_zero_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv::new(&mut store, &mut rng, "head", 4, 2, ConvSpec::same(3, false), Init::Zero).unwrap();
        assert_eq!(store.get(c.weight).max_abs(), 0.0);
        assert_eq!(store.get(c.bias).max_abs(), 0.0);
    }

    #[test]
    fn group_count_divides_channels() {
        let mut store = ParamStore::<f32>::new();
        assert_eq!(GroupNorm::new(&mut store, "a", 64, 32).unwrap().groups, 32);
        assert_eq!(GroupNorm::new(&mut store, "b", 8, 32).unwrap().groups, 8);
        assert_eq!(GroupNorm::new(&mut store, "c", 192, 32).unwrap().groups, 32);
        assert_eq!(GroupNorm::new(&mut store, "d", 12, 32).unwrap().groups, 4);
    }

    #[test]
    fn embedding_at_zero_is_sin0_cos0() {
        let e = timestep_embedding::<f64>(&[0.0], 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
