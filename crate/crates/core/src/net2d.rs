//! Planar conditional denoiser. One instance is trained per slicing axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scorefusion_tensor::{Float, Gradients, Graph, PadMode, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Net2DConfig {
    /// Condition slices stacked after the noisy target.
    pub cond_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_level: usize,
    pub convs_per_block: usize,
    pub time_embed_dim: usize,
    pub zero_head: bool,
    pub pad_mode: PadMode,
}

impl Net2DConfig {
    /// Base 64, levels (64, 128, 256, 512), three convolutions per block.
    pub fn reference(cond_channels: usize) -> Self {
        Self {
            cond_channels,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4, 8],
            resblocks_per_level: 2,
            convs_per_block: 3,
            time_embed_dim: 256,
            zero_head: false,
            pad_mode: PadMode::Zero,
        }
    }

    /// Same topology at a chosen width; the embedding is four times the base.
    pub fn with_base(cond_channels: usize, base: usize) -> Self {
        Self {
            base_channels: base,
            time_embed_dim: 4 * base,
            ..Self::reference(cond_channels)
        }
    }

    pub fn in_channels(&self) -> usize {
        1 + self.cond_channels
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.in_channels(),
            out_channels: 1,
            levels: self.level_channels(),
            resblocks_per_level: self.resblocks_per_level,
            convs_per_block: self.convs_per_block,
            time_embed_dim: self.time_embed_dim,
            planar: true,
            zero_head: self.zero_head,
            pad_mode: self.pad_mode,
        }
    }
}

/// Per-slice score and encoder pyramid, both batched over slices:
/// `eps_hat` is `[N, 1, 1, H, W]`, level `l` of `features` is
/// `[N, c_l, 1, H / 2^l, W / 2^l]`.
#[derive(Debug, Clone)]
pub struct BranchOutput<T> {
    pub eps_hat: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Net2D<T = f32> {
    pub cfg: Net2DConfig,
    pub store: ParamStore<T>,
    unet: UNet,
}

pub fn build_net2d(cfg: Net2DConfig, seed: u64) -> Result<Net2D<f32>> {
    if cfg.channel_multipliers.is_empty() || cfg.base_channels == 0 {
        return Err(Error::Config("net2d needs at least one level and a positive base".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let unet = UNet::new(&mut store, &mut rng, "", cfg.unet())?;
    Ok(Net2D { cfg, store, unet })
}

fn model_input<T: Float>(y_t: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let ys = y_t.shape();
    let xs = x.shape();
    if ys.len() != 5 || ys[1] != 1 {
        return Err(Error::Shape(format!("noisy target must be [N, 1, 1, H, W], got {ys:?}")));
    }
    if xs.len() != 5 {
        return Err(Error::Shape(format!("condition must be rank 5, got {xs:?}")));
    }
    for axis in [0, 2, 3, 4] {
        if xs[axis] != ys[axis] {
            return Err(Error::Dimension {
                axis,
                msg: format!("condition extent {} vs target {}", xs[axis], ys[axis]),
            });
        }
    }
    Ok(Tensor::concat_channels(&[y_t, x])?)
}

impl<T: Float> Net2D<T> {
    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub fn cast<U: Float>(&self) -> Net2D<U> {
        Net2D {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            unet: self.unet.clone(),
        }
    }

    /// `y_t`: `[N, 1, 1, H, W]`; `x`: `[N, C, 1, H, W]`; one timestep per item.
    pub fn forward(&self, y_t: &Tensor<T>, x: &Tensor<T>, t: &[usize]) -> Result<BranchOutput<T>> {
        let input = model_input(y_t, x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(input);
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let out = self.unet.forward(&mut g, xv, &ts, &[])?;
        Ok(BranchOutput {
            eps_hat: g.value(out.out).clone(),
            features: out.features.iter().map(|&f| g.value(f).clone()).collect(),
        })
    }

    /// Noise-prediction MSE at `y_t = q_sample(y0, t, eps)` and its gradient.
    pub fn loss(
        &self,
        sched: &NoiseSchedule,
        y0: &Tensor<T>,
        x: &Tensor<T>,
        t: &[usize],
        eps: &Tensor<T>,
    ) -> Result<(f64, Gradients<T>)> {
        let y_t = noisy_batch(sched, y0, t, eps)?;
        self.loss_at(&y_t, x, t, eps)
    }

    /// Same loss with the noisy input supplied directly.
    pub fn loss_at(&self, y_t: &Tensor<T>, x: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<(f64, Gradients<T>)> {
        let input = model_input(y_t, x)?;
        eps.expect_shape("loss_2d", y_t.shape())?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(input);
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let out = self.unet.forward(&mut g, xv, &ts, &[])?;
        let l = g.mse(out.out, eps.clone())?;
        let value = g.value(l).data()[0].as_f64();
        Ok((value, g.backward(l)?))
    }
}

/// `√ᾱ_t y0 + √(1-ᾱ_t) ε` per batch item.
pub fn noisy_batch<T: Float>(sched: &NoiseSchedule, y0: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.expect_shape("q_sample", y0.shape())?;
    let n = y0.shape()[0];
    if t.len() != n {
        return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
    }
    let per = y0.len() / n.max(1);
    let mut data = Vec::with_capacity(y0.len());
    for (b, &tb) in t.iter().enumerate() {
        let ab = sched.alpha_bar(tb)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * per..(b + 1) * per {
            data.push(T::cast(a * y0.data()[i].as_f64() + s * eps.data()[i].as_f64()));
        }
    }
    Ok(Tensor::from_vec(y0.shape(), data)?)
}
