//! Residual U-Net shared by the planar and volumetric denoisers.
//!
//! Planar nets run on rank-5 tensors with depth 1 and `(1, k, k)` kernels, so
//! one implementation serves both.

use rand::Rng;
use scorefusion_tensor::layers::{timestep_embedding, Conv, GroupNorm, Init, Linear};
use scorefusion_tensor::{ConvSpec, Float, Graph, PadMode, ParamStore, Var};

use crate::error::{Error, Result};

pub const MAX_GROUPS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels per resolution level, finest first.
    pub levels: Vec<usize>,
    pub resblocks_per_level: usize,
    pub convs_per_block: usize,
    /// Width of the embedding MLP; the sinusoid has `levels[0]` entries.
    pub time_embed_dim: usize,
    pub planar: bool,
    pub zero_head: bool,
    pub pad_mode: PadMode,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::Config(format!("bad level channels {:?}", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.resblocks_per_level == 0 || self.convs_per_block == 0 || self.time_embed_dim == 0 {
            return Err(Error::Config("block counts and embedding width must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this on every downsampled axis.
    pub fn stride(&self) -> usize {
        1 << (self.levels.len() - 1)
    }

    fn conv3(&self) -> ConvSpec {
        ConvSpec::same(3, self.planar).with_pad_mode(self.pad_mode)
    }

    fn down(&self) -> ConvSpec {
        ConvSpec::down(self.planar).with_pad_mode(self.pad_mode)
    }

    fn upsample_factor(&self) -> [usize; 3] {
        if self.planar {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norms: Vec<GroupNorm>,
    convs: Vec<Conv>,
    temb: Linear,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &UNetConfig,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let mut norms = Vec::new();
        let mut convs = Vec::new();
        for i in 0..cfg.convs_per_block {
            let c_in = if i == 0 { in_ch } else { out_ch };
            norms.push(GroupNorm::new(store, &format!("{name}.norm{i}"), c_in, MAX_GROUPS)?);
            convs.push(Conv::new(store, rng, &format!("{name}.conv{i}"), c_in, out_ch, cfg.conv3(), Init::Uniform)?);
        }
        let temb = Linear::new(store, rng, &format!("{name}.temb"), cfg.time_embed_dim, out_ch)?;
        let skip = if in_ch != out_ch {
            Some(Conv::new(store, rng, &format!("{name}.skip"), in_ch, out_ch, ConvSpec::pointwise(), Init::Uniform)?)
        } else {
            None
        };
        Ok(Self { norms, convs, temb, skip })
    }

    /// `emb` is the already activated time embedding, `[N, E]`.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let mut h = x;
        for (i, (norm, conv)) in self.norms.iter().zip(&self.convs).enumerate() {
            h = norm.forward(g, h)?;
            h = g.silu(h);
            h = conv.forward(g, h)?;
            if i == 0 {
                let shift = self.temb.forward(g, emb)?;
                h = g.channel_shift(h, shift)?;
            }
        }
        let skip = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<ResBlock>,
    up: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    input: Conv,
    temb: [Linear; 2],
    down: Vec<DownLevel>,
    mid: Vec<ResBlock>,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

pub struct UNetOutput {
    pub out: Var,
    /// Encoder output of each level after its residual blocks (and any
    /// injection), before downsampling.
    pub features: Vec<Var>,
}

impl UNet {
    /// Registers every parameter under `prefix` in `store`.
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let p = |s: &str| format!("{prefix}{s}");
        let lv = &cfg.levels;
        let n = lv.len();
        let input = Conv::new(store, rng, &p("input"), cfg.in_channels, lv[0], cfg.conv3(), Init::Uniform)?;
        let temb = [
            Linear::new(store, rng, &p("temb.0"), lv[0], cfg.time_embed_dim)?,
            Linear::new(store, rng, &p("temb.1"), cfg.time_embed_dim, cfg.time_embed_dim)?,
        ];
        let mut down = Vec::new();
        let mut ch = lv[0];
        for (l, &c) in lv.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.resblocks_per_level {
                blocks.push(ResBlock::new(store, rng, &p(&format!("down.{l}.res.{b}")), &cfg, ch, c)?);
                ch = c;
            }
            let d = if l + 1 < n {
                Some(Conv::new(store, rng, &p(&format!("down.{l}.down")), c, c, cfg.down(), Init::Uniform)?)
            } else {
                None
            };
            down.push(DownLevel { blocks, down: d });
        }
        let mut mid = Vec::new();
        for b in 0..cfg.resblocks_per_level {
            mid.push(ResBlock::new(store, rng, &p(&format!("mid.{b}")), &cfg, ch, ch)?);
        }
        let mut up = Vec::new();
        for l in (0..n).rev() {
            let c = lv[l];
            let mut blocks = Vec::new();
            for b in 0..cfg.resblocks_per_level {
                blocks.push(ResBlock::new(store, rng, &p(&format!("up.{l}.res.{b}")), &cfg, ch, c)?);
                ch = c;
            }
            let u = if l > 0 {
                Some(Conv::new(store, rng, &p(&format!("up.{l}.up")), c, c, cfg.conv3(), Init::Uniform)?)
            } else {
                None
            };
            up.push(UpLevel { blocks, up: u });
        }
        let out_norm = GroupNorm::new(store, &p("out.norm"), lv[0], MAX_GROUPS)?;
        let head_init = if cfg.zero_head { Init::Zero } else { Init::Uniform };
        let out_conv = Conv::new(store, rng, &p("out.conv"), lv[0], cfg.out_channels, cfg.conv3(), head_init)?;
        Ok(Self {
            cfg,
            input,
            temb,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        })
    }

    /// Checks a `[N, C, D, H, W]` input against the config; errors name the axis.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::Shape(format!("expected rank-5 input, got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "channel axis: expected {}, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        let s = self.cfg.stride();
        let first = if self.cfg.planar { 3 } else { 2 };
        if self.cfg.planar && shape[2] != 1 {
            return Err(Error::Shape(format!("planar input needs depth 1, got {}", shape[2])));
        }
        for (axis, &d) in shape.iter().enumerate().skip(first) {
            if d % s != 0 {
                return Err(Error::Dimension {
                    axis: axis - 2,
                    msg: format!("extent {d} is not divisible by {s}"),
                });
            }
        }
        Ok(())
    }

    /// `inject[l]`, when present, is added to level `l`'s encoder output.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        timesteps: &[f64],
        inject: &[Option<Var>],
    ) -> Result<UNetOutput> {
        self.check_input(g.shape(x))?;
        if timesteps.len() != g.shape(x)[0] {
            return Err(Error::Shape(format!(
                "{} timesteps for batch of {}",
                timesteps.len(),
                g.shape(x)[0]
            )));
        }
        let sinus = g.input(timestep_embedding::<T>(timesteps, self.cfg.levels[0]));
        let e = self.temb[0].forward(g, sinus)?;
        let e = g.silu(e);
        let e = self.temb[1].forward(g, e)?;
        let emb = g.silu(e);

        let mut h = self.input.forward(g, x)?;
        let mut features = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            for b in &level.blocks {
                h = b.forward(g, h, emb)?;
            }
            if let Some(Some(f)) = inject.get(l) {
                h = g.add(h, *f)?;
            }
            features.push(h);
            if let Some(d) = &level.down {
                h = d.forward(g, h)?;
            }
        }
        for b in &self.mid {
            h = b.forward(g, h, emb)?;
        }
        let n = self.down.len();
        for (k, level) in self.up.iter().enumerate() {
            let l = n - 1 - k;
            for (i, b) in level.blocks.iter().enumerate() {
                h = b.forward(g, h, emb)?;
                if i == 0 {
                    h = g.add(h, features[l])?;
                }
            }
            if let Some(u) = &level.up {
                h = g.upsample_nearest(h, self.cfg.upsample_factor())?;
                h = u.forward(g, h)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h);
        let out = self.out_conv.forward(g, h)?;
        Ok(UNetOutput { out, features })
    }
}
