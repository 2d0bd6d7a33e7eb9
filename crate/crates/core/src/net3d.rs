//! Volumetric fusion network: predicts per-voxel ensemble weights over the
//! branch scores plus a residual correction.
//!
//! With two branches the head emits `(w, R)` and
//! `ε̂ = (0.5 + w)·ε̂ᵃ + (0.5 − w)·ε̂ᵇ + λR`. With `K > 2` it emits `K` logits
//! and `R`; the weights are a per-voxel softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scorefusion_tensor::{ConvSpec, Float, Gradients, Graph, PadMode, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::unet::{UNet, UNetConfig};
use crate::volume::{SliceAxis, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Small,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "small" => Ok(Variant::Small),
            other => Err(Error::Config(format!("unknown net3d.variant `{other}` (full|small)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net3DConfig {
    pub variant: Variant,
    pub cond_channels: usize,
    /// Number of branch scores fused.
    pub branches: usize,
    pub levels: Vec<usize>,
    pub resblocks_per_level: usize,
    pub convs_per_block: usize,
    pub time_embed_dim: usize,
    /// Concatenated pyramid channels per level across all branches; empty
    /// disables injection.
    pub injection_channels: Vec<usize>,
    pub lambda: f64,
    pub zero_head: bool,
    pub pad_mode: PadMode,
}

impl Net3DConfig {
    /// Levels (64, 128, 192, 256) with injection from two branches whose
    /// pyramids have `branch_levels` channels each.
    pub fn full(cond_channels: usize, branch_levels: &[usize]) -> Self {
        Self {
            variant: Variant::Full,
            cond_channels,
            branches: 2,
            levels: vec![64, 128, 192, 256],
            resblocks_per_level: 2,
            convs_per_block: 2,
            time_embed_dim: 256,
            injection_channels: branch_levels.iter().map(|c| 2 * c).collect(),
            lambda: 1.0,
            zero_head: true,
            pad_mode: PadMode::Zero,
        }
    }

    /// Levels (32, 64, 64, 128), no injection.
    pub fn small(cond_channels: usize, branches: usize) -> Self {
        Self {
            variant: Variant::Small,
            cond_channels,
            branches,
            levels: vec![32, 64, 64, 128],
            resblocks_per_level: 2,
            convs_per_block: 2,
            time_embed_dim: 128,
            injection_channels: Vec::new(),
            lambda: 1.0,
            zero_head: true,
            pad_mode: PadMode::Zero,
        }
    }

    /// Rescale level widths by `num / den` (at least 1 channel each).
    pub fn scaled(mut self, num: usize, den: usize) -> Self {
        self.levels = self.levels.iter().map(|c| (c * num / den).max(1)).collect();
        self.time_embed_dim = 4 * self.levels[0];
        self
    }

    pub fn in_channels(&self) -> usize {
        1 + self.cond_channels + self.branches
    }

    pub fn out_channels(&self) -> usize {
        if self.branches == 2 {
            2
        } else {
            self.branches + 1
        }
    }

    pub fn injects(&self) -> bool {
        !self.injection_channels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches < 2 {
            return Err(Error::Config(format!("fusion needs at least 2 branches, got {}", self.branches)));
        }
        if self.injects() && self.variant == Variant::Small {
            return Err(Error::Config("the small variant has no feature injection".into()));
        }
        if self.injection_channels.len() > self.levels.len() {
            return Err(Error::Config(format!(
                "{} injection levels for a {}-level net",
                self.injection_channels.len(),
                self.levels.len()
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("net3d.lambda must be finite".into()));
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.in_channels(),
            out_channels: self.out_channels(),
            levels: self.levels.clone(),
            resblocks_per_level: self.resblocks_per_level,
            convs_per_block: self.convs_per_block,
            time_embed_dim: self.time_embed_dim,
            planar: false,
            zero_head: self.zero_head,
            pad_mode: self.pad_mode,
        }
    }

    /// Spatial dims of every encoder level for an input of `dims`.
    pub fn level_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let mut d = dims;
        let mut out = Vec::with_capacity(self.levels.len());
        for _ in 0..self.levels.len() {
            out.push(d);
            d = d.map(|v| v.div_ceil(2));
        }
        out
    }
}

/// Per-slice features of one level, `[S, c, 1, h, w]`, stacked back into a
/// volume `[1, c, d1, d2, d3]` along `axis` and average-pooled along it by
/// `factor` so the slice axis shrinks like the in-plane axes did.
pub fn stack_level(axis: SliceAxis, slices: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [s, c, one, h, w] = slices.dims5()?;
    if one != 1 {
        return Err(Error::Pyramid(format!("expected planar features, got depth {one}")));
    }
    let out_s = s.div_ceil(factor.max(1));
    let f = factor.max(1);
    let plane = h * w;
    let mut pooled = vec![0.0f32; c * out_s * plane];
    for o in 0..out_s {
        let members = (o * f..((o + 1) * f).min(s)).collect::<Vec<_>>();
        let inv = 1.0 / members.len() as f32;
        for ch in 0..c {
            let dst = &mut pooled[(ch * out_s + o) * plane..(ch * out_s + o + 1) * plane];
            for &m in &members {
                let src = &slices.data()[(m * c + ch) * plane..(m * c + ch + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
    // pooled is [c, slice, h, w]; move the slice index to its volume axis
    let dims = match axis {
        SliceAxis::Second => [h, out_s, w],
        SliceAxis::Third => [h, w, out_s],
    };
    let vox = dims.iter().product::<usize>();
    let mut data = vec![0.0f32; c * vox];
    for ch in 0..c {
        for sl in 0..out_s {
            for r in 0..h {
                for col in 0..w {
                    let idx = match axis {
                        SliceAxis::Second => (r * out_s + sl) * w + col,
                        SliceAxis::Third => (r * w + col) * out_s + sl,
                    };
                    data[ch * vox + idx] = pooled[((ch * out_s + sl) * h + r) * w + col];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[1, c, dims[0], dims[1], dims[2]], data)?)
}

/// Trilinear resampling with half-voxel alignment; identity when dims match.
pub fn resample_trilinear(x: &Tensor<f32>, dims: [usize; 3]) -> Result<Tensor<f32>> {
    let [n, c, d, h, w] = x.dims5()?;
    if [d, h, w] == dims {
        return Ok(x.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (td, th, tw) = (taps(dims[0], d), taps(dims[1], h), taps(dims[2], w));
    let mut out = Vec::with_capacity(n * c * dims.iter().product::<usize>());
    for nc in 0..n * c {
        let src = &x.data()[nc * d * h * w..(nc + 1) * d * h * w];
        let at = |i: usize, j: usize, k: usize| src[(i * h + j) * w + k];
        for &(z0, z1, fz) in &td {
            for &(y0, y1, fy) in &th {
                for &(x0, x1, fx) in &tw {
                    let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c, dims[0], dims[1], dims[2]], out)?)
}

/// Resample every branch's stacked level to `level_dims` and concatenate the
/// branches on the channel axis. `pyramids[k][l]` is branch `k`, level `l`.
pub fn align_features(pyramids: &[&[Tensor<f32>]], level_dims: &[[usize; 3]]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(level_dims.len());
    for (l, &dims) in level_dims.iter().enumerate() {
        let mut parts = Vec::with_capacity(pyramids.len());
        for (k, p) in pyramids.iter().enumerate() {
            let level = p
                .get(l)
                .ok_or_else(|| Error::Pyramid(format!("branch {k} has no level {l} (only {})", p.len())))?;
            parts.push(resample_trilinear(level, dims)?);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        out.push(Tensor::concat_channels(&refs)?);
    }
    Ok(out)
}

/// Per-voxel fusion result.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// One weight field per branch; they sum to 1 at every voxel.
    pub coefficients: Vec<Volume>,
    pub residual: Volume,
    pub lambda: f64,
    pub eps3d: Volume,
}

impl FusionOutput {
    /// `w` of the two-branch form: the first coefficient minus one half.
    pub fn w(&self) -> Volume {
        self.coefficients[0].map(|c| c - 0.5)
    }
}

/// `Σ_k c_k ε̂_k + λR` voxelwise.
pub fn combine(coefficients: &[Volume], scores: &[&Volume], residual: &Volume, lambda: f64) -> Result<Volume> {
    if coefficients.len() != scores.len() || scores.is_empty() {
        return Err(Error::Shape(format!(
            "{} coefficient fields for {} scores",
            coefficients.len(),
            scores.len()
        )));
    }
    let dims = residual.dims();
    for v in coefficients.iter().chain(scores.iter().copied()) {
        v.expect_dims(dims)?;
    }
    let lambda = lambda as f32;
    let data = (0..residual.len())
        .map(|i| {
            let mut acc = 0.0f32;
            for (c, e) in coefficients.iter().zip(scores) {
                acc += c.data()[i] * e.data()[i];
            }
            acc + lambda * residual.data()[i]
        })
        .collect();
    Volume::new(dims, data)
}

/// Two-branch form from `w`: coefficients `0.5 + w` and `0.5 − w`.
pub fn coefficients_from_w(w: &Volume) -> [Volume; 2] {
    [w.map(|v| 0.5 + v), w.map(|v| 0.5 - v)]
}

/// Everything the fusion net consumes for one volume, as tensors.
#[derive(Debug, Clone)]
pub struct FusionInputs<T> {
    /// `[1, 1 + C + K, d1, d2, d3]`: noisy target, conditions, branch scores.
    pub input: Tensor<T>,
    /// `[1, K, d1, d2, d3]`.
    pub scores: Tensor<T>,
    /// Aligned (resampled and concatenated) pyramid per injected level.
    pub aligned: Vec<Tensor<T>>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct Net3D<T = f32> {
    pub cfg: Net3DConfig,
    pub store: ParamStore<T>,
    unet: UNet,
    /// Bias-free pointwise maps from aligned pyramids to level channels.
    align: Vec<ParamId>,
}

pub fn build_net3d(cfg: Net3DConfig, seed: u64) -> Result<Net3D<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let unet = UNet::new(&mut store, &mut rng, "", cfg.unet())?;
    let mut align = Vec::new();
    for (l, &cin) in cfg.injection_channels.iter().enumerate() {
        let cout = cfg.levels[l];
        let bound = 1.0 / (cin as f64).sqrt();
        let w: Vec<f32> = (0..cout * cin).map(|_| rng.random_range(-bound..=bound) as f32).collect();
        align.push(store.add(format!("align.{l}.weight"), Tensor::from_vec(&[cout, cin, 1, 1, 1], w)?)?);
    }
    Ok(Net3D { cfg, store, unet, align })
}

fn volume_tensor<T: Float>(v: &Volume) -> Tensor<T> {
    let [a, b, c] = v.dims();
    Tensor::from_vec(&[1, 1, a, b, c], v.data().iter().map(|&x| T::cast(x as f64)).collect())
        .expect("volume length matches dims")
}

fn channel_volume<T: Float>(t: &Tensor<T>, ch: usize) -> Result<Volume> {
    let [_, c, a, b, d] = t.dims5()?;
    debug_assert!(ch < c);
    let s = a * b * d;
    Volume::new([a, b, d], t.data()[ch * s..(ch + 1) * s].iter().map(|x| x.as_f64() as f32).collect())
}

impl<T: Float> Net3D<T> {
    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub fn cast<U: Float>(&self) -> Net3D<U> {
        Net3D {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            unet: self.unet.clone(),
            align: self.align.clone(),
        }
    }

    /// Assemble network inputs. `pyramids` is required when the net injects
    /// features and ignored otherwise.
    pub fn prepare(
        &self,
        y_t: &Volume,
        cond: &[Volume],
        scores: &[&Volume],
        pyramids: Option<&[&[Tensor<f32>]]>,
        t: usize,
    ) -> Result<FusionInputs<T>> {
        let dims = y_t.dims();
        if cond.len() != self.cfg.cond_channels {
            return Err(Error::Shape(format!(
                "{} condition volumes, net expects {}",
                cond.len(),
                self.cfg.cond_channels
            )));
        }
        if scores.len() != self.cfg.branches {
            return Err(Error::Shape(format!(
                "{} branch scores, net expects {}",
                scores.len(),
                self.cfg.branches
            )));
        }
        for v in cond.iter().chain(scores.iter().copied()) {
            v.expect_dims(dims)?;
        }
        let s = self.unet.cfg.stride();
        for (axis, &d) in dims.iter().enumerate() {
            if d % s != 0 {
                return Err(Error::Dimension {
                    axis,
                    msg: format!("extent {d} is not divisible by {s}"),
                });
            }
        }
        let mut parts: Vec<Tensor<T>> = vec![volume_tensor(y_t)];
        parts.extend(cond.iter().map(volume_tensor));
        let score_parts: Vec<Tensor<T>> = scores.iter().map(|v| volume_tensor(v)).collect();
        parts.extend(score_parts.iter().cloned());
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let input = Tensor::concat_channels(&refs)?;
        let srefs: Vec<&Tensor<T>> = score_parts.iter().collect();
        let scores_t = Tensor::concat_channels(&srefs)?;
        let aligned = if self.cfg.injects() {
            let p = pyramids.ok_or_else(|| Error::Pyramid("feature injection needs branch pyramids".into()))?;
            let level_dims = self.cfg.level_dims(dims);
            let n = self.cfg.injection_channels.len();
            let a = align_features(p, &level_dims[..n])?;
            for (l, t) in a.iter().enumerate() {
                if t.shape()[1] != self.cfg.injection_channels[l] {
                    return Err(Error::Pyramid(format!(
                        "level {l}: {} pyramid channels, net expects {}",
                        t.shape()[1],
                        self.cfg.injection_channels[l]
                    )));
                }
            }
            a.iter().map(Tensor::cast).collect()
        } else {
            Vec::new()
        };
        Ok(FusionInputs {
            input,
            scores: scores_t,
            aligned,
            t,
        })
    }

    fn injections(&self, g: &mut Graph<'_, T>, inputs: &FusionInputs<T>) -> Result<Vec<Option<Var>>> {
        let mut out = Vec::new();
        for (id, a) in self.align.iter().zip(&inputs.aligned) {
            let w = g.param(*id);
            let x = g.input(a.clone());
            out.push(Some(g.conv(x, w, None, ConvSpec::pointwise())?));
        }
        Ok(out)
    }

    /// Values added to each encoder level, `[1, c_l, ...]`.
    pub fn injected_features(&self, inputs: &FusionInputs<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(&self.store);
        let inj = self.injections(&mut g, inputs)?;
        Ok(inj.into_iter().flatten().map(|v| g.value(v).clone()).collect())
    }

    /// Returns `(eps3d, head)` nodes.
    fn build(&self, g: &mut Graph<'_, T>, inputs: &FusionInputs<T>) -> Result<(Var, Var)> {
        let inject = self.injections(g, inputs)?;
        let x = g.input(inputs.input.clone());
        let head = self.unet.forward(g, x, &[inputs.t as f64], &inject)?.out;
        let k = self.cfg.branches;
        let lambda = T::cast(self.cfg.lambda);
        let r = g.slice_channels(head, self.cfg.out_channels() - 1, 1)?;
        let r = g.scale(r, lambda);
        let mixed = if k == 2 {
            let w = g.slice_channels(head, 0, 1)?;
            let s = &inputs.scores;
            let sz = s.len() / 2;
            let (a, b) = s.data().split_at(sz);
            let shape = [1, 1, s.shape()[2], s.shape()[3], s.shape()[4]];
            let diff = Tensor::from_vec(&shape, a.iter().zip(b).map(|(&p, &q)| p - q).collect())?;
            let half = T::cast(0.5);
            let mean = Tensor::from_vec(&shape, a.iter().zip(b).map(|(&p, &q)| half * p + half * q).collect())?;
            let wd = g.mul_const(w, diff)?;
            g.add_const(wd, &mean)?
        } else {
            let logits = g.slice_channels(head, 0, k)?;
            let p = g.softmax_channels(logits)?;
            let weighted = g.mul_const(p, inputs.scores.clone())?;
            g.sum_channels(weighted)?
        };
        Ok((g.add(mixed, r)?, head))
    }

    /// MSE between the fused score and `target` plus gradients; only this
    /// net's parameters are touched.
    pub fn loss(&self, inputs: &FusionInputs<T>, target: &Tensor<T>) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new(&self.store);
        let (eps, _) = self.build(&mut g, inputs)?;
        let l = g.mse(eps, target.clone())?;
        let value = g.value(l).data()[0].as_f64();
        Ok((value, g.backward(l)?))
    }

    /// Head output split into weight fields and residual.
    pub fn fuse_prepared(&self, inputs: &FusionInputs<T>, scores: &[&Volume]) -> Result<FusionOutput> {
        let mut g = Graph::new(&self.store);
        let (_, head) = self.build(&mut g, inputs)?;
        let head_t = g.value(head);
        let k = self.cfg.branches;
        let residual = channel_volume(head_t, self.cfg.out_channels() - 1)?;
        let coefficients: Vec<Volume> = if k == 2 {
            coefficients_from_w(&channel_volume(head_t, 0)?).into()
        } else {
            let logits = g.slice_channels(head, 0, k)?;
            let p = g.softmax_channels(logits)?;
            let pt = g.value(p).clone();
            (0..k).map(|c| channel_volume(&pt, c)).collect::<Result<_>>()?
        };
        let eps3d = combine(&coefficients, scores, &residual, self.cfg.lambda)?;
        Ok(FusionOutput {
            coefficients,
            residual,
            lambda: self.cfg.lambda,
            eps3d,
        })
    }

    pub fn forward_3d(
        &self,
        y_t: &Volume,
        cond: &[Volume],
        scores: &[&Volume],
        pyramids: Option<&[&[Tensor<f32>]]>,
        t: usize,
    ) -> Result<FusionOutput> {
        let inputs = self.prepare(y_t, cond, scores, pyramids, t)?;
        self.fuse_prepared(&inputs, scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny(branches: usize) -> Net3DConfig {
        Net3DConfig {
            levels: vec![4, 8],
            time_embed_dim: 16,
            ..Net3DConfig::small(1, branches)
        }
    }

    fn tiny_injecting() -> Net3DConfig {
        Net3DConfig {
            variant: Variant::Full,
            injection_channels: vec![6, 10],
            ..tiny(2)
        }
    }

    fn randomize_head(net: &mut Net3D<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["out.conv.weight", "out.conv.bias"] {
            let shape = net.store.get(net.store.id(name).unwrap()).shape().to_vec();
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            net.store.assign(name, Tensor::from_vec(&shape, v).unwrap()).unwrap();
        }
    }

    #[test]
    fn fresh_net_averages_exactly() {
        let net = build_net3d(tiny(2), 5).unwrap();
        let dims = [8, 8, 4];
        let (y, x, a, b) = (rand_volume(dims, 1), rand_volume(dims, 2), rand_volume(dims, 3), rand_volume(dims, 4));
        let out = net.forward_3d(&y, &[x], &[&a, &b], None, 300).unwrap();
        assert_eq!(out.w().max_abs_diff(&Volume::zeros(dims)).unwrap(), 0.0);
        assert_eq!(out.residual, Volume::zeros(dims));
        let avg = a.zip_map(&b, |p, q| 0.5 * p + 0.5 * q).unwrap();
        assert_eq!(out.eps3d, avg);
    }

    #[test]
    fn seeding_and_zero_head() {
        let a = build_net3d(tiny(2), 1).unwrap();
        let b = build_net3d(tiny(2), 1).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), build_net3d(tiny(2), 2).unwrap().checksum());
        for name in ["out.conv.weight", "out.conv.bias"] {
            assert_eq!(a.store.get(a.store.id(name).unwrap()).max_abs(), 0.0);
        }
    }

    #[test]
    fn forced_half_weight_selects_first_branch() {
        let mut net = build_net3d(Net3DConfig { lambda: 0.7, ..tiny(2) }, 3).unwrap();
        net.store.assign("out.conv.bias", Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap()).unwrap();
        let dims = [8, 8, 8];
        let (y, x, a, b) = (rand_volume(dims, 5), rand_volume(dims, 6), rand_volume(dims, 7), rand_volume(dims, 8));
        let out = net.forward_3d(&y, &[x], &[&a, &b], None, 10).unwrap();
        let want = a.map(|v| v + 0.7 * 0.25);
        assert!(out.eps3d.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn two_branch_algebra_and_complementarity() {
        let mut net = build_net3d(Net3DConfig { lambda: -1.3, ..tiny(2) }, 4).unwrap();
        randomize_head(&mut net, 9);
        let dims = [8, 8, 8];
        let (y, x, a, b) = (rand_volume(dims, 1), rand_volume(dims, 2), rand_volume(dims, 3), rand_volume(dims, 4));
        let out = net.forward_3d(&y, &[x], &[&a, &b], None, 77).unwrap();
        let w = out.w();
        assert!(w.data().iter().any(|v| v.abs() > 1e-3));
        for i in 0..w.len() {
            let (wv, r) = (w.data()[i] as f64, out.residual.data()[i] as f64);
            let (ea, eb) = (a.data()[i] as f64, b.data()[i] as f64);
            let want = (0.5 + wv) * ea + (0.5 - wv) * eb - 1.3 * r;
            assert!((out.eps3d.data()[i] as f64 - want).abs() <= 1e-6);
            let s = out.coefficients[0].data()[i] + out.coefficients[1].data()[i];
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_lambda_stays_on_segment_iff_w_bounded() {
        let dims = [4, 4, 4];
        let w = rand_volume(dims, 11).map(|v| v * 1.5);
        let (a, b) = (rand_volume(dims, 12), rand_volume(dims, 13).map(|v| v + 3.0));
        let eps = combine(&coefficients_from_w(&w), &[&a, &b], &Volume::zeros(dims), 0.0).unwrap();
        for i in 0..w.len() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            let e = eps.data()[i];
            let inside = e >= lo - 1e-6 && e <= hi + 1e-6;
            assert_eq!(inside, w.data()[i].abs() <= 0.5 + 1e-6, "voxel {i}");
        }
    }

    #[test]
    fn many_branches_start_uniform_and_sum_to_one() {
        let mut net = build_net3d(Net3DConfig { cond_channels: 2, ..tiny(4) }, 6).unwrap();
        let dims = [8, 4, 4];
        let y = rand_volume(dims, 1);
        let cond = vec![rand_volume(dims, 2), rand_volume(dims, 3)];
        let s: Vec<Volume> = (0..4).map(|k| rand_volume(dims, 10 + k)).collect();
        let sr: Vec<&Volume> = s.iter().collect();
        let out = net.forward_3d(&y, &cond, &sr, None, 5).unwrap();
        for c in &out.coefficients {
            assert!(c.data().iter().all(|&v| v == 0.25));
        }
        randomize_head(&mut net, 3);
        let out = net.forward_3d(&y, &cond, &sr, None, 5).unwrap();
        for i in 0..y.len() {
            let total: f32 = out.coefficients.iter().map(|c| c.data()[i]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stacking_follows_slice_axis() {
        // 4 slices, 1 channel, 2×3 planes, value = 100·slice + 10·row + col
        let mut data = Vec::new();
        for s in 0..4 {
            for r in 0..2 {
                for c in 0..3 {
                    data.push((100 * s + 10 * r + c) as f32);
                }
            }
        }
        let slices = Tensor::from_vec(&[4, 1, 1, 2, 3], data).unwrap();
        let a = stack_level(SliceAxis::Second, &slices, 1).unwrap();
        assert_eq!(a.shape(), &[1, 1, 2, 4, 3]);
        assert_eq!(a.data()[(4 + 2) * 3 + 1], 211.0);
        let b = stack_level(SliceAxis::Third, &slices, 2).unwrap();
        assert_eq!(b.shape(), &[1, 1, 2, 3, 2]);
        // mean of slices 2 and 3 at row 1, col 2
        assert_eq!(b.data()[(3 + 2) * 2 + 1], 262.0);
    }

    #[test]
    fn resampling_keeps_constants_and_matching_dims() {
        let x = Tensor::from_vec(&[1, 2, 2, 2, 2], (0..16).map(|i| if i < 8 { 3.0 } else { -1.0 }).collect()).unwrap();
        let up = resample_trilinear(&x, [4, 3, 5]).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 3, 5]);
        assert!(up.data()[..60].iter().all(|&v| v == 3.0));
        assert!(up.data()[60..].iter().all(|&v| v == -1.0));
        assert_eq!(resample_trilinear(&x, [2, 2, 2]).unwrap(), x);
    }

    fn pyramid(c: &[usize], dims: [usize; 3], value: f32) -> Vec<Tensor<f32>> {
        c.iter()
            .enumerate()
            .map(|(l, &ch)| {
                let d = dims.map(|v| v >> l);
                Tensor::full(&[1, ch, d[0], d[1], d[2]], value)
            })
            .collect()
    }

    #[test]
    fn aligned_levels_match_encoder_dims() {
        let dims = [32, 32, 24];
        let cfg = Net3DConfig {
            variant: Variant::Full,
            levels: vec![4, 4, 4, 4],
            injection_channels: vec![4, 4, 4, 4],
            ..tiny(2)
        };
        let level_dims = cfg.level_dims(dims);
        assert_eq!(level_dims, vec![[32, 32, 24], [16, 16, 12], [8, 8, 6], [4, 4, 3]]);
        let pa = pyramid(&[2, 2, 2, 2], dims, 1.0);
        let pb = pyramid(&[2, 2, 2, 2], dims, 2.0);
        let aligned = align_features(&[&pa, &pb], &level_dims).unwrap();
        for (t, d) in aligned.iter().zip(&level_dims) {
            assert_eq!(t.shape(), &[1, 4, d[0], d[1], d[2]]);
        }
        assert!(matches!(align_features(&[&pa[..2], &pb], &level_dims), Err(Error::Pyramid(_))));
    }

    #[test]
    fn injection_is_a_pointwise_linear_map() {
        let net = build_net3d(tiny_injecting(), 2).unwrap();
        let dims = [8, 8, 8];
        let y = rand_volume(dims, 1);
        let x = vec![rand_volume(dims, 2)];
        let (a, b) = (rand_volume(dims, 3), rand_volume(dims, 4));
        let zero_a = pyramid(&[3, 5], dims, 0.0);
        let zero_b = pyramid(&[3, 5], dims, 0.0);
        let inp = net.prepare(&y, &x, &[&a, &b], Some(&[&zero_a, &zero_b]), 9).unwrap();
        for t in net.injected_features(&inp).unwrap() {
            assert_eq!(t.max_abs(), 0.0);
        }
        let ca = pyramid(&[3, 5], dims, 0.5);
        let cb = pyramid(&[3, 5], dims, -2.0);
        let inp = net.prepare(&y, &x, &[&a, &b], Some(&[&ca, &cb]), 9).unwrap();
        let inj = net.injected_features(&inp).unwrap();
        for (l, t) in inj.iter().enumerate() {
            let w = net.store.get(net.store.id(&format!("align.{l}.weight")).unwrap());
            let cin = [6, 10][l];
            let na = cin / 2;
            let cout = t.shape()[1];
            let vox = t.len() / cout;
            for o in 0..cout {
                let want: f32 = (0..cin).map(|i| w.data()[o * cin + i] * if i < na { 0.5 } else { -2.0 }).sum();
                for v in &t.data()[o * vox..(o + 1) * vox] {
                    assert!((v - want).abs() < 1e-6);
                }
            }
        }
        assert!(matches!(net.prepare(&y, &x, &[&a, &b], None, 9), Err(Error::Pyramid(_))));
    }

    #[test]
    fn small_variant_ignores_pyramids() {
        let mut net = build_net3d(tiny(2), 8).unwrap();
        randomize_head(&mut net, 1);
        let dims = [8, 8, 8];
        let y = rand_volume(dims, 1);
        let x = vec![rand_volume(dims, 2)];
        let (a, b) = (rand_volume(dims, 3), rand_volume(dims, 4));
        let p = pyramid(&[3, 5], dims, 7.0);
        let with = net.forward_3d(&y, &x, &[&a, &b], Some(&[&p, &p]), 9).unwrap();
        let without = net.forward_3d(&y, &x, &[&a, &b], None, 9).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn oracle_scores_give_zero_loss() {
        let net = build_net3d(tiny(2), 0).unwrap();
        let dims = [8, 8, 8];
        let eps = rand_volume(dims, 5);
        let y = rand_volume(dims, 6);
        let inp = net.prepare(&y, &[rand_volume(dims, 7)], &[&eps, &eps], None, 400).unwrap();
        let target = Tensor::from_vec(&[1, 1, 8, 8, 8], eps.data().to_vec()).unwrap();
        let (l, _) = net.loss(&inp, &target).unwrap();
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn rejects_bad_dims() {
        let net = build_net3d(tiny(2), 0).unwrap();
        let v = rand_volume([8, 8, 5], 1);
        assert!(matches!(
            net.forward_3d(&v, std::slice::from_ref(&v), &[&v, &v], None, 1),
            Err(Error::Dimension { axis: 2, .. })
        ));
        let w = rand_volume([8, 8, 8], 1);
        assert!(net.forward_3d(&w, std::slice::from_ref(&v), &[&w, &w], None, 1).is_err());
        assert!(build_net3d(Net3DConfig { branches: 1, ..tiny(2) }, 0).is_err());
    }

    /// Small-variant rows with five input channels and a two-channel head.
    #[test]
    fn small_reference_parameter_count_matches_rows() {
        let e = 128;
        let c3 = |i: usize, o: usize| 27 * i * o + o;
        let res = |i: usize, o: usize| {
            let mut n = 2 * i + c3(i, o) + 2 * o + c3(o, o) + e * o + o;
            if i != o {
                n += i * o + o;
            }
            n
        };
        let want = c3(5, 32)
            + (32 * e + e)
            + (e * e + e)
            + res(32, 32) + res(32, 32) + c3(32, 32)
            + res(32, 64) + res(64, 64) + c3(64, 64)
            + res(64, 64) + res(64, 64) + c3(64, 64)
            + res(64, 128) + res(128, 128)
            + res(128, 128) + res(128, 128)
            + res(128, 128) + res(128, 128) + c3(128, 128)
            + res(128, 64) + res(64, 64) + c3(64, 64)
            + res(64, 64) + res(64, 64) + c3(64, 64)
            + res(64, 32) + res(32, 32)
            + 2 * 32 + c3(32, 2);
        let net = build_net3d(Net3DConfig::small(2, 2), 0).unwrap();
        assert_eq!(net.parameter_count(), want);
    }
}
