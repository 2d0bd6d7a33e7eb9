//! Slice-wise evaluation of a planar denoiser over a whole volume.

use scorefusion_tensor::Tensor;

use crate::error::{Error, Result};
use crate::net2d::Net2D;
use crate::net3d::stack_level;
use crate::volume::{SliceAxis, Volume};

/// A branch's full-volume score and, on request, its stacked pyramid
/// (`levels[l]` is `[1, c_l, ...]`, pooled along the slice axis).
#[derive(Debug, Clone)]
pub struct BranchVolume {
    pub eps: Volume,
    pub pyramid: Option<Vec<Tensor<f32>>>,
}

/// Anything that predicts a full-volume noise estimate from `y_t`.
pub trait ScoreBranch: Send + Sync {
    fn axis(&self) -> SliceAxis;

    /// `cond` holds every condition volume of the task; a branch picks the
    /// ones it was trained on.
    fn predict(&self, y_t: &Volume, cond: &[Volume], t: usize, features: bool) -> Result<BranchVolume>;
}

/// A trained planar net bound to a slicing axis and its condition volumes.
#[derive(Debug, Clone)]
pub struct Branch2D {
    pub net: Net2D<f32>,
    pub axis: SliceAxis,
    /// Indices into the task's condition list.
    pub conditions: Vec<usize>,
    /// Slices per batched forward.
    pub chunk: usize,
}

impl Branch2D {
    pub fn new(net: Net2D<f32>, axis: SliceAxis, conditions: Vec<usize>) -> Self {
        Self {
            net,
            axis,
            conditions,
            chunk: 16,
        }
    }
}

/// Slices `range` of `v` along `axis` as `[n, 1, 1, rows, cols]`.
pub fn slice_batch(v: &Volume, axis: SliceAxis, range: std::ops::Range<usize>) -> Tensor<f32> {
    let dims = v.dims();
    let (rows, cols) = axis.plane_dims(dims);
    let mut data = Vec::with_capacity(range.len() * rows * cols);
    for s in range.clone() {
        for r in 0..rows {
            for c in 0..cols {
                data.push(match axis {
                    SliceAxis::Second => v.get(r, s, c),
                    SliceAxis::Third => v.get(r, c, s),
                });
            }
        }
    }
    Tensor::from_vec(&[range.len(), 1, 1, rows, cols], data).expect("slice batch shape")
}

/// Writes `[n, 1, 1, rows, cols]` planes back as slices `start..start + n`.
fn scatter_slices(out: &mut [f32], dims: [usize; 3], axis: SliceAxis, start: usize, planes: &Tensor<f32>) {
    let (rows, cols) = axis.plane_dims(dims);
    let n = planes.shape()[0];
    for s in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                let (i, j, k) = match axis {
                    SliceAxis::Second => (r, start + s, c),
                    SliceAxis::Third => (r, c, start + s),
                };
                out[(i * dims[1] + j) * dims[2] + k] = planes.data()[(s * rows + r) * cols + c];
            }
        }
    }
}

impl ScoreBranch for Branch2D {
    fn axis(&self) -> SliceAxis {
        self.axis
    }

    fn predict(&self, y_t: &Volume, cond: &[Volume], t: usize, features: bool) -> Result<BranchVolume> {
        let dims = y_t.dims();
        let picked = self
            .conditions
            .iter()
            .map(|&i| {
                cond.get(i)
                    .ok_or_else(|| Error::Config(format!("branch wants condition {i}, task has {}", cond.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        if picked.len() != self.net.cfg.cond_channels {
            return Err(Error::Config(format!(
                "branch bound to {} conditions, net takes {}",
                picked.len(),
                self.net.cfg.cond_channels
            )));
        }
        for c in &picked {
            c.expect_dims(dims)?;
        }
        let count = self.axis.count(dims);
        let mut eps = vec![0.0f32; y_t.len()];
        let mut levels: Vec<Vec<Tensor<f32>>> = Vec::new();
        let chunk = self.chunk.max(1);
        let mut start = 0;
        while start < count {
            let end = (start + chunk).min(count);
            let y = slice_batch(y_t, self.axis, start..end);
            let xs: Vec<Tensor<f32>> = picked.iter().map(|c| slice_batch(c, self.axis, start..end)).collect();
            let xr: Vec<&Tensor<f32>> = xs.iter().collect();
            let x = Tensor::concat_channels(&xr)?;
            let out = self.net.forward(&y, &x, &vec![t; end - start])?;
            scatter_slices(&mut eps, dims, self.axis, start, &out.eps_hat);
            if features {
                levels.resize_with(out.features.len(), Vec::new);
                for (l, f) in out.features.into_iter().enumerate() {
                    levels[l].push(f);
                }
            }
            start = end;
        }
        let pyramid = if features {
            let mut p = Vec::with_capacity(levels.len());
            for (l, parts) in levels.iter().enumerate() {
                let refs: Vec<&Tensor<f32>> = parts.iter().collect();
                let all = Tensor::concat_batch(&refs)?;
                p.push(stack_level(self.axis, &all, 1 << l)?);
            }
            Some(p)
        } else {
            None
        };
        Ok(BranchVolume {
            eps: Volume::new(dims, eps)?,
            pyramid,
        })
    }
}

/// Every branch's prediction at `(y_t, t)`, in branch order.
pub fn precompute_branch_outputs(
    branches: &[&dyn ScoreBranch],
    y_t: &Volume,
    cond: &[Volume],
    t: usize,
    features: bool,
) -> Result<Vec<BranchVolume>> {
    branches.iter().map(|b| b.predict(y_t, cond, t, features)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net2d::{build_net2d, Net2DConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg() -> Net2DConfig {
        Net2DConfig {
            channel_multipliers: vec![1, 2],
            ..Net2DConfig::with_base(1, 4)
        }
    }

    #[test]
    fn zero_head_branches_predict_zero() {
        let net = build_net2d(Net2DConfig { zero_head: true, ..cfg() }, 0).unwrap();
        let dims = [8, 6, 4];
        let y = rand_volume(dims, 1);
        let x = vec![rand_volume(dims, 2)];
        let a = Branch2D::new(net.clone(), SliceAxis::Second, vec![0]);
        let b = Branch2D::new(net, SliceAxis::Third, vec![0]);
        for out in precompute_branch_outputs(&[&a, &b], &y, &x, 100, false).unwrap() {
            assert_eq!(out.eps, Volume::zeros(dims));
        }
    }

    #[test]
    fn chunking_matches_slice_by_slice() {
        let net = build_net2d(cfg(), 3).unwrap();
        let dims = [8, 6, 4];
        let y = rand_volume(dims, 4);
        let x = vec![rand_volume(dims, 5)];
        for axis in SliceAxis::BOTH {
            let batched = Branch2D::new(net.clone(), axis, vec![0]);
            let single = Branch2D {
                chunk: 1,
                ..batched.clone()
            };
            let p = batched.predict(&y, &x, 250, true).unwrap();
            let q = single.predict(&y, &x, 250, true).unwrap();
            assert!(p.eps.max_abs_diff(&q.eps).unwrap() <= 1e-5);
            // explicit loop over slices, written back by index
            let mut reference = vec![0.0f32; y.len()];
            for s in 0..axis.count(dims) {
                let out = net
                    .forward(&slice_batch(&y, axis, s..s + 1), &slice_batch(&x[0], axis, s..s + 1), &[250])
                    .unwrap();
                let (rows, cols) = axis.plane_dims(dims);
                for r in 0..rows {
                    for c in 0..cols {
                        let idx = match axis {
                            SliceAxis::Second => y.index(r, s, c),
                            SliceAxis::Third => y.index(r, c, s),
                        };
                        reference[idx] = out.eps_hat.data()[r * cols + c];
                    }
                }
            }
            let reference = Volume::new(dims, reference).unwrap();
            assert!(p.eps.max_abs_diff(&reference).unwrap() <= 1e-5);
            let pyr = p.pyramid.unwrap();
            assert_eq!(pyr[0].shape(), &[1, 4, 8, 6, 4]);
            assert_eq!(pyr[1].shape(), &[1, 8, 4, 3, 2]);
        }
    }

    #[test]
    fn slice_order_does_not_matter() {
        let net = build_net2d(cfg(), 6).unwrap();
        let dims = [4, 8, 8];
        let y = rand_volume(dims, 7);
        let x = rand_volume(dims, 8);
        let b = Branch2D::new(net, SliceAxis::Third, vec![0]);
        let forward = b.predict(&y, std::slice::from_ref(&x), 40, false).unwrap().eps;
        // reverse the slice axis, predict, reverse back
        let flip = |v: &Volume| Volume::from_fn(dims, |i, j, k| v.get(i, j, dims[2] - 1 - k)).unwrap();
        let back = b.predict(&flip(&y), &[flip(&x)], 40, false).unwrap().eps;
        assert!(flip(&back).max_abs_diff(&forward).unwrap() <= 1e-6);
    }

    #[test]
    fn condition_binding_is_checked() {
        let net = build_net2d(cfg(), 0).unwrap();
        let y = rand_volume([4, 4, 4], 1);
        let b = Branch2D::new(net, SliceAxis::Second, vec![1]);
        assert!(matches!(b.predict(&y, std::slice::from_ref(&y), 1, false), Err(Error::Config(_))));
    }
}
