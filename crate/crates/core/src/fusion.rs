//! Ways of turning branch scores into one volumetric score.

use scorefusion_tensor::Tensor;

use crate::branch::BranchVolume;
use crate::error::{Error, Result};
use crate::net3d::{combine, FusionOutput, Net3D};
use crate::volume::Volume;

pub trait Fusion: Send + Sync {
    /// Whether [`Fusion::fuse`] reads branch pyramids.
    fn wants_features(&self) -> bool;

    fn fuse(&self, y_t: &Volume, cond: &[Volume], branches: &[BranchVolume], t: usize) -> Result<FusionOutput>;
}

/// Uniform weights, no residual: the plain score average.
#[derive(Debug, Clone, Copy, Default)]
pub struct AverageFusion;

impl Fusion for AverageFusion {
    fn wants_features(&self) -> bool {
        false
    }

    fn fuse(&self, _y_t: &Volume, _cond: &[Volume], branches: &[BranchVolume], _t: usize) -> Result<FusionOutput> {
        let first = branches.first().ok_or_else(|| Error::Config("no branches to average".into()))?;
        let dims = first.eps.dims();
        let w = 1.0 / branches.len() as f32;
        let coefficients = vec![Volume::filled(dims, w); branches.len()];
        let residual = Volume::zeros(dims);
        let scores: Vec<&Volume> = branches.iter().map(|b| &b.eps).collect();
        let eps3d = combine(&coefficients, &scores, &residual, 0.0)?;
        Ok(FusionOutput {
            coefficients,
            residual,
            lambda: 0.0,
            eps3d,
        })
    }
}

impl Fusion for Net3D<f32> {
    fn wants_features(&self) -> bool {
        self.cfg.injects()
    }

    fn fuse(&self, y_t: &Volume, cond: &[Volume], branches: &[BranchVolume], t: usize) -> Result<FusionOutput> {
        let scores: Vec<&Volume> = branches.iter().map(|b| &b.eps).collect();
        let pyramids: Option<Vec<&[Tensor<f32>]>> = if self.cfg.injects() {
            Some(
                branches
                    .iter()
                    .enumerate()
                    .map(|(k, b)| {
                        b.pyramid
                            .as_deref()
                            .ok_or_else(|| Error::Pyramid(format!("branch {k} produced no pyramid")))
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        self.forward_3d(y_t, cond, &scores, pyramids.as_deref(), t)
    }
}
