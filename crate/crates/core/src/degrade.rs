//! Degradation operators and the consistency projection used by the sampler
//! for super-resolution.

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeKind {
    /// Block average over `factor`, broadcast back to full resolution.
    AvgPoolResize,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradationOperator {
    pub kind: DegradeKind,
    pub factor: [usize; 3],
}

/// Tolerance on `|Ax - x|` when checking that `x` lies in the range of `A`.
pub const RANGE_TOLERANCE: f64 = 1e-5;

impl Default for DegradationOperator {
    fn default() -> Self {
        Self::avg_pool(4)
    }
}

impl DegradationOperator {
    pub fn avg_pool(factor: usize) -> Self {
        Self {
            kind: DegradeKind::AvgPoolResize,
            factor: [factor; 3],
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: DegradeKind::Identity,
            factor: [1; 3],
        }
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            let f = self.factor[axis];
            if f == 0 || !dims[axis].is_multiple_of(f) {
                return Err(Error::Dimension {
                    axis,
                    msg: format!("extent {} is not divisible by factor {f}", dims[axis]),
                });
            }
        }
        Ok(())
    }

    /// Block means at reduced resolution, `dims / factor`.
    pub fn pool(&self, y: &Volume) -> Result<Volume> {
        self.check_dims(y.dims())?;
        let d = y.dims();
        let f = self.factor;
        let out = [d[0] / f[0], d[1] / f[1], d[2] / f[2]];
        let mut acc = vec![0.0f64; out.iter().product()];
        for i in 0..d[0] {
            for j in 0..d[1] {
                let row = (i / f[0] * out[1] + j / f[1]) * out[2];
                for k in 0..d[2] {
                    acc[row + k / f[2]] += y.get(i, j, k) as f64;
                }
            }
        }
        let n = (f[0] * f[1] * f[2]) as f64;
        Volume::new(out, acc.into_iter().map(|s| (s / n) as f32).collect())
    }

    pub fn apply(&self, y: &Volume) -> Result<Volume> {
        match self.kind {
            DegradeKind::Identity => Ok(y.clone()),
            DegradeKind::AvgPoolResize => {
                let pooled = self.pool(y)?;
                let f = self.factor;
                Volume::from_fn(y.dims(), |i, j, k| pooled.get(i / f[0], j / f[1], k / f[2]))
            }
        }
    }

    /// `max |Ax - x|`.
    pub fn range_residual(&self, x: &Volume) -> Result<f64> {
        Ok(self.apply(x)?.max_abs_diff(x)? as f64)
    }

    /// `ŷ0 - (Aŷ0 - x)`. Exact only because `A` is idempotent, so `x` must lie in
    /// the range of `A`.
    pub fn project_consistency(&self, y0_hat: &Volume, x: &Volume) -> Result<Volume> {
        y0_hat.expect_dims(x.dims())?;
        let residual = self.range_residual(x)?;
        if residual > RANGE_TOLERANCE {
            return Err(Error::ConsistencyDomain { residual });
        }
        let a = self.apply(y0_hat)?;
        Volume::new(
            x.dims(),
            y0_hat
                .data()
                .iter()
                .zip(a.data())
                .zip(x.data())
                .map(|((&y, &ay), &xv)| y - (ay - xv))
                .collect(),
        )
    }
}
