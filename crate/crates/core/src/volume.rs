//! Volumes, planar slicing along the two sliced axes, cropping and intensity
//! rescaling.
//!
//! Voxels are stored in C order: the last axis varies fastest, so voxel
//! `(i, j, k)` of a `(b1, b2, b3)` volume lives at `(i * b2 + j) * b3 + k`.

use crate::error::{Error, Result};

/// Closed intensity interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    /// Intensities the networks see.
    pub const MODEL: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    /// Intensities metrics are computed in.
    pub const METRIC: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Range(format!("degenerate range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    range: Option<ValueRange>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::Dimension {
                    axis,
                    msg: "extent must be positive".into(),
                });
            }
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            data,
            range: None,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
            range: None,
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data)
    }

    /// Declare the intensity interval; every voxel is checked once here.
    pub fn with_range(mut self, range: ValueRange) -> Result<Self> {
        if let Some(index) = self.data.iter().position(|&v| !range.contains(v)) {
            return Err(Error::Range(format!(
                "voxel {index} = {} outside [{}, {}]",
                self.data[index], range.lo, range.hi
            )));
        }
        self.range = Some(range);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn range(&self) -> Option<ValueRange> {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Elementwise map; drops any declared range.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            range: None,
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_dims(other.dims)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            range: None,
        })
    }

    pub fn expect_dims(&self, dims: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.dims[axis] != dims[axis] {
                return Err(Error::Dimension {
                    axis,
                    msg: format!("expected {}, got {}", dims[axis], self.dims[axis]),
                });
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Volume) -> Result<f32> {
        self.expect_dims(other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp(&self, range: ValueRange) -> Self {
        let mut out = self.map(|v| v.clamp(range.lo, range.hi));
        out.range = Some(range);
        out
    }

    /// Sub-volume at `origin` with extent `extent`.
    pub fn sub_volume(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        for axis in 0..3 {
            if extent[axis] == 0 || origin[axis] + extent[axis] > self.dims[axis] {
                return Err(Error::Dimension {
                    axis,
                    msg: format!(
                        "origin {} + extent {} exceeds {}",
                        origin[axis], extent[axis], self.dims[axis]
                    ),
                });
            }
        }
        let mut data = Vec::with_capacity(extent.iter().product());
        for i in 0..extent[0] {
            for j in 0..extent[1] {
                let start = self.index(origin[0] + i, origin[1] + j, origin[2]);
                data.extend_from_slice(&self.data[start..start + extent[2]]);
            }
        }
        Ok(Self {
            dims: extent,
            data,
            range: self.range,
        })
    }
}

/// Centered crop; an odd margin drops its extra voxel on the high-index side.
pub fn center_crop(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let dims = v.dims();
    let mut origin = [0; 3];
    for axis in 0..3 {
        if target[axis] > dims[axis] {
            return Err(Error::Dimension {
                axis,
                msg: format!("crop target {} exceeds extent {}", target[axis], dims[axis]),
            });
        }
        origin[axis] = (dims[axis] - target[axis]) / 2;
    }
    v.sub_volume(origin, target)
}

/// Offsets [`center_crop`] uses.
pub fn center_crop_origin(dims: [usize; 3], target: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].saturating_sub(target[a]) / 2)
}

/// One of the two sliced axes: `Second` gives `v[:, i, :]`, `Third` gives `v[:, :, j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceAxis {
    Second,
    Third,
}

impl SliceAxis {
    pub const BOTH: [SliceAxis; 2] = [SliceAxis::Second, SliceAxis::Third];

    /// Zero-based volume axis index (1 or 2).
    pub fn index(self) -> usize {
        match self {
            SliceAxis::Second => 1,
            SliceAxis::Third => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(SliceAxis::Second),
            2 => Ok(SliceAxis::Third),
            _ => Err(Error::Config(format!("slice axis must be 1 or 2, got {i}"))),
        }
    }

    /// In-plane `(rows, cols)` of a slice of a volume with `dims`.
    pub fn plane_dims(self, dims: [usize; 3]) -> (usize, usize) {
        match self {
            SliceAxis::Second => (dims[0], dims[2]),
            SliceAxis::Third => (dims[0], dims[1]),
        }
    }

    pub fn count(self, dims: [usize; 3]) -> usize {
        dims[self.index()]
    }
}

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub axis: SliceAxis,
    pub slices: Vec<Plane>,
    /// Dims of the source volume.
    pub source_dims: [usize; 3],
}

impl SliceStack {
    pub fn count(&self) -> usize {
        self.slices.len()
    }
}

pub fn extract_slices(v: &Volume, axis: SliceAxis) -> SliceStack {
    let dims = v.dims();
    let (rows, cols) = axis.plane_dims(dims);
    let slices = (0..axis.count(dims))
        .map(|s| {
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(match axis {
                        SliceAxis::Second => v.get(r, s, c),
                        SliceAxis::Third => v.get(r, c, s),
                    });
                }
            }
            Plane { rows, cols, data }
        })
        .collect();
    SliceStack {
        axis,
        slices,
        source_dims: dims,
    }
}

pub fn reassemble(stack: &SliceStack) -> Result<Volume> {
    let dims = stack.source_dims;
    let axis = stack.axis;
    if stack.count() != axis.count(dims) {
        return Err(Error::Dimension {
            axis: axis.index(),
            msg: format!("{} slices for extent {}", stack.count(), axis.count(dims)),
        });
    }
    let (rows, cols) = axis.plane_dims(dims);
    let mut data = vec![0.0; dims.iter().product()];
    for (s, plane) in stack.slices.iter().enumerate() {
        if (plane.rows, plane.cols) != (rows, cols) || plane.data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "slice {s} is {}x{}, expected {rows}x{cols}",
                plane.rows, plane.cols
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                let (i, j, k) = match axis {
                    SliceAxis::Second => (r, s, c),
                    SliceAxis::Third => (r, c, s),
                };
                data[(i * dims[1] + j) * dims[2] + k] = plane.data[r * cols + c];
            }
        }
    }
    Volume::new(dims, data)
}

/// Axis-aligned patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl PatchSpec {
    /// Extents must be multiples of 8 (three stride-2 stages) and fit in `dims`.
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.extent[axis] == 0 || !self.extent[axis].is_multiple_of(8) {
                return Err(Error::Dimension {
                    axis,
                    msg: format!("patch extent {} is not a positive multiple of 8", self.extent[axis]),
                });
            }
            if self.origin[axis] + self.extent[axis] > dims[axis] {
                return Err(Error::Dimension {
                    axis,
                    msg: format!(
                        "patch {}+{} exceeds extent {}",
                        self.origin[axis], self.extent[axis], dims[axis]
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Crop a condition/target pair with the same patch.
pub fn crop_patch(pair: (&Volume, &Volume), spec: PatchSpec) -> Result<(Volume, Volume)> {
    let (a, b) = pair;
    if a.dims() != b.dims() {
        return Err(Error::Pairing {
            a: a.dims(),
            b: b.dims(),
        });
    }
    spec.validate(a.dims())?;
    Ok((
        a.sub_volume(spec.origin, spec.extent)?,
        b.sub_volume(spec.origin, spec.extent)?,
    ))
}

/// Affine map of `from` onto `to`.
pub fn normalize(v: &Volume, from: ValueRange, to: ValueRange) -> Result<Volume> {
    if !(from.hi > from.lo) {
        return Err(Error::Range(format!("degenerate source range [{}, {}]", from.lo, from.hi)));
    }
    let scale = (to.hi as f64 - to.lo as f64) / (from.hi as f64 - from.lo as f64);
    let (flo, tlo) = (from.lo as f64, to.lo as f64);
    Ok(v.map(|x| ((x as f64 - flo) * scale + tlo) as f32))
}

/// Inverse of [`normalize`].
pub fn denormalize(v: &Volume, from: ValueRange, to: ValueRange) -> Result<Volume> {
    normalize(v, to, from)
}
