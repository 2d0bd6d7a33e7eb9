use rayon::prelude::*;

use crate::error::{invalid, Result, TensorError};
use crate::float::{matmul, Float};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Wrap-around padding. Only used to test shift equivariance.
    Circular,
}

/// Geometry of a rank-3 convolution. Planar convolutions use `kernel[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub pad_mode: PadMode,
}

impl ConvSpec {
    /// `k×k×k` (or `1×k×k` when `planar`), "same" padding.
    pub fn same(k: usize, planar: bool) -> Self {
        let p = k / 2;
        if planar {
            Self {
                kernel: [1, k, k],
                stride: [1, 1, 1],
                pad: [0, p, p],
                pad_mode: PadMode::Zero,
            }
        } else {
            Self {
                kernel: [k, k, k],
                stride: [1, 1, 1],
                pad: [p, p, p],
                pad_mode: PadMode::Zero,
            }
        }
    }

    /// 3-wide kernel with stride 2 on every convolved axis.
    pub fn down(planar: bool) -> Self {
        let mut s = Self::same(3, planar);
        s.stride = if planar { [1, 2, 2] } else { [2, 2, 2] };
        s
    }

    pub fn pointwise() -> Self {
        Self {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(invalid(
                    "conv",
                    format!(
                        "axis {a}: input {} with pad {} is smaller than kernel {}",
                        input[a], self.pad[a], self.kernel[a]
                    ),
                ));
            }
            if self.pad_mode == PadMode::Circular && self.pad[a] > input[a] {
                return Err(invalid("conv", "circular pad wider than the input"));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Source coordinate of an output tap, or `None` when it falls in zero padding.
#[inline]
fn source(o: usize, tap: usize, stride: usize, pad: usize, len: usize, mode: PadMode) -> Option<usize> {
    let i = (o * stride + tap) as isize - pad as isize;
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else if mode == PadMode::Circular {
        Some(i.rem_euclid(len as isize) as usize)
    } else {
        None
    }
}

/// One batch item `[C, D, H, W]` to a `[C·taps, P]` column matrix.
fn im2col<T: Float>(x: &[T], c: usize, dims: [usize; 3], spec: &ConvSpec, out: [usize; 3], col: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = spec.kernel;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = source(z, a, spec.stride[0], spec.pad[0], d, spec.pad_mode);
                        for y in 0..oh {
                            let iy = source(y, b, spec.stride[1], spec.pad[1], h, spec.pad_mode);
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let base = (iz * h + iy) * w;
                                    for xx in 0..ow {
                                        dst[idx] = match source(xx, e, spec.stride[2], spec.pad[2], w, spec.pad_mode) {
                                            Some(ix) => xc[base + ix],
                                            None => T::zero(),
                                        };
                                        idx += 1;
                                    }
                                }
                                _ => {
                                    dst[idx..idx + ow].iter_mut().for_each(|v| *v = T::zero());
                                    idx += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, D, H, W]`.
fn col2im<T: Float>(col: &[T], c: usize, dims: [usize; 3], spec: &ConvSpec, out: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = spec.kernel;
    let [od, oh, ow] = out;
    let p = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = source(z, a, spec.stride[0], spec.pad[0], d, spec.pad_mode);
                        for y in 0..oh {
                            let iy = source(y, b, spec.stride[1], spec.pad[1], h, spec.pad_mode);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let base = (iz * h + iy) * w;
                                for xx in 0..ow {
                                    if let Some(ix) = source(xx, e, spec.stride[2], spec.pad[2], w, spec.pad_mode) {
                                        xc[base + ix] = xc[base + ix] + src[idx];
                                    }
                                    idx += 1;
                                }
                            } else {
                                idx += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) struct ConvShapes {
    n: usize,
    c: usize,
    o: usize,
    dims: [usize; 3],
    out: [usize; 3],
}

pub(crate) fn conv_shapes<T: Float>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<ConvShapes> {
    let [n, c, d, h, wd] = x.dims5()?;
    let ws = w.shape();
    let expected = [ws.first().copied().unwrap_or(0), c, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
    if ws != expected {
        return Err(TensorError::Shape {
            op: "conv weight",
            expected: expected.to_vec(),
            got: ws.to_vec(),
        });
    }
    let out = spec.output_dims([d, h, wd])?;
    Ok(ConvShapes {
        n,
        c,
        o: ws[0],
        dims: [d, h, wd],
        out,
    })
}

pub(crate) fn conv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = conv_shapes(x, w, spec)?;
    if let Some(b) = bias {
        b.expect_shape("conv bias", &[s.o])?;
    }
    let in_item = s.c * s.dims.iter().product::<usize>();
    let p: usize = s.out.iter().product();
    let ck = s.c * spec.taps();
    let mut out = vec![T::zero(); s.n * s.o * p];
    let gather = !spec.is_identity_gather();
    out.par_chunks_mut(s.o * p)
        .zip(x.data().par_chunks(in_item))
        .for_each(|(y, xi)| {
            let mut col_buf;
            let col: &[T] = if gather {
                col_buf = vec![T::zero(); ck * p];
                im2col(xi, s.c, s.dims, spec, s.out, &mut col_buf);
                &col_buf
            } else {
                xi
            };
            matmul(s.o, ck, p, w.data(), false, col, false, y, false);
            if let Some(b) = bias {
                for (oc, row) in y.chunks_mut(p).enumerate() {
                    let bv = b.data()[oc];
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    Tensor::from_vec(&[s.n, s.o, s.out[0], s.out[1], s.out[2]], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let s = conv_shapes(x, w, spec)?;
    let in_item = s.c * s.dims.iter().product::<usize>();
    let p: usize = s.out.iter().product();
    let ck = s.c * spec.taps();
    let gather = !spec.is_identity_gather();

    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|b| {
            let xi = &x.data()[b * in_item..(b + 1) * in_item];
            let dyi = &dy.data()[b * s.o * p..(b + 1) * s.o * p];
            let col_buf;
            let col: &[T] = if gather {
                let mut buf = vec![T::zero(); ck * p];
                im2col(xi, s.c, s.dims, spec, s.out, &mut buf);
                col_buf = buf;
                &col_buf
            } else {
                xi
            };
            let mut dw = vec![T::zero(); s.o * ck];
            matmul(s.o, p, ck, dyi, false, col, true, &mut dw, false);
            let db: Vec<T> = dyi.chunks(p).map(|r| r.iter().copied().sum()).collect();
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); ck * p];
                matmul(ck, s.o, p, w.data(), true, dyi, false, &mut dcol, false);
                if gather {
                    let mut dx = vec![T::zero(); in_item];
                    col2im(&dcol, s.c, s.dims, spec, s.out, &mut dx);
                    dx
                } else {
                    dcol
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); s.o * ck];
    let mut db = vec![T::zero(); s.o];
    let mut dx = need_dx.then(|| Vec::with_capacity(s.n * in_item));
    // Ordered reduction keeps results independent of the worker count.
    for (pw, pb, px) in partials {
        for (a, v) in dw.iter_mut().zip(pw) {
            *a = *a + v;
        }
        for (a, v) in db.iter_mut().zip(pb) {
            *a = *a + v;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend(px);
        }
    }
    Ok(ConvGrads {
        dx: dx
            .map(|d| Tensor::from_vec(x.shape(), d))
            .transpose()?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[s.o], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
        let [n, c, d, h, wd] = x.dims5().unwrap();
        let o = w.shape()[0];
        let [od, oh, ow] = spec.output_dims([d, h, wd]).unwrap();
        let mut out = Tensor::zeros(&[n, o, od, oh, ow]);
        let [kd, kh, kw] = spec.kernel;
        for bn in 0..n {
            for oc in 0..o {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.data()[oc];
                            for ci in 0..c {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let iz = source(z, a, spec.stride[0], spec.pad[0], d, spec.pad_mode);
                                            let iy = source(y, bb, spec.stride[1], spec.pad[1], h, spec.pad_mode);
                                            let ix = source(xx, e, spec.stride[2], spec.pad[2], wd, spec.pad_mode);
                                            if let (Some(iz), Some(iy), Some(ix)) = (iz, iy, ix) {
                                                let xv = x.data()[(((bn * c + ci) * d + iz) * h + iy) * wd + ix];
                                                let wv = w.data()[(((oc * c + ci) * kd + a) * kh + bb) * kw + e];
                                                acc = acc + xv * wv;
                                            }
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bn * o + oc) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn gemm_path_matches_naive_loops() {
        let specs = [
            ConvSpec::same(3, false),
            ConvSpec::same(3, true),
            ConvSpec::down(false),
            ConvSpec::down(true),
            ConvSpec::pointwise(),
            ConvSpec::same(3, false).with_pad_mode(PadMode::Circular),
        ];
        for spec in specs {
            let x = ramp(&[2, 3, 4, 6, 4], 2.0);
            let w = ramp(&[5, 3, spec.kernel[0], spec.kernel[1], spec.kernel[2]], 1.0);
            let b = ramp(&[5], 1.0);
            let fast = conv_forward(&x, &w, Some(&b), &spec).unwrap();
            let slow = naive(&x, &w, &b, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{spec:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn strided_output_dims() {
        let s = ConvSpec::down(false);
        assert_eq!(s.output_dims([16, 16, 8]).unwrap(), [8, 8, 4]);
        let s = ConvSpec::down(true);
        assert_eq!(s.output_dims([1, 16, 8]).unwrap(), [1, 8, 4]);
    }

    #[test]
    fn weight_shape_is_checked() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[3, 4, 1, 3, 3]);
        assert!(conv_forward(&x, &w, None, &ConvSpec::same(3, true)).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let spec = ConvSpec::down(false);
        let dims = [4, 6, 4];
        let out = spec.output_dims(dims).unwrap();
        let c = 2;
        let p: usize = out.iter().product();
        let x = ramp(&[c * 96], 1.0);
        let cols = ramp(&[c * 27 * p], 3.0);
        let mut gathered = vec![0.0; c * 27 * p];
        im2col(x.data(), c, dims, &spec, out, &mut gathered);
        let mut scattered = vec![0.0; c * 96];
        col2im(cols.data(), c, dims, &spec, out, &mut scattered);
        let lhs: f64 = gathered.iter().zip(cols.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&scattered).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
