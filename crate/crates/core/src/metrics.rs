//! Evaluation metrics. Volumes are compared in metric range `[0, 1]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::degrade::DegradationOperator;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// `10·log10(1 / MSE)`; `+∞` for identical volumes.
pub fn psnr(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.expect_dims(gt.dims())?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output dims shrink by `window - 1`.
fn filter_valid(data: &[f64], dims: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let mut cur = data.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - k;
        let mut out = vec![0.0; nd.iter().product()];
        let stride = match axis {
            0 => d[1] * d[2],
            1 => d[2],
            _ => 1,
        };
        for i in 0..nd[0] {
            for j in 0..nd[1] {
                for l in 0..nd[2] {
                    let base = (i * d[1] + j) * d[2] + l;
                    let mut acc = 0.0;
                    for (t, w) in taps.iter().enumerate() {
                        acc += w * cur[base + t * stride];
                    }
                    out[(i * nd[1] + j) * nd[2] + l] = acc;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean local SSIM over every position where the 7³ Gaussian window fits.
pub fn ssim3d(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.expect_dims(gt.dims())?;
    let dims = pred.dims();
    for (axis, &d) in dims.iter().enumerate() {
        if d < SSIM_WINDOW {
            return Err(Error::Dimension {
                axis,
                msg: format!("extent {d} is smaller than the {SSIM_WINDOW}-voxel window"),
            });
        }
    }
    let taps = gaussian_taps();
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, _) = filter_valid(&x, dims, &taps);
    let (my, _) = filter_valid(&y, dims, &taps);
    let (sxx, _) = filter_valid(&prod(&x, &x), dims, &taps);
    let (syy, _) = filter_valid(&prod(&y, &y), dims, &taps);
    let (sxy, _) = filter_valid(&prod(&x, &y), dims, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        total += ((2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / n as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    Ok(d)
}

/// Median Euclidean distance over all distinct pairs of the pooled set.
pub fn median_pairwise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Biased MMD² with an RBF kernel of bandwidth `h`.
pub fn mmd_with_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Result<f64> {
    check_sets(a, b)?;
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * h * h)).exp();
    let mean_k = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += k(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    Ok((mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)).max(0.0))
}

/// Bandwidth is the pooled median pairwise distance (1 if that is zero).
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let h = median_pairwise_distance(a, b);
    mmd_with_bandwidth(a, b, if h > 0.0 { h } else { 1.0 })
}

fn mean_cov(set: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

pub const FID_EPS: f64 = 1e-6;

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` with `1e-6·I` added to both
/// covariances. The cross term uses `Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`, which is
/// symmetric and shares its eigenvalues with `Σ₁Σ₂`.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(a, b)?;
    let (m1, mut s1) = mean_cov(a, d);
    let (m2, mut s2) = mean_cov(b, d);
    let reg = DMatrix::<f64>::identity(d, d) * FID_EPS;
    s1 += &reg;
    s2 += &reg;
    let r1 = sqrt_psd(&s1);
    let inner = &r1 * &s2 * &r1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&m1 - &m2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Mean absolute calibration error `mean |σᵢ − |yᵢ − μᵢ||`.
pub fn mace(mean: &Volume, std: &Volume, gt: &Volume) -> Result<f64> {
    mean.expect_dims(gt.dims())?;
    std.expect_dims(gt.dims())?;
    if let Some(i) = std.data().iter().position(|&s| s < 0.0) {
        return Err(Error::Range(format!("negative std at voxel {i}")));
    }
    let total: f64 = (0..gt.len())
        .map(|i| {
            let err = (gt.data()[i] as f64 - mean.data()[i] as f64).abs();
            (std.data()[i] as f64 - err).abs()
        })
        .sum();
    Ok(total / gt.len() as f64)
}

/// `(pred − down) / (gt − down)`; `None` when `gt == down`.
pub fn recovery_rate(pred: f64, down: f64, gt: f64) -> Option<f64> {
    let den = gt - down;
    if den == 0.0 {
        None
    } else {
        Some((pred - down) / den)
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, v: &Volume) -> Result<Vec<f64>>;
}

/// Fixed Gaussian random projection of the block-averaged volume.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    pub seed: u64,
    pub dim: usize,
    pub pool: usize,
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            dim: 128,
            pool: 4,
        }
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, v: &Volume) -> Result<Vec<f64>> {
        let pooled = DegradationOperator::avg_pool(self.pool).pool(v)?;
        let n = pooled.len();
        let scale = 1.0 / (n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = vec![0.0; self.dim];
        for o in out.iter_mut() {
            for &x in pooled.data() {
                let w: f64 = StandardNormal.sample(&mut rng);
                *o += w * scale * x as f64;
            }
        }
        Ok(out)
    }
}

/// Per-volume scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mace: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if mean.is_finite() {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        } else {
            f64::NAN
        };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub psnr: Option<MeanStd>,
    pub ssim: Option<MeanStd>,
    pub mace: Option<MeanStd>,
    pub mmd: Option<f64>,
    pub fid: Option<f64>,
}

impl MetricsReport {
    pub fn new(volumes: Vec<VolumeMetrics>, mmd: Option<f64>, fid: Option<f64>) -> Self {
        let col = |f: &dyn Fn(&VolumeMetrics) -> Option<f64>| {
            let v: Vec<f64> = volumes.iter().filter_map(f).collect();
            MeanStd::of(&v)
        };
        Self {
            psnr: col(&|m| Some(m.psnr)),
            ssim: col(&|m| Some(m.ssim)),
            mace: col(&|m| m.mace),
            volumes,
            mmd,
            fid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn gaussian_set(n: usize, mean: &[f64], std: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                mean.iter()
                    .zip(std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn psnr_known_values() {
        let gt = rand_volume([4, 4, 4], 1);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
        let shifted = gt.map(|v| v + 0.1);
        assert!((psnr(&shifted, &gt).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let gt = rand_volume([8, 8, 8], 2);
        let mut last = f64::INFINITY;
        for (k, sigma) in [0.01f32, 0.03, 0.1, 0.3].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let data = gt
                .data()
                .iter()
                .map(|&v| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    v + sigma * z
                })
                .collect();
            let noisy = Volume::new(gt.dims(), data).unwrap();
            let p = psnr(&noisy, &gt).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_constant_and_inverted() {
        let gt = rand_volume([9, 9, 9], 3);
        assert!((ssim3d(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        let c = Volume::filled([8, 8, 8], 0.4);
        assert!((ssim3d(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let binary = gt.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inv = binary.map(|v| 1.0 - v);
        assert!(ssim3d(&inv, &binary).unwrap() < 0.1);
        assert!(ssim3d(&Volume::zeros([6, 8, 8]), &Volume::zeros([6, 8, 8])).is_err());
    }

    /// Direct per-window evaluation at one position, written without the
    /// separable filter.
    #[test]
    fn ssim_matches_direct_window_sum() {
        let x = rand_volume([7, 7, 7], 4);
        let y = rand_volume([7, 7, 7], 5);
        let g = gaussian_taps();
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..7 {
            for j in 0..7 {
                for k in 0..7 {
                    let w = g[i] * g[j] * g[k];
                    let (a, b) = (x.get(i, j, k) as f64, y.get(i, j, k) as f64);
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
        }
        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        let want = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        assert!((ssim3d(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn mmd_cases() {
        let a = gaussian_set(20, &[0.0, 0.0], &[1.0, 1.0], 1);
        assert_eq!(mmd(&a, &a).unwrap(), 0.0);
        // two far point masses, fixed bandwidth: 2(1 − k(a, b)) → 2
        let p = vec![vec![0.0, 0.0]; 5];
        let far = vec![vec![3.0, 4.0]; 5];
        let k = (-25.0f64 / 2.0).exp();
        assert!((mmd_with_bandwidth(&p, &far, 1.0).unwrap() - 2.0 * (1.0 - k)).abs() < 1e-12);
        let very_far = vec![vec![300.0, 400.0]; 5];
        assert!((mmd_with_bandwidth(&p, &very_far, 1.0).unwrap() - 2.0).abs() < 1e-12);
        // median bandwidth equals the cross distance here: 2(1 − e^{-1/2})
        let want = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((mmd(&p, &very_far).unwrap() - want).abs() < 1e-12);
        let x = gaussian_set(500, &[0.0; 4], &[1.0; 4], 2);
        let y = gaussian_set(500, &[0.0; 4], &[1.0; 4], 3);
        let v = mmd(&x, &y).unwrap();
        assert!(v < 0.01, "{v}");
        assert!((mmd(&x, &y).unwrap() - mmd(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fid_cases() {
        let a = gaussian_set(50, &[0.0; 3], &[1.0; 3], 4);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        let delta = [0.5, -1.0, 2.0];
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
        assert!((fid(&a, &shifted).unwrap() - 5.25).abs() <= 1e-4);
        assert!((fid(&a, &shifted).unwrap() - fid(&shifted, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fid_matches_analytic_gaussians() {
        // diagonal covariances: Σ (μ diff)² + Σ (s1 − s2)²
        let (m1, s1) = ([0.0, 1.0, -1.0], [1.0, 2.0, 0.5]);
        let (m2, s2) = ([1.0, 1.0, 0.0], [1.5, 1.0, 0.5]);
        let a = gaussian_set(2000, &m1, &s1, 5);
        let b = gaussian_set(2000, &m2, &s2, 6);
        let want: f64 = (0..3).map(|i| (m1[i] - m2[i]).powi(2) + (s1[i] - s2[i]).powi(2)).sum();
        let got = fid(&a, &b).unwrap();
        assert!(((got - want) / want).abs() < 0.05, "{got} vs {want}");
    }

    #[test]
    fn mace_cases() {
        let gt = rand_volume([4, 4, 4], 7);
        let mu = rand_volume([4, 4, 4], 8);
        let err = gt.zip_map(&mu, |a, b| (a - b).abs()).unwrap();
        assert!(mace(&mu, &err, &gt).unwrap() < 1e-7);
        let mae = err.mean();
        assert!((mace(&mu, &Volume::zeros([4, 4, 4]), &gt).unwrap() - mae).abs() < 1e-7);
        let m = Volume::new([1, 1, 2], vec![0.0, 0.0]).unwrap();
        let s = Volume::new([1, 1, 2], vec![0.1, 0.3]).unwrap();
        let y = Volume::new([1, 1, 2], vec![0.2, 0.3]).unwrap();
        assert!((mace(&m, &s, &y).unwrap() - 0.05).abs() < 1e-7);
    }

    #[test]
    fn constant_sigma_minimising_mace_is_error_median() {
        let errors = [0.05, 0.4, 0.1, 0.9, 0.2, 0.3, 0.15];
        let gt = Volume::new([1, 1, 7], errors.iter().map(|&e| e as f32).collect()).unwrap();
        let mu = Volume::zeros([1, 1, 7]);
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=1000 {
            let s = i as f32 / 1000.0;
            let v = mace(&mu, &Volume::filled([1, 1, 7], s), &gt).unwrap();
            if v < best.0 {
                best = (v, s as f64);
            }
        }
        assert!((best.1 - 0.2).abs() < 1e-6, "{best:?}");
    }

    #[test]
    fn recovery_rate_cases() {
        assert_eq!(recovery_rate(3.0, 1.0, 3.0), Some(1.0));
        assert_eq!(recovery_rate(1.0, 1.0, 3.0), Some(0.0));
        assert_eq!(recovery_rate(1.0, 2.0, 2.0), None);
        let r = recovery_rate(87.77, 86.82, 89.17).unwrap();
        assert!((r - 0.4046).abs() <= 0.0015, "{r}");
    }

    #[test]
    fn extractor_is_deterministic() {
        let v = rand_volume([16, 16, 8], 9);
        let e = RandomProjection::default();
        let a = e.extract(&v).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, e.extract(&v).unwrap());
        let other = RandomProjection { seed: 1, ..e.clone() };
        assert_ne!(a, other.extract(&v).unwrap());
    }
}
