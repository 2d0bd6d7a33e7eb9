//! Synthetic paired volumes.
//!
//! Each phantom is a soft-ellipsoid "anatomy" with blurred noise inside a
//! head mask, plus a few lesions. Modality A shows lesions bright; modality B
//! uses a different monotone tissue curve and shows lesions dark.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{load_any, save_volume, write_atomic};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Inclusive range of tissue ellipsoids.
    pub ellipsoids: (usize, usize),
    /// Ellipsoid semi-axes as fractions of the extent.
    pub radius: (f64, f64),
    pub lesions: (usize, usize),
    /// Gaussian blur σ (voxels) of the texture noise.
    pub smoothness: f64,
    pub noise_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 24],
            seed: 0,
            ellipsoids: (3, 6),
            radius: (0.12, 0.35),
            lesions: (1, 3),
            smoothness: 1.5,
            noise_amplitude: 0.08,
        }
    }
}

impl PhantomSpec {
    pub fn with_dims(dims: [usize; 3], seed: u64) -> Self {
        Self {
            dims,
            seed,
            ..Self::default()
        }
    }

    /// Dims must be multiples of `multiple` (8 and the pooling factor).
    pub fn validate(&self, multiple: usize) -> Result<()> {
        let m = lcm(8, multiple.max(1));
        for (axis, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % m != 0 {
                return Err(Error::Dimension {
                    axis,
                    msg: format!("extent {d} is not a positive multiple of {m}"),
                });
            }
        }
        if self.ellipsoids.0 > self.ellipsoids.1 || self.lesions.0 > self.lesions.1 {
            return Err(Error::Config("phantom count range is inverted".into()));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::Config("phantom radius range is invalid".into()));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / scorefusion_tensor::layers::gcd(a, b) * b
}

/// SplitMix64 finaliser over `(seed, index)`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3], radius: (f64, f64), inside: f64) -> Self {
        let mut center = [0.0; 3];
        let mut axes = [0.0; 3];
        for a in 0..3 {
            let d = dims[a] as f64;
            center[a] = d * (0.5 + rng.random_range(-inside..=inside));
            axes[a] = d * rng.random_range(radius.0..=radius.1);
        }
        Self { center, axes }
    }

    /// Smooth indicator: 1 inside, 0 outside, with a ~1 voxel edge.
    fn soft(&self, p: [f64; 3]) -> f64 {
        let r: f64 = (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let mean_axis = (self.axes[0] + self.axes[1] + self.axes[2]) / 3.0;
        1.0 / (1.0 + ((r - 1.0) * mean_axis).exp())
    }
}

fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let src = data.to_vec();
        let n = dims[axis] as isize;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let idx = [i, j, k];
                    let base = i * strides[0] + j * strides[1] + k * strides[2] - idx[axis] * strides[axis];
                    let mut acc = 0.0;
                    for (t, w) in taps.iter().enumerate() {
                        // reflect at the borders
                        let mut p = idx[axis] as isize + t as isize - r;
                        if p < 0 {
                            p = -p - 1;
                        }
                        if p >= n {
                            p = 2 * n - p - 1;
                        }
                        let p = p.clamp(0, n - 1) as usize;
                        acc += w * src[base + p * strides[axis]];
                    }
                    data[i * strides[0] + j * strides[1] + k * strides[2]] = acc / norm;
                }
            }
        }
    }
}

/// Tissue curve for modality B: a monotone but non-affine remap.
fn contrast_b(a: f64) -> f64 {
    0.15 + 0.8 * a * a * (3.0 - 2.0 * a)
}

/// The `(modA, modB)` pair for `index`, both in `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<(Volume, Volume)> {
    spec.validate(1)?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, index));
    let head = Ellipsoid::random(&mut rng, dims, (0.46, 0.54), 0.03);
    let n_tissue = rng.random_range(spec.ellipsoids.0..=spec.ellipsoids.1);
    let tissue: Vec<(Ellipsoid, f64)> = (0..n_tissue)
        .map(|_| {
            let e = Ellipsoid::random(&mut rng, dims, spec.radius, 0.2);
            (e, rng.random_range(-0.25..0.3))
        })
        .collect();
    let n_lesion = rng.random_range(spec.lesions.0..=spec.lesions.1);
    let lesions: Vec<Ellipsoid> = (0..n_lesion)
        .map(|_| Ellipsoid::random(&mut rng, dims, (0.06, 0.12), 0.2))
        .collect();
    let n = dims.iter().product();
    let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    gaussian_blur(&mut noise, dims, spec.smoothness);
    let sd = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut idx = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let mask = head.soft(p);
                let mut t = 0.62;
                for (e, delta) in &tissue {
                    t += delta * e.soft(p);
                }
                t += spec.noise_amplitude * noise[idx] / sd;
                let t = t.clamp(0.0, 1.0);
                let l = lesions.iter().map(|e| e.soft(p)).fold(0.0, f64::max) * mask;
                let va = mask * t * (1.0 - l) + 0.95 * l;
                let vb = mask * contrast_b(t) * (1.0 - l) + 0.05 * l;
                a.push(va.clamp(0.0, 1.0) as f32);
                b.push(vb.clamp(0.0, 1.0) as f32);
                idx += 1;
            }
        }
    }
    Ok((Volume::new(dims, a)?, Volume::new(dims, b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub split: Split,
}

/// Tab-separated `id  pathA  pathB  split`, one record per line. Relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.path_a.display(),
                r.path_b.display(),
                r.split.as_str()
            ));
        }
        s
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    f.len()
                )));
            }
            records.push(ManifestRecord {
                id: f[0].to_string(),
                path_a: base.join(f[1]),
                path_b: base.join(f[2]),
                split: f[3].parse()?,
            });
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Load every `(modA, modB)` pair of one split.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<(String, Volume, Volume)>> {
        self.split(split)
            .map(|r| Ok((r.id.clone(), load_any(&r.path_a)?, load_any(&r.path_b)?)))
            .collect()
    }
}

/// The first `round(fraction · count)` indices in hash order are training.
pub fn assign_splits(count: usize, fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (stream_seed(seed ^ 0x5b11_7000, i as u64), i));
    let n_train = (fraction.clamp(0.0, 1.0) * count as f64).round() as usize;
    let mut splits = vec![Split::Val; count];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    splits
}

/// Write `count` phantom pairs as SFV1 files plus `manifest.tsv` into `out`.
pub fn build_dataset(spec: &PhantomSpec, count: usize, fraction: f64, out: &Path) -> Result<Manifest> {
    spec.validate(1)?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let splits = assign_splits(count, fraction, spec.seed);
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let (a, b) = generate_phantom(spec, i as u64)?;
            let id = format!("phantom_{i:04}");
            let (fa, fb) = (format!("{id}_a.sfv"), format!("{id}_b.sfv"));
            save_volume(&a, &out.join(&fa))?;
            save_volume(&b, &out.join(&fb))?;
            Ok(ManifestRecord {
                id,
                path_a: fa.into(),
                path_b: fb.into(),
                split: splits[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { records };
    write_atomic(&out.join(MANIFEST_FILE), manifest.to_tsv().as_bytes())?;
    Manifest::load(&out.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec::with_dims([16, 16, 16], 7)
    }

    #[test]
    fn deterministic_and_distinct() {
        let spec = small();
        let (a0, b0) = generate_phantom(&spec, 0).unwrap();
        let (a1, b1) = generate_phantom(&spec, 0).unwrap();
        assert_eq!(a0, a1);
        assert_eq!(b0, b1);
        let (a2, _) = generate_phantom(&spec, 1).unwrap();
        assert!(a0.max_abs_diff(&a2).unwrap() > 0.01);
        for v in a0.data().iter().chain(b0.data()) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn modalities_differ() {
        let (a, b) = generate_phantom(&small(), 3).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.2);
    }

    #[test]
    fn mean_intensity_of_modality_a() {
        let spec = PhantomSpec::default();
        let means: Vec<f64> = (0..100u64)
            .into_par_iter()
            .map(|i| generate_phantom(&spec, i).unwrap().0.mean())
            .collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        assert!((m - 0.35).abs() <= 0.05, "mean {m}");
    }

    #[test]
    fn bad_dims_rejected() {
        let spec = PhantomSpec::with_dims([16, 12, 16], 0);
        assert!(matches!(spec.validate(4), Err(Error::Dimension { axis: 1, .. })));
        assert!(PhantomSpec::with_dims([16, 16, 8], 0).validate(4).is_ok());
        assert!(PhantomSpec::with_dims([16, 16, 8], 0).validate(16).is_err());
    }

    #[test]
    fn splits_are_exact_and_disjoint() {
        let s = assign_splits(10, 0.8, 1);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 8);
        assert_eq!(s, assign_splits(10, 0.8, 1));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::with_dims([8, 8, 8], 2);
        let m = build_dataset(&spec, 10, 0.8, dir.path()).unwrap();
        assert_eq!(m.split(Split::Train).count(), 8);
        assert_eq!(m.split(Split::Val).count(), 2);
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let bytes_a = fs::read(&m.records[0].path_a).unwrap();
        let m2 = build_dataset(&spec, 10, 0.8, dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(first, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(bytes_a, fs::read(&m2.records[0].path_a).unwrap());
        let pairs = m.load_pairs(Split::Val).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].1, generate_phantom(&spec, pairs[0].0[8..].parse().unwrap()).unwrap().0);
    }

    #[test]
    fn malformed_manifest() {
        assert!(Manifest::parse("a\tb\tc\n", Path::new(".")).is_err());
        assert!(Manifest::parse("a\tb\tc\ttest\n", Path::new(".")).is_err());
    }
}
