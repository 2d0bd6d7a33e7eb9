//! Volume files.
//!
//! `SFV1` layout: bytes 0..4 are the ASCII magic `SFV1`, bytes 4..16 hold the
//! three dims as little-endian `u32`, followed by `d1·d2·d3` little-endian
//! IEEE-754 `f32` voxels in C order.
//!
//! NIfTI-1 single-file images (`.nii`, optionally gzipped) are read into the
//! same [`Volume`]; the original header is kept so orientation fields survive a
//! read/write cycle untouched.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, ParseError, Result};
use crate::volume::Volume;

pub const SFV_MAGIC: &[u8; 4] = b"SFV1";
const SFV_HEADER: usize = 16;

pub fn encode_sfv(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(SFV_HEADER + 4 * v.len());
    out.extend_from_slice(SFV_MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_sfv(bytes: &[u8]) -> std::result::Result<Volume, Error> {
    if bytes.len() < 4 || &bytes[..4] != SFV_MAGIC {
        return Err(ParseError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
            expected: SFV_MAGIC.to_vec(),
        }
        .into());
    }
    if bytes.len() < SFV_HEADER {
        return Err(ParseError::Truncated {
            needed: SFV_HEADER,
            available: bytes.len(),
        }
        .into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dims64 = [dim(0) as u64, dim(1) as u64, dim(2) as u64];
    let count = dims64[0]
        .checked_mul(dims64[1])
        .and_then(|n| n.checked_mul(dims64[2]))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .and_then(|n| n.checked_add(SFV_HEADER))
        .ok_or(ParseError::DimOverflow { dims: dims64 })?;
    if bytes.len() < count {
        return Err(ParseError::Truncated {
            needed: count,
            available: bytes.len(),
        }
        .into());
    }
    let data = bytes[SFV_HEADER..count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims64.map(|d| d as usize), data)
}

/// Write atomically: a sibling temp file is renamed over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sfv(v))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sfv(&bytes).map_err(|e| match e {
        Error::Format(source) => Error::Parse {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// A NIfTI-1 image: the voxels plus the untouched 348-byte header.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub volume: Volume,
    pub header: Vec<u8>,
}

const NIFTI_HEADER: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn decode_nifti(bytes: &[u8]) -> std::result::Result<NiftiImage, ParseError> {
    if bytes.len() < NIFTI_HEADER {
        return Err(ParseError::Truncated {
            needed: NIFTI_HEADER,
            available: bytes.len(),
        });
    }
    if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) != 348 {
        return Err(ParseError::Unsupported(
            "big-endian or non-NIfTI-1 header (sizeof_hdr != 348)".into(),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(ParseError::BadMagic {
            found: magic.to_vec(),
            expected: b"n+1\0".to_vec(),
        });
    }
    let ndim = le_i16(bytes, 40);
    let nx = le_i16(bytes, 42).max(1) as u64;
    let ny = le_i16(bytes, 44).max(1) as u64;
    let nz = le_i16(bytes, 46).max(1) as u64;
    if !(1..=4).contains(&ndim) || (ndim == 4 && le_i16(bytes, 48) > 1) {
        return Err(ParseError::Unsupported(format!("only single 3D images, got ndim {ndim}")));
    }
    let datatype = le_i16(bytes, 70);
    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(ParseError::Unsupported(format!("datatype {other}"))),
    };
    let offset = le_f32(bytes, 108).max(NIFTI_VOX_OFFSET as f32) as usize;
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .and_then(|v| usize::try_from(v).ok())
        .ok_or(ParseError::DimOverflow { dims: [nx, ny, nz] })?;
    let needed = n
        .checked_mul(width)
        .and_then(|v| v.checked_add(offset))
        .ok_or(ParseError::DimOverflow { dims: [nx, ny, nz] })?;
    if bytes.len() < needed {
        return Err(ParseError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let slope = le_f32(bytes, 112);
    let inter = le_f32(bytes, 116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, inter)
    };
    let payload = &bytes[offset..needed];
    let raw = |i: usize| -> f32 {
        let c = &payload[i * width..(i + 1) * width];
        match datatype {
            2 => c[0] as f32,
            4 => i16::from_le_bytes([c[0], c[1]]) as f32,
            8 => i32::from_le_bytes(c.try_into().unwrap()) as f32,
            16 => f32::from_le_bytes(c.try_into().unwrap()),
            _ => f64::from_le_bytes(c.try_into().unwrap()) as f32,
        }
    };
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    // NIfTI is x-fastest; the volume is last-axis fastest with dims (x, y, z).
    let mut data = vec![0.0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[(x * ny + y) * nz + z] = raw(x + nx * (y + ny * z)) * slope + inter;
            }
        }
    }
    let volume = Volume::new([nx, ny, nz], data)
        .map_err(|e| ParseError::Unsupported(format!("payload rejected: {e}")))?;
    Ok(NiftiImage {
        volume,
        header: bytes[..NIFTI_HEADER].to_vec(),
    })
}

pub fn load_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = read_maybe_gz(path)?;
    decode_nifti(&bytes).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Encode as float32 NIfTI-1. Dims, datatype, offset and scaling are
/// rewritten; all other header fields come from `template` when given.
pub fn encode_nifti(v: &Volume, template: Option<&[u8]>) -> Result<Vec<u8>> {
    let [nx, ny, nz] = v.dims();
    if [nx, ny, nz].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Shape(format!("dims {:?} exceed NIfTI-1 limits", v.dims())));
    }
    let mut h = match template {
        Some(t) if t.len() >= NIFTI_HEADER => t[..NIFTI_HEADER].to_vec(),
        _ => {
            let mut h = vec![0u8; NIFTI_HEADER];
            h[0..4].copy_from_slice(&348i32.to_le_bytes());
            for (i, p) in [1.0f32, 1.0, 1.0, 1.0].iter().enumerate() {
                h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
            }
            h[344..348].copy_from_slice(b"n+1\0");
            h
        }
    };
    let put16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put32f = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    put16(&mut h, 40, 3);
    put16(&mut h, 42, nx as i16);
    put16(&mut h, 44, ny as i16);
    put16(&mut h, 46, nz as i16);
    for at in [48, 50, 52, 54] {
        put16(&mut h, at, 1);
    }
    put16(&mut h, 70, 16);
    put16(&mut h, 72, 32);
    put32f(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put32f(&mut h, 112, 1.0);
    put32f(&mut h, 116, 0.0);
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.extend_from_slice(&[0u8; NIFTI_VOX_OFFSET - NIFTI_HEADER]);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.extend_from_slice(&v.get(x, y, z).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes `.nii`, or gzip-compressed when the path ends in `.gz`.
pub fn save_nifti(v: &Volume, template: Option<&[u8]>, path: &Path) -> Result<()> {
    let bytes = encode_nifti(v, template)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let packed = enc.finish().map_err(|e| Error::io(path, e))?;
        write_atomic(path, &packed)
    } else {
        write_atomic(path, &bytes)
    }
}

/// Dispatch on extension: `.nii`/`.nii.gz` as NIfTI, anything else as SFV1.
pub fn load_any(path: &Path) -> Result<Volume> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(load_nifti(path)?.volume)
    } else {
        load_volume(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_built_two_voxel_file() {
        let mut bytes = b"SFV1".to_vec();
        for d in [2u32, 1, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
        bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0xbf]); // -1.0
        let v = decode_sfv(&bytes).unwrap();
        assert_eq!(v.dims(), [2, 1, 1]);
        assert_eq!(v.data(), &[1.0, -1.0]);
        assert_eq!(encode_sfv(&v), bytes);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let v = Volume::filled([2, 2, 2], 0.5);
        let good = encode_sfv(&v);
        let mut bad_magic = good.clone();
        bad_magic[3] = b'2';
        assert!(matches!(decode_sfv(&bad_magic), Err(Error::Format(ParseError::BadMagic { .. }))));
        assert!(matches!(
            decode_sfv(&good[..good.len() - 1]),
            Err(Error::Format(ParseError::Truncated { .. }))
        ));
        assert!(matches!(decode_sfv(&good[..10]), Err(Error::Format(ParseError::Truncated { .. }))));
        let mut huge = b"SFV1".to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let r = decode_sfv(&huge);
        assert!(
            matches!(r, Err(Error::Format(ParseError::DimOverflow { .. })))
                || matches!(r, Err(Error::Format(ParseError::Truncated { .. }))),
            "{r:?}"
        );
    }

    #[test]
    fn file_roundtrip_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.sfv");
        let v = Volume::zeros([8, 8, 8]);
        save_volume(&v, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), encode_sfv(&v));
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn nifti_roundtrip_preserves_orientation_fields() {
        let v = Volume::from_fn([3, 4, 2], |i, j, k| (i * 100 + j * 10 + k) as f32).unwrap();
        let mut template = encode_nifti(&v, None).unwrap()[..NIFTI_HEADER].to_vec();
        // qform_code and a fake srow_x entry
        template[252..254].copy_from_slice(&1i16.to_le_bytes());
        template[280..284].copy_from_slice(&(-1.5f32).to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            save_nifti(&v, Some(&template), &p).unwrap();
            let img = load_nifti(&p).unwrap();
            assert_eq!(img.volume, v);
            assert_eq!(img.header[252..254], template[252..254]);
            assert_eq!(img.header[280..284], template[280..284]);
        }
    }

    #[test]
    fn nifti_int16_with_scaling() {
        let v = Volume::zeros([2, 1, 1]);
        let mut bytes = encode_nifti(&v, None).unwrap();
        bytes.truncate(NIFTI_VOX_OFFSET);
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&10i16.to_le_bytes());
        bytes.extend_from_slice(&(-4i16).to_le_bytes());
        let img = decode_nifti(&bytes).unwrap();
        assert_eq!(img.volume.data(), &[6.0, -1.0]);
    }

    proptest! {
        #[test]
        fn sfv_roundtrip_is_bit_exact(data in proptest::collection::vec(-1e6f32..1e6, 512)) {
            let v = Volume::new([8, 8, 8], data).unwrap();
            let bytes = encode_sfv(&v);
            let back = decode_sfv(&bytes).unwrap();
            prop_assert_eq!(encode_sfv(&back), bytes);
        }
    }
}
