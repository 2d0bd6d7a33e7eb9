//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SFCK`, `u32` version, `u8` kind, config echo
//! as a length-prefixed UTF-8 string, `u64` step, optional RNG state (32-byte
//! seed, `u64` stream, `u128` word position), the named parameter tensors, and
//! optional Adam state (hyper-parameters, step, both moments in parameter
//! order).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use scorefusion_tensor::{Adam, AdamConfig, ParamStore, Tensor};

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Planar,
    Volumetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn capture(adam: &Adam<f32>) -> Self {
        Self {
            config: adam.config,
            step: adam.step,
            first: adam.first.clone(),
            second: adam.second.clone(),
        }
    }

    pub fn restore(&self, store: &ParamStore<f32>) -> Result<Adam<f32>> {
        Ok(Adam::from_state(
            self.config,
            store,
            self.step,
            self.first.clone(),
            self.second.clone(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetKind,
    pub config: ConfigMap,
    pub step: u64,
    pub rng: Option<RngState>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn params_of(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Copy parameters into `store`. Names, order and shapes must all match.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((name, t), id) in self.params.iter().zip(store.ids().collect::<Vec<_>>()) {
            if store.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` where the model expects `{}`",
                    store.name(id)
                )));
            }
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Fail if any key under `prefix` differs from `expected`.
    pub fn check_config(&self, expected: &ConfigMap, prefix: &str) -> Result<()> {
        let d = self.config.diff(expected, prefix);
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("config mismatch: {}", d.join("; "))))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(match self.kind {
            NetKind::Planar => 0,
            NetKind::Volumetric => 1,
        });
        w.str(&self.config.to_text());
        w.u64(self.step);
        match &self.rng {
            Some(r) => {
                w.u8(1);
                w.bytes(&r.seed);
                w.u64(r.stream);
                w.bytes(&r.word_pos.to_le_bytes());
            }
            None => w.u8(0),
        }
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f32s(t.data());
        }
        match &self.adam {
            Some(a) => {
                w.u8(1);
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    w.bytes(&v.to_le_bytes());
                }
                w.u64(a.step);
                for m in a.first.iter().chain(&a.second) {
                    w.f32s(m.data());
                }
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let kind = match r.u8()? {
            0 => NetKind::Planar,
            1 => NetKind::Volumetric,
            k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
        };
        let config = ConfigMap::parse(&r.str()?)?;
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            _ => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape overflows")))?;
            let data = r.f32s(len)?;
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let mut h = [0.0f64; 4];
                for v in h.iter_mut() {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                let step = r.u64()?;
                let moments = |r: &mut Reader| {
                    params
                        .iter()
                        .map(|(_, t)| Ok(Tensor::from_vec(t.shape(), r.f32s(t.len())?)?))
                        .collect::<Result<Vec<_>>>()
                };
                let first = moments(&mut r)?;
                let second = moments(&mut r)?;
                Some(AdamState {
                    config: AdamConfig {
                        lr: h[0],
                        beta1: h[1],
                        beta2: h[2],
                        eps: h[3],
                    },
                    step,
                    first,
                    second,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            config,
            step,
            rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
