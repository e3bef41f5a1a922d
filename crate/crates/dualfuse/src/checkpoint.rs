//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "DFUSECKP" | version u32 | kind u8 | pretrained u8 (0, 1, 2 = n/a)
//! config: len u32, utf-8 key=value text
//! vocab:  count u32, then per token len u32 + utf-8
//! params: count u32, then per parameter
//!         name (len u32 + utf-8) | trainable u8 | ndim u32 | dims u64* | f32*
//! provenance: step u64 | dev loss f64 (NaN = none) | parent id (len u32 + utf-8)
//! optimizer: present u8, then t u64 | skips u32 | total skips u64 |
//!            per parameter: len u64 + f32* (first moment), len u64 + f32* (second)
//! ```

use std::path::Path;

use dualfuse_core::nn::ParamStore;
use dualfuse_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{FormatError, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"DFUSECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Encoders,
    Decoder,
    Model,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Encoders => 0,
            CheckpointKind::Decoder => 1,
            CheckpointKind::Model => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CheckpointKind::Encoders),
            1 => Some(CheckpointKind::Decoder),
            2 => Some(CheckpointKind::Model),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Encoders => "encoders",
            CheckpointKind::Decoder => "decoder",
            CheckpointKind::Model => "model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub step: u64,
    pub dev_loss: Option<f64>,
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub consecutive_skips: u32,
    pub total_skips: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Encoder weights came from pretraining rather than random init.
    pub pretrained: Option<bool>,
    pub config: String,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    pub provenance: Provenance,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, xs: &[f32]) {
        self.0.reserve(xs.len() * 4);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            FormatError::malformed(self.path, "checkpoint", format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::malformed(self.path, "checkpoint", "invalid utf-8"))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| FormatError::malformed(self.path, "checkpoint", "size overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(self.kind.code());
        w.u8(match self.pretrained {
            Some(false) => 0,
            Some(true) => 1,
            None => 2,
        });
        w.str(&self.config);
        w.u32(self.vocab.len() as u32);
        for t in &self.vocab {
            w.str(t);
        }
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.u8(p.trainable as u8);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f32s(p.value.data());
        }
        w.u64(self.provenance.step);
        w.f64(self.provenance.dev_loss.unwrap_or(f64::NAN));
        w.str(self.provenance.parent.as_deref().unwrap_or(""));
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.t);
                w.u32(o.consecutive_skips);
                w.u64(o.total_skips);
                for (m, v) in o.m.iter().zip(&o.v) {
                    w.u64(m.len() as u64);
                    w.f32s(m);
                    w.u64(v.len() as u64);
                    w.f32s(v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if buf.len() < MAGIC.len() || r.take(MAGIC.len())? != MAGIC {
            return Err(FormatError::BadMagic { path: path.to_path_buf() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version { path: path.to_path_buf(), found: version, expected: VERSION });
        }
        let bad = |d: String| FormatError::malformed(path, "checkpoint", d);
        let kind = CheckpointKind::from_code(r.u8()?).ok_or_else(|| bad("unknown kind".into()))?;
        let pretrained = match r.u8()? {
            0 => Some(false),
            1 => Some(true),
            2 => None,
            c => return Err(bad(format!("pretrained flag {c}"))),
        };
        let config = r.str()?;
        let nv = r.u32()? as usize;
        let vocab = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let np = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut flags = Vec::with_capacity(np);
        for _ in 0..np {
            let name = r.str()?;
            let trainable = r.u8()? != 0;
            let nd = r.u32()? as usize;
            if nd > 8 {
                return Err(bad(format!("{name}: {nd} dimensions")));
            }
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: shape overflow")))?;
            let data = r.f32s(n)?;
            params.add(&name, Tensor::new(&shape, data)?)?;
            flags.push(trainable);
        }
        for (p, t) in params.iter_mut().zip(flags) {
            p.trainable = t;
        }
        let step = r.u64()?;
        let dl = r.f64()?;
        let parent = r.str()?;
        let provenance = Provenance {
            step,
            dev_loss: (!dl.is_nan()).then_some(dl),
            parent: (!parent.is_empty()).then_some(parent),
        };
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let consecutive_skips = r.u32()?;
                let total_skips = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(np), Vec::with_capacity(np));
                for _ in 0..np {
                    let n = r.u64()? as usize;
                    m.push(r.f32s(n)?);
                    let n = r.u64()? as usize;
                    v.push(r.f32s(n)?);
                }
                Some(OptimizerState { t, consecutive_skips, total_skips, m, v })
            }
            c => return Err(bad(format!("optimizer flag {c}"))),
        };
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, pretrained, config, vocab, params, provenance, optimizer })
    }

    /// Content hash, used as the parent id of derived checkpoints.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn expect_kind(&self, kind: CheckpointKind, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(FormatError::Core(dualfuse_core::Error::IncompatibleCheckpoint(format!(
                "{}: {} checkpoint where a {} checkpoint is needed",
                path.display(),
                self.kind.as_str(),
                kind.as_str()
            ))));
        }
        Ok(())
    }
}
