//! Binary checkpoint persistence.
//!
//! Layout (all integers little-endian unless noted):
//!
//! ```text
//! magic          8 bytes  "SAMCKPT1"
//! version        u32      currently 1
//! encoder        u32 x6   input_hw, input_channels, kernel, embed_dim,
//!                         attention_layer, n_blocks
//!                u32 xN   conv_channels
//! params         u32      tensor count, then per tensor:
//!                         name_len u32, name utf-8, ndim u32, dims u32 each,
//!                         payload f64 LE each
//! optimizer      u8       0 = sgd, 1 = adam; adam is followed by
//!                         step u64, then per parameter (same order):
//!                         first-moment payload, second-moment payload
//! rng_state      u64
//! epoch          u32
//! ```
//!
//! Save/load/save round-trips are byte-identical.

use std::path::Path;

use indexmap::IndexMap;

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SAMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub params: ModelParams,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_state: OptimizerState,
    pub rng_state: u64,
    pub epoch: u32,
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(MAGIC);
    w.u32(ckpt.version);

    let cfg = &ckpt.encoder;
    w.u32(cfg.input_hw as u32);
    w.u32(cfg.input_channels as u32);
    w.u32(cfg.kernel as u32);
    w.u32(cfg.embed_dim as u32);
    w.u32(cfg.attention_layer as u32);
    w.u32(cfg.conv_channels.len() as u32);
    for &c in &cfg.conv_channels {
        w.u32(c as u32);
    }

    w.u32(ckpt.params.len() as u32);
    for (name, t) in ckpt.params.iter() {
        w.u32(name.len() as u32);
        w.bytes.extend_from_slice(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f64s(t.data());
    }

    match ckpt.optimizer_kind {
        OptimizerKind::Sgd => w.bytes.push(0),
        OptimizerKind::Adam => {
            w.bytes.push(1);
            w.u64(ckpt.optimizer_state.step);
            for (name, t) in ckpt.params.iter() {
                let zeros = vec![0.0; t.numel()];
                let m = ckpt
                    .optimizer_state
                    .first_moment
                    .get(name)
                    .unwrap_or(&zeros);
                let v = ckpt
                    .optimizer_state
                    .second_moment
                    .get(name)
                    .unwrap_or(&zeros);
                w.f64s(m);
                w.f64s(v);
            }
        }
    }

    w.u64(ckpt.rng_state);
    w.u32(ckpt.epoch);
    w.bytes
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at offset {} (needed {n} bytes)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32()?;
    if version > FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads <= {FORMAT_VERSION})"
        )));
    }

    let input_hw = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let attention_layer = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let mut conv_channels = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        conv_channels.push(r.u32()? as usize);
    }
    let encoder = EncoderConfig {
        input_hw,
        input_channels,
        conv_channels,
        kernel,
        embed_dim,
        attention_layer,
    };
    encoder.validate()?;

    let n_params = r.u32()? as usize;
    let mut tensors = IndexMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f64s(numel)?;
        tensors.insert(name, Tensor::new(&dims, data)?.with_grad());
    }
    let params = ModelParams::from_tensors(tensors);

    let kind_byte = r.u8()?;
    let (optimizer_kind, optimizer_state) = match kind_byte {
        0 => (OptimizerKind::Sgd, OptimizerState::default()),
        1 => {
            let step = r.u64()?;
            let mut first = IndexMap::new();
            let mut second = IndexMap::new();
            for (name, t) in params.iter() {
                first.insert(name.clone(), r.f64s(t.numel())?);
                second.insert(name.clone(), r.f64s(t.numel())?);
            }
            (
                OptimizerKind::Adam,
                OptimizerState { step, first_moment: first, second_moment: second },
            )
        }
        other => {
            return Err(Error::Format(format!("unknown optimizer tag {other}")));
        }
    };

    let rng_state = r.u64()?;
    let epoch = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    Ok(Checkpoint {
        version,
        encoder,
        params,
        optimizer_kind,
        optimizer_state,
        rng_state,
        epoch,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
