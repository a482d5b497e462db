//! Bit-exact binary checkpoints: magic + version header, model config
//! as embedded JSON, a named tensor table of raw little-endian f32
//! data, and optional gate and optimizer-state sections.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::pruning::GateSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SWDK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Adam first/second moments keyed by parameter name.
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

pub struct Checkpoint {
    pub model: Model<f32>,
    pub gates: Option<GateSet>,
    pub train_state: Option<TrainState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.w.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.w.write_all(b)?)
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) -> Result<()> {
        self.bytes(name.as_bytes())?;
        self.u8(DTYPE_F32)?;
        self.u8(t.shape().len() as u8)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        for &v in t.data() {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.r
            .read_exact(&mut b)
            .map_err(|_| bad("truncated checkpoint"))?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| bad("truncated checkpoint"))?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.r
            .read_exact(&mut b)
            .map_err(|_| bad("truncated checkpoint"))?;
        Ok(u64::from_le_bytes(b))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > 1 << 32 {
            return Err(bad("implausible length field"));
        }
        let mut v = vec![0u8; n];
        self.r
            .read_exact(&mut v)
            .map_err(|_| bad("truncated checkpoint"))?;
        Ok(v)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| bad("non-UTF-8 string"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        if self.u8()? != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype for tensor '{name}'")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(bad("implausible tensor size"));
        }
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            self.r
                .read_exact(&mut b)
                .map_err(|_| bad("truncated checkpoint"))?;
            data.push(f32::from_le_bytes(b));
        }
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

/// Serializes a checkpoint; the byte stream is a deterministic function
/// of its contents.
pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { w: out };
    w.w.write_all(&MAGIC)?;
    w.u32(VERSION)?;
    w.bytes(serde_json::to_string(&ckpt.model.config)?.as_bytes())?;
    w.u32(ckpt.model.store.len() as u32)?;
    for (_, name, t) in ckpt.model.store.iter() {
        w.tensor(name, t)?;
    }
    match &ckpt.gates {
        None => w.u8(0)?,
        Some(g) => {
            w.u8(1)?;
            w.bytes(serde_json::to_string(g)?.as_bytes())?;
        }
    }
    match &ckpt.train_state {
        None => w.u8(0)?,
        Some(ts) => {
            w.u8(1)?;
            w.u64(ts.step)?;
            w.u32(ts.moments.len() as u32)?;
            for (name, m, v) in &ts.moments {
                w.tensor(name, m)?;
                w.tensor(name, v)?;
            }
        }
    }
    Ok(())
}

/// Parses and validates a checkpoint, rebuilding the model topology
/// from the embedded config and filling in the stored tensors by name.
pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader { r: input };
    let mut magic = [0u8; 4];
    r.r.read_exact(&mut magic)
        .map_err(|_| bad("truncated checkpoint"))?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(&r.bytes()?)?;
    config.validate()?;
    // seed is irrelevant: every tensor gets overwritten below
    let mut model = build_model::<f32>(&config, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(bad(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; model.store.len()];
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| bad(format!("unknown tensor '{name}'")))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(bad(format!("duplicate tensor '{name}'")));
        }
        if t.shape() != model.store.get(id).shape() {
            return Err(bad(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        model.store.set(id, t);
    }
    let gates = match r.u8()? {
        0 => None,
        1 => {
            let g: GateSet = serde_json::from_slice(&r.bytes()?)?;
            g.validate_for(&model)?;
            Some(g)
        }
        v => return Err(bad(format!("bad gate-section flag {v}"))),
    };
    let train_state = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let (name, m) = r.tensor()?;
                let (name2, v) = r.tensor()?;
                if name != name2 {
                    return Err(bad("moment pair name mismatch"));
                }
                moments.push((name, m, v));
            }
            Some(TrainState { step, moments })
        }
        v => return Err(bad(format!("bad training-state flag {v}"))),
    };
    let mut rest = [0u8; 1];
    match r.r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after checkpoint")),
        Err(e) => return Err(e.into()),
    }
    Ok(Checkpoint {
        model,
        gates,
        train_state,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    read_checkpoint(&data[..])
}
