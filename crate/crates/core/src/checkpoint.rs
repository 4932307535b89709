//! Binary checkpoints.
//!
//! Layout (little-endian): `"SSNN"`, `u32` version, `u32` signature length,
//! signature bytes, `u32` entry count, then per entry `u32` name length, name,
//! `u32` rank, `u64` dims, `u8` dtype code, `u64` byte offset into the data
//! section. The data section follows the manifest and holds raw arrays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, Model, NetworkSpec};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"SSNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub signature: String,
    pub entries: Vec<Entry>,
}

/// Architecture identity stored in every checkpoint.
pub fn signature(spec: &NetworkSpec) -> String {
    let ts: Vec<String> = spec.stage_timesteps.iter().map(|t| t.to_string()).collect();
    let arch = match &spec.arch {
        Architecture::Custom(stages) => format!("custom{stages:?}"),
        a => a.id().to_string(),
    };
    format!(
        "arch={arch};width_scale={};timesteps={};early={};classes={};in={};hw={}x{}",
        spec.width_scale,
        ts.join(","),
        u8::from(spec.early_classifiers),
        spec.num_classes,
        spec.in_channels,
        spec.input_hw.0,
        spec.input_hw.1
    )
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes<F: Scalar>(model: &Model<F>) -> Vec<u8> {
    let sig = signature(model.spec());
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    put_u32(&mut head, sig.len() as u32);
    head.extend_from_slice(sig.as_bytes());
    put_u32(&mut head, model.params().len() as u32);
    let mut data = Vec::new();
    for p in model.params() {
        put_u32(&mut head, p.name.len() as u32);
        head.extend_from_slice(p.name.as_bytes());
        put_u32(&mut head, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u64(&mut head, d as u64);
        }
        head.push(F::DTYPE.code());
        put_u64(&mut head, data.len() as u64);
        for &v in p.value.data() {
            v.write_le(&mut data);
        }
    }
    head.extend_from_slice(&data);
    head
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let signature = r.string()?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let offset = r.u64()? as usize;
        manifest.push((name, shape, dtype, offset));
    }
    let data = &bytes[r.pos..];
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, shape, dtype, offset) in manifest {
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let size = dtype.size();
        let end = len
            .checked_mul(size)
            .and_then(|b| b.checked_add(offset))
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: data out of bounds")))?;
        let raw = &data[offset..end];
        let values = raw
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => f64::from(f32::read_le(c)),
                DType::F64 => f64::read_le(c),
            })
            .collect();
        entries.push(Entry {
            name,
            shape,
            dtype,
            data: values,
        });
    }
    Ok(Checkpoint { signature, entries })
}

/// Overwrites every model parameter and buffer from `ckpt`.
pub fn load_into<F: Scalar>(model: &mut Model<F>, ckpt: &Checkpoint) -> Result<()> {
    let expected = signature(model.spec());
    if ckpt.signature != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has `{}`, model is `{expected}`",
            ckpt.signature
        )));
    }
    if ckpt.entries.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} entries for {} parameters",
            ckpt.entries.len(),
            model.params().len()
        )));
    }
    for (p, e) in model.params().iter().zip(&ckpt.entries) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: expected {} {:?}, found {} {:?}",
                p.name,
                p.value.shape(),
                e.name,
                e.shape
            )));
        }
    }
    for (p, e) in model.params_mut().iter_mut().zip(&ckpt.entries) {
        for (d, &v) in p.value.data_mut().iter_mut().zip(&e.data) {
            *d = F::c(v);
        }
    }
    Ok(())
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load<F: Scalar>(model: &mut Model<F>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    load_into(model, &from_bytes(&bytes)?)
}
