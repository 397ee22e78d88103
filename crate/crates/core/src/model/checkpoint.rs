//! Binary checkpoint: magic, format version, config digest, then a table of
//! named `f32` little-endian tensors (parameters first, then buffers).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CARDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_table<'a, W: Write>(w: &mut W, entries: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) -> Result<()> {
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, t) in entries {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn read_table<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| r.read_f32::<LittleEndian>().map(f64::from))
            .collect::<std::io::Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_all(&model.cfg.digest())?;
    write_table(w, model.params.params())?;
    write_table(w, model.params.buffers())?;
    Ok(())
}

/// Restores a model saved with the same `cfg`. Every tensor must match the
/// freshly initialised layout by name and shape.
pub fn load_checkpoint<R: Read>(r: &mut R, cfg: &ModelConfig) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != cfg.digest() {
        return Err(Error::Checkpoint("model config does not match checkpoint".into()));
    }
    let template = Model::new(cfg.clone(), 0)?;
    let params = read_table(r)?;
    let buffers = read_table(r)?;
    let mut store = ParamStore::new();
    for (name, t) in params {
        check_layout(template.params.get(&name), &name, &t)?;
        store.insert(name, t);
    }
    for (name, t) in buffers {
        check_layout(template.params.buffer(&name), &name, &t)?;
        store.insert_buffer(name, t);
    }
    let expected = (template.params.params().count(), template.params.buffers().count());
    if (store.params().count(), store.buffers().count()) != expected {
        return Err(Error::Checkpoint("tensor count mismatch".into()));
    }
    Ok(Model {
        cfg: cfg.clone(),
        params: store,
    })
}

fn check_layout(expected: Result<&Tensor>, name: &str, got: &Tensor) -> Result<()> {
    let expected = expected.map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
    if expected.shape() != got.shape() {
        return Err(Error::Checkpoint(format!(
            "`{name}` has shape {:?}, expected {:?}",
            got.shape(),
            expected.shape()
        )));
    }
    Ok(())
}
