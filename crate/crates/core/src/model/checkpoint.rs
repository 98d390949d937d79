//! Versioned model checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CVLCKPT\0"
//! version    u32      1
//! config     u32 n, then n x (u32 len, key bytes, u32 len, value bytes), keys sorted
//! vocabulary u32 n, then n x (u32 len, token bytes); reserved tokens omitted
//! params     u32 n, then n x (u32 len, name bytes, u8 trainable,
//!                             u32 rank, rank x u32 extent, f64 values)
//! ```
//!
//! Loading rebuilds the parameter layout from the stored config and rejects
//! any name, order or shape that disagrees with it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CvlModel, ModelConfig};
use crate::data::binio::{read_f64s, read_string, read_u32, read_u8, write_f64s, write_string};
use crate::error::{Error, Result};
use crate::representation::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &CvlModel) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let pairs = model.config.to_pairs();
    w.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for (k, v) in &pairs {
        write_string(w, k)?;
        write_string(w, v)?;
    }
    let words = model.vocab.words();
    w.write_all(&(words.len() as u32).to_le_bytes())?;
    for word in words {
        write_string(w, word)?;
    }
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        write_string(w, &p.name)?;
        w.write_all(&[u8::from(p.trainable)])?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f64s(w, p.tensor.data())?;
    }
    Ok(())
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or unreadable checkpoint: {e}"))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<CvlModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(fmt_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint magic mismatch".into()));
    }
    let version = read_u32(r).map_err(fmt_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = read_u32(r).map_err(fmt_err)?;
    let mut pairs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let k = read_string(r).map_err(fmt_err)?;
        let v = read_string(r).map_err(fmt_err)?;
        pairs.push((k, v));
    }
    let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

    let n = read_u32(r).map_err(fmt_err)?;
    let words = (0..n)
        .map(|_| read_string(r))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(fmt_err)?;
    let vocab = Vocabulary::new(&words);
    if vocab.len() != config.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} tokens but config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let mut model = CvlModel::new(config, vocab, 0)?;
    let n = read_u32(r).map_err(fmt_err)? as usize;
    if n != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n} parameters, config implies {}",
            model.store.len()
        )));
    }
    for (_, p) in model.store.iter_mut() {
        let name = read_string(r).map_err(fmt_err)?;
        if name != p.name {
            return Err(Error::Format(format!(
                "expected parameter {} but found {name}",
                p.name
            )));
        }
        let trainable = read_u8(r).map_err(fmt_err)? != 0;
        let rank = read_u32(r).map_err(fmt_err)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(fmt_err)?;
        if shape != p.tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {shape:?}, config implies {:?}",
                p.tensor.shape()
            )));
        }
        let values = read_f64s(r, p.tensor.len()).map_err(fmt_err)?;
        p.tensor.data_mut().copy_from_slice(&values);
        p.trainable = trainable;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(fmt_err)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &CvlModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CvlModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
