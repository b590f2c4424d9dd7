//! Binary model container.
//!
//! Layout, all little-endian: magic, `u32` version, the config block, the
//! vocabulary in its text format (length-prefixed), then `u32` tensor count
//! and for each tensor its name, rank, dims and `f32` data.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayViewMutD;

use super::{LstmLmConfig, LstmLmModel, LstmParams};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INTLSTM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LE>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, limit: u64) -> Result<Vec<u8>> {
    let len = r.read_u64::<LE>()?;
    if len > limit {
        return Err(Error::Format(format!("field length {len} exceeds {limit}")));
    }
    let mut buf = vec![0; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint<W: Write>(model: &LstmLmModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;

    let c = &model.config;
    for v in [c.embed_dim, c.hidden_dim, c.layers, c.bptt_len, c.batch_size, c.eval_batch_size, c.epochs] {
        w.write_u64::<LE>(v as u64)?;
    }
    for v in [c.lr_start, c.lr_shrink, c.clip_norm, c.dropout, c.init_range] {
        w.write_f64::<LE>(v)?;
    }
    w.write_u64::<LE>(c.min_count)?;
    w.write_u64::<LE>(c.seed)?;

    let mut vocab = Vec::new();
    model.vocab.write(&mut vocab)?;
    write_bytes(&mut w, &vocab)?;

    let tensors = model.params.tensors();
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, t) in tensors {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_u32::<LE>(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        for &x in t.iter() {
            w.write_f32::<LE>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LstmLmModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an LSTM checkpoint".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut u = [0usize; 7];
    for v in &mut u {
        *v = r.read_u64::<LE>()? as usize;
    }
    let mut f = [0f64; 5];
    for v in &mut f {
        *v = r.read_f64::<LE>()?;
    }
    let config = LstmLmConfig {
        embed_dim: u[0],
        hidden_dim: u[1],
        layers: u[2],
        bptt_len: u[3],
        batch_size: u[4],
        eval_batch_size: u[5],
        epochs: u[6],
        lr_start: f[0],
        lr_shrink: f[1],
        clip_norm: f[2],
        dropout: f[3],
        init_range: f[4],
        min_count: r.read_u64::<LE>()?,
        seed: r.read_u64::<LE>()?,
    };
    config.validate().map_err(|e| Error::Format(format!("bad config block: {e}")))?;

    let vocab = Vocabulary::read(&read_bytes(&mut r, 1 << 34)?[..])?;
    let mut params: LstmParams<f32> = LstmParams::zeros(vocab.len() + 1, config.embed_dim, config.hidden_dim, config.layers);
    let count = r.read_u32::<LE>()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", slots.len())));
    }
    for (expected, slot) in slots.iter_mut() {
        let name = String::from_utf8(read_bytes(&mut r, 256)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        read_tensor(&mut r, &name, slot)?;
    }
    drop(slots);
    if !params.all_finite() {
        return Err(Error::Numerical("checkpoint contains non-finite parameters".into()));
    }
    Ok(LstmLmModel { config, vocab, params })
}

fn read_tensor<R: Read>(r: &mut R, name: &str, slot: &mut ArrayViewMutD<'_, f32>) -> Result<()> {
    let ndim = r.read_u32::<LE>()? as usize;
    let mut dims = Vec::with_capacity(ndim.min(8));
    for _ in 0..ndim {
        dims.push(r.read_u64::<LE>()? as usize);
    }
    if dims != slot.shape() {
        return Err(Error::Format(format!(
            "tensor {name} has shape {dims:?}, expected {:?}",
            slot.shape()
        )));
    }
    for x in slot.iter_mut() {
        *x = r.read_f32::<LE>()?;
    }
    Ok(())
}

