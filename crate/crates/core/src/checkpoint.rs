//! `STTC` checkpoints.
//!
//! ```text
//! "STTC" version(u32)
//! meta_len(u32) meta            effective config text plus a vocab fingerprint line
//! n_params(u32)
//! per param: name_len name rank dims[rank] trainable(u8) data[f32]
//! has_optimizer(u8)
//!   step(u64) lr beta1 beta2 eps weight_decay (f64)
//!   per param: present(u8) [first_moment f32..., second_moment f32...]
//! ```
//!
//! Integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Sttran;
use crate::numerics::{AdamWConfig, OptimizerState, Tensor};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"STTC";
pub const VERSION: u32 = 1;
const FINGERPRINT_KEY: &str = "vocabulary_fingerprint";

pub struct Checkpoint {
    pub model: Sttran,
    pub optimizer: Option<OptimizerState>,
    pub vocab_fingerprint: String,
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Eof("checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LE>(x as f32)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LE>(&mut buf).map_err(eof)?;
    Ok(buf.into_iter().map(f64::from).collect())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(eof)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("implausible string length {n} in checkpoint")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(eof)?;
    String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &Sttran,
    optimizer: Option<&OptimizerState>,
    vocab: &Vocabulary,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let meta = format!("{}{FINGERPRINT_KEY} = {}\n", model.config().to_text(), vocab.fingerprint());
    write_str(&mut w, &meta)?;
    let store = &model.store;
    w.write_u32::<LE>(store.len() as u32)?;
    for (_, p) in store.iter() {
        write_str(&mut w, &p.name)?;
        w.write_u32::<LE>(p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        w.write_u8(p.trainable as u8)?;
        write_f32s(&mut w, p.value.data())?;
    }
    match optimizer {
        None => w.write_u8(0)?,
        Some(opt) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(opt.step)?;
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.write_f64::<LE>(v)?;
            }
            for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
                match (m, v) {
                    (Some(m), Some(v)) => {
                        w.write_u8(1)?;
                        write_f32s(&mut w, m.data())?;
                        write_f32s(&mut w, v.data())?;
                    }
                    _ => w.write_u8(0)?,
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint and rebuilds the model from its embedded config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an STTC checkpoint".into()));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta = read_str(&mut r)?;
    let mut config_text = String::new();
    let mut fingerprint = String::new();
    for line in meta.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == FINGERPRINT_KEY => fingerprint = v.trim().to_string(),
            _ => {
                config_text.push_str(line);
                config_text.push('\n');
            }
        }
    }
    let config = ModelConfig::parse(&config_text, &[])?;
    let mut model = Sttran::new(config)?;
    let n = r.read_u32::<LE>().map_err(eof)? as usize;
    if n != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n} parameters, the configured model {}",
            model.store.len()
        )));
    }
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let rank = r.read_u32::<LE>().map_err(eof)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LE>().map_err(eof)? as usize);
        }
        let trainable = r.read_u8().map_err(eof)? != 0;
        let id = model
            .store
            .by_name(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != shape.as_slice() || p.trainable != trainable {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {shape:?} in the checkpoint, {:?} in the model",
                p.value.shape()
            )));
        }
        let len = p.value.len();
        p.value = Tensor::new(shape, read_f32s(&mut r, len)?)?;
    }
    let optimizer = match r.read_u8().map_err(eof)? {
        0 => None,
        1 => {
            let step = r.read_u64::<LE>().map_err(eof)?;
            let mut h = [0f64; 5];
            for v in h.iter_mut() {
                *v = r.read_f64::<LE>().map_err(eof)?;
            }
            let config = AdamWConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                weight_decay: h[4],
            };
            let mut opt = OptimizerState::new(config, &model.store);
            opt.step = step;
            for (i, (_, p)) in model.store.iter().enumerate() {
                if r.read_u8().map_err(eof)? == 1 {
                    let shape = p.value.shape().to_vec();
                    let m = Tensor::new(shape.clone(), read_f32s(&mut r, p.value.len())?)?;
                    let v = Tensor::new(shape, read_f32s(&mut r, p.value.len())?)?;
                    opt.first_moment[i] = Some(m);
                    opt.second_moment[i] = Some(v);
                } else {
                    opt.first_moment[i] = None;
                    opt.second_moment[i] = None;
                }
            }
            Some(opt)
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    Ok(Checkpoint {
        model,
        optimizer,
        vocab_fingerprint: fingerprint,
    })
}

pub fn save_checkpoint(path: &Path, model: &Sttran, optimizer: Option<&OptimizerState>, vocab: &Vocabulary) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), model, optimizer, vocab)
}

/// Loads a checkpoint, refusing it when it was trained on another vocabulary.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(Error::file(path))?;
    let ck = read_checkpoint(std::io::BufReader::new(f))?;
    if ck.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::Vocabulary(format!(
            "checkpoint {} was trained with vocabulary {}, data uses {}",
            path.display(),
            ck.vocab_fingerprint,
            vocab.fingerprint()
        )));
    }
    Ok(ck)
}
