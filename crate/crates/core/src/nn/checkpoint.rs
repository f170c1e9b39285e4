//! Versioned little-endian checkpoint format.
//!
//! Layout: magic `NVGD`, format version, the model configuration, training
//! position (epoch, seed, optimizer step), then every tensor as
//! (name length, name, rank, dims, raw 64-bit floats). Model tensors come
//! first in canonical order, then the optimizer's first and second moments
//! when present. Save -> load -> forward is bit-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::{HeadKind, Model, ModelError, TransformerConfig};
use super::tensor::Tensor;
use super::train::AdamState;

pub const MAGIC: &[u8; 4] = b"NVGD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.inner.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn tensor(&mut self, name: &str, t: &Tensor) -> std::io::Result<()> {
        self.u32(name.len() as u32)?;
        self.inner.write_all(name.as_bytes())?;
        self.u32(t.shape.len() as u32)?;
        for &d in &t.shape {
            self.u32(d as u32)?;
        }
        for &v in &t.data {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> std::io::Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn tensor(&mut self) -> std::io::Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let mut name = vec![0u8; name_len];
        self.inner.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::from_vec(data, &shape)))
    }
}

/// Everything a resumed or deployed run needs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub epoch: u64,
    pub seed: u64,
}

pub fn save(
    model: &Model,
    optimizer: Option<&AdamState>,
    epoch: u64,
    seed: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = Writer {
        inner: BufWriter::new(file),
    };
    (|| -> std::io::Result<()> {
        w.inner.write_all(MAGIC)?;
        w.u32(VERSION)?;
        let c = &model.config;
        w.u8(match c.head {
            HeadKind::CltHead => 0,
            HeadKind::PltHead => 1,
        })?;
        w.u8(c.pair_tokens as u8)?;
        w.u32(c.vocab_size as u32)?;
        w.u32(c.embed_dim as u32)?;
        w.u32(c.ff_dim as u32)?;
        w.u32(c.heads as u32)?;
        w.u32(c.layers as u32)?;
        w.u32(c.context_tokens as u32)?;
        w.u32(c.input_dim as u32)?;
        w.f64(c.dropout)?;
        w.u64(epoch)?;
        w.u64(seed)?;
        w.u8(optimizer.is_some() as u8)?;
        w.u64(optimizer.map_or(0, |o| o.step))?;

        let mut model_tensors = 0usize;
        model.visit_params(|_, _, _| model_tensors += 1);
        let opt_tensors = optimizer.map_or(0, |o| o.m.len() + o.v.len());
        w.u32((model_tensors + opt_tensors) as u32)?;
        let mut write_err = None;
        model.visit_params(|name, t, _| {
            if write_err.is_none() {
                if let Err(e) = w.tensor(name, t) {
                    write_err = Some(e);
                }
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        if let Some(opt) = optimizer {
            for (i, t) in opt.m.iter().enumerate() {
                w.tensor(&format!("opt.m.{i}"), t)?;
            }
            for (i, t) in opt.v.iter().enumerate() {
                w.tensor(&format!("opt.v.{i}"), t)?;
            }
        }
        w.inner.flush()
    })()
    .map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let mut magic = [0u8; 4];
    r.inner.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32().map_err(io)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let head = match r.u8().map_err(io)? {
        0 => HeadKind::CltHead,
        1 => HeadKind::PltHead,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown head kind {other}"
            )))
        }
    };
    let pair_tokens = r.u8().map_err(io)? != 0;
    let config = TransformerConfig {
        vocab_size: r.u32().map_err(io)? as usize,
        embed_dim: r.u32().map_err(io)? as usize,
        ff_dim: r.u32().map_err(io)? as usize,
        heads: r.u32().map_err(io)? as usize,
        layers: r.u32().map_err(io)? as usize,
        context_tokens: r.u32().map_err(io)? as usize,
        input_dim: r.u32().map_err(io)? as usize,
        dropout: r.f64().map_err(io)?,
        head,
        pair_tokens,
    };
    let epoch = r.u64().map_err(io)?;
    let seed = r.u64().map_err(io)?;
    let has_opt = r.u8().map_err(io)? != 0;
    let opt_step = r.u64().map_err(io)?;

    let count = r.u32().map_err(io)? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor().map_err(io)?;
        tensors.insert(name, t);
    }

    let mut model = Model::new(config, 0)?;
    let mut missing = Vec::new();
    model.visit_params_mut(|name, t, _| match tensors.remove(name) {
        Some(loaded) if loaded.shape == t.shape => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} != expected {:?}",
            loaded.shape, t.shape
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(CheckpointError::Malformed(missing.join("; ")));
    }

    let optimizer = if has_opt {
        let n = model.trainable_shapes().len();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(tensors.remove(&format!("opt.m.{i}")).ok_or_else(|| {
                CheckpointError::Malformed(format!("opt.m.{i}: missing"))
            })?);
            v.push(tensors.remove(&format!("opt.v.{i}")).ok_or_else(|| {
                CheckpointError::Malformed(format!("opt.v.{i}: missing"))
            })?);
        }
        Some(AdamState { m, v, step: opt_step })
    } else {
        None
    };

    Ok(Checkpoint {
        model,
        optimizer,
        epoch,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{clt_predict_frame, TrainSample};
    use crate::nn::train::{train, TrainConfig};

    #[test]
    fn round_trip_is_bit_identical() {
        let config = TransformerConfig {
            vocab_size: 32,
            embed_dim: 16,
            ff_dim: 16,
            heads: 2,
            layers: 2,
            context_tokens: 16,
            dropout: 0.0,
            input_dim: 0,
            head: HeadKind::CltHead,
            pair_tokens: true,
        };
        let mut model = Model::new(config, 7).unwrap();
        // Train a little so weights and optimizer are non-trivial.
        let samples = vec![TrainSample::Clt {
            tokens: (0..16).map(|i| i as u32).collect(),
            labels: (0..8).map(|i| (i % 2) as f64).collect(),
        }];
        let (_, adam) = train(
            &mut model,
            &samples,
            &TrainConfig {
                learning_rate: 1e-3,
                scheduler_step: None,
                scheduler_gamma: 1.0,
                epochs: 3,
                batch_size: 1,
                seed: 9,
            },
        )
        .unwrap();

        let tokens: Vec<u32> = (0..16).map(|i| (i * 3) % 32).collect();
        let before = clt_predict_frame(&model, &tokens).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, Some(&adam), 3, 9, &path).unwrap();
        let loaded = load(&path).unwrap();
        let after = clt_predict_frame(&loaded.model, &tokens).unwrap();

        assert_eq!(before, after, "forward outputs must match bitwise");
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.seed, 9);
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.step, adam.step);
        for (a, b) in opt.m.iter().zip(&adam.m) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
