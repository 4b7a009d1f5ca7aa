//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SMARTCKP"
//! version   u32
//! header    u64 length + JSON (configs, task, normalizer, progress)
//! model     parameter block
//! teacher   u8 flag, then a parameter block if 1
//! adam      u8 flag, then u64 step and two tensor lists if 1
//! ```
//!
//! A parameter block is a `u32` count followed by, per parameter, its name
//! (`u32` length + UTF-8), a trainable byte and a tensor. A tensor is a `u32`
//! rank, `u64` extents and row-major `f64` values. Files are written to a
//! temporary sibling and renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smart_core::data::{Normalizer, TaskKind};
use smart_core::model::{AblationFlags, MartModel, ModelConfig};
use smart_core::optim::{Adam, AdamState};
use smart_core::train::{PretrainState, TrainConfig};
use smart_core::{ParamStore, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SMARTCKP";
pub const VERSION: u32 = 1;

/// Everything in a checkpoint except the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub ablation: AblationFlags,
    pub task: TaskKind,
    pub train: TrainConfig,
    pub variables: Vec<String>,
    pub normalizer: Option<Normalizer>,
    /// Completed pre-training epochs.
    pub pretrain_epochs: usize,
    /// Whether fine-tuning has run.
    pub finetuned: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: MartModel,
    /// Teacher and optimizer, present while pre-training can resume.
    pub pretrain: Option<PretrainState>,
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("count exceeds u32"))?;
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn tensor(&mut self, t: &Tensor) -> std::io::Result<()> {
        self.u32(t.rank())?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }

    fn store(&mut self, s: &ParamStore) -> std::io::Result<()> {
        self.u32(s.len())?;
        for (_, p) in s.iter() {
            self.u32(p.name.len())?;
            self.bytes(p.name.as_bytes())?;
            self.u8(u8::from(p.trainable))?;
            self.tensor(&p.tensor)?;
        }
        Ok(())
    }
}

struct Reader<'p, R: Read> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::format(self.path, message)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.fail(format!("bad flag byte {b}"))),
        }
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(self.fail(format!("tensor rank {rank} is implausible")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| self.fail("tensor too large"))?;
        let raw = self.bytes(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = String::from_utf8(self.bytes(len)?).map_err(|_| self.fail("parameter name is not UTF-8"))?;
            let trainable = self.flag()?;
            let tensor = self.tensor()?;
            let id = store.add(name, tensor)?;
            store.get_mut(id).trainable = trainable;
        }
        Ok(store)
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write `path` through a temporary sibling and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut file = BufWriter::new(File::create(&tmp)?);
        write(&mut file)?;
        let file = file.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, |out| {
        let mut w = Writer { inner: out };
        w.bytes(MAGIC)?;
        w.bytes(&VERSION.to_le_bytes())?;
        w.u64(header.len() as u64)?;
        w.bytes(&header)?;
        w.store(&ckpt.model.store)?;
        match &ckpt.pretrain {
            None => {
                w.u8(0)?;
                w.u8(0)
            }
            Some(state) => {
                w.u8(1)?;
                w.store(&state.teacher)?;
                w.u8(1)?;
                w.u64(state.adam.state.step)?;
                w.u32(state.adam.state.first.len())?;
                for t in state.adam.state.first.iter().chain(&state.adam.state.second) {
                    w.tensor(t)?;
                }
                Ok(())
            }
        }
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.array::<8>()? != MAGIC {
        return Err(r.fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(r.fail(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let len = r.u64()?;
    if len > 1 << 30 {
        return Err(r.fail("header too large"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&r.bytes(len as usize)?).map_err(|e| r.fail(format!("bad header: {e}")))?;

    let mut model = MartModel::new(header.model, header.ablation, header.task, 0)?;
    let stored = r.store()?;
    model.store.load_from(&stored)?;
    for (id, p) in stored.iter() {
        model.store.get_mut(id).trainable = p.trainable;
    }

    let teacher = if r.flag()? {
        let t = r.store()?;
        let mut expect = model.teacher();
        expect.load_from(&t)?;
        Some(t)
    } else {
        None
    };
    let adam = if r.flag()? {
        let step = r.u64()?;
        let count = r.u32()?;
        if count != model.store.len() {
            return Err(r.fail(format!(
                "optimizer state covers {count} parameters, model has {}",
                model.store.len()
            )));
        }
        let first = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let second = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        for ((_, p), (a, b)) in model.store.iter().zip(first.iter().zip(&second)) {
            if a.shape() != p.tensor.shape() || b.shape() != p.tensor.shape() {
                return Err(r.fail(format!("optimizer state for `{}` has the wrong shape", p.name)));
            }
        }
        Some(Adam {
            config: header.train.adam,
            state: AdamState { step, first, second },
        })
    } else {
        None
    };
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(r.fail(format!("{} trailing bytes", rest.len())));
    }

    let pretrain = match (teacher, adam) {
        (Some(teacher), Some(adam)) => Some(PretrainState {
            teacher,
            adam,
            epochs_done: header.pretrain_epochs,
        }),
        (None, None) => None,
        _ => return Err(r.fail("teacher and optimizer state must be stored together")),
    };
    Ok(Checkpoint {
        header,
        model,
        pretrain,
    })
}
