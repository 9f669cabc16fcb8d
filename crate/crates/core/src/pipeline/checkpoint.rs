//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `REPRECKP`, version `u32`, config text
//! (`u64` length + UTF-8), step `u64`, optimizer update count `u64`, then
//! five tensor tables (online parameters, target parameters, first and
//! second optimizer moments, auxiliary state), then a SHA-256 of every
//! preceding byte. A table is a `u32` entry count followed by entries of
//! name (`u32` length + UTF-8), dtype tag `u8` (0 = f64), rank `u32`,
//! dims (`u64` each) and the payload.

use std::fs;
use std::path::Path;

use repre_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::contrastive::NegativeQueue;
use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::optim::AdamW;
use crate::pipeline::train::Trainer;

pub const MAGIC: &[u8; 8] = b"REPRECKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const CHECKSUM_LEN: usize = 32;

pub type Table = Vec<(String, Tensor)>;

/// Everything needed to resume a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub optimizer_updates: u64,
    pub online: Table,
    pub target: Table,
    pub moment1: Table,
    pub moment2: Table,
    /// Negative queue as `queue` `[len, D]`, when non-empty.
    pub state: Table,
}

fn store_table(store: &ParamStore) -> Table {
    store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect()
}

fn moment_table(store: &ParamStore, moments: &[Vec<f64>]) -> Table {
    store
        .ids()
        .zip(moments)
        .map(|(id, m)| {
            let t = Tensor::new(store.value(id).shape(), m.clone()).expect("moment shape");
            (store.name(id).to_string(), t)
        })
        .collect()
}

fn fill_store(store: &mut ParamStore, table: &Table, what: &str) -> Result<()> {
    if table.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} tensors in checkpoint, {} expected",
            table.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(table) {
        if store.name(id) != name || store.value(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: entry {name} {:?} does not match {} {:?}",
                t.shape(),
                store.name(id),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let opt = trainer.optimizer();
        let state = trainer
            .queue()
            .and_then(NegativeQueue::to_tensor)
            .map(|t| vec![("queue".to_string(), t)])
            .unwrap_or_default();
        Self {
            config: trainer.config().clone(),
            step: trainer.step(),
            optimizer_updates: opt.t,
            online: store_table(trainer.online_params()),
            target: store_table(trainer.target_params()),
            moment1: moment_table(trainer.online_params(), &opt.m),
            moment2: moment_table(trainer.online_params(), &opt.v),
            state,
        }
    }

    /// Loads this checkpoint into `trainer`, whose configuration must be
    /// identical to the one saved.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        if trainer.config() != &self.config {
            return Err(Error::Checkpoint(
                "checkpoint configuration differs from the trainer configuration".into(),
            ));
        }
        let mut online = trainer.online_params().clone();
        fill_store(&mut online, &self.online, "online")?;
        online.zero_grads();
        let mut target = trainer.target_params().clone();
        fill_store(&mut target, &self.target, "target")?;
        let mut opt = AdamW::new(&self.config.optim, &online);
        opt.t = self.optimizer_updates;
        for (i, ((n1, m), (n2, v))) in self.moment1.iter().zip(&self.moment2).enumerate() {
            if i >= opt.m.len() || n1 != &opt.param_names()[i] || n2 != n1 || m.numel() != opt.m[i].len() || v.numel() != opt.v[i].len() {
                return Err(Error::Checkpoint(format!("optimizer state entry {n1} does not match")));
            }
            opt.m[i] = m.data().to_vec();
            opt.v[i] = v.data().to_vec();
        }
        if self.moment1.len() != opt.m.len() || self.moment2.len() != opt.v.len() {
            return Err(Error::Checkpoint("optimizer state has the wrong number of entries".into()));
        }
        let queue = match trainer.queue() {
            Some(q) => {
                let mut fresh = NegativeQueue::new(q.capacity(), q.dim())?;
                if let Some((_, t)) = self.state.iter().find(|(n, _)| n == "queue") {
                    fresh.enqueue_keys(t)?;
                }
                Some(fresh)
            }
            None => None,
        };
        trainer.restore_parts(self.step, online, target, opt, queue);
        Ok(())
    }

    /// Rebuilds a trainer (dataset included) and restores into it.
    pub fn into_trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config.clone())?;
        self.restore_into(&mut t)?;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.optimizer_updates.to_le_bytes());
        for table in [&self.online, &self.target, &self.moment1, &self.moment2, &self.state] {
            out.extend((table.len() as u32).to_le_bytes());
            for (name, t) in table {
                out.extend((name.len() as u32).to_le_bytes());
                out.extend(name.as_bytes());
                out.push(DTYPE_F64);
                out.extend((t.ndim() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest != sum {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text)?;
        let step = r.u64()?;
        let optimizer_updates = r.u64()?;
        let mut tables = Vec::with_capacity(5);
        for _ in 0..5 {
            let n = r.u32()? as usize;
            let mut table = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                let name_len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?)
                    .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                    .to_string();
                if r.take(1)?[0] != DTYPE_F64 {
                    return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
                }
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                table.push((name, t));
            }
            tables.push(table);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        let state = tables.pop().unwrap();
        let moment2 = tables.pop().unwrap();
        let moment1 = tables.pop().unwrap();
        let target = tables.pop().unwrap();
        let online = tables.pop().unwrap();
        Ok(Self { config, step, optimizer_updates, online, target, moment1, moment2, state })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
