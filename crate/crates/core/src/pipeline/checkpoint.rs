//! Binary checkpoint. Layout, all integers little-endian:
//!
//! ```text
//! "EVMO" | u32 version | u8 stage | u8 arch | u64 step
//! u64 len | run config JSON
//! u32 n   | n × (str name | u64 seed | u64 stream | u128 word_pos)          rng states
//! u32 n   | n × (str name | u8 trainable | u32 ndim | ndim × u64 | f64 data) parameters
//! u64 t   | u32 n | n × (str name | u64 len | f64 m | f64 v)                Adam moments
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{EvoError, Result};
use crate::model::{Architecture, Model};
use crate::rng::{streams, Rng, RngState};

use super::adam::Adam;
use super::{RunConfig, Stage, TrainState};

pub const MAGIC: &[u8; 4] = b"EVMO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(run: RunConfig, state: TrainState) -> Self {
        Checkpoint { run, state }
    }

    /// Generator positions for the next step. Every draw is addressed by
    /// `(seed, stream, step)`, so these are fully determined by the step
    /// counter; they are stored so the file is self-describing.
    pub fn rng_states(&self) -> Vec<(String, RngState)> {
        let step = self.state.step;
        let train_stream = streams::TRAIN_DATA + self.state.stage.number() as u64;
        vec![
            (
                "train_data".into(),
                Rng::substream(self.run.task.seed, train_stream, step).state(),
            ),
            (
                "evolution".into(),
                Rng::substream(self.run.model.seed, streams::EVOLUTION, step).state(),
            ),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(self.state.stage.number());
        w.push(match self.state.model.architecture() {
            Architecture::Dense => 0,
            Architecture::Moe => 1,
        });
        w.extend_from_slice(&self.state.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.run).expect("config serializes");
        w.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        w.extend_from_slice(&cfg);

        let rngs = self.rng_states();
        w.extend_from_slice(&(rngs.len() as u32).to_le_bytes());
        for (name, s) in &rngs {
            put_str(&mut w, name);
            w.extend_from_slice(&s.seed.to_le_bytes());
            w.extend_from_slice(&s.stream.to_le_bytes());
            w.extend_from_slice(&s.word_pos.to_le_bytes());
        }

        let params = self.state.model.params();
        w.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (id, p) in params.iter() {
            put_str(&mut w, &p.name);
            w.push(params.is_trainable(id) as u8);
            let shape = p.tensor.shape();
            w.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                w.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut w, p.tensor.data());
        }

        let opt = &self.state.optimizer;
        w.extend_from_slice(&opt.step.to_le_bytes());
        w.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (id, p) in params.iter() {
            put_str(&mut w, &p.name);
            w.extend_from_slice(&(opt.m[id.0].len() as u64).to_le_bytes());
            put_f64s(&mut w, &opt.m[id.0]);
            put_f64s(&mut w, &opt.v[id.0]);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EvoError::Format("bad magic, not an EVMO checkpoint".into()));
        }
        let version = r.u32()?;
        if version > VERSION {
            return Err(EvoError::Version {
                found: version,
                supported: VERSION,
            });
        }
        if version == 0 {
            return Err(EvoError::Format("version 0 is not a valid checkpoint".into()));
        }
        let stage = Stage::from_number(r.u8()?).map_err(|e| EvoError::Format(e.to_string()))?;
        let arch = match r.u8()? {
            0 => Architecture::Dense,
            1 => Architecture::Moe,
            a => return Err(EvoError::Format(format!("unknown architecture tag {a}"))),
        };
        let step = r.u64()?;
        let cfg_len = r.len64()?;
        let run: RunConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        run.validate()?;

        let n_rng = r.u32()? as usize;
        for _ in 0..n_rng {
            r.string()?;
            r.take(8 + 8 + 16)?;
        }

        let mut model = Model::skeleton(&run.model, arch)?;
        let n_params = r.u32()? as usize;
        if n_params != model.params().len() {
            return Err(EvoError::config(format!(
                "checkpoint holds {n_params} parameters, config expects {}",
                model.params().len()
            )));
        }
        let mut trainable = HashMap::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.string()?;
            let flag = r.u8()? != 0;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len64()?);
            }
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| EvoError::config(format!("unexpected parameter {name}")))?;
            if model.params().tensor(id).shape() != shape.as_slice() {
                return Err(EvoError::config(format!(
                    "parameter {name}: checkpoint shape {shape:?}, config shape {:?}",
                    model.params().tensor(id).shape()
                )));
            }
            let data = r.f64s(shape.iter().product())?;
            model.params_mut().assign(id, &data)?;
            if trainable.insert(name.clone(), flag).is_some() {
                return Err(EvoError::Format(format!("duplicate parameter {name}")));
            }
        }
        model.params_mut().set_trainable(|p| trainable[&p.name]);

        let mut optimizer = Adam::new(model.params());
        optimizer.step = r.u64()?;
        let n_opt = r.u32()? as usize;
        if n_opt != n_params {
            return Err(EvoError::config("optimizer state does not match parameter list"));
        }
        for _ in 0..n_opt {
            let name = r.string()?;
            let len = r.len64()?;
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| EvoError::config(format!("optimizer state for unknown parameter {name}")))?;
            if len != optimizer.m[id.0].len() {
                return Err(EvoError::config(format!("optimizer state for {name} has wrong length")));
            }
            optimizer.m[id.0] = r.f64s(len)?;
            optimizer.v[id.0] = r.f64s(len)?;
        }
        if r.pos != bytes.len() {
            return Err(EvoError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            run,
            state: TrainState {
                model,
                optimizer,
                stage,
                step,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| EvoError::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| EvoError::Format(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| EvoError::Format("invalid UTF-8 name".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| EvoError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
