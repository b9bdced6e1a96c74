//! Versioned checkpoint files: magic `PVAE1`, format version, configs,
//! named arrays, ADAM moments, global step and metric history, then a CRC32.

use std::path::Path;

use super::adam::AdamState;
use super::{StepRecord, TrainConfig, TrainState};
use crate::config::{from_lines, to_lines};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::ModelConfig;
use crate::nn::{ParamEntry, ParamRole, ParamStore};
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"PVAE1";
pub const FORMAT_VERSION: u32 = 1;

pub fn checkpoint_bytes<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = ByteWriter::new(MAGIC, FORMAT_VERSION);
    w.str(&to_lines(&state.model_config));
    w.str(&to_lines(&state.train_config));
    w.str(&state.init_scheme);
    w.u64(state.step);

    w.u64(state.store.len() as u64);
    for (name, e) in state.store.iter() {
        w.tensor(name, &e.value);
        w.u8(match e.role {
            ParamRole::Learnable => 0,
            ParamRole::Buffer => 1,
        });
        w.u8(e.frozen as u8);
    }

    w.u64(state.adam.t);
    w.u64(state.adam.m.len() as u64);
    for (name, m) in &state.adam.m {
        w.tensor(name, m);
        w.tensor(name, &state.adam.v[name]);
    }

    w.u64(state.history.len() as u64);
    for r in &state.history {
        w.u64(r.step);
        w.u64(r.epoch as u64);
        w.u64(r.batch as u64);
        for v in [r.recon, r.kl_occ, r.kl_app, r.total, r.tau] {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = ByteReader::open(bytes, MAGIC, FORMAT_VERSION)?;
    let model_config = from_lines(ModelConfig::default(), &r.str()?)?;
    let train_config = from_lines(TrainConfig::default(), &r.str()?)?;
    let init_scheme = r.str()?;
    let step = r.u64()?;

    let mut store = ParamStore::new();
    for _ in 0..r.u64()? {
        let (name, value) = r.tensor::<T>()?;
        let role = match r.u8()? {
            0 => ParamRole::Learnable,
            1 => ParamRole::Buffer,
            b => return Err(Error::Format(format!("unknown parameter role {b} for {name}"))),
        };
        let frozen = r.u8()? != 0;
        store.insert_entry(name, ParamEntry { value, role, frozen });
    }

    let mut adam = AdamState::new();
    adam.t = r.u64()?;
    for _ in 0..r.u64()? {
        let (name, m) = r.tensor::<T>()?;
        let (_, v) = r.tensor::<T>()?;
        adam.m.insert(name.clone(), m);
        adam.v.insert(name, v);
    }

    let mut history = Vec::new();
    for _ in 0..r.u64()? {
        let (step, epoch, batch) = (r.u64()?, r.u64()? as usize, r.u64()? as usize);
        history.push(StepRecord {
            step,
            epoch,
            batch,
            recon: r.f64()?,
            kl_occ: r.f64()?,
            kl_app: r.f64()?,
            total: r.f64()?,
            tau: r.f64()?,
        });
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(TrainState {
        model_config,
        train_config,
        init_scheme,
        store,
        adam,
        step,
        history,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
