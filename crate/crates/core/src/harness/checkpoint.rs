//! Versioned binary checkpoints: the full engine state, the learner state,
//! the run position, and the metric window. Round-trips are byte-identical
//! and a resumed run reproduces the uninterrupted trajectory exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::run::{Engine, RunStats};
use crate::dense::DenseLstm;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::td::{LearnerConfig, TdLambda};
use crate::wire::*;

const MAGIC: [u8; 8] = *b"CCNCKPT\0";
const VERSION: u32 = 1;

pub fn save(
    path: impl AsRef<Path>,
    engine: &Engine,
    learner: &TdLambda,
    t: u64,
    stats: &RunStats,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    put_u32(&mut w, VERSION)?;
    match engine {
        Engine::Staged(net) => {
            put_u8(&mut w, 0)?;
            net.write_state(&mut w)?;
        }
        Engine::Dense(net) => {
            put_u8(&mut w, 1)?;
            net.write_state(&mut w)?;
        }
    }
    put_f64s(&mut w, &learner.z)?;
    put_f64s(&mut w, &learner.v)?;
    put_f64s(&mut w, &learner.grad_prev)?;
    put_f64(&mut w, learner.y)?;
    put_u8(&mut w, learner.primed as u8)?;
    put_u64(&mut w, learner.steps)?;
    put_u64(&mut w, t)?;
    let (window, next, filled) = stats.entries();
    put_f64s(&mut w, window)?;
    put_u64(&mut w, next as u64)?;
    put_u64(&mut w, filled as u64)?;
    w.flush()?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

pub fn load(
    path: impl AsRef<Path>,
    learner_cfg: &LearnerConfig,
) -> Result<(Engine, TdLambda, u64, RunStats)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let engine = match get_u8(&mut r)? {
        0 => Engine::Staged(Network::read_state(&mut r)?),
        1 => Engine::Dense(DenseLstm::read_state(&mut r)?),
        tag => {
            return Err(Error::InvalidConfig(format!(
                "unknown engine tag {tag} in checkpoint"
            )))
        }
    };
    let z = get_f64s(&mut r)?;
    let mut learner = TdLambda::new(*learner_cfg, z.len())?;
    learner.z = z;
    learner.v = get_f64s(&mut r)?;
    learner.grad_prev = get_f64s(&mut r)?;
    learner.y = get_f64(&mut r)?;
    learner.primed = get_u8(&mut r)? != 0;
    learner.steps = get_u64(&mut r)?;
    let t = get_u64(&mut r)?;
    let window = get_f64s(&mut r)?;
    let next = get_u64(&mut r)? as usize;
    let filled = get_u64(&mut r)? as usize;
    Ok((engine, learner, t, RunStats::restore(window, next, filled)))
}
