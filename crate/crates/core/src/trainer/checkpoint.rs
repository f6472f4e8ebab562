//! Binary trainer checkpoints.
//!
//! Layout (little-endian): magic `RACK`, format version, completed iteration,
//! seed, the three controller fields, the optimizer's learning rate, step and
//! moment vectors, then the actor and reference policy blobs.
//!
//! Rollout randomness is keyed by `(seed, iteration, episode)`, so the seed
//! and iteration are the whole random state.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policy::{read_f64, read_u32, PolicyParams, ReferencePolicy};
use crate::shaping::BetaController;

use super::TrainerState;

const MAGIC: &[u8; 4] = b"RACK";
const VERSION: u32 = 1;

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let lo = read_u32(r)? as u64;
    let hi = read_u32(r)? as u64;
    Ok(lo | (hi << 32))
}

pub fn write_state<W: Write>(state: &TrainerState, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(state.iteration as u64).to_le_bytes())?;
    w.write_all(&state.seed.to_le_bytes())?;
    for x in [
        state.controller.beta,
        state.controller.kl_target,
        state.controller.k_beta,
        state.optimizer.learning_rate,
    ] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&state.optimizer.step.to_le_bytes())?;
    w.write_all(&(state.optimizer.m.len() as u64).to_le_bytes())?;
    for x in state.optimizer.m.iter().chain(&state.optimizer.v) {
        w.write_all(&x.to_le_bytes())?;
    }
    state.policy.save(&mut w)?;
    state.reference.params().save(&mut w)?;
    w.flush()
}

pub fn read_state<R: Read>(mut r: R) -> Result<TrainerState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad trainer checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let iteration = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let beta = read_f64(&mut r)?;
    let kl_target = read_f64(&mut r)?;
    let k_beta = read_f64(&mut r)?;
    let learning_rate = read_f64(&mut r)?;
    let step = read_u64(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    let mut optimizer = Adam::new(n, learning_rate);
    optimizer.step = step;
    for x in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
        *x = read_f64(&mut r)?;
    }
    let policy = PolicyParams::load(&mut r)?;
    let reference = PolicyParams::load(&mut r)?;
    if policy.num_params() != n || reference.num_params() != n {
        return Err(Error::Checkpoint("optimizer and policy sizes disagree".into()));
    }
    Ok(TrainerState {
        iteration,
        seed,
        controller: BetaController {
            beta,
            kl_target,
            k_beta,
        },
        optimizer,
        policy,
        reference: ReferencePolicy::new(reference),
    })
}

/// Path of the checkpoint taken after `iteration`.
pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter-{iteration:05}.ckpt"))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(state: &TrainerState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_state(state, BufWriter::new(file)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainerState> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_state(BufReader::new(file))
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let iteration = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("iter-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(i) = iteration {
            if best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
