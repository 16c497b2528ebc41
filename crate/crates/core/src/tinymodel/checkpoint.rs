//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 8    | magic `CURATCK1`                    |
//! | 8      | 4    | n_layers (u32)                      |
//! | 12     | 4    | d_model (u32)                       |
//! | 16     | 4    | n_heads (u32)                       |
//! | 20     | 4    | vocab (u32)                         |
//! | 24     | 4    | max_seq_len (u32)                   |
//! | 28     | 8    | step (u64)                          |
//! | 36     | 8    | seed (u64)                          |
//! | 44     | 8    | parameter count N (u64)             |
//! | 52     | 4·N  | parameters as f32, tensor order     |
//!
//! Parameters are narrowed from f64 to f32 on write, so a reloaded model
//! matches the saved one to single precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{CuratorError, Result};

const MAGIC: &[u8; 8] = b"CURATCK1";

pub fn write_checkpoint(model: &ModelState, mut out: impl Write) -> Result<()> {
    let c = &model.config;
    out.write_all(MAGIC)?;
    for v in [c.n_layers, c.d_model, c.n_heads, c.vocab, c.max_seq_len] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&model.step.to_le_bytes())?;
    out.write_all(&model.seed.to_le_bytes())?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.params.len() * 4);
    for &p in &model.params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ModelState> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CuratorError::Checkpoint("bad magic".into()));
    }
    let mut u32s = [0usize; 5];
    for slot in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let mut read_u64 = || -> Result<u64> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let step = read_u64()?;
    let seed = read_u64()?;
    let count = read_u64()? as usize;
    let config = ModelConfig {
        n_layers: u32s[0],
        d_model: u32s[1],
        n_heads: u32s[2],
        vocab: u32s[3],
        max_seq_len: u32s[4],
    };
    config
        .validate()
        .map_err(|e| CuratorError::Checkpoint(e.to_string()))?;
    if count != config.param_count() {
        return Err(CuratorError::Checkpoint(format!(
            "header declares {count} parameters, architecture has {}",
            config.param_count()
        )));
    }
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw)?;
    let params = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(ModelState {
        config,
        params,
        step,
        seed,
    })
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}
