//! Versioned binary checkpoints.
//!
//! Header: magic `VQCLCKPT`, `u32` format version, `u8` mode, then `u64`
//! K, D, A, V, hidden, wave_k, speaker_dim, n_speakers, window and seed,
//! `u8` stage and `u8` frozen-module mask. Parameter blocks follow.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Mode, ModelConfig, ModelError, ModelState, Stage};
use crate::blocks::{
    read_blocks, read_u32, read_u64, read_u8, write_blocks, write_u32, write_u64, write_u8,
};

pub const MAGIC: &[u8; 8] = b"VQCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn write_state<W: Write>(w: &mut W, m: &ModelState) -> Result<(), CheckpointError> {
    let c = m.config();
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u8(w, c.mode.code())?;
    for v in [
        c.codebook_size,
        c.latent_dim,
        c.acoustic_dim,
        c.vocab,
        c.hidden,
        c.wave_k,
        c.speaker_dim,
        c.n_speakers,
        c.window,
    ] {
        write_u64(w, v as u64)?;
    }
    write_u64(w, c.seed)?;
    write_u8(w, m.stage().code())?;
    write_u8(w, m.frozen_mask())?;
    write_blocks(w, m.params().iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

pub fn read_state<R: Read>(r: &mut R) -> Result<ModelState, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mode = read_u8(r)?;
    let mode =
        Mode::from_code(mode).ok_or_else(|| CheckpointError::Corrupt(format!("mode {mode}")))?;
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = usize::try_from(read_u64(r)?)
            .map_err(|_| CheckpointError::Corrupt("dimension".into()))?;
    }
    let seed = read_u64(r)?;
    let [codebook_size, latent_dim, acoustic_dim, vocab, hidden, wave_k, speaker_dim, n_speakers, window] =
        dims;
    let config = ModelConfig {
        mode,
        vocab,
        acoustic_dim,
        latent_dim,
        hidden,
        codebook_size,
        wave_k,
        speaker_dim,
        n_speakers,
        window,
        seed,
    };
    let stage = read_u8(r)?;
    let stage = Stage::from_code(stage)
        .ok_or_else(|| CheckpointError::Corrupt(format!("stage {stage}")))?;
    let frozen = ModelState::frozen_from_mask(read_u8(r)?);
    let params = read_blocks(r)?.into_iter().collect();
    Ok(ModelState::from_parts(config, params, frozen, stage)?)
}

pub fn save(path: &Path, m: &ModelState) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_state(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState, CheckpointError> {
    read_state(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModuleKind;

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [Mode::Vq, Mode::Vae, Mode::Standard] {
            let mut m = ModelState::new(ModelConfig {
                mode,
                seed: 11,
                ..Default::default()
            })
            .unwrap();
            m.param_mut("tenc.b1").unwrap()[[0, 0]] = -0.0;
            m.param_mut("senc.b1").unwrap()[[0, 1]] = f64::MIN_POSITIVE / 4.0;
            m.freeze(ModuleKind::TextEncoder);
            m.set_stage(Stage::Trained);
            let mut buf = Vec::new();
            write_state(&mut buf, &m).unwrap();
            let back = read_state(&mut buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn round_trip_after_removal() {
        let mut m = ModelState::new(ModelConfig::default()).unwrap();
        m.remove_sd().unwrap();
        let mut buf = Vec::new();
        write_state(&mut buf, &m).unwrap();
        let back = read_state(&mut buf.as_slice()).unwrap();
        assert!(back.sd_removed());
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            read_state(&mut b"NOTACKPTxxxxxxxx".as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        let m = ModelState::new(ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_state(&mut buf, &m).unwrap();
        buf[8] = 9;
        assert!(matches!(
            read_state(&mut buf.as_slice()),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let m = ModelState::new(ModelConfig::default()).unwrap();
        save(&path, &m).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }
}
