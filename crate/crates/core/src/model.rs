//! Parameter initialization and checkpoints that bundle the model
//! configuration with its weights.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"BDCK" | u32 version | u32 config_len | config (UTF-8 TOML) | parameter store
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::{backbone, deem, head};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fresh parameters for every backbone block, exit gate and head branch.
pub fn init_params(cfg: &ViTConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    backbone::register_params(&mut store, cfg, &mut rng)?;
    deem::register_params(&mut store, cfg, &mut rng)?;
    head::register_params(&mut store, cfg, &mut rng)?;
    Ok(store)
}

/// Model configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ViTConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let text = toml::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        self.params.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if &word != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut text = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|e| Error::Format(e.to_string()))?;
        let cfg: ViTConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        let params = ParamStore::read_from(&mut r)?;
        let expected = init_params(&cfg, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Format("checkpoint has parameters the config does not use".into()));
        }
        Ok(Self { cfg, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
