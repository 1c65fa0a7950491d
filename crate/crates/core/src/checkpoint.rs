//! Checkpoints: a JSON manifest plus one little-endian `f64` file per
//! parameter block.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::env::make_env;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: String,
    pub param_count: usize,
    pub blocks: Vec<BlockEntry>,
}

/// Writes `model` and `cfg` into `dir`, replacing any previous checkpoint
/// there only once every file has been written.
pub fn save(dir: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut blocks = Vec::new();
    for (i, b) in model.params.blocks().iter().enumerate() {
        let file = format!("{i:03}.bin");
        let bytes: Vec<u8> = b.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(staging.join(&file), bytes)?;
        blocks.push(BlockEntry {
            name: b.name.clone(),
            rows: b.value.rows(),
            cols: b.value.cols(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        param_count: model.param_count(),
        blocks,
    };
    fs::write(staging.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, rebuilding the network from its stored config.
pub fn load(dir: &Path) -> Result<(RunConfig, Model)> {
    let manifest = read_manifest(dir)?;
    let cfg = RunConfig::parse_text(&manifest.config)?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let env = make_env(&cfg.env, cfg.gamma)?;
    let mut model = Model::new(&cfg, env.spec(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if manifest.blocks.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} blocks, the configured network {}",
            manifest.blocks.len(),
            model.params.len()
        )));
    }
    for (i, entry) in manifest.blocks.iter().enumerate() {
        let block = model.params.block_mut(i);
        if entry.name != block.name || [entry.rows, entry.cols] != block.value.shape() {
            return Err(Error::Checkpoint(format!(
                "block {i}: checkpoint has `{}` {}x{}, network expects `{}` {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                block.name,
                block.value.shape()
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != entry.rows * entry.cols * 8 {
            return Err(Error::Checkpoint(format!("`{}`: {} bytes on disk", entry.file, bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        block.value = Tensor::new(entry.rows, entry.cols, data)?;
    }
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.hidden = 6;
        cfg.m = 3;
        cfg.repr_hidden = 5;
        cfg.mixer_embed = 4;
        cfg
    }

    fn model_for(cfg: &RunConfig, seed: u64) -> Model {
        let env = make_env(&cfg.env, cfg.gamma).unwrap();
        Model::new(cfg, env.spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let model = model_for(&cfg, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &cfg, &model).unwrap();
        let (cfg2, loaded) = load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.params, model.params);
        // saving again over an existing checkpoint works
        save(&path, &cfg, &loaded).unwrap();
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = small();
        let model = model_for(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &cfg, &model).unwrap();
        let mut manifest = read_manifest(&path).unwrap();
        let mut other = cfg.clone();
        other.hidden = 7;
        manifest.config = other.to_text();
        manifest.config_hash = other.hash();
        fs::write(path.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let cfg = small();
        let model = model_for(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &cfg, &model).unwrap();
        let mut manifest = read_manifest(&path).unwrap();
        manifest.format_version = 99;
        fs::write(path.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("format version 99"));
    }
}
