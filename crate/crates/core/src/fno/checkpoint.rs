use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FnoConfig, FnoModel, FnoParams};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, Dtype, TensorMeta};
use crate::pde_suite::PdeFamily;

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: FnoConfig,
    pub seed: u64,
    pub task: PdeFamily,
    pub method: String,
    pub epoch: usize,
    pub val_mse: f64,
}

/// One `.bin` file per parameter tensor plus `manifest.json`.
pub fn save_checkpoint(dir: &Path, model: &FnoModel, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in model.params.named() {
        let tm = TensorMeta {
            name: name.clone(),
            dtype: Dtype::Float64,
            role: "parameter".into(),
        };
        write_tensor(&dir.join(format!("{name}.bin")), t, &tm)?;
    }
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(FnoModel, CheckpointMeta)> {
    let man = dir.join(MANIFEST);
    if !man.exists() {
        return Err(Error::MissingArtifact(man));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&man)?)?;
    let mut params = FnoParams::init(&meta.config, 0)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let path = dir.join(format!("{name}.bin"));
        let t = read_tensor(&path)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                path,
                reason: format!("expected shape {:?}, found {:?}", slot.shape(), t.shape()),
            });
        }
        *slot = t;
    }
    Ok((
        FnoModel {
            config: meta.config,
            params,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = FnoConfig {
            width: 4,
            hidden: 3,
            n_heads: 2,
            nt: 8,
            nx: 8,
            ..FnoConfig::default()
        };
        let model = FnoModel::new(cfg, 5).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            seed: 5,
            task: PdeFamily::Heat,
            method: "diverse".into(),
            epoch: 12,
            val_mse: 1.5e-4,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(m, meta);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let cfg = FnoConfig {
            width: 4,
            hidden: 3,
            nt: 8,
            nx: 8,
            ..FnoConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            seed: 0,
            task: PdeFamily::Pme,
            method: "fno".into(),
            epoch: 0,
            val_mse: 0.0,
        };
        save_checkpoint(dir.path(), &FnoModel::new(cfg, 0).unwrap(), &meta).unwrap();
        fs::remove_file(dir.path().join("head0_w2.bin")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::MissingArtifact(_))
        ));
    }
}
