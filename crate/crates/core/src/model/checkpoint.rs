//! Model parameters as GRID files plus `checkpoint.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Mode, ModelParams, TrainConfig, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::grid_io::{read_grid, write_grid, Grid, GridElement};
use crate::ntm::NtmParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub mode: Mode,
    pub config_hash: String,
    pub config: TrainConfig,
    pub in_channels: usize,
    pub classes: usize,
    pub arch: Arch,
    /// Tensor name and shape, in file order.
    pub tensors: Vec<(String, Vec<usize>)>,
    pub class_distribution: Option<Vec<f64>>,
}

pub fn save_checkpoint<T: GridElement>(
    dir: &Path,
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    epoch: usize,
    class_distribution: Option<Vec<f64>>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let shapes = params.shapes();
    let mut tensors = Vec::new();
    for ((name, shape), data) in TENSOR_NAMES.iter().zip(shapes).zip(params.tensors()) {
        let grid = Grid::new(shape.clone(), T::wrap(data.to_vec()))?;
        write_grid(dir.join(format!("{name}.jgrd")), &grid)?;
        tensors.push((name.to_string(), shape));
    }
    let manifest = CheckpointManifest {
        epoch,
        mode: cfg.mode,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        in_channels: params.in_channels,
        classes: params.classes,
        arch: params.arch,
        tensors,
        class_distribution,
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint<T: GridElement>(dir: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::Format("checkpoint config hash does not match its config".into()));
    }
    let mut params = ModelParams::<T>::zeros(manifest.in_channels, manifest.classes, manifest.arch)?;
    let shapes = params.shapes();
    for ((name, shape), slot) in TENSOR_NAMES.iter().zip(shapes).zip(params.tensors_mut()) {
        let grid = read_grid(dir.join(format!("{name}.jgrd")))?;
        if grid.dims != shape {
            return Err(Error::shape(format!("{name}: expected {shape:?}, found {:?}", grid.dims)));
        }
        slot.copy_from_slice(&T::unwrap(grid.data)?);
    }
    // Re-validate the NTM parameters (finite values).
    params.ntm_c = NtmParams::new(params.classes, params.ntm_c.raw().to_vec())?;
    params.ntm_a = NtmParams::new(2, params.ntm_a.raw().to_vec())?;
    params.check_finite()?;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f64>::init(3, 4, Arch::default(), 4.0, 9).unwrap();
        let cfg = TrainConfig::default();
        let m = save_checkpoint(dir.path(), &p, &cfg, 7, Some(vec![0.25; 4])).unwrap();
        let (q, m2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, m2);
        assert_eq!(m2.epoch, 7);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(3, 2, Arch::default(), 4.0, 9).unwrap();
        save_checkpoint(dir.path(), &p, &TrainConfig::default(), 1, None).unwrap();
        let path = dir.path().join("checkpoint.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"lr\": 0.05", "\"lr\": 0.5");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Format(_))));
    }
}
