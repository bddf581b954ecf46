//! Ensemble directory layout: one parameter file and one JSON sidecar per
//! location (written as training finishes, so interrupted runs resume),
//! plus a final manifest summarizing the whole ensemble.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{read_named_tensors, write_named_tensors};
use crate::error::{Error, Result};
use crate::grader::{GraderModel, TrainConfig, UNet, UNetConfig};
use crate::volgrid::PatchGrid;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LocationEntry {
    pub index: usize,
    pub coords: [usize; 3],
    pub parent: Option<usize>,
    pub alpha: f64,
    pub file: String,
    pub init_digest: u64,
    pub params_digest: u64,
    pub epochs_trained: usize,
    pub best_val_loss: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub config_hash: String,
    pub seed: u64,
    pub volume_dims: [usize; 3],
    pub patch_dims: [usize; 3],
    pub k: usize,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub locations: Vec<LocationEntry>,
}

impl EnsembleManifest {
    /// Digest of the ensemble identity: location parameter digests and
    /// vote weights, in location order. Recorded as grading provenance.
    pub fn ensemble_digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for loc in &self.locations {
            eat(&(loc.index as u64).to_le_bytes());
            eat(&loc.params_digest.to_le_bytes());
            eat(&loc.alpha.to_le_bytes());
        }
        h
    }
}

fn location_basename(grid: &PatchGrid, j: usize) -> String {
    let c = grid.coords(j);
    format!("loc_{}_{}_{}", c[0], c[1], c[2])
}

fn entry_for(model: &GraderModel, grid: &PatchGrid, config_hash: &str) -> LocationEntry {
    LocationEntry {
        index: model.location,
        coords: grid.coords(model.location),
        parent: model.parent,
        alpha: model.alpha,
        file: format!("{}.params", location_basename(grid, model.location)),
        init_digest: model.init_digest,
        params_digest: model.unet.params_digest(),
        epochs_trained: model.epochs_trained,
        best_val_loss: model.best_val_loss,
        config_hash: config_hash.to_string(),
    }
}

/// Persists one finished location (parameters + sidecar metadata).
pub fn save_location(
    dir: &Path,
    model: &GraderModel,
    grid: &PatchGrid,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let base = location_basename(grid, model.location);
    write_named_tensors(&dir.join(format!("{base}.params")), &model.unet.named_params())?;
    let entry = entry_for(model, grid, config_hash);
    let json = serde_json::to_string_pretty(&entry)
        .map_err(|e| Error::Contract(format!("sidecar serialization: {e}")))?;
    std::fs::write(dir.join(format!("{base}.json")), json)?;
    Ok(())
}

/// Writes the final manifest for a complete ensemble.
pub fn save_ensemble(
    dir: &Path,
    models: &[GraderModel],
    grid: &PatchGrid,
    unet_config: &UNetConfig,
    train_config: &TrainConfig,
    config_hash: &str,
) -> Result<EnsembleManifest> {
    std::fs::create_dir_all(dir)?;
    for model in models {
        let base = location_basename(grid, model.location);
        let params_path = dir.join(format!("{base}.params"));
        if !params_path.exists() {
            save_location(dir, model, grid, config_hash)?;
        }
    }
    let mut locations: Vec<LocationEntry> =
        models.iter().map(|m| entry_for(m, grid, config_hash)).collect();
    locations.sort_by_key(|e| e.index);
    let manifest = EnsembleManifest {
        config_hash: config_hash.to_string(),
        seed: train_config.seed,
        volume_dims: grid.dims(),
        patch_dims: grid.patch_dims(),
        k: grid.k(),
        unet: *unet_config,
        train: train_config.clone(),
        locations,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("ensemble.json"), json)?;
    Ok(manifest)
}

fn model_from_entry(dir: &Path, entry: &LocationEntry, unet: UNetConfig) -> Result<GraderModel> {
    let params = read_named_tensors(&dir.join(&entry.file))?;
    let net = UNet::<f32>::from_params(unet, params)?;
    if net.params_digest() != entry.params_digest {
        return Err(Error::Format(format!(
            "{}: parameter digest mismatch (file corrupted or edited)",
            entry.file
        )));
    }
    Ok(GraderModel {
        location: entry.index,
        parent: entry.parent,
        alpha: entry.alpha,
        unet: net,
        epochs_trained: entry.epochs_trained,
        best_val_loss: entry.best_val_loss,
        init_digest: entry.init_digest,
    })
}

/// Loads a complete ensemble from its manifest.
pub fn load_ensemble(dir: &Path) -> Result<(EnsembleManifest, Vec<GraderModel>)> {
    let manifest_path = dir.join("ensemble.json");
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: EnsembleManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut models = Vec::with_capacity(manifest.locations.len());
    for entry in &manifest.locations {
        models.push(model_from_entry(dir, entry, manifest.unet)?);
    }
    Ok((manifest, models))
}

/// Scans per-location sidecars from an interrupted run; entries whose
/// config hash does not match are ignored (they belong to another setup).
pub fn load_finished_locations(
    dir: &Path,
    grid: &PatchGrid,
    unet_config: &UNetConfig,
    config_hash: &str,
) -> Result<BTreeMap<usize, GraderModel>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for j in 0..grid.len() {
        let base = location_basename(grid, j);
        let sidecar = dir.join(format!("{base}.json"));
        if !sidecar.exists() {
            continue;
        }
        let entry: LocationEntry = match serde_json::from_str(&std::fs::read_to_string(&sidecar)?)
        {
            Ok(e) => e,
            Err(_) => continue,
        };
        if entry.config_hash != config_hash || entry.index != j {
            continue;
        }
        if let Ok(model) = model_from_entry(dir, &entry, *unet_config) {
            out.insert(j, model);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::build_patch_grid;

    fn tiny_model(j: usize, grid: &PatchGrid, seed: u64) -> GraderModel {
        let config = UNetConfig { depth: 1, base_channels: 2, patch_dims: grid.patch_dims() };
        let parent = grid.init_order().iter().find(|s| s.location == j).unwrap().parent;
        GraderModel {
            location: j,
            parent,
            alpha: 0.5 + j as f64 * 0.05,
            unet: UNet::init(config, seed).unwrap(),
            epochs_trained: 3,
            best_val_loss: 0.5,
            init_digest: 77,
        }
    }

    #[test]
    fn ensemble_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = build_patch_grid([8, 8, 8], [5, 5, 5], 2).unwrap();
        let unet_config = UNetConfig { depth: 1, base_channels: 2, patch_dims: [5, 5, 5] };
        let models: Vec<GraderModel> =
            (0..8).map(|j| tiny_model(j, &grid, 100 + j as u64)).collect();
        let manifest = save_ensemble(
            dir.path(),
            &models,
            &grid,
            &unet_config,
            &TrainConfig::default(),
            "deadbeef",
        )
        .unwrap();
        assert_eq!(manifest.locations.len(), 8);

        let (m2, loaded) = load_ensemble(dir.path()).unwrap();
        assert_eq!(m2.ensemble_digest(), manifest.ensemble_digest());
        for (a, b) in models.iter().zip(&loaded) {
            assert_eq!(a.location, b.location);
            assert_eq!(a.unet.params_digest(), b.unet.params_digest());
            assert_eq!(a.alpha, b.alpha);
        }
    }

    #[test]
    fn partial_scan_respects_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let grid = build_patch_grid([8, 8, 8], [5, 5, 5], 2).unwrap();
        let unet_config = UNetConfig { depth: 1, base_channels: 2, patch_dims: [5, 5, 5] };
        let m0 = tiny_model(0, &grid, 1);
        let m3 = tiny_model(3, &grid, 2);
        save_location(dir.path(), &m0, &grid, "cfg_a").unwrap();
        save_location(dir.path(), &m3, &grid, "cfg_b").unwrap();

        let found =
            load_finished_locations(dir.path(), &grid, &unet_config, "cfg_a").unwrap();
        assert_eq!(found.len(), 1);
        assert!(found.contains_key(&0));
    }
}
