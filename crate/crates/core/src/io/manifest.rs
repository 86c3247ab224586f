//! Run and dataset manifests.  Every CLI command drops a run manifest next
//! to its outputs; the scene generator additionally writes a dataset
//! manifest listing the per-scene files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GroundTruthMap, ImageGrid};
use crate::io::{pfm, pgm};
use crate::synth::SceneConfig;
use crate::trainer::SceneSource;

pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";
pub const DATASET_MANIFEST_NAME: &str = "dataset_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The fully resolved configuration the command actually ran with.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub master_seed: u64,
    /// Seconds since the epoch; the one field excluded from reproducibility.
    pub timestamp_unix: u64,
}

pub fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join(RUN_MANIFEST_NAME), json)?;
    Ok(())
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST_NAME);
    serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::data(format!("bad run manifest {}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFiles {
    pub image: String,
    pub gt: String,
    pub classes: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub start_index: usize,
    pub scene: SceneConfig,
    pub files: Vec<SceneFiles>,
}

pub fn write_dataset_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join(DATASET_MANIFEST_NAME), json)?;
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST_NAME);
    serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::data(format!("bad dataset manifest {}: {e}", path.display())))
}

/// Scene source backed by a dataset directory written by the generator;
/// scenes are read lazily per training step.
#[derive(Debug, Clone)]
pub struct FileDatasetSource {
    dir: PathBuf,
    files: Vec<SceneFiles>,
}

impl FileDatasetSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_dataset_manifest(dir)?;
        Ok(FileDatasetSource { dir: dir.to_path_buf(), files: manifest.files })
    }
}

impl SceneSource for FileDatasetSource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn scene(&self, index: usize) -> Result<(ImageGrid, GroundTruthMap)> {
        let entry = self
            .files
            .get(index)
            .ok_or_else(|| Error::domain(format!("scene index {index} out of range")))?;
        let image = pfm::read_image(&self.dir.join(&entry.image))?;
        let gt = pgm::read_gt_map(&self.dir.join(&entry.gt))?;
        Ok((image, gt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn run_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            command: "train".into(),
            config: serde_json::json!({"steps": 5}),
            inputs: vec!["data".into()],
            outputs: vec!["checkpoint.ckpt".into()],
            tool_version: "0.1.0".into(),
            master_seed: 42,
            timestamp_unix: 1_700_000_000,
        };
        write_run_manifest(dir.path(), &manifest).unwrap();
        let back = read_run_manifest(dir.path()).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.config["steps"], 5);
        assert_eq!(back.master_seed, 42);
    }

    #[test]
    fn file_dataset_source_reads_back_generated_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { height: 16, width: 16, max_instances: 2, ..SceneConfig::default() };
        let mut files = Vec::new();
        for i in 0..2 {
            let scene = synth::generate(&cfg, i).unwrap();
            let image = format!("scene_{i:04}.pfm");
            let gt = format!("scene_{i:04}.pgm");
            pfm::write_image(&dir.path().join(&image), &scene.image).unwrap();
            pgm::write_gt_map(&dir.path().join(&gt), &scene.gt).unwrap();
            files.push(SceneFiles {
                image,
                gt: gt.clone(),
                classes: format!("scene_{i:04}.classes.json"),
            });
        }
        let manifest =
            DatasetManifest { count: 2, start_index: 0, scene: cfg.clone(), files };
        write_dataset_manifest(dir.path(), &manifest).unwrap();

        let source = FileDatasetSource::open(dir.path()).unwrap();
        assert_eq!(source.len(), 2);
        let (image, gt) = source.scene(1).unwrap();
        let original = synth::generate(&cfg, 1).unwrap();
        assert_eq!(gt, original.gt);
        // image went through f32, so compare within that precision
        for (a, b) in image.data().iter().zip(original.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(source.scene(5).is_err());
    }
}
