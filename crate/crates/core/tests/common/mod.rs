#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dsdseg::backbone::ArchConfig;
use dsdseg::data::{generate_dataset, DatasetSpec, PhantomSpec, SplitSpec};
use dsdseg::trainer::{OptimizerConfig, TrainConfig};
use dsdseg::AblationMode;

/// Writes a phantom dataset of `counts` train/val/test cases into `dir`
/// and returns the manifest path.
pub fn dataset(dir: &Path, size: usize, classes: usize, sigma: f64, counts: [usize; 3]) -> PathBuf {
    let spec = DatasetSpec {
        phantom: PhantomSpec::new(size, classes, sigma, 11),
        num_samples: counts.iter().sum(),
        split: SplitSpec::Counts(counts),
    };
    generate_dataset(dir, &spec).unwrap();
    dir.join("manifest.json")
}

/// A small, fast configuration on `manifest`.
pub fn small_config(manifest: &Path, out: &Path, classes: usize, mode: AblationMode) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            num_classes: classes,
            base_channels: 4,
            ..ArchConfig::default()
        },
        ablation_mode: mode,
        optimizer: OptimizerConfig {
            learning_rate: 1e-2,
            ..OptimizerConfig::default()
        },
        epochs: 2,
        batch_size: 2,
        manifest_path: manifest.to_path_buf(),
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}
