//! Synthetic phantoms, the volume container and dataset manifests.

pub mod io;
pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use synth::{generate_phantom, plan_structures, Ellipsoid, PhantomSpec};

/// Environment variable capping worker threads for loading and evaluation.
pub const NUM_WORKERS_ENV: &str = "DSDSEG_NUM_WORKERS";

/// An image `(C, H, W, D)` with integer labels `(H, W, D)` and spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub image: Array4<f32>,
    pub label: Array3<u8>,
    pub spacing: [f32; 3],
}

impl VolumePair {
    pub fn new(image: Array4<f32>, label: Array3<u8>, spacing: [f32; 3]) -> Result<Self> {
        let s = image.shape();
        if s[1..] != *label.shape() {
            return Err(Error::ShapeMismatch {
                expected: s[1..].to_vec(),
                actual: label.shape().to_vec(),
            });
        }
        if !spacing.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::contract(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { image, label, spacing })
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        self.spacing.map(f64::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

fn default_format() -> String {
    "vseg".to_string()
}

fn is_vseg(f: &String) -> bool {
    f == "vseg"
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub split: Split,
    /// Container format; only `vseg` is readable today.
    #[serde(default = "default_format", skip_serializing_if = "is_vseg")]
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub in_channels: usize,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("manifest num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("manifest in_channels must be >= 1".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("sample id {:?} appears more than once", s.id)));
            }
            if s.format != "vseg" {
                return Err(Error::Config(format!(
                    "sample {:?} uses unsupported format {:?}",
                    s.id, s.format
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        Split::ALL.map(|s| self.split(s).count())
    }
}

/// How samples are divided between train, val and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Fractions, normalized by their sum.
    Ratios([f64; 3]),
    Counts([usize; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([0.6, 0.2, 0.2])
    }
}

impl SplitSpec {
    /// Split sizes for `n` samples; rounding leftovers go to train.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSpec::Counts(c) => {
                if c.iter().sum::<usize>() != n {
                    return Err(Error::Config(format!("split counts {c:?} do not sum to {n}")));
                }
                Ok(c)
            }
            SplitSpec::Ratios(r) => {
                if !r.iter().all(|v| v.is_finite() && *v >= 0.0) || r.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Config(format!("invalid split ratios {r:?}")));
                }
                let total: f64 = r.iter().sum();
                let val = (n as f64 * r[1] / total).floor() as usize;
                let test = (n as f64 * r[2] / total).floor() as usize;
                Ok([n - val - test, val, test])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Template; sample `i` uses `seed + i`.
    pub phantom: PhantomSpec,
    pub num_samples: usize,
    pub split: SplitSpec,
}

/// Writes `num_samples` phantoms and `manifest.json` into `dir`.
pub fn generate_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    spec.phantom.validate()?;
    if spec.num_samples == 0 {
        return Err(Error::Config("num_samples must be >= 1".into()));
    }
    let sizes = spec.split.sizes(spec.num_samples)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = spec.num_samples.to_string().len().max(3);
    let mut splits = Vec::with_capacity(spec.num_samples);
    for (split, &n) in Split::ALL.iter().zip(&sizes) {
        splits.extend(std::iter::repeat_n(*split, n));
    }
    let entries = parallel_map(spec.num_samples, |i| -> Result<SampleEntry> {
        let id = format!("case_{i:0width$}");
        let phantom = PhantomSpec {
            seed: spec.phantom.seed.wrapping_add(i as u64),
            ..spec.phantom.clone()
        };
        let pair = generate_phantom(&phantom)?;
        let image_path = PathBuf::from(format!("{id}_image.vseg"));
        let label_path = PathBuf::from(format!("{id}_label.vseg"));
        io::write_pair(&pair, &dir.join(&image_path), &dir.join(&label_path))?;
        Ok(SampleEntry {
            id,
            image_path,
            label_path,
            split: splits[i],
            format: default_format(),
        })
    });
    let manifest = Manifest {
        num_classes: spec.phantom.num_classes,
        in_channels: 1,
        samples: entries.into_iter().collect::<Result<_>>()?,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A sample held in memory, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub pair: VolumePair,
}

/// Loads every sample of `split`, in manifest order.
pub fn load_split(manifest_path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries: Vec<&SampleEntry> = manifest.split(split).collect();
    let loaded = parallel_map(entries.len(), |i| -> Result<Sample> {
        let e = entries[i];
        let pair = io::read_pair(&base.join(&e.image_path), &base.join(&e.label_path))?;
        if pair.image.shape()[0] != manifest.in_channels {
            return Err(Error::Config(format!(
                "sample {:?} has {} channels, manifest declares {}",
                e.id,
                pair.image.shape()[0],
                manifest.in_channels
            )));
        }
        if let Some(&bad) = pair.label.iter().find(|&&l| l as usize >= manifest.num_classes) {
            return Err(Error::Config(format!(
                "sample {:?} holds label {bad} but manifest declares {} classes",
                e.id, manifest.num_classes
            )));
        }
        Ok(Sample {
            id: e.id.clone(),
            pair,
        })
    });
    loaded.into_iter().collect()
}

/// Worker count: `DSDSEG_NUM_WORKERS` if set, else available parallelism.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `f(0..n)` on up to [`num_workers`] threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = num_workers().min(n).max(1);
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_of_twenty() {
        assert_eq!(SplitSpec::default().sizes(20).unwrap(), [12, 4, 4]);
        assert_eq!(SplitSpec::Counts([20, 6, 6]).sizes(32).unwrap(), [20, 6, 6]);
        assert!(SplitSpec::Counts([1, 1, 1]).sizes(4).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(17, |i| i * i);
        assert_eq!(v, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = SampleEntry {
            id: "a".into(),
            image_path: "a.vseg".into(),
            label_path: "b.vseg".into(),
            split: Split::Train,
            format: default_format(),
        };
        let m = Manifest {
            num_classes: 2,
            in_channels: 1,
            samples: vec![e.clone(), SampleEntry { split: Split::Test, ..e }],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn pair_shapes_must_agree() {
        let r = VolumePair::new(Array4::zeros((1, 8, 8, 8)), Array3::zeros((8, 8, 9)), [1.0; 3]);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
