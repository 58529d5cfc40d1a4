//! Seeded ellipsoid phantoms.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VolumePair;
use crate::error::{Error, Result};

pub const MIN_AXIS: usize = 8;
const MAX_PLAN_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Including background class 0.
    pub num_classes: usize,
    /// Ellipsoids per foreground class; index 0 is class 1.
    pub num_structures: Vec<usize>,
    /// Mean intensity per class; index 0 is background.
    pub intensity_means: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
}

fn unit_spacing() -> [f32; 3] {
    [1.0; 3]
}

impl PhantomSpec {
    /// `K` classes on a cube of side `size`, one structure per class and
    /// evenly spaced intensities in `[0, 1]`.
    pub fn new(size: usize, num_classes: usize, noise_sigma: f64, seed: u64) -> Self {
        let k = num_classes.max(2);
        Self {
            shape: [size; 3],
            num_classes,
            num_structures: vec![1; k - 1],
            intensity_means: (0..k).map(|c| c as f64 / (k - 1) as f64).collect(),
            noise_sigma,
            seed,
            spacing: unit_spacing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < MIN_AXIS) {
            return Err(Error::Config(format!(
                "phantom shape {:?} is degenerate; every axis must be >= {MIN_AXIS}",
                self.shape
            )));
        }
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize {
            return Err(Error::Config(format!(
                "num_classes must lie in [2, 255], got {}",
                self.num_classes
            )));
        }
        if self.num_structures.len() != self.num_classes - 1 {
            return Err(Error::Config(format!(
                "num_structures needs {} entries (one per foreground class), got {}",
                self.num_classes - 1,
                self.num_structures.len()
            )));
        }
        if self.num_structures.contains(&0) {
            return Err(Error::Config("every foreground class needs at least one structure".into()));
        }
        if self.intensity_means.len() != self.num_classes {
            return Err(Error::Config(format!(
                "intensity_means needs {} entries, got {}",
                self.num_classes,
                self.intensity_means.len()
            )));
        }
        if !self.intensity_means.iter().all(|m| m.is_finite()) {
            return Err(Error::Config("intensity_means must be finite".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class_id: u8,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Whether voxel `(i, j, k)` lies inside, boundary included.
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let p = [i as f64, j as f64, k as f64];
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

/// The ellipsoids [`generate_phantom`] paints, in painting order.
///
/// Deeper classes get smaller radii so that structures nest rather than
/// erase each other; a plan that still loses a class is redrawn.
pub fn plan_structures(spec: &PhantomSpec) -> Result<Vec<Ellipsoid>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_PLAN_ATTEMPTS {
        let plan = draw_plan(spec, &mut rng);
        let labels = paint(spec.shape, &plan);
        let mut seen = vec![false; spec.num_classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().all(|&s| s) {
            return Ok(plan);
        }
    }
    Err(Error::Config(format!(
        "could not place all {} classes in a {:?} volume",
        spec.num_classes, spec.shape
    )))
}

fn draw_plan(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let fg = spec.num_classes - 1;
    let mut plan = Vec::new();
    for c in 1..=fg {
        // Radius fraction shrinks from ~0.38 to ~0.24 of the axis length.
        let t = if fg == 1 { 0.0 } else { (c - 1) as f64 / (fg - 1) as f64 };
        let hi = 0.38 - 0.14 * t;
        let lo = hi * 0.65;
        for _ in 0..spec.num_structures[c - 1] {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                let n = spec.shape[a] as f64;
                radii[a] = (rng.random_range(lo..hi) * n).max(1.5);
                let margin = radii[a].min(n / 2.0 - 1.0);
                center[a] = rng.random_range(margin..(n - 1.0 - margin).max(margin + 1e-9));
            }
            plan.push(Ellipsoid {
                class_id: c as u8,
                center,
                radii,
            });
        }
    }
    plan
}

fn paint(shape: [usize; 3], plan: &[Ellipsoid]) -> Array3<u8> {
    let mut labels = Array3::zeros(shape);
    for e in plan {
        for ((i, j, k), l) in labels.indexed_iter_mut() {
            if e.contains(i, j, k) {
                *l = e.class_id;
            }
        }
    }
    labels
}

/// Labels from [`plan_structures`]; image = class mean plus Gaussian noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumePair> {
    let plan = plan_structures(spec)?;
    let label = paint(spec.shape, &plan);
    // Noise uses its own stream so the noise level never moves the labels.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x006e_6f69_7365);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let [h, w, d] = spec.shape;
    let mut image = Array4::<f32>::zeros((1, h, w, d));
    for ((i, j, k), &l) in label.indexed_iter() {
        let v = spec.intensity_means[l as usize] + noise.sample(&mut rng);
        image[[0, i, j, k]] = v as f32;
    }
    VolumePair::new(image, label, spec.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_shapes_rejected() {
        let mut spec = PhantomSpec::new(16, 3, 0.1, 0);
        spec.shape = [16, 7, 16];
        assert!(generate_phantom(&spec).is_err());
        assert!(generate_phantom(&PhantomSpec::new(16, 1, 0.1, 0)).is_err());
    }

    #[test]
    fn four_classes_all_present_at_32() {
        for seed in 0..10 {
            let pair = generate_phantom(&PhantomSpec::new(32, 4, 0.2, seed)).unwrap();
            let mut hist = [0usize; 4];
            pair.label.iter().for_each(|&l| hist[l as usize] += 1);
            assert!(hist.iter().all(|&n| n > 0), "seed {seed}: {hist:?}");
        }
    }

    #[test]
    fn same_seed_identical() {
        let spec = PhantomSpec::new(16, 3, 0.5, 11);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_phantom(&spec).unwrap(), generate_phantom(&other).unwrap());
    }

    #[test]
    fn noise_free_image_is_class_mean() {
        let spec = PhantomSpec::new(12, 3, 0.0, 5);
        let pair = generate_phantom(&spec).unwrap();
        for ((i, j, k), &l) in pair.label.indexed_iter() {
            assert_eq!(pair.image[[0, i, j, k]], spec.intensity_means[l as usize] as f32);
        }
    }
}
